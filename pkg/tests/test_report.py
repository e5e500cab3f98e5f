import json

import numpy as np
import pytest

from gliofuse.lesion import CaseMetrics, LesionScores, MetricConfig
from gliofuse.regions import REPORT_REGIONS
from gliofuse.report import aggregate, build_report, parse_json, render


def case(values, method="m", lh=None):
    regions = {r: LesionScores(values.get(r, 1.0), (lh or {}).get(r, 0.0)) for r in REPORT_REGIONS}
    return CaseMetrics(regions, case_id="c", method=method)


def test_single_case_row():
    c = case({"ET": 0.3, "WT": 0.9})
    assert aggregate([c], "LD") == {r: c.regions[r].ld for r in REPORT_REGIONS}


def test_mean_of_two():
    assert aggregate([case({"ET": 0.8}), case({"ET": 0.6})])["ET"] == pytest.approx(0.7)


def test_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


def test_columns_follow_table_order():
    rep = build_report({"m": [case({})]}, "LD")
    assert rep.columns == ("ET", "NETC", "RC", "SNFH", "TC", "WT")
    lines = render(rep, "csv").splitlines()
    assert lines[0] == "method,ET,NETC,RC,SNFH,TC,WT"
    assert len(lines) == 2


def test_markdown_structure_and_config_echo():
    rep = build_report({"a": [case({"ET": 0.5})], "b": [case({"ET": 0.7})], "c": [case({"ET": 0.6})]}, "LD")
    text = render(rep, "markdown", highlight=True)
    table = [l for l in text.splitlines() if l.startswith("|")]
    assert all(l.count("|") - 1 == 1 + 6 for l in table)
    assert "**0.7000**" in text and "_0.6000_" in text
    assert "LD" in text and "fp_hd95_penalty=374.0" in text and "dilation_iterations=3" in text


def test_lh95_highlight_prefers_lower():
    rep = build_report({"a": [case({}, lh={"ET": 10.0})], "b": [case({}, lh={"ET": 20.0})]}, "LH95")
    assert "**10.0000**" in render(rep, "markdown", highlight=True)


def test_json_roundtrip():
    rep = build_report({"a": [case({"ET": 0.5}), case({"ET": 0.25})]}, "LH95")
    text = render(rep, "json")
    back = parse_json(text)
    assert back.to_dict() == rep.to_dict()
    assert render(back, "json") == text
    doc = json.loads(text)
    assert doc["metric"] == "LH95" and doc["metric_config"] == MetricConfig().to_dict()


def test_permutation_invariant(rng):
    cases = [case({"ET": float(v), "TC": float(w)}) for v, w in rng.random((7, 2))]
    base = aggregate(cases)
    for _ in range(5):
        perm = [cases[i] for i in rng.permutation(7)]
        assert aggregate(perm) == base


def test_mixed_configs_rejected():
    a = case({})
    b = case({})
    b.config = MetricConfig(dilation_iterations=1)
    with pytest.raises(ValueError):
        build_report({"m": [a, b]})
