"""Cohort tables: per-region means of lesion-wise scores over cases."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lesion import CaseMetrics
from .regions import REPORT_REGIONS

METRICS = ("LD", "LH95")
AVERAGING = "arithmetic mean of per-case lesion-wise scores"


@dataclass
class AggregateReport:
    metric: str
    rows: dict[str, dict[str, float]]
    case_counts: dict[str, int]
    metric_config: dict
    columns: tuple[str, ...] = REPORT_REGIONS
    averaging: str = AVERAGING

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "columns": list(self.columns),
            "averaging": self.averaging,
            "metric_config": self.metric_config,
            "case_counts": self.case_counts,
            "rows": {m: {c: self.rows[m][c] for c in self.columns} for m in self.rows},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AggregateReport":
        return cls(doc["metric"], {k: dict(v) for k, v in doc["rows"].items()},
                   dict(doc["case_counts"]), dict(doc["metric_config"]),
                   tuple(doc["columns"]), doc.get("averaging", AVERAGING))


def aggregate(cases: Sequence[CaseMetrics], metric: str = "LD",
              columns: Sequence[str] = REPORT_REGIONS) -> dict[str, float]:
    """Per-region arithmetic mean of ``metric`` over ``cases``."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if not cases:
        raise ValueError("cannot aggregate an empty case list")
    # sorted by value per column so the mean does not depend on case order
    return {col: float(np.mean(sorted(c.value(col, metric) for c in cases))) for col in columns}


def build_report(groups: Mapping[str, Sequence[CaseMetrics]], metric: str = "LD",
                 columns: Sequence[str] = REPORT_REGIONS) -> AggregateReport:
    """One row per method. All cases must share one metric configuration."""
    if not groups:
        raise ValueError("no methods to report")
    configs = {json.dumps(c.config.to_dict(), sort_keys=True) for cases in groups.values() for c in cases}
    if len(configs) > 1:
        raise ValueError("cases were scored with different metric configurations")
    rows = {m: aggregate(cases, metric, columns) for m, cases in groups.items()}
    counts = {m: len(cases) for m, cases in groups.items()}
    return AggregateReport(metric, rows, counts, json.loads(configs.pop()), tuple(columns))


def group_by_method(cases: Sequence[CaseMetrics]) -> dict[str, list[CaseMetrics]]:
    groups: dict[str, list[CaseMetrics]] = {}
    for c in cases:
        groups.setdefault(c.method or "prediction", []).append(c)
    return dict(sorted(groups.items()))


def _ranks(report: AggregateReport) -> dict[tuple[str, str], int]:
    """(method, column) -> 1 for best, 2 for second best."""
    out = {}
    sign = -1 if report.metric == "LD" else 1
    for col in report.columns:
        vals = sorted({round(sign * r[col], 12) for r in report.rows.values()})
        for m, r in report.rows.items():
            pos = vals.index(round(sign * r[col], 12)) + 1
            if pos <= 2 and len(report.rows) > pos:
                out[(m, col)] = pos
    return out


def render(report: AggregateReport, fmt: str = "markdown", highlight: bool = False) -> str:
    cols = list(report.columns)
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *cols])
        for m, row in report.rows.items():
            w.writerow([m, *(f"{row[c]:.4f}" for c in cols)])
        return buf.getvalue()
    if fmt == "markdown":
        ranks = _ranks(report) if highlight else {}
        lines = [
            f"**{report.metric}** ({report.averaging}; cases: "
            + ", ".join(f"{m}={n}" for m, n in report.case_counts.items()) + ")",
            "",
            "| Method | " + " | ".join(cols) + " |",
            "|---|" + "---:|" * len(cols),
        ]
        for m, row in report.rows.items():
            cells = []
            for c in cols:
                text = f"{row[c]:.4f}"
                rank = ranks.get((m, c))
                if rank == 1:
                    text = f"**{text}**"
                elif rank == 2:
                    text = f"_{text}_"
                cells.append(text)
            lines.append(f"| {m} | " + " | ".join(cells) + " |")
        cfg = ", ".join(f"{k}={v}" for k, v in sorted(report.metric_config.items()))
        lines += ["", f"MetricConfig: {cfg}"]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}; use csv, markdown or json")


def parse_json(text: str) -> AggregateReport:
    return AggregateReport.from_dict(json.loads(text))
