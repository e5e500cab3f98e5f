"""Manifest-driven runs: subtraction channel, fusion, evaluation, tables.

Manifest (paths relative to the manifest file)::

    {"cases": [{"id": "case-001",
                "modalities": {"T1": "t1.nii.gz", "T1Gd": "t1gd.nii.gz"},
                "predictions": {"modelA": "a.nii.gz", "modelB": "b_probs.nii.gz"},
                "gt": "seg.nii.gz"}]}

Predictions may be 3D label maps or 4D probability stacks. Outputs are
written atomically, so re-running a stage replaces its files in one step.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .channels import subtract
from .config import ConfigError, Settings
from .lesion import CaseMetrics, evaluate_case
from .nifti import read_array, read_nifti, write_bytes_atomic, write_nifti
from .report import build_report, group_by_method, render
from .staple import staple_multilabel
from .volume import LabelMap, ProbStack, Volume3D
from .weighted import HeldOutCase, WeightMatrix, fit_weights, fuse_weighted, labelmap_to_probstack

log = logging.getLogger(__name__)

STAGES = ("subtract", "fit-weights", "fuse-staple", "fuse-weighted", "eval", "report")
MODALITIES = ("T1", "T1Gd", "T2", "FLAIR", "T1Gd-T1")
FUSED = {"fuse-staple": "staple", "fuse-weighted": "weighted"}
EXTENSIONS = {"markdown": "md", "csv": "csv", "json": "json"}


class InputError(Exception):
    """Bad user input: missing files, malformed manifest or config."""


@dataclass
class CaseEntry:
    id: str
    modalities: dict[str, Path] = field(default_factory=dict)
    predictions: dict[str, Path] = field(default_factory=dict)
    gt: Path | None = None


@dataclass
class PipelineConfig:
    stages: tuple[str, ...] = ()
    out_dir: Path = Path("out")
    workers: int = 1
    clamp_negative: bool = False
    weights: Path | None = None
    eval_models: bool = False
    report_metrics: tuple[str, ...] = ("LD", "LH95")
    report_format: str = "markdown"
    settings: Settings = field(default_factory=Settings)

    def to_dict(self) -> dict:
        return {
            "stages": list(self.stages),
            "workers": self.workers,
            "clamp_negative": self.clamp_negative,
            "weights": None if self.weights is None else str(self.weights),
            "eval_models": self.eval_models,
            "report_metrics": list(self.report_metrics),
            "report_format": self.report_format,
            "settings": self.settings.to_dict(),
        }


def dump_json(doc: Any, path: Path) -> None:
    write_bytes_atomic(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def load_manifest(path: str | Path) -> list[CaseEntry]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    items = doc["cases"] if isinstance(doc, dict) and "cases" in doc else doc
    if not isinstance(items, list):
        raise InputError(f"{path}: expected a list of cases")
    base = path.parent
    cases = []
    seen = set()
    for i, item in enumerate(items):
        cid = str(item.get("id", f"case{i:03d}"))
        if cid in seen:
            raise InputError(f"duplicate case id {cid!r}")
        seen.add(cid)
        mods = item.get("modalities", {})
        bad = sorted(set(mods) - set(MODALITIES))
        if bad:
            raise InputError(f"case {cid}: unknown modalities {bad}; expected {list(MODALITIES)}")
        entry = CaseEntry(
            cid,
            {k: base / v for k, v in mods.items()},
            {k: base / v for k, v in item.get("predictions", {}).items()},
            base / item["gt"] if item.get("gt") else None,
        )
        refs = [(f"modalities.{k}", v) for k, v in entry.modalities.items()]
        refs += [(f"predictions.{k}", v) for k, v in entry.predictions.items()]
        if entry.gt is not None:
            refs.append(("gt", entry.gt))
        for key, p in refs:
            if not p.is_file():
                raise InputError(f"case {cid}: {key} refers to missing file {p}")
        cases.append(entry)
    return cases


def load_pipeline_config(doc: Mapping[str, Any] | str | Path | None, out_dir=None) -> PipelineConfig:
    base = Path(".")
    if isinstance(doc, (str, Path)):
        base = Path(doc).parent
        try:
            doc = json.loads(Path(doc).read_text())
        except FileNotFoundError as exc:
            raise InputError(f"config not found: {exc.filename}") from exc
    doc = dict(doc or {})
    settings = Settings.from_dict({k: doc.pop(k) for k in list(doc) if k in
                                   ("staple", "metrics", "fit", "encoding", "composites")})
    known = {"stages", "out_dir", "workers", "clamp_negative", "weights", "eval_models",
             "report_metrics", "report_format"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown pipeline config keys {unknown}")
    stages = tuple(doc.get("stages", ()))
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; valid: {list(STAGES)}")
    fmt = doc.get("report_format", "markdown")
    if fmt not in EXTENSIONS:
        raise ConfigError(f"report_format must be one of {list(EXTENSIONS)}")
    cfg = PipelineConfig(
        stages=stages,
        out_dir=Path(out_dir if out_dir is not None else doc.get("out_dir", "out")),
        workers=int(doc.get("workers", 1)),
        clamp_negative=bool(doc.get("clamp_negative", False)),
        weights=base / doc["weights"] if doc.get("weights") else None,
        eval_models=bool(doc.get("eval_models", False)),
        report_metrics=tuple(doc.get("report_metrics", ("LD", "LH95"))),
        report_format=fmt,
        settings=settings,
    )
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def read_prediction(path: Path, encoding) -> LabelMap | ProbStack:
    arr, aff, spacing = read_array(path)
    if arr.ndim == 4:
        return ProbStack(np.moveaxis(arr, 3, 0), spacing=spacing, affine=aff, encoding=encoding)
    if arr.dtype.kind == "f":
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise ValueError(f"{path}: label map contains non-integer values")
        arr = rounded.astype(np.uint8)
    return LabelMap(Volume3D(arr, spacing=spacing, affine=aff), encoding)


def as_labels(pred) -> LabelMap:
    return pred.argmax() if isinstance(pred, ProbStack) else pred


def as_stack(pred) -> ProbStack:
    return pred if isinstance(pred, ProbStack) else labelmap_to_probstack(pred)


def _eval_methods(cfg: PipelineConfig, case: CaseEntry) -> list[str]:
    methods = [FUSED[s] for s in ("fuse-staple", "fuse-weighted") if s in cfg.stages]
    if cfg.eval_models or not methods:
        methods = sorted(case.predictions) + methods
    return methods


def process_case(case: CaseEntry, cfg: PipelineConfig, weights: dict | None) -> dict:
    """Run the per-case stages; never raises, errors are returned."""
    settings = cfg.settings
    enc = settings.encoding
    case_dir = cfg.out_dir / case.id
    records: list[dict] = []
    outputs: dict[str, Path] = {}
    try:
        case_dir.mkdir(parents=True, exist_ok=True)
        if "subtract" in cfg.stages:
            if "T1" in case.modalities and "T1Gd" in case.modalities:
                sub = subtract(read_nifti(case.modalities["T1Gd"]), read_nifti(case.modalities["T1"]),
                               cfg.clamp_negative,
                               names=(str(case.modalities["T1Gd"]), str(case.modalities["T1"])))
                out = case_dir / "t1gd_minus_t1.nii.gz"
                write_nifti(sub, out)
                records.append({"stage": "subtract", "case": case.id, "outputs": [str(out)]})
            else:
                records.append({"stage": "subtract", "case": case.id, "skipped": "T1/T1Gd not given"})

        preds = {name: read_prediction(p, enc) for name, p in sorted(case.predictions.items())}
        if "fuse-staple" in cfg.stages:
            if not preds:
                raise InputError(f"case {case.id}: fuse-staple needs predictions")
            consensus, perf = staple_multilabel([as_labels(p) for p in preds.values()], settings.staple)
            out = case_dir / "staple.nii.gz"
            write_nifti(consensus, out)
            perf_doc = {"raters": list(preds), "staple_config": settings.staple.to_dict(),
                        "labels": {k: v.to_dict() for k, v in perf.items()}}
            dump_json(perf_doc, case_dir / "staple_performance.json")
            outputs["staple"] = out
            records.append({"stage": "fuse-staple", "case": case.id,
                            "outputs": [str(out), str(case_dir / "staple_performance.json")]})
        if "fuse-weighted" in cfg.stages:
            if weights is None:
                raise InputError("fuse-weighted needs a 'weights' file or the fit-weights stage")
            stacks = [as_stack(p) for p in preds.values()]
            wm = WeightMatrix.from_json_dict(weights, stacks[0].class_names)
            _, labels = fuse_weighted(stacks, wm)
            out = case_dir / "weighted.nii.gz"
            write_nifti(labels, out)
            outputs["weighted"] = out
            records.append({"stage": "fuse-weighted", "case": case.id, "outputs": [str(out)]})

        metric_files = []
        if "eval" in cfg.stages:
            if case.gt is None:
                raise InputError(f"case {case.id}: eval needs a gt path")
            gt = read_prediction(case.gt, enc)
            if isinstance(gt, ProbStack):
                raise InputError(f"case {case.id}: gt must be a 3D label map")
            cases_dir = cfg.out_dir / "cases"
            cases_dir.mkdir(parents=True, exist_ok=True)
            for method in _eval_methods(cfg, case):
                if method in outputs:
                    pred = LabelMap(read_nifti(outputs[method]), enc)
                elif method in preds:
                    pred = as_labels(preds[method])
                else:
                    continue
                cm = evaluate_case(gt, pred, settings.metrics, composites=settings.composites,
                                   case_id=case.id, method=method)
                out = cases_dir / f"{case.id}__{method}.json"
                dump_json(cm.to_dict(), out)
                metric_files.append(str(out))
            records.append({"stage": "eval", "case": case.id, "outputs": metric_files})
        return {"case": case.id, "records": records, "metric_files": metric_files, "error": None}
    except Exception as exc:  # noqa: BLE001 - per-case failures go to the error ledger
        log.error("case %s failed: %s", case.id, exc)
        return {"case": case.id, "records": records, "metric_files": [],
                "error": f"{type(exc).__name__}: {exc}"}


def _fit(cases: Sequence[CaseEntry], cfg: PipelineConfig) -> dict:
    held = []
    for c in cases:
        if c.gt is None:
            raise InputError(f"case {c.id}: fit-weights needs a gt path")
        stacks = [as_stack(read_prediction(p, cfg.settings.encoding))
                  for _, p in sorted(c.predictions.items())]
        gt = read_prediction(c.gt, cfg.settings.encoding)
        held.append(HeldOutCase(c.id, stacks, as_labels(gt)))
    result = fit_weights(held, cfg.settings.fit, cfg.settings.metrics, cfg.settings.composites)
    return {"weights": result.weights.to_json_dict(), "objective": result.objective,
            "trace": result.trace, "warnings": result.warnings,
            "models": sorted(cases[0].predictions)}


def run_pipeline(cases: Sequence[CaseEntry], cfg: PipelineConfig) -> int:
    """Execute ``cfg.stages`` over ``cases``. Returns the process exit code."""
    if not cfg.stages:
        log.info("no stages requested")
        return 0
    if "fuse-weighted" in cfg.stages and cfg.weights is None and "fit-weights" not in cfg.stages:
        raise InputError("fuse-weighted needs a 'weights' file or the fit-weights stage")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    log_lines = [{"stage": "config", "config": cfg.to_dict(), "cases": [c.id for c in cases]}]

    weights = None
    if cfg.weights is not None:
        if not cfg.weights.is_file():
            raise InputError(f"weights file not found: {cfg.weights}")
        weights = json.loads(cfg.weights.read_text())
    if "fit-weights" in cfg.stages:
        fit = _fit(cases, cfg)
        weights = fit["weights"]
        dump_json(weights, cfg.out_dir / "weights.json")
        dump_json(fit, cfg.out_dir / "fit_trace.json")
        log_lines.append({"stage": "fit-weights", "objective": fit["objective"],
                          "models": fit["models"], "warnings": fit["warnings"],
                          "outputs": [str(cfg.out_dir / "weights.json")]})

    if cfg.workers > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(process_case, cases, [cfg] * len(cases), [weights] * len(cases)))
    else:
        results = [process_case(c, cfg, weights) for c in cases]

    errors = {r["case"]: r["error"] for r in results if r["error"]}
    for r in results:
        log_lines.extend(r["records"])

    if "report" in cfg.stages:
        files = [f for r in results for f in r["metric_files"]]
        if files:
            metrics = [CaseMetrics.from_dict(json.loads(Path(f).read_text())) for f in files]
            groups = group_by_method(metrics)
            for metric in cfg.report_metrics:
                rep = build_report(groups, metric)
                out = cfg.out_dir / f"report_{metric}.{EXTENSIONS[cfg.report_format]}"
                write_bytes_atomic(out, render(rep, cfg.report_format).encode())
                log_lines.append({"stage": "report", "metric": metric, "outputs": [str(out)]})
        else:
            log_lines.append({"stage": "report", "skipped": "no case metrics"})

    errors_path = cfg.out_dir / "errors.json"
    if errors:
        dump_json(errors, errors_path)
        log_lines.append({"stage": "errors", "cases": sorted(errors)})
    elif errors_path.exists():
        errors_path.unlink()
    write_bytes_atomic(cfg.out_dir / "pipeline_log.jsonl",
                       "".join(json.dumps(l, sort_keys=True) + "\n" for l in log_lines).encode())
    return 1 if errors else 0
