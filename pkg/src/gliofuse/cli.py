"""Command-line entry point.

Exit codes: 0 success, 1 internal error or partial pipeline failure,
2 invalid user input (missing files, bad config, malformed volumes).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .channels import subtract
from .config import ConfigError, Settings, dump_defaults, load_settings
from .lesion import CaseMetrics, evaluate_case
from .nifti import NiftiError, NonFiniteError, read_labelmap, read_nifti, write_nifti, write_probstack
from .pipeline import (
    STAGES,
    InputError,
    as_labels,
    as_stack,
    dump_json,
    load_manifest,
    load_pipeline_config,
    read_prediction,
    run_pipeline,
)
from .regions import describe
from .report import build_report, group_by_method, render
from .staple import staple_multilabel
from .synth import Blob, RaterModel, make_phantom, rater_seeds, simulate_labelmap_rater
from .volume import GeometryError
from .weighted import HeldOutCase, WeightMatrix, fit_weights, fuse_weighted

log = logging.getLogger("gliofuse")


def _settings(args) -> Settings:
    return load_settings(getattr(args, "config", None))


def cmd_subtract(args) -> int:
    out = subtract(read_nifti(args.t1gd), read_nifti(args.t1), args.clamp, names=(args.t1gd, args.t1))
    write_nifti(out, args.out)
    return 0


def cmd_fuse_staple(args) -> int:
    s = _settings(args)
    over = {k: v for k, v in (("max_iter", args.max_iter), ("tol", args.tol)) if v is not None}
    cfg = Settings.from_dict({**s.to_dict(), "staple": {**s.staple.to_dict(), **over}}).staple
    raters = [as_labels(read_prediction(Path(p), s.encoding)) for p in args.inputs]
    consensus, perf = staple_multilabel(raters, cfg)
    write_nifti(consensus, args.out)
    if args.report:
        dump_json({"raters": list(args.inputs), "staple_config": cfg.to_dict(),
                   "labels": {k: v.to_dict() for k, v in perf.items()}}, Path(args.report))
    return 0


def cmd_fuse_weighted(args) -> int:
    s = _settings(args)
    stacks = [as_stack(read_prediction(Path(p), s.encoding)) for p in args.inputs]
    wm = WeightMatrix.from_json_dict(json.loads(Path(args.weights).read_text()), stacks[0].class_names)
    fused, labels = fuse_weighted(stacks, wm)
    write_nifti(labels, args.out)
    if args.probs_out:
        write_probstack(fused, args.probs_out)
    return 0


def cmd_fit_weights(args) -> int:
    s = _settings(args)
    path = Path(args.manifest)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, list) or not doc:
        raise InputError(f"{path}: expected a non-empty JSON list of cases")
    models = sorted(k for k in doc[0] if k not in ("gt", "id"))
    held = []
    for i, item in enumerate(doc):
        names = sorted(k for k in item if k not in ("gt", "id"))
        if names != models:
            raise InputError(f"{path}: case {i} has models {names}, expected {models}")
        if "gt" not in item:
            raise InputError(f"{path}: case {i} lacks a gt path")
        refs = {k: path.parent / item[k] for k in [*models, "gt"]}
        for k, p in refs.items():
            if not p.is_file():
                raise InputError(f"{path}: case {i} key {k} refers to missing file {p}")
        stacks = [as_stack(read_prediction(refs[m], s.encoding)) for m in models]
        held.append(HeldOutCase(str(item.get("id", i)), stacks,
                                as_labels(read_prediction(refs["gt"], s.encoding))))
    fit_doc = s.fit.to_dict()
    if args.seed is not None:
        fit_doc["seed"] = args.seed
    cfg = Settings.from_dict({"fit": fit_doc}).fit
    result = fit_weights(held, cfg, s.metrics, s.composites)
    dump_json(result.weights.to_json_dict(), Path(args.out))
    print(json.dumps({"models": models, "objective": result.objective,
                      "evaluations": result.evaluations, "warnings": result.warnings}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    s = _settings(args)
    gt = read_labelmap(args.gt, s.encoding)
    pred = as_labels(read_prediction(Path(args.pred), s.encoding))
    cm = evaluate_case(gt, pred, s.metrics, composites=s.composites,
                       case_id=args.case_id or Path(args.gt).name, method=args.method)
    dump_json(cm.to_dict(), Path(args.out))
    return 0


def cmd_simulate(args) -> int:
    spec_path = Path(args.raters)
    if not spec_path.is_file():
        raise InputError(f"rater spec not found: {spec_path}")
    spec = json.loads(spec_path.read_text())
    try:
        shape = tuple(int(v) for v in args.shape.split(","))
    except ValueError:
        raise InputError(f"--shape must look like X,Y,Z, got {args.shape!r}") from None
    if len(shape) != 3:
        raise InputError(f"--shape must have three values, got {args.shape!r}")
    s = _settings(args)
    blobs = [Blob(tuple(b["center"]), b["radius"], b["label"]) for b in spec.get("blobs", [])]
    gt = make_phantom(shape, spec.get("spacing", (1.0, 1.0, 1.0)), blobs, s.encoding)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(gt, out / "gt.nii.gz")
    raters = spec.get("raters", [])
    preds = {}
    for k, (r, seed) in enumerate(zip(raters, rater_seeds(args.seed, len(raters)))):
        name = r.get("name", f"rater{k}")
        lm = simulate_labelmap_rater(gt, RaterModel(r["p"], r["q"], seed))
        write_nifti(lm, out / f"{name}.nii.gz")
        preds[name] = f"{name}.nii.gz"
    dump_json({"cases": [{"id": out.name, "predictions": preds, "gt": "gt.nii.gz"}]},
              out / "manifest.json")
    return 0


def cmd_report(args) -> int:
    files = []
    for pattern in args.cases:
        p = Path(pattern)
        if p.is_dir():
            files += sorted(p.glob("*.json"))
        elif p.is_file():
            files.append(p)
        else:
            raise InputError(f"case metrics file not found: {p}")
    if not files:
        raise InputError("no case metric files given")
    cases = [CaseMetrics.from_dict(json.loads(f.read_text())) for f in files]
    text = render(build_report(group_by_method(cases), args.metric), args.format, args.highlight)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_pipeline(args) -> int:
    cases = load_manifest(args.manifest)
    cfg = load_pipeline_config(args.config, out_dir=args.out_dir)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.stages is not None:
        cfg.stages = tuple(s for s in args.stages.split(",") if s)
        bad = [s for s in cfg.stages if s not in STAGES]
        if bad:
            raise InputError(f"unknown stages {bad}; valid: {list(STAGES)}")
    return run_pipeline(cases, cfg)


def cmd_regions(args) -> int:
    s = _settings(args)
    print(describe(s.encoding, s.composites))
    return 0


def cmd_print_config(args) -> int:
    print(dump_defaults())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliofuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--print-config", action="store_true", help="dump all defaults as JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("subtract", help="T1Gd - T1 subtraction image")
    p.add_argument("--t1gd", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clamp", action="store_true", help="set negative differences to 0")
    p.set_defaults(func=cmd_subtract)

    fuse = sub.add_parser("fuse", help="combine several segmentations")
    fsub = fuse.add_subparsers(dest="method", required=True)
    p = fsub.add_parser("staple", help="per-label STAPLE consensus")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--report", help="write per-label rater performance JSON here")
    p.add_argument("--config")
    p.set_defaults(func=cmd_fuse_staple)
    p = fsub.add_parser("weighted", help="per-class weighted probability average")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs-out", help="also write the fused 4D probability stack")
    p.add_argument("--config")
    p.set_defaults(func=cmd_fuse_weighted)

    p = sub.add_parser("fit-weights", help="fit per-class ensemble weights on held-out cases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_fit_weights)

    p = sub.add_parser("eval", help="lesion-wise metrics for one case")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--case-id")
    p.add_argument("--method", default="prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="synthetic phantom and noisy raters")
    p.add_argument("--shape", required=True)
    p.add_argument("--raters", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="cohort table from case metric files")
    p.add_argument("--cases", nargs="+", required=True)
    p.add_argument("--metric", choices=("LD", "LH95"), default="LD")
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    p.add_argument("--highlight", action="store_true", help="mark best and second best per column")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run stages over a case manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.add_argument("--stages", help="comma-separated stage list overriding the config")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("regions", help="print region definitions")
    p.add_argument("--show", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("print-config", help="dump all defaults as JSON")
    p.set_defaults(func=cmd_print_config)
    return parser


USER_ERRORS = (InputError, ConfigError, NiftiError, NonFiniteError, GeometryError,
               FileNotFoundError, json.JSONDecodeError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        print(dump_defaults())
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
