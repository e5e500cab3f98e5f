"""Per-class weighted averaging of probability stacks and held-out weight fitting."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lesion import MetricConfig, dice, evaluate_case
from .regions import DEFAULT_COMPOSITES, REPORT_REGIONS, binarize
from .volume import LabelMap, ProbStack, Volume3D, require_same_geometry

log = logging.getLogger(__name__)


@dataclass
class WeightMatrix:
    """``weights[c, j]`` is the weight of model ``j`` for class channel ``c``."""

    weights: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(self.class_names):
            raise ValueError(f"weights must be (n_classes={len(self.class_names)}, n_models), got {w.shape}")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if np.abs(w.sum(axis=1) - 1).max() > 1e-9:
            raise ValueError(f"each class's weights must sum to 1, got {w.sum(axis=1)}")
        self.weights = w
        self.class_names = list(self.class_names)

    @property
    def n_models(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def uniform(cls, class_names, n_models: int) -> "WeightMatrix":
        return cls(np.full((len(class_names), n_models), 1.0 / n_models), class_names)

    @classmethod
    def one_hot(cls, class_names, n_models: int, k: int) -> "WeightMatrix":
        w = np.zeros((len(class_names), n_models))
        w[:, k] = 1.0
        return cls(w, class_names)

    def to_json_dict(self) -> dict:
        return {name: [float(v) for v in row] for name, row in zip(self.class_names, self.weights)}

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Sequence[float]], class_names=None) -> "WeightMatrix":
        names = list(doc) if class_names is None else list(class_names)
        missing = [n for n in names if n not in doc]
        if missing:
            raise ValueError(f"weights file lacks classes {missing}")
        return cls(np.array([doc[n] for n in names], dtype=np.float64), names)


@dataclass
class FusionDiagnostics:
    zero_voxels: int = 0


def weighted_sum(stacks: Sequence[ProbStack], w: WeightMatrix) -> np.ndarray:
    """Un-normalized float64 ``sum_j w[c, j] * stack_j[c]``."""
    if len(stacks) == 0:
        raise ValueError("fuse_weighted needs at least one stack")
    if w.n_models != len(stacks):
        raise ValueError(f"weight matrix has {w.n_models} models but {len(stacks)} stacks were given")
    require_same_geometry(stacks)
    ref = stacks[0]
    for j, s in enumerate(stacks[1:], 1):
        if s.n_classes != ref.n_classes or dict(s.encoding) != dict(ref.encoding):
            raise ValueError(f"stack {j} classes differ from stack 0")
    if w.weights.shape[0] != ref.n_classes:
        raise ValueError(f"weight matrix has {w.weights.shape[0]} classes, stacks have {ref.n_classes}")

    acc = np.zeros(ref.data.shape, dtype=np.float64)
    for j, s in enumerate(stacks):
        acc += w.weights[:, j].reshape(-1, 1, 1, 1) * s.data
    return acc


def fuse_weighted(stacks: Sequence[ProbStack], w: WeightMatrix, diagnostics: FusionDiagnostics | None = None):
    """Weighted per-class average, renormalized to the simplex.

    Returns ``(fused, labels)``. Voxels whose weighted mass is zero for every
    class become background and are tallied in ``diagnostics.zero_voxels``.
    """
    acc = weighted_sum(stacks, w)
    ref = stacks[0]
    total = acc.sum(axis=0)
    zero = total <= 0
    n_zero = int(np.count_nonzero(zero))
    if n_zero:
        acc[0][zero] = 1.0
        total = np.where(zero, 1.0, total)
    if diagnostics is not None:
        diagnostics.zero_voxels += n_zero
    acc /= total
    fused = ProbStack(acc.astype(np.float32), spacing=ref.spacing, affine=ref.affine,
                      encoding=ref.encoding, check=False)
    idx = np.argmax(acc, axis=0)
    codes = np.asarray(ref.class_codes, dtype=np.uint8)
    labels = LabelMap(Volume3D(codes[idx], spacing=ref.spacing, affine=ref.affine), ref.encoding)
    return fused, labels


def labelmap_to_probstack(lm: LabelMap) -> ProbStack:
    codes = [0, *lm.codes]
    data = np.stack([lm.data == c for c in codes]).astype(np.float32)
    return ProbStack(data, spacing=lm.spacing, affine=lm.affine, encoding=lm.encoding)


@dataclass(frozen=True)
class FitConfig:
    objective: str = "mean-lesionwise-dice"
    optimizer: str = "coordinate-search"
    restarts: int = 1
    budget: int = 300
    initial_step: float = 0.5
    shrink: float = 0.5
    min_step: float = 1e-2
    seed: int = 0
    fit_background: bool = True
    regions: tuple[str, ...] = REPORT_REGIONS

    def __post_init__(self):
        if self.objective not in ("mean-lesionwise-dice", "mean-plain-dice"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.optimizer not in ("coordinate-search", "dirichlet-random-search"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.budget < self.restarts:
            raise ValueError("budget must be >= restarts")
        if not 0 < self.shrink < 1 or not 0 < self.min_step <= self.initial_step:
            raise ValueError("step schedule needs 0 < shrink < 1 and 0 < min_step <= initial_step")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regions"] = list(self.regions)
        return d


@dataclass
class HeldOutCase:
    case_id: str
    stacks: list[ProbStack]
    gt: LabelMap


@dataclass
class FitResult:
    weights: WeightMatrix
    objective: float
    trace: list[float]
    evaluations: int
    warnings: list[dict] = field(default_factory=list)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = ind[u - css / ind > 0][-1]
    theta = css[rho - 1] / rho
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


def case_objective(labels: LabelMap, gt: LabelMap, cfg: FitConfig, metric_cfg: MetricConfig,
                   composites=None) -> float:
    if cfg.objective == "mean-plain-dice":
        comps = DEFAULT_COMPOSITES if composites is None else composites
        vals = [dice(binarize(gt, r, comps), binarize(labels, r, comps)) for r in cfg.regions]
    else:
        cm = evaluate_case(gt, labels, metric_cfg, cfg.regions, composites, compute_hd=False)
        vals = [cm.regions[r].ld for r in cfg.regions]
    return float(np.mean(vals))


class _Objective:
    """Mean case objective with memoization and failure bookkeeping."""

    def __init__(self, cases, names, cfg, metric_cfg, composites):
        self.cases = cases
        self.names = names
        self.cfg = cfg
        self.metric_cfg = metric_cfg
        self.composites = composites
        self.excluded: set[str] = set()
        self.warnings: list[dict] = []
        self.cache: dict[bytes, float] = {}
        self.evaluations = 0

    def __call__(self, W: np.ndarray) -> float:
        key = np.round(W, 12).tobytes()
        if key in self.cache:
            return self.cache[key]
        wm = WeightMatrix(W, self.names)
        scores = []
        for case in self.cases:
            if case.case_id in self.excluded:
                continue
            try:
                _, labels = fuse_weighted(case.stacks, wm)
                scores.append(case_objective(labels, case.gt, self.cfg, self.metric_cfg, self.composites))
            except Exception as exc:  # noqa: BLE001 - recorded, never silent
                self.excluded.add(case.case_id)
                self.warnings.append({"case_id": case.case_id, "error": f"{type(exc).__name__}: {exc}"})
                log.warning("excluding held-out case %s: %s", case.case_id, exc)
        if not scores:
            raise RuntimeError("objective could not be evaluated on any held-out case")
        val = float(np.mean(scores))
        self.cache[key] = val
        self.evaluations += 1
        return val


def fit_weights(cases: Sequence[HeldOutCase], cfg: FitConfig | None = None,
                metric_cfg: MetricConfig | None = None, composites=None) -> FitResult:
    """Maximize the mean held-out objective over the per-class weight simplexes.

    Every single-model corner is evaluated first, so the result is never worse
    than the best individual model. The search then runs ``cfg.restarts``
    times (uniform start first, Dirichlet draws afterwards) until the
    evaluation budget is spent. Ties keep the earlier point.
    """
    cfg = cfg or FitConfig()
    metric_cfg = metric_cfg or MetricConfig()
    if len(cases) == 0:
        raise ValueError("fit_weights needs at least one held-out case")
    n_models = len(cases[0].stacks)
    if n_models == 0:
        raise ValueError("held-out cases carry no model predictions")
    for c in cases:
        if len(c.stacks) != n_models:
            raise ValueError(f"case {c.case_id} has {len(c.stacks)} models, expected {n_models}")
    names = cases[0].stacks[0].class_names
    n_classes = len(names)

    if n_models == 1:
        W = np.ones((n_classes, 1))
        obj = _Objective(cases, names, cfg, metric_cfg, composites)
        val = obj(W)
        return FitResult(WeightMatrix(W, names), val, [val], obj.evaluations, obj.warnings)

    rng = np.random.default_rng(cfg.seed)
    obj = _Objective(cases, names, cfg, metric_cfg, composites)
    trace: list[float] = []
    best_W, best_val = None, -np.inf

    def consider(W) -> float:
        nonlocal best_W, best_val
        val = obj(W)
        if val > best_val:
            best_W, best_val = W.copy(), val
        trace.append(best_val)
        return val

    def exhausted() -> bool:
        return obj.evaluations >= cfg.budget

    fit_rows = list(range(n_classes)) if cfg.fit_background else list(range(1, n_classes))
    for k in range(n_models):
        consider(WeightMatrix.one_hot(names, n_models, k).weights)

    for restart in range(cfg.restarts):
        if exhausted():
            break
        if restart == 0:
            W = WeightMatrix.uniform(names, n_models).weights
        else:
            W = rng.dirichlet(np.ones(n_models), size=n_classes)
            if not cfg.fit_background:
                W[0] = 1.0 / n_models
        current = consider(W)

        if cfg.optimizer == "dirichlet-random-search":
            per_restart = (cfg.budget - obj.evaluations) // (cfg.restarts - restart)
            for _ in range(max(per_restart - 1, 0)):
                if exhausted():
                    break
                cand = rng.dirichlet(np.ones(n_models), size=n_classes)
                if not cfg.fit_background:
                    cand[0] = 1.0 / n_models
                consider(cand)
            continue

        step = cfg.initial_step
        while step >= cfg.min_step and not exhausted():
            improved = False
            for c in fit_rows:
                for j in range(n_models):
                    for sign in (1.0, -1.0):
                        if exhausted():
                            break
                        direction = np.full(n_models, -1.0 / n_models)
                        direction[j] += 1.0
                        row = project_simplex(W[c] + sign * step * direction)
                        if np.allclose(row, W[c], atol=1e-12):
                            continue
                        cand = W.copy()
                        cand[c] = row
                        val = consider(cand)
                        if val > current:
                            W, current, improved = cand, val, True
            if not improved:
                step *= cfg.shrink

    return FitResult(WeightMatrix(best_W, names), best_val, trace, obj.evaluations, obj.warnings)
