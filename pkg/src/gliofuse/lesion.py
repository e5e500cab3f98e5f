"""Lesion-wise Dice and lesion-wise HD95.

Ground-truth lesions are found by dilating the GT mask and labelling its
connected components; each prediction component is matched to every lesion
whose dilated extent it touches. Unmatched prediction components above the
size threshold count as false positives with a zero Dice and a fixed
distance penalty.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .regions import DEFAULT_COMPOSITES, REPORT_REGIONS, binarize
from .volume import GeometryError, LabelMap, geometry_mismatch

_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class MetricConfig:
    connectivity: int = 26
    dilation_iterations: int = 3
    min_lesion_voxels: int = 50
    fp_hd95_penalty: float = 374.0
    fp_dice_score: float = 0.0
    empty_ld: float = 1.0
    empty_lh95: float = 0.0

    def __post_init__(self):
        if self.connectivity not in _RANK:
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.dilation_iterations < 0 or self.min_lesion_voxels < 0:
            raise ValueError("dilation_iterations and min_lesion_voxels must be >= 0")
        if self.fp_hd95_penalty < 0:
            raise ValueError("fp_hd95_penalty must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def structure(connectivity: int) -> np.ndarray:
    try:
        return ndimage.generate_binary_structure(3, _RANK[connectivity])
    except KeyError:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}") from None


def connected_components(mask: np.ndarray, connectivity: int = 26):
    """Label connected foreground components.

    Components are numbered 1..n in the order their first voxel is met when
    scanning with x varying fastest. Returns ``(labels, sizes)`` where
    ``sizes[k - 1]`` is the voxel count of component ``k``.
    """
    mask = np.asarray(mask, dtype=bool)
    # transposing makes numpy's C-order scan visit x fastest
    labels_t, n = ndimage.label(mask.T, structure=structure(connectivity))
    labels = np.ascontiguousarray(labels_t.T)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def dilate(mask: np.ndarray, iterations: int = 1, connectivity: int = 26) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=structure(connectivity), iterations=iterations)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    inner = ndimage.binary_erosion(mask, structure=structure(6), border_value=0)
    return mask & ~inner


def surface_voxels(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """``(n, 3)`` array of surface voxel centres in millimetres."""
    idx = np.argwhere(surface_mask(mask))
    return idx * np.asarray(spacing, dtype=np.float64)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Concatenated directed distances ``S_a -> S_b`` then ``S_b -> S_a``."""
    pa = surface_voxels(a, spacing)
    pb = surface_voxels(b, spacing)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("hd95 is undefined for an empty mask")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of both directed surface distances pooled."""
    return float(np.percentile(surface_distances(a, b, spacing), 95))


@dataclass
class LesionMatch:
    gt_lesion_id: int
    pred_ids: list[int]
    dice: float
    hd95: float
    gt_volume_voxels: int
    pred_volume_voxels: int


@dataclass
class FalsePositive:
    pred_id: int
    volume_voxels: int


@dataclass
class LesionScores:
    ld: float
    lh95: float
    lesions: list[LesionMatch] = field(default_factory=list)
    false_positives: list[FalsePositive] = field(default_factory=list)

    @property
    def fp_count(self) -> int:
        return len(self.false_positives)

    def to_dict(self) -> dict:
        return {
            "LD": self.ld,
            "LH95": self.lh95,
            "fp_count": self.fp_count,
            "lesions": [asdict(m) for m in self.lesions],
            "false_positives": [asdict(f) for f in self.false_positives],
        }


def _union_box(slices, shape, pad=1):
    lo = [min(s[d].start for s in slices) for d in range(3)]
    hi = [max(s[d].stop for s in slices) for d in range(3)]
    return tuple(slice(max(l - pad, 0), min(h + pad, n)) for l, h, n in zip(lo, hi, shape))


def lesionwise_scores(gt, pred, cfg: MetricConfig | None = None, spacing=(1.0, 1.0, 1.0),
                      compute_hd: bool = True) -> LesionScores:
    """Lesion-wise Dice and HD95 of one binary region.

    With ``compute_hd=False`` the matched-lesion HD95 values are left as NaN
    and ``lh95`` is NaN (used when only Dice is needed).
    """
    cfg = cfg or MetricConfig()
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise GeometryError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    shape = gt.shape

    gt_dil = dilate(gt, cfg.dilation_iterations, cfg.connectivity)
    dil_labels, _ = connected_components(gt_dil, cfg.connectivity)
    dil_boxes = ndimage.find_objects(dil_labels)
    pred_labels, pred_sizes = connected_components(pred, cfg.connectivity)
    pred_boxes = ndimage.find_objects(pred_labels)

    lesions: list[LesionMatch] = []
    assigned = np.zeros(len(pred_sizes) + 1, dtype=bool)
    for k, box in enumerate(dil_boxes, 1):
        extent = dil_labels[box] == k
        gt_vol = int(np.count_nonzero(gt[box] & extent))
        if gt_vol < cfg.min_lesion_voxels:
            continue
        hits = np.unique(pred_labels[box][extent])
        hits = [int(h) for h in hits if h != 0]
        assigned[hits] = True
        crop = _union_box([box, *(pred_boxes[h - 1] for h in hits)], shape)
        lesion = gt[crop] & (dil_labels[crop] == k)
        if hits:
            matched = np.isin(pred_labels[crop], hits)
            d = dice(lesion, matched)
            h = hd95(lesion, matched, spacing) if compute_hd else float("nan")
            pred_vol = int(pred_sizes[np.asarray(hits) - 1].sum())
        else:
            d, h, pred_vol = 0.0, cfg.fp_hd95_penalty, 0
        lesions.append(LesionMatch(k, hits, d, h, gt_vol, pred_vol))

    fps = [
        FalsePositive(i, int(size))
        for i, size in enumerate(pred_sizes, 1)
        if not assigned[i] and size >= cfg.min_lesion_voxels
    ]
    n = len(lesions) + len(fps)
    if n == 0:
        return LesionScores(cfg.empty_ld, cfg.empty_lh95)
    ld = (sum(m.dice for m in lesions) + cfg.fp_dice_score * len(fps)) / n
    if compute_hd:
        lh95 = (sum(m.hd95 for m in lesions) + cfg.fp_hd95_penalty * len(fps)) / n
    else:
        lh95 = float("nan")
    return LesionScores(ld, lh95, lesions, fps)


@dataclass
class CaseMetrics:
    regions: dict[str, LesionScores]
    case_id: str = ""
    method: str = ""
    config: MetricConfig = field(default_factory=MetricConfig)

    def value(self, region: str, metric: str) -> float:
        s = self.regions[region]
        return s.ld if metric == "LD" else s.lh95

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "method": self.method,
            "metric_config": self.config.to_dict(),
            "regions": {r: self.regions[r].to_dict() for r in self.regions},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CaseMetrics":
        regions = {}
        for name, r in doc["regions"].items():
            regions[name] = LesionScores(
                float(r["LD"]),
                float(r["LH95"]),
                [LesionMatch(**m) for m in r.get("lesions", [])],
                [FalsePositive(**f) for f in r.get("false_positives", [])],
            )
        return cls(regions, doc.get("case_id", ""), doc.get("method", ""),
                   MetricConfig(**doc.get("metric_config", {})))


def evaluate_case(gt: LabelMap, pred: LabelMap, cfg: MetricConfig | None = None,
                  regions: Sequence[str] = REPORT_REGIONS,
                  composites: Mapping[str, Sequence[str]] | None = None,
                  case_id: str = "", method: str = "", compute_hd: bool = True) -> CaseMetrics:
    cfg = cfg or MetricConfig()
    why = geometry_mismatch(gt, pred)
    if why is not None:
        raise GeometryError(f"gt and prediction differ: {why}")
    if dict(gt.encoding) != dict(pred.encoding):
        raise ValueError(f"encodings differ: {gt.encoding} vs {pred.encoding}")
    comps = DEFAULT_COMPOSITES if composites is None else composites
    out = {}
    for region in regions:
        out[region] = lesionwise_scores(
            binarize(gt, region, comps), binarize(pred, region, comps), cfg, gt.spacing, compute_hd
        )
    return CaseMetrics(out, case_id, method, cfg)
