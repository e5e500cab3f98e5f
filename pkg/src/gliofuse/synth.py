"""Synthetic phantoms and noisy raters with known performance.

Raters follow the STAPLE generative model exactly: every true-foreground
voxel is kept with probability ``p`` and every true-background voxel is
switched on with probability ``1 - q``, independently per voxel.

Per-rater seeds come from ``numpy.random.SeedSequence(seed).spawn(n)``, so
rater ``k`` of a panel only depends on the panel seed and ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .volume import DEFAULT_ENCODING, LabelMap, ProbStack


@dataclass(frozen=True)
class RaterModel:
    p: float
    q: float
    seed: int | np.random.SeedSequence = 0

    def __post_init__(self):
        for name in ("p", "q"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    radius: float
    label: int | str


def make_phantom(shape, spacing=(1.0, 1.0, 1.0), blobs: Sequence = (),
                 encoding: Mapping[int, str] | None = None) -> LabelMap:
    """Label map of spheres; later blobs overwrite earlier ones.

    ``center`` is in voxel indices and ``radius`` in voxels. A voxel belongs
    to a blob when its index distance to the centre is at most ``radius``.
    """
    enc = dict(DEFAULT_ENCODING) if encoding is None else dict(encoding)
    names = {v: k for k, v in enc.items()}
    shape = tuple(int(n) for n in shape)
    out = np.zeros(shape, dtype=np.uint8)
    grid = np.indices(shape, dtype=np.float64)
    for b in blobs:
        if not isinstance(b, Blob):
            b = Blob(*b)
        code = names.get(b.label, b.label) if isinstance(b.label, str) else int(b.label)
        if code not in enc:
            raise ValueError(f"blob label {b.label!r} is not in the encoding {enc}")
        c = np.asarray(b.center, dtype=np.float64)
        if len(c) != 3 or np.any(c < 0) or np.any(c > np.asarray(shape) - 1):
            raise ValueError(f"blob centre {tuple(c)} lies outside shape {shape}")
        d2 = sum((grid[i] - c[i]) ** 2 for i in range(3))
        out[d2 <= float(b.radius) ** 2 + 1e-9] = code
    return LabelMap.from_array(out, spacing=spacing, encoding=enc)


def simulate_rater(gt: np.ndarray, rm: RaterModel) -> np.ndarray:
    gt = np.asarray(gt, dtype=bool)
    rng = np.random.default_rng(rm.seed)
    u = rng.random(gt.shape)
    return np.where(gt, u < rm.p, u >= rm.q)


def rater_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def simulate_panel(gt: np.ndarray, performance: Sequence[tuple[float, float]], seed: int) -> list[np.ndarray]:
    seeds = rater_seeds(seed, len(performance))
    return [simulate_rater(gt, RaterModel(p, q, s)) for (p, q), s in zip(performance, seeds)]


def simulate_labelmap_rater(gt: LabelMap, rm: RaterModel) -> LabelMap:
    """Corrupt every foreground label independently, painting in code order."""
    rng = np.random.default_rng(rm.seed)
    out = np.zeros(gt.shape, dtype=gt.volume.dtype)
    for code in gt.codes:
        mask = gt.data == code
        u = rng.random(gt.shape)
        out[np.where(mask, u < rm.p, u >= rm.q)] = code
    return gt.with_data(out)


def soft_prediction(lm: LabelMap, confidence: float = 0.9, noise: float = 0.0,
                    seed: int = 0) -> ProbStack:
    """Probability stack whose argmax is ``lm`` (when ``noise`` is small).

    The labelled class gets ``confidence`` and the rest is spread evenly;
    ``noise`` mixes in a Dirichlet draw per voxel.
    """
    codes = [0, *lm.codes]
    k = len(codes)
    base = np.full((k, *lm.shape), (1.0 - confidence) / (k - 1))
    for i, c in enumerate(codes):
        base[i][lm.data == c] = confidence
    if noise > 0:
        rng = np.random.default_rng(seed)
        draw = rng.dirichlet(np.ones(k), size=lm.shape)
        base = (1 - noise) * base + noise * np.moveaxis(draw, -1, 0)
    return ProbStack(base.astype(np.float32), spacing=lm.spacing, affine=lm.affine, encoding=lm.encoding)
