"""Derived input channels: the post- minus pre-contrast T1 subtraction."""
from __future__ import annotations

import numpy as np

from .volume import GeometryError, LabelMap, Volume3D, geometry_mismatch


def subtract(t1gd: Volume3D, t1: Volume3D, clamp_negative: bool = False,
             names: tuple[str, str] = ("t1gd", "t1")) -> Volume3D:
    """Voxelwise ``t1gd - t1`` as float32, optionally clamped at zero."""
    why = geometry_mismatch(t1gd, t1)
    if why is not None:
        raise GeometryError(f"cannot subtract {names[1]} from {names[0]}: {why}")
    diff = t1gd.data.astype(np.float64) - t1.data.astype(np.float64)
    if clamp_negative:
        np.maximum(diff, 0.0, out=diff)
    return t1gd.with_data(diff.astype(np.float32))


def zscore_normalize(vol: Volume3D, mask: LabelMap | np.ndarray | None = None) -> Volume3D:
    """Standardize intensities over a mask (default: all nonzero voxels).

    Uses the population standard deviation. Voxels outside the mask are
    transformed with the same mean/std. A zero std yields an all-zero volume.
    """
    x = vol.data.astype(np.float64)
    if mask is None:
        sel = x != 0
    else:
        if isinstance(mask, LabelMap):
            why = geometry_mismatch(vol, mask)
            if why is not None:
                raise GeometryError(f"mask geometry differs from volume: {why}")
            sel = mask.data != 0
        else:
            sel = np.asarray(mask, dtype=bool)
            if sel.shape != x.shape:
                raise GeometryError(f"mask shape {sel.shape} != volume shape {x.shape}")
    if not sel.any():
        if mask is None and x.size:
            # all-zero volume: nothing to standardize
            return vol.with_data(np.zeros(x.shape, np.float32))
        raise ValueError("normalization mask is empty")
    vals = x[sel]
    mean = vals.mean()
    std = vals.std()
    if std == 0:
        return vol.with_data(np.zeros(x.shape, np.float32))
    return vol.with_data(((x - mean) / std).astype(np.float32))
