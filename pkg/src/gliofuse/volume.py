"""Voxel-grid carriers shared by every other module.

Arrays are indexed ``data[x, y, z]``. On disk (and whenever a flat index is
reported) the linearization is x-fastest, i.e. numpy Fortran order, which is
also the NIfTI-1 storage order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

ALLOWED_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32))

DEFAULT_ENCODING: dict[int, str] = {1: "NETC", 2: "SNFH", 3: "ET", 4: "RC"}

GEOMETRY_TOL = 1e-3


class GeometryError(ValueError):
    """Two volumes that must share a voxel grid do not."""


def _spacing_from_affine(affine: np.ndarray) -> tuple[float, float, float]:
    norms = np.linalg.norm(affine[:3, :3], axis=0)
    return tuple(float(v) for v in norms)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D image with its world geometry.

    ``affine`` maps voxel indices to world millimetres. When only ``spacing``
    is given a diagonal affine is built; when only ``affine`` is given the
    spacing is read from its column norms.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = None  # type: ignore[assignment]
    affine: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume3D needs a 3D array, got shape {data.shape}")
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        if data.dtype not in ALLOWED_DTYPES:
            raise TypeError(
                f"unsupported dtype {data.dtype}; expected one of "
                f"{[str(d) for d in ALLOWED_DTYPES]}"
            )
        if data.dtype.kind == "f" and not np.isfinite(data).all():
            raise ValueError("Volume3D data must be finite")

        affine = self.affine
        spacing = self.spacing
        if affine is None:
            spacing = (1.0, 1.0, 1.0) if spacing is None else spacing
            affine = np.diag([*map(float, spacing), 1.0])
        affine = np.array(affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        if spacing is None:
            spacing = _spacing_from_affine(affine)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {spacing}")
        if not np.allclose(_spacing_from_affine(affine), spacing, rtol=0, atol=GEOMETRY_TOL):
            raise ValueError(
                f"spacing {spacing} disagrees with affine column norms "
                f"{_spacing_from_affine(affine)}"
            )
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same geometry, new voxel payload."""
        return Volume3D(data, spacing=self.spacing, affine=self.affine)


def check_geometry(a, b) -> bool:
    """True when ``a`` and ``b`` live on the same voxel grid.

    Accepts anything exposing ``shape``, ``spacing`` and ``affine``
    (Volume3D, LabelMap, ProbStack).
    """
    if tuple(a.shape) != tuple(b.shape):
        return False
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=GEOMETRY_TOL):
        return False
    diff = np.abs(np.asarray(a.affine) - np.asarray(b.affine))
    return bool(diff.max() <= GEOMETRY_TOL)


def geometry_mismatch(a, b) -> str | None:
    """Name of the first differing geometry field, or None."""
    if tuple(a.shape) != tuple(b.shape):
        return f"shape {tuple(a.shape)} != {tuple(b.shape)}"
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=GEOMETRY_TOL):
        return f"spacing {a.spacing} != {b.spacing}"
    if np.abs(np.asarray(a.affine) - np.asarray(b.affine)).max() > GEOMETRY_TOL:
        return "affine"
    return None


def require_same_geometry(items: Sequence, names: Sequence[str] | None = None) -> None:
    """Raise GeometryError unless every item shares the first item's grid."""
    for i in range(1, len(items)):
        why = geometry_mismatch(items[0], items[i])
        if why is not None:
            left = names[0] if names else "input 0"
            right = names[i] if names else f"input {i}"
            raise GeometryError(f"geometry mismatch between {left} and {right}: {why}")


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer segmentation plus the code -> region-name encoding."""

    volume: Volume3D
    encoding: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_ENCODING))

    def __post_init__(self):
        if self.volume.dtype.kind not in "ui":
            raise TypeError(f"label maps must be integer-valued, got {self.volume.dtype}")
        enc = {int(k): str(v) for k, v in self.encoding.items()}
        if 0 in enc:
            raise ValueError("code 0 is reserved for background")
        codes = np.unique(self.volume.data)
        unknown = sorted(set(int(c) for c in codes) - set(enc) - {0})
        if unknown:
            raise ValueError(f"voxel codes {unknown} are not in the encoding {enc}")
        object.__setattr__(self, "encoding", enc)

    @classmethod
    def from_array(cls, data, spacing=None, affine=None, encoding=None) -> "LabelMap":
        arr = np.asarray(data)
        if arr.dtype not in (np.uint8, np.int16):
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("label codes must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        enc = dict(DEFAULT_ENCODING) if encoding is None else encoding
        return cls(Volume3D(arr, spacing=spacing, affine=affine), enc)

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    @property
    def shape(self):
        return self.volume.shape

    @property
    def spacing(self):
        return self.volume.spacing

    @property
    def affine(self):
        return self.volume.affine

    @property
    def codes(self) -> list[int]:
        """Foreground codes in ascending order."""
        return sorted(self.encoding)

    def code_of(self, region: str) -> int:
        for code, name in self.encoding.items():
            if name == region:
                return code
        raise KeyError(f"region {region!r} not in encoding {dict(self.encoding)}")

    def with_data(self, data: np.ndarray) -> "LabelMap":
        arr = np.asarray(data).astype(self.volume.dtype, copy=False)
        return LabelMap(self.volume.with_data(arr), self.encoding)


SIMPLEX_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class ProbStack:
    """Per-class soft prediction, channel 0 is background.

    ``data`` has shape ``(n_classes, nx, ny, nz)``; channel ``k > 0`` holds the
    class whose code is the k-th smallest code of ``encoding``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = None  # type: ignore[assignment]
    encoding: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_ENCODING))
    check: bool = True

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        enc = {int(k): str(v) for k, v in self.encoding.items()}
        if data.ndim != 4 or data.shape[0] != len(enc) + 1:
            raise ValueError(
                f"ProbStack needs shape (n_classes={len(enc) + 1}, nx, ny, nz), got {data.shape}"
            )
        geom = Volume3D(np.zeros((1, 1, 1), np.uint8), spacing=self.spacing, affine=self.affine)
        if self.check:
            if not np.isfinite(data).all() or data.min() < 0 or data.max() > 1:
                raise ValueError("ProbStack values must lie in [0, 1]")
            total = data.sum(axis=0, dtype=np.float64)
            worst = np.abs(total - 1.0).max() if total.size else 0.0
            if worst > SIMPLEX_TOL:
                raise ValueError(f"ProbStack channels do not sum to 1 (max deviation {worst:.3g})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", geom.spacing)
        object.__setattr__(self, "affine", geom.affine)
        object.__setattr__(self, "encoding", enc)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]  # type: ignore[return-value]

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    @property
    def class_codes(self) -> list[int]:
        """Label code for each channel (0 first)."""
        return [0, *sorted(self.encoding)]

    @property
    def class_names(self) -> list[str]:
        return ["background", *(self.encoding[c] for c in sorted(self.encoding))]

    def argmax(self) -> LabelMap:
        """Hard labels; ties go to the lowest class code."""
        idx = np.argmax(self.data, axis=0)
        codes = np.asarray(self.class_codes, dtype=np.uint8)
        return LabelMap(Volume3D(codes[idx], spacing=self.spacing, affine=self.affine), self.encoding)
