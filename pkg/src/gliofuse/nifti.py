"""Minimal NIfTI-1 single-file (``n+1``) reader and writer.

Only uint8 (2), int16 (4) and float32 (16) payloads are supported. Files may
be gzip-compressed. Three-dimensional images become :class:`Volume3D`;
four-dimensional images (channel last on disk) become :class:`ProbStack`.
"""
from __future__ import annotations

import gzip
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .volume import DEFAULT_ENCODING, GEOMETRY_TOL, LabelMap, ProbStack, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DTYPE_CODES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
CODE_OF_DTYPE = {v: k for k, v in DTYPE_CODES.items()}


class NiftiError(ValueError):
    """Malformed NIfTI-1 file; ``field`` names the offending header field."""

    def __init__(self, field: str, message: str, path=None):
        self.field = field
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}invalid NIfTI-1 header field '{field}': {message}")


class UnsupportedDtypeError(NiftiError):
    def __init__(self, code: int, path=None):
        super().__init__(
            "datatype",
            f"unsupported datatype code {code} (supported: uint8=2, int16=4, float32=16)",
            path,
        )
        self.code = code


class NonFiniteError(ValueError):
    def __init__(self, flat_index: int, voxel: tuple, path=None):
        self.flat_index = flat_index
        self.voxel = voxel
        where = f"{path}: " if path else ""
        super().__init__(f"{where}non-finite voxel value at index {flat_index} (voxel {voxel})")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError("sizeof_hdr", f"corrupt gzip stream ({exc})", path) from exc
    return raw


def quaternion_to_affine(b, c, d, qfac, pixdim, offset) -> np.ndarray:
    """qform reconstruction following the NIfTI-1 standard (method 2)."""
    a2 = 1.0 - (b * b + c * c + d * d)
    a = 0.0 if a2 < 1e-7 else np.sqrt(a2)
    if a2 < 1e-7:
        # b, c, d describe a 180 degree rotation; renormalize
        n = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / n, c / n, d / n
    R = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if qfac < 0 else 1.0
    scale = np.array([pixdim[0], pixdim[1], pixdim[2] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = R * scale
    aff[:3, 3] = offset
    return aff


def _parse(raw: bytes, path=None):
    if len(raw) < HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"file holds {len(raw)} bytes, header needs {HEADER_SIZE}", path)
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr", f"expected {HEADER_SIZE}", path)

    def get(fmt, offset):
        return struct.unpack_from(endian + fmt, raw, offset)

    magic = raw[344:348]
    if magic != MAGIC:
        raise NiftiError("magic", f"expected {MAGIC!r}, found {magic!r}", path)
    dim = get("8h", 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError("dim", f"dim[0]={ndim} outside 1..7", path)
    shape = list(dim[1 : ndim + 1])
    if any(n < 1 for n in shape):
        raise NiftiError("dim", f"non-positive extent in {shape}", path)
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) < 3:
        shape += [1] * (3 - len(shape))
    if len(shape) > 4:
        raise NiftiError("dim", f"only 3D and 4D images are supported, got {shape}", path)

    (code,) = get("h", 70)
    if code not in DTYPE_CODES:
        raise UnsupportedDtypeError(code, path)
    dtype = DTYPE_CODES[code].newbyteorder(endian)
    (bitpix,) = get("h", 72)
    if bitpix != dtype.itemsize * 8:
        raise NiftiError("bitpix", f"{bitpix} does not match datatype {code}", path)

    pixdim = get("8f", 76)
    if not all(np.isfinite(pixdim[1:4])) or min(pixdim[1:4]) <= 0:
        raise NiftiError("pixdim", f"spacing {pixdim[1:4]} must be finite and positive", path)
    (vox_offset,) = get("f", 108)
    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE or vox_offset != int(vox_offset):
        raise NiftiError("vox_offset", f"{vox_offset} is not a valid data offset", path)
    slope, inter = get("2f", 112)

    qform_code, sform_code = get("2h", 252)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if sform_code > 0:
        aff = np.eye(4)
        aff[0] = get("4f", 280)
        aff[1] = get("4f", 296)
        aff[2] = get("4f", 312)
        if not np.isfinite(aff).all():
            raise NiftiError("srow_x", "sform rows are not finite", path)
    elif qform_code > 0:
        b, c, d = get("3f", 256)
        offset = get("3f", 268)
        aff = quaternion_to_affine(b, c, d, pixdim[0], spacing, offset)
        if not np.isfinite(aff).all():
            raise NiftiError("quatern_b", "qform parameters are not finite", path)
    else:
        aff = np.diag([*spacing, 1.0])
    norms = np.linalg.norm(aff[:3, :3], axis=0)
    if not np.allclose(norms, spacing, rtol=0, atol=GEOMETRY_TOL):
        field = "srow_x" if sform_code > 0 else "pixdim"
        raise NiftiError(field, f"affine column norms {norms} disagree with pixdim {spacing}", path)

    count = int(np.prod(shape))
    start = int(vox_offset)
    nbytes = count * dtype.itemsize
    if len(raw) < start + nbytes:
        raise NiftiError(
            "dim", f"data truncated: need {nbytes} bytes at offset {start}, file has {len(raw)}", path
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    arr = flat.reshape(shape, order="F")

    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        arr = (arr.astype(np.float64) * slope + inter).astype(np.float32)
    elif arr.dtype.kind == "f" or arr.dtype.byteorder not in ("=", "|"):
        arr = arr.astype(arr.dtype.newbyteorder("="))
    else:
        arr = arr.copy()

    if arr.dtype.kind == "f":
        bad = ~np.isfinite(arr)
        if bad.any():
            flat_idx = int(np.flatnonzero(bad.ravel(order="F"))[0])
            voxel = tuple(int(i) for i in np.unravel_index(flat_idx, arr.shape, order="F"))
            raise NonFiniteError(flat_idx, voxel, path)
    return arr, aff.astype(np.float64), spacing


def read_array(path):
    """Return ``(array, affine, spacing)`` for a 3D or 4D file."""
    return _parse(_read_bytes(path), path)


def read_nifti(path) -> Volume3D:
    arr, aff, spacing = read_array(path)
    if arr.ndim != 3:
        raise NiftiError("dim", f"expected a 3D image, got shape {arr.shape}", path)
    return Volume3D(arr, spacing=spacing, affine=aff)


def read_labelmap(path, encoding=None) -> LabelMap:
    vol = read_nifti(path)
    if vol.dtype.kind == "f":
        rounded = np.rint(vol.data)
        if not np.array_equal(rounded, vol.data):
            raise ValueError(f"{path}: label map contains non-integer values")
        vol = vol.with_data(rounded.astype(np.uint8))
    return LabelMap(vol, dict(DEFAULT_ENCODING) if encoding is None else encoding)


def read_probstack(path, encoding=None) -> ProbStack:
    arr, aff, spacing = read_array(path)
    if arr.ndim != 4:
        raise NiftiError("dim", f"expected a 4D probability stack, got shape {arr.shape}", path)
    data = np.moveaxis(arr, 3, 0)
    enc = dict(DEFAULT_ENCODING) if encoding is None else encoding
    return ProbStack(data, spacing=spacing, affine=aff, encoding=enc)


def _header(shape, dtype: np.dtype, spacing, affine) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dims = [len(shape), *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, CODE_OF_DTYPE[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    pixdim = [1.0, *spacing] + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)
    for row, offset in zip(affine[:3], (280, 296, 312)):
        struct.pack_into("<4f", hdr, offset, *row)
    hdr[344:348] = MAGIC
    return bytes(hdr)


def _encode(arr: np.ndarray, spacing, affine) -> bytes:
    base = np.dtype(arr.dtype.name)
    if base not in CODE_OF_DTYPE:
        raise TypeError(f"cannot write dtype {arr.dtype}")
    payload = arr.astype(base.newbyteorder("<"), copy=False).ravel(order="F").tobytes()
    return _header(arr.shape, base, spacing, affine) + b"\x00" * 4 + payload


def write_bytes_atomic(path, blob: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write(blob: bytes, path) -> None:
    if str(path).endswith(".gz"):
        # mtime=0 keeps output byte-identical across runs
        blob = gzip.compress(blob, mtime=0)
    write_bytes_atomic(path, blob)


def write_nifti(vol, path) -> None:
    """Write a Volume3D (or LabelMap) as NIfTI-1 with the sform set from its affine."""
    if isinstance(vol, LabelMap):
        vol = vol.volume
    _write(_encode(vol.data, vol.spacing, vol.affine), path)


def write_probstack(stack: ProbStack, path) -> None:
    arr = np.ascontiguousarray(np.moveaxis(stack.data, 0, 3))
    _write(_encode(arr, stack.spacing, stack.affine), path)
