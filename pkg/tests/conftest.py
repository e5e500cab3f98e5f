import struct

import numpy as np
import pytest

from gliofuse.nifti import write_nifti
from gliofuse.volume import Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def nifti_bytes(data, datatype=16, bitpix=32, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0,
                qform=None, sform=None, magic=b"n+1\x00", endian="<"):
    """Hand-rolled single-file NIfTI-1 image, independent of the writer."""
    data = np.asarray(data)
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dims = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    struct.pack_into(endian + "8h", hdr, 40, *dims)
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, bitpix)
    qfac = 1.0 if qform is None else qform.get("qfac", 1.0)
    struct.pack_into(endian + "8f", hdr, 76, qfac, *pixdim, 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    if qform is not None:
        struct.pack_into(endian + "h", hdr, 252, 1)
        struct.pack_into(endian + "3f", hdr, 256, *qform["bcd"])
        struct.pack_into(endian + "3f", hdr, 268, *qform["offset"])
    if sform is not None:
        struct.pack_into(endian + "h", hdr, 254, 1)
        for row, off in zip(np.asarray(sform)[:3], (280, 296, 312)):
            struct.pack_into(endian + "4f", hdr, off, *row)
    hdr[344:348] = magic
    dt = data.dtype.newbyteorder(endian)
    return bytes(hdr) + b"\x00" * 4 + data.astype(dt).ravel(order="F").tobytes()


@pytest.fixture
def write_vol(tmp_path):
    def _write(data, name="vol.nii.gz", **kw):
        path = tmp_path / name
        write_nifti(Volume3D(np.asarray(data), **kw), path)
        return path

    return _write


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        detail = ""
        for key, val in report.user_properties:
            if key == "detail":
                detail = val
        ACCEPTANCE_RESULTS.append((name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
