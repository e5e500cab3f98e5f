import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gliofuse.nifti import (
    NiftiError,
    NonFiniteError,
    UnsupportedDtypeError,
    read_nifti,
    read_probstack,
    write_nifti,
    write_probstack,
)
from gliofuse.volume import LabelMap, ProbStack, Volume3D, check_geometry

from conftest import nifti_bytes


def test_minimal_float_roundtrip(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2) / 3
    vol = Volume3D(data, spacing=(1.0, 1.0, 1.0))
    write_nifti(vol, tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii")
    assert back.shape == (2, 2, 2)
    assert back.spacing == (1.0, 1.0, 1.0)
    np.testing.assert_array_equal(back.data, data)
    assert back.dtype == np.float32


def test_labelmap_roundtrip_bit_exact(tmp_path, rng):
    codes = rng.integers(0, 5, size=(7, 5, 3)).astype(np.uint8)
    lm = LabelMap.from_array(codes)
    write_nifti(lm, tmp_path / "lm.nii.gz")
    back = read_nifti(tmp_path / "lm.nii.gz")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back.data, codes)


def test_large_zero_volume_roundtrip(tmp_path):
    vol = Volume3D(np.zeros((240, 240, 155), np.float32))
    write_nifti(vol, tmp_path / "z.nii.gz")
    back = read_nifti(tmp_path / "z.nii.gz")
    assert back.shape == (240, 240, 155)
    assert not back.data.any()


def test_anisotropic_spacing_in_pixdim(tmp_path):
    write_nifti(Volume3D(np.zeros((3, 3, 3), np.int16), spacing=(1, 1, 3)), tmp_path / "a.nii")
    raw = (tmp_path / "a.nii").read_bytes()
    pixdim = struct.unpack_from("<8f", raw, 76)
    assert pixdim[1:4] == (1.0, 1.0, 3.0)
    assert read_nifti(tmp_path / "a.nii").spacing == (1.0, 1.0, 3.0)


def test_x_fastest_on_disk(tmp_path):
    data = np.zeros((3, 2, 2), np.uint8)
    data[1, 0, 0] = 7
    write_nifti(Volume3D(data), tmp_path / "o.nii")
    raw = (tmp_path / "o.nii").read_bytes()
    assert raw[352:352 + 12][1] == 7


def test_scaling_slope_intercept(tmp_path):
    raw = np.array([3, 0, 1, 2, 4, 5, 6, 7], np.int16).reshape(2, 2, 2, order="F")
    path = tmp_path / "s.nii"
    path.write_bytes(nifti_bytes(raw, datatype=4, bitpix=16, slope=2.0, inter=1.0))
    vol = read_nifti(path)
    assert vol.dtype == np.float32
    # slope * raw + inter evaluated by hand for raw = 3
    assert vol.data[0, 0, 0] == 7.0
    np.testing.assert_array_equal(vol.data, raw * 2.0 + 1.0)


def test_gzip_and_big_endian(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "be.nii.gz"
    path.write_bytes(gzip.compress(nifti_bytes(data, datatype=4, bitpix=16, endian=">")))
    np.testing.assert_array_equal(read_nifti(path).data, data)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.nii"
    path.write_bytes(nifti_bytes(np.zeros((4, 4, 4), np.float32))[:352])
    with pytest.raises(NiftiError) as exc:
        read_nifti(path)
    assert exc.value.field == "dim"


def test_header_only_partial(tmp_path):
    path = tmp_path / "h.nii"
    path.write_bytes(nifti_bytes(np.zeros((2, 2, 2), np.float32))[:200])
    with pytest.raises(NiftiError) as exc:
        read_nifti(path)
    assert exc.value.field == "sizeof_hdr"


@pytest.mark.parametrize(
    "offset, payload, field",
    [
        (344, b"ni1\x00", "magic"),
        (0, struct.pack("<i", 1234), "sizeof_hdr"),
        (40, struct.pack("<h", 9), "dim"),
        (72, struct.pack("<h", 8), "bitpix"),
        (80, struct.pack("<f", -1.0), "pixdim"),
        (108, struct.pack("<f", 10.0), "vox_offset"),
    ],
)
def test_corrupted_header_names_field(tmp_path, offset, payload, field):
    blob = bytearray(nifti_bytes(np.ones((2, 2, 2), np.float32)))
    blob[offset:offset + len(payload)] = payload
    path = tmp_path / "c.nii"
    path.write_bytes(bytes(blob))
    with pytest.raises(NiftiError) as exc:
        read_nifti(path)
    assert exc.value.field == field
    assert field in str(exc.value)


def test_unsupported_dtype(tmp_path):
    path = tmp_path / "d.nii"
    path.write_bytes(nifti_bytes(np.ones((2, 2, 2), np.float64), datatype=64, bitpix=64))
    with pytest.raises(UnsupportedDtypeError):
        read_nifti(path)


def test_nan_rejected_with_index(tmp_path):
    data = np.zeros((3, 2, 2), np.float32)
    data[2, 1, 0] = np.nan
    path = tmp_path / "n.nii"
    path.write_bytes(nifti_bytes(data))
    with pytest.raises(NonFiniteError) as exc:
        read_nifti(path)
    assert exc.value.voxel == (2, 1, 0)
    assert exc.value.flat_index == 2 + 1 * 3


def test_qform_fallback():
    # 90 degree rotation about z: quaternion (a, b, c, d) = (cos45, 0, 0, sin45)
    s = np.sin(np.pi / 4)
    blob = nifti_bytes(np.zeros((2, 2, 2), np.float32), pixdim=(2.0, 3.0, 4.0),
                       qform={"bcd": (0.0, 0.0, s), "offset": (10.0, 20.0, 30.0)})
    from gliofuse.nifti import _parse

    _, aff, spacing = _parse(blob)
    expected = np.array([[0, -3, 0, 10], [2, 0, 0, 20], [0, 0, 4, 30], [0, 0, 0, 1]], float)
    np.testing.assert_allclose(aff, expected, atol=1e-6)
    assert spacing == (2.0, 3.0, 4.0)


def test_qform_negative_qfac_flips_z():
    from gliofuse.nifti import _parse

    blob = nifti_bytes(np.zeros((2, 2, 2), np.float32),
                       qform={"bcd": (0.0, 0.0, 0.0), "offset": (0, 0, 0), "qfac": -1.0})
    _, aff, _ = _parse(blob)
    np.testing.assert_allclose(np.diag(aff), [1, 1, -1, 1])


def test_sform_preferred_over_qform(tmp_path):
    sform = np.array([[-1, 0, 0, 5], [0, 1, 0, 6], [0, 0, 1, 7], [0, 0, 0, 1]], float)
    path = tmp_path / "sf.nii"
    path.write_bytes(nifti_bytes(np.zeros((2, 2, 2), np.float32), sform=sform,
                                 qform={"bcd": (0, 0, 0), "offset": (0, 0, 0)}))
    np.testing.assert_allclose(read_nifti(path).affine, sform)


def test_affine_roundtrip(tmp_path):
    aff = np.array([[0, -1.5, 0, -90.25], [1.0, 0, 0, 12.5], [0, 0, 2.0, 3.125], [0, 0, 0, 1]])
    vol = Volume3D(np.ones((4, 3, 2), np.float32), affine=aff)
    write_nifti(vol, tmp_path / "af.nii.gz")
    back = read_nifti(tmp_path / "af.nii.gz")
    np.testing.assert_allclose(back.affine, aff, atol=1e-5)
    np.testing.assert_allclose(back.spacing, (1.0, 1.5, 2.0), atol=1e-5)
    assert check_geometry(vol, back)


def test_probstack_roundtrip(tmp_path, rng):
    p = rng.dirichlet(np.ones(5), size=(3, 4, 2))
    stack = ProbStack(np.moveaxis(p, -1, 0).astype(np.float32))
    write_probstack(stack, tmp_path / "p.nii.gz")
    back = read_probstack(tmp_path / "p.nii.gz")
    np.testing.assert_array_equal(back.data, stack.data)


def test_check_geometry():
    a = Volume3D(np.zeros((10, 10, 10), np.uint8))
    assert check_geometry(a, a)
    assert not check_geometry(a, Volume3D(np.zeros((10, 10, 11), np.uint8)))
    shifted = np.eye(4)
    shifted[0, 3] = 0.01
    assert not check_geometry(a, Volume3D(np.zeros((10, 10, 10), np.uint8), affine=shifted))
    shifted[0, 3] = 0.0005
    assert check_geometry(a, Volume3D(np.zeros((10, 10, 10), np.uint8), affine=shifted))


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2), np.float32), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume3D(np.full((2, 2, 2), np.nan, np.float32))
    with pytest.raises(TypeError):
        Volume3D(np.zeros((2, 2, 2), np.float64))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2), np.uint8), spacing=(1, 1, 2), affine=np.eye(4))
    vol = Volume3D(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1


def test_labelmap_rejects_unknown_codes():
    with pytest.raises(ValueError):
        LabelMap.from_array(np.full((2, 2, 2), 7))
    lm = LabelMap.from_array(np.full((2, 2, 2), 7), encoding={7: "X"})
    assert lm.codes == [7]


def test_probstack_simplex_check():
    with pytest.raises(ValueError):
        ProbStack(np.full((5, 2, 2, 2), 0.3, np.float32))


@settings(max_examples=30, deadline=None)
@given(
    arr=hnp.arrays(np.int16, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6)),
    spacing=st.tuples(*[st.floats(0.25, 4.0)] * 3),
)
def test_roundtrip_property(tmp_path_factory, arr, spacing):
    path = tmp_path_factory.mktemp("rt") / "x.nii.gz"
    write_nifti(Volume3D(arr, spacing=spacing), path)
    back = read_nifti(path)
    np.testing.assert_array_equal(back.data, arr)
    np.testing.assert_allclose(back.spacing, spacing, rtol=0, atol=1e-5)
