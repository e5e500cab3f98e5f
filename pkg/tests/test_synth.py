import numpy as np
import pytest

from gliofuse.lesion import connected_components
from gliofuse.synth import Blob, RaterModel, make_phantom, simulate_panel, simulate_rater


def test_radius_zero_blob():
    lm = make_phantom((5, 5, 5), blobs=[Blob((2, 2, 2), 0, "ET")])
    assert int((lm.data > 0).sum()) == 1 and lm.data[2, 2, 2] == 3


def test_two_disjoint_blobs():
    lm = make_phantom((30, 30, 30), blobs=[((7, 7, 7), 4, 3), ((22, 22, 22), 4, 3)])
    assert connected_components(lm.data == 3)[1].size == 2


def test_empty_and_overwrite():
    assert not make_phantom((4, 4, 4)).data.any()
    lm = make_phantom((9, 9, 9), blobs=[((4, 4, 4), 3, "SNFH"), ((4, 4, 4), 1, "ET")])
    assert lm.data[4, 4, 4] == 3 and lm.data[4, 4, 1] == 2


def test_bad_label():
    with pytest.raises(ValueError):
        make_phantom((4, 4, 4), blobs=[((1, 1, 1), 1, "XX")])
    with pytest.raises(ValueError):
        make_phantom((4, 4, 4), blobs=[((1, 1, 9), 1, "ET")])


def test_rater_extremes(rng):
    gt = rng.random((10, 10, 10)) < 0.3
    np.testing.assert_array_equal(simulate_rater(gt, RaterModel(1.0, 1.0, 3)), gt)
    assert not simulate_rater(gt, RaterModel(0.0, 1.0, 3)).any()


def test_keep_rate_concentration():
    gt = np.ones((100, 100, 10), bool)  # 1e5 foreground voxels
    out = simulate_rater(gt, RaterModel(0.9, 1.0, 7))
    # binomial sd ~ 0.00095, so 0.01 is > 10 sd
    assert abs(out.mean() - 0.9) < 0.01


def test_seed_determinism(rng):
    gt = rng.random((8, 8, 8)) < 0.5
    a = simulate_panel(gt, [(0.9, 0.95), (0.8, 0.85)], seed=4)
    b = simulate_panel(gt, [(0.9, 0.95), (0.8, 0.85)], seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a[0], simulate_panel(gt, [(0.9, 0.95)], seed=5)[0])


def test_empirical_rates_at_64():
    lm = make_phantom((64, 64, 64), blobs=[((20, 20, 20), 10, "ET"), ((44, 44, 42), 12, "ET")])
    gt = lm.data > 0
    (r,) = simulate_panel(gt, [(0.85, 0.93)], seed=1)
    assert abs(r[gt].mean() - 0.85) < 0.01
    assert abs((~r[~gt]).mean() - 0.93) < 0.01
