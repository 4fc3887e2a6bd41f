import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vreg.baseline import (EmptyOverlap, Level, entropy, joint_histogram, mi_from_histogram, mutual_information,
                           optimize_registration, write_trace)
from vreg.geometry import compose, distance, invert, transform_from_params
from vreg.volume import DimMismatch, Volume


def test_self_information_equals_entropy(simple3d):
    I = simple3d.reference
    assert mutual_information(I, I) == pytest.approx(entropy(I.data), abs=1e-12)
    counts, _ = np.histogram(I.data.ravel(), bins=50)
    q = counts[counts > 0] / counts.sum()
    assert mutual_information(I, I) == pytest.approx(-np.sum(q * np.log(q)), abs=1e-9)


def test_independent_noise_has_low_information():
    rng = np.random.default_rng(0)
    a, b = Volume(rng.normal(size=(32, 32, 32))), Volume(rng.normal(size=(32, 32, 32)))
    assert 0 <= mutual_information(a, b) < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_symmetry_and_non_negativity(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(6, 7, 8))
    b = a ** 2 + rng.normal(size=a.shape)
    ab = mutual_information(Volume(a), Volume(b))
    ba = mutual_information(Volume(b), Volume(a))
    assert abs(ab - ba) <= 1e-12
    assert ab >= -1e-12


def test_histogram_mass_and_mask(backend):
    rng = np.random.default_rng(1)
    a, b = rng.random((5, 6, 7)), rng.random((5, 6, 7))
    mask = rng.random(a.shape) > 0.3
    h = joint_histogram(a, b, mask, bins=8)
    assert h.shape == (8, 8) and h.sum() == mask.sum()
    with pytest.raises(EmptyOverlap):
        joint_histogram(a, b, np.zeros(a.shape, bool))
    with pytest.raises(DimMismatch):
        joint_histogram(a, b[:-1])


def test_histogram_extremes_are_binned():
    a = np.array([0.0, 0.5, 1.0])
    h = joint_histogram(a, a, bins=2)
    np.testing.assert_array_equal(h, [[1, 0], [0, 2]])


def test_mi_from_histogram():
    assert mi_from_histogram(np.eye(4)) == pytest.approx(np.log(4))
    assert mi_from_histogram(np.ones((3, 3))) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(EmptyOverlap):
        mi_from_histogram(np.zeros((2, 2)))


def test_shape_mismatch():
    with pytest.raises(DimMismatch):
        mutual_information(Volume(np.zeros((4, 4))), Volume(np.zeros((4, 5))))


def start_from(v, Tg):
    return compose(invert(transform_from_params(v)), Tg)


def test_recovers_two_voxel_shift(simple2d):
    Tg = simple2d.ground_truth
    T0 = start_from([8.0, 0, 0, 0, 0, 0], Tg)
    # 8 mm is two voxels; a 16-pixel pyramid level is too coarse to help on this phantom
    T, trace = optimize_registration(simple2d.reference, simple2d.floating, T0, [Level(1, 1.0, 40)])
    assert distance(Tg, T) < 1.0
    mi = [row[2] for row in trace]
    for (l0, _, m0, *_), (l1, _, m1, *_) in zip(trace, trace[1:]):
        if l0 == l1:
            assert m1 > m0
    assert len(mi) > 2


def test_zero_iterations_returns_start(simple2d):
    T0 = transform_from_params([3, -1, 0, 0, 0, 2])
    T, trace = optimize_registration(simple2d.reference, simple2d.floating, T0, [Level(1, 1.0, 0)])
    np.testing.assert_allclose(T.matrix, T0.matrix)
    assert len(trace) == 1 and trace[0][:2] == (0, 0)


def test_planar_images_keep_out_of_plane_parameters(simple2d):
    T0 = transform_from_params([4, 0, 0, 0, 0, 0])
    T, _ = optimize_registration(simple2d.reference, simple2d.floating, T0, [Level(1, 1.0, 5)])
    p = T.params
    assert p[2] == p[3] == p[4] == 0.0


def test_trace_file(tmp_path, simple2d):
    _, trace = optimize_registration(simple2d.reference, simple2d.floating, simple2d.ground_truth,
                                     [Level(1, 1.0, 2)])
    write_trace(tmp_path / "t.csv", trace)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["level", "iter", "MI", "tx", "ty", "tz", "rx", "ry", "rz"]
    assert len(rows) == len(trace) + 1
