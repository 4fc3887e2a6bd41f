import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vreg.geometry import (AffineTransform, Degenerate, GimbalLock, RigidTransform, compose, distance,
                           identity, invert, param_norm, params_from_transform, planar_params,
                           random_affine, residual_params, rotate, transform_from_dict,
                           transform_from_params, transform_to_dict, translate)

angles = st.floats(-179.0, 179.0)
tilt = st.floats(-89.0, 89.0)
shift = st.floats(-200.0, 200.0)
params6 = st.tuples(shift, shift, shift, angles, tilt, angles).map(np.array)


def test_frozen_matrix():
    # Trans(1,2,3) Rx(10) Ry(20) Rz(30), hand-expanded
    expected = np.array([
        [0.8137976813493738, -0.46984631039295416, 0.3420201433256687, 1.0],
        [0.5438381424823255, 0.8231729446455008, -0.16317591116653482, 2.0],
        [-0.20487412870286215, 0.3187957775971678, 0.9254165783983234, 3.0],
        [0.0, 0.0, 0.0, 1.0]])
    np.testing.assert_allclose(transform_from_params([1, 2, 3, 10, 20, 30]).matrix, expected, atol=1e-15)


def test_single_axis_rotations_match_textbook():
    c, s = np.cos(np.radians(30)), np.sin(np.radians(30))
    np.testing.assert_allclose(rotate(rx=30).rotation, [[1, 0, 0], [0, c, -s], [0, s, c]], atol=1e-15)
    np.testing.assert_allclose(rotate(ry=30).rotation, [[c, 0, s], [0, 1, 0], [-s, 0, c]], atol=1e-15)
    np.testing.assert_allclose(rotate(rz=30).rotation, [[c, -s, 0], [s, c, 0], [0, 0, 1]], atol=1e-15)


def test_rotation_order_is_x_then_y_then_z_applied_right_to_left():
    T = transform_from_params([0, 0, 0, 10, 20, 30])
    np.testing.assert_allclose(T.matrix, (rotate(rx=10) @ rotate(ry=20) @ rotate(rz=30)).matrix, atol=1e-15)


def test_translation_moves_points():
    np.testing.assert_allclose(translate(1, 2, 3).apply([[0, 0, 0], [1, 1, 1]]), [[1, 2, 3], [2, 3, 4]])


def test_rotation_about_z_maps_x_to_y():
    np.testing.assert_allclose(rotate(rz=90).apply([1, 0, 0]), [0, 1, 0], atol=1e-15)


@given(params6)
@settings(max_examples=200, deadline=None)
def test_params_round_trip(v):
    np.testing.assert_allclose(params_from_transform(transform_from_params(v)), v, atol=1e-8)


@given(params6)
@settings(max_examples=100, deadline=None)
def test_rotation_is_orthonormal(v):
    R = transform_from_params(v).rotation
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@given(params6, params6)
@settings(max_examples=100, deadline=None)
def test_inverse_and_composition(a, b):
    A, B = transform_from_params(a), transform_from_params(b)
    np.testing.assert_allclose(compose(A, invert(A)).matrix, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(compose(A, B).apply([1.0, -2.0, 3.0]), A.apply(B.apply([1.0, -2.0, 3.0])),
                               atol=1e-9)


@given(params6)
@settings(max_examples=100, deadline=None)
def test_distance_properties(v):
    T = transform_from_params(v)
    assert distance(T, T) == pytest.approx(0.0, abs=1e-9)
    assert distance(T, identity()) == pytest.approx(np.linalg.norm(v), rel=1e-9, abs=1e-9)


def test_distance_of_pure_translation():
    assert distance(translate(3, 4, 0), identity()) == pytest.approx(5.0)


def test_residual_is_params_of_tg_times_inverse():
    Tg = transform_from_params([5, 0, 0, 0, 0, 10])
    T = transform_from_params([1, 2, 0, 0, 0, 3])
    np.testing.assert_allclose(residual_params(Tg, T), params_from_transform(compose(Tg, invert(T))))


def test_weighted_norm():
    assert param_norm([1, 0, 0, 2, 0, 0], weights=[1, 1, 1, 4, 4, 4]) == pytest.approx(np.sqrt(17))


def test_gimbal_lock_raises():
    with pytest.raises(GimbalLock):
        params_from_transform(transform_from_params([0, 0, 0, 10, 90, 0]))


def test_matrix_is_read_only():
    T = identity()
    with pytest.raises(ValueError):
        T.matrix[0, 0] = 2.0


def test_rigid_rejects_bad_shape():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3))


def test_affine_degenerate():
    m = np.eye(4)
    m[0, 0] = 0.0
    with pytest.raises(Degenerate):
        AffineTransform(m)


def test_random_affine_is_seeded_and_bounded():
    a, b = random_affine(0.25, 7), random_affine(0.25, 7)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert np.all(np.abs(a.matrix[:3, :3] - np.eye(3)) <= 0.25)
    np.testing.assert_array_equal(a.matrix[:3, 3], 0.0)


def test_random_affine_negative_range():
    with pytest.raises(ValueError):
        random_affine(-1.0)


def test_json_round_trip():
    T = transform_from_params([1.5, -2, 3, 4, -5, 6])
    d = json.loads(json.dumps(transform_to_dict(T)))
    np.testing.assert_allclose(transform_from_dict(d).matrix, T.matrix, atol=1e-12)
    np.testing.assert_allclose(transform_from_dict({"matrix": d["matrix"]}).matrix, T.matrix)


def test_planar_params_layout():
    np.testing.assert_array_equal(planar_params([1, 2, 3]), [1, 2, 0, 0, 0, 3])
