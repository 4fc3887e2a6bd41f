import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vreg.env import MdpConfig
from vreg.geometry import compose, distance, invert, transform_from_params
from vreg.hierarchy import (EmptySelection, HierarchyConfig, attention_center, hierarchical_register,
                            roi_observer, saliency_map)
from vreg.nn import Network, ShapeMismatch, desk_architecture
from vreg.policy import ImageOracle
from vreg.volume import Volume

PLANAR = MdpConfig(dimensionality=2)


def linear_net(shape=(1, 6, 5), arity=3, seed=0):
    arch = {"input": list(shape), "layers": [{"kind": "flatten"}, {"kind": "dense", "out": arity}]}
    return Network(arch, seed, dtype=np.float64)


def test_linear_saliency_is_column_sum():
    net = linear_net()
    obs = Volume(np.random.default_rng(0).normal(size=(6, 5)), (2.0, 2.0, 2.0))
    W = net.layers[1].params["W"]
    omega = saliency_map(net, obs)
    np.testing.assert_allclose(omega.data.ravel(), np.abs(W.sum(axis=0)), rtol=1e-12)
    assert omega.spacing == obs.spacing


def test_saliency_matches_finite_differences():
    net = Network(desk_architecture((1, 8, 8), 6, (2,), (8,)), 2, dtype=np.float64)
    rng = np.random.default_rng(0)
    obs = Volume(rng.normal(size=(8, 8)))
    omega = saliency_map(net, obs).data.ravel()
    x = obs.data.copy()
    for i in rng.choice(64, 8, replace=False):
        up, down = x.copy(), x.copy()
        up.flat[i] += 1e-6
        down.flat[i] -= 1e-6
        fd = (net.forward(up[None]).sum() - net.forward(down[None]).sum()) / 2e-6
        assert abs(abs(fd) - omega[i]) <= 1e-5 * max(1.0, abs(fd))


def test_saliency_zero_weights_and_bias_invariance():
    net = linear_net()
    obs = Volume(np.ones((6, 5)))
    ref = saliency_map(net, obs).data.copy()
    net.layers[1].params["b"][:] += 100.0
    np.testing.assert_array_equal(saliency_map(net, obs).data, ref)
    net.set_all(0.0)
    omega = saliency_map(net, obs)
    assert np.all(omega.data == 0)
    with pytest.raises(EmptySelection):
        attention_center(omega)


def test_saliency_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        saliency_map(linear_net(), Volume(np.zeros((5, 6))))


def test_center_of_single_voxel():
    d = np.zeros((10, 10))
    d[3, 7] = 2.0
    vol = Volume(d, (2.0, 3.0, 1.0), (1.0, -1.0, 0.0))
    np.testing.assert_allclose(attention_center(vol, 99), [1 + 7 * 2, -1 + 3 * 3, 0])


def test_center_of_two_equal_voxels_is_midpoint():
    d = np.zeros((4, 20, 20))
    d[1, 2, 3] = d[3, 10, 15] = 1.0
    np.testing.assert_allclose(attention_center(Volume(d), 99), [9, 6, 2])


def test_center_of_gaussian_blob():
    z, y, x = np.mgrid[0:16, 0:16, 0:16]
    d = np.exp(-((x - 9.0) ** 2 + (y - 5.0) ** 2 + (z - 7.0) ** 2) / 4.0)
    np.testing.assert_allclose(attention_center(Volume(d, (2.0, 2.0, 2.0)), 95), [18, 10, 14], atol=1e-9)


def test_center_rejects_bad_input():
    with pytest.raises(EmptySelection):
        attention_center(Volume(np.full((4, 4), 3.0)))
    with pytest.raises(ValueError):
        attention_center(Volume(np.eye(4)), 100)
    with pytest.raises(ValueError):
        attention_center(Volume(-np.eye(4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 11), st.integers(0, 11), st.floats(-50, 50), st.floats(-50, 50))
def test_center_is_translation_equivariant(i, j, ox, oy):
    d = np.zeros((12, 12))
    d[j, i] = 1.0
    d[(j + 3) % 12, (i + 5) % 12] = 0.5
    a = attention_center(Volume(d, (1.5, 1.5, 1.0)), 99)
    b = attention_center(Volume(d, (1.5, 1.5, 1.0), (ox, oy, 0.0)), 99)
    np.testing.assert_allclose(b - a, [ox, oy, 0], atol=1e-9)


def test_roi_observer_uses_full_floating_volume(simple2d):
    from vreg.volume import crop_roi, difference_image

    Ir, If = simple2d.reference, simple2d.floating
    roi = crop_roi(Ir, Ir.center, (16, 16, 1))
    T = simple2d.ground_truth
    full = difference_image(Ir, If, T)
    obs = roi_observer(roi, If)(T)
    # the ROI view equals the corresponding window of the full-grid observation
    i0 = int(round(roi.physical_to_index(roi.origin)[0] + (roi.origin[0] - Ir.origin[0]) / Ir.spacing[0]))
    j0 = int(round((roi.origin[1] - Ir.origin[1]) / Ir.spacing[1]))
    np.testing.assert_allclose(obs.data, full.data[:, j0:j0 + 16, i0:i0 + 16], atol=1e-5)


def test_config_validation():
    with pytest.raises(ValueError):
        HierarchyConfig(n1=0)
    with pytest.raises(ValueError):
        HierarchyConfig(n2=-1)
    with pytest.raises(ValueError):
        HierarchyConfig(factor=0)


def start_from(v, Tg):
    return compose(invert(transform_from_params(v)), Tg)


def test_oracle_two_stage(spine2d):
    Tg = spine2d.ground_truth
    oracle = ImageOracle(Tg, PLANAR)
    # past the truth the greedy policy steps off and back, so an even step budget ends on it
    cfg = HierarchyConfig(n1=22, n2=4, factor=2, roi_size=(32, 32, 1), mdp=PLANAR)
    T, report = hierarchical_register(spine2d.reference, spine2d.floating, start_from([20, 0, 0, 0, 0, 0], Tg),
                                      oracle, oracle, cfg, Tg=Tg)
    assert distance(Tg, T) < 1e-9
    assert report["coarse"]["D_before"] == pytest.approx(20.0)
    assert report["coarse"]["D_after"] < 0.5
    assert len(report["coarse"]["trajectory"]) == 22 and len(report["fine"]["trajectory"]) == 4
    assert report["roi"]["size_vox"] == [32, 32, 1]
    json.dumps(report)


def test_fine_stage_skipped(spine2d):
    Tg = spine2d.ground_truth
    oracle = ImageOracle(Tg, PLANAR)
    cfg = HierarchyConfig(n1=3, n2=0, mdp=PLANAR)
    T0 = start_from([3, 0, 0, 0, 0, 0], Tg)
    T, report = hierarchical_register(spine2d.reference, spine2d.floating, T0, oracle, oracle, cfg, Tg=Tg)
    assert report["fine"]["trajectory"] == []
    assert report["fine"]["D_after"] == report["coarse"]["D_after"]


def test_network_stages_and_default_roi(spine2d):
    coarse = Network(desk_architecture((1, 32, 32), 6, (2,), (8,)), 0)
    fine = Network(desk_architecture((1, 16, 16), 6, (2,), (8,)), 1)
    cfg = HierarchyConfig(n1=2, n2=2, factor=2, mdp=PLANAR)
    T, report = hierarchical_register(spine2d.reference, spine2d.floating, spine2d.ground_truth, coarse, fine,
                                      cfg)
    assert report["roi"]["size_vox"] == [16, 16, 1]
    assert len(report["roi"]["center_mm"]) == 3
    assert "D_after" not in report["fine"]


def test_clamp_center_keeps_roi_inside():
    from vreg.hierarchy import clamp_center
    from vreg.volume import crop_roi

    vol = Volume(np.arange(64 * 64, dtype=float).reshape(64, 64), (2.0, 2.0, 2.0))
    np.testing.assert_allclose(clamp_center(vol, [-100, 200, 0], (32, 32, 1)), [32, 96, 0])
    np.testing.assert_allclose(clamp_center(vol, [60, 60, 0], (32, 32, 1)), [60, 60, 0])
    # axes where the ROI is larger than the volume are left alone
    np.testing.assert_allclose(clamp_center(vol, [0, 0, 0], (80, 32, 1)), [0, 32, 0])
    for c in ([-100, -100, 0], [300, 5, 0], [64, 64, 0]):
        roi = crop_roi(vol, clamp_center(vol, c, (32, 32, 1)), (32, 32, 1))
        assert np.all(roi.data > 0) or roi.origin == (0.0, 0.0, 0.0)
