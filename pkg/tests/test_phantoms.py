import numpy as np
import pytest

from vreg.phantoms import KINDS, PhantomSpec, TriangleMesh, UnknownSpec, ellipsoid_mesh, generate_phantom


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("dims", [(32, 32, 1), (16, 16, 16)])
def test_generation_contract(kind, dims):
    p = generate_phantom(PhantomSpec(kind, dims, (4.0, 4.0, 4.0)), 3)
    for v in (p.reference, p.floating):
        assert v.dims == dims
        assert v.data.dtype == np.float32
        assert 0.0 <= v.data.min() and v.data.max() <= 1.0
    assert len(p.landmarks) >= 8
    np.testing.assert_array_equal(p.ground_truth.matrix, np.eye(4))


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic_per_seed(kind):
    spec = PhantomSpec(kind, (32, 32, 1), (4.0, 4.0, 4.0))
    a, b, c = generate_phantom(spec, 5), generate_phantom(spec, 5), generate_phantom(spec, 6)
    np.testing.assert_array_equal(a.reference.data, b.reference.data)
    np.testing.assert_array_equal(a.floating.data, b.floating.data)
    assert not np.array_equal(a.floating.data, c.floating.data) or not np.array_equal(a.reference.data,
                                                                                      c.reference.data)


def test_frozen_intensity_sums():
    # regression values for the 32x32, 4 mm, seed-0 phantoms
    expected = {"simple": (133.12310791015625, 106.49848937988281),
                "spine-like": (234.0205078125, 119.57420349121094),
                "cardiac-like": (107.56875610351562, 171.75538635253906)}
    for kind, (r, f) in expected.items():
        p = generate_phantom(PhantomSpec(kind, (32, 32, 1), (4.0, 4.0, 4.0)), 0)
        assert float(p.reference.data.sum()) == pytest.approx(r, rel=1e-5)
        assert float(p.floating.data.sum()) == pytest.approx(f, rel=1e-5)


def test_spine_is_periodic_along_its_axis():
    spec = PhantomSpec("spine-like", (64, 64, 1), (2.0, 2.0, 2.0))
    p = generate_phantom(spec, 0)
    # the floating image covers a limited field of view
    assert (p.floating.data > 0.05).sum() < (p.reference.data > 0.05).sum()
    assert p.period_mm == spec.period_mm


def test_cardiac_3d_has_mesh():
    p = generate_phantom(PhantomSpec("cardiac-like", (16, 16, 16), (4.0, 4.0, 4.0)), 0)
    assert p.mesh is not None and len(p.mesh.triangles) > 0


def test_unknown_kind():
    with pytest.raises(UnknownSpec):
        generate_phantom(PhantomSpec("liver"), 0)
    with pytest.raises(UnknownSpec):
        generate_phantom("nope", 0)


def test_mesh_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 5]])
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]])


def test_ellipsoid_mesh_vertices_on_surface():
    m = ellipsoid_mesh((0, 0, 0), (10.0, 20.0, 30.0))
    v = m.vertices
    np.testing.assert_allclose((v[:, 0] / 10) ** 2 + (v[:, 1] / 20) ** 2 + (v[:, 2] / 30) ** 2, 1.0, atol=1e-12)
