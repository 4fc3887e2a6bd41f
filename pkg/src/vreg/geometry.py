"""Rigid and affine transform algebra.

Transforms are 4x4 homogeneous matrices acting on column vectors
``p = [x, y, z, 1]``.  A rigid transform is parameterized by six numbers
``(tx, ty, tz, rx, ry, rz)`` with translations in mm and rotations in
degrees, composed as ``Trans(t) @ Rx @ Ry @ Rz``.

The distance between two transforms is the (optionally weighted) L2 norm of
the parameters of ``Tg @ inv(T)``; millimetres and degrees are mixed with unit
weights by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES = ("tx", "ty", "tz", "rx", "ry", "rz")
# indices into the 6-vector used by the 2-D variant (tx, ty, theta)
PLANAR_AXES = (0, 1, 5)

_GIMBAL_TOL_DEG = 1e-6


class GimbalLock(ValueError):
    """Raised when the y rotation is too close to +-90 degrees to extract angles."""


class Degenerate(ValueError):
    pass


def _rx(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Homogeneous rigid transform.

    Construct with :func:`transform_from_params` or from a 4x4 matrix.  The
    matrix is copied and made read-only so instances can be shared freely.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def params(self) -> np.ndarray:
        return params_from_transform(self)

    def apply(self, points) -> np.ndarray:
        """Map an ``(n, 3)`` array (or a single point) of physical coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self):
        try:
            p = np.round(self.params, 6).tolist()
        except GimbalLock:
            p = "gimbal-locked"
        return f"RigidTransform(params={p})"

    def to_json(self, with_matrix: bool = True) -> str:
        return json.dumps(transform_to_dict(self, with_matrix))


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Linear co-deformation ``I + C`` with zero translation."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if abs(np.linalg.det(m[:3, :3])) <= 1e-6:
            raise Degenerate("affine transform is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def identity() -> RigidTransform:
    return RigidTransform(np.eye(4))


def transform_from_params(v) -> RigidTransform:
    """Build the rigid transform for ``v = (tx, ty, tz, rx, ry, rz)``."""
    tx, ty, tz, ax, ay, az = (float(x) for x in np.asarray(v, dtype=np.float64).reshape(6))
    m = np.eye(4)
    m[:3, :3] = _rx(ax) @ _ry(ay) @ _rz(az)
    m[:3, 3] = (tx, ty, tz)
    return RigidTransform(m)


def params_from_transform(T: RigidTransform) -> np.ndarray:
    """Inverse of :func:`transform_from_params` with ``ry`` in (-90, 90)."""
    R = T.matrix[:3, :3]
    ry = np.degrees(np.arctan2(R[0, 2], np.hypot(R[0, 0], R[0, 1])))
    if 90.0 - abs(ry) < _GIMBAL_TOL_DEG:
        raise GimbalLock(f"ry={ry:.9f} deg is at a singular configuration")
    rx = np.degrees(np.arctan2(-R[1, 2], R[2, 2]))
    rz = np.degrees(np.arctan2(-R[0, 1], R[0, 0]))
    tx, ty, tz = T.matrix[:3, 3]
    return np.array([tx, ty, tz, rx, ry, rz])


def translate(tx=0.0, ty=0.0, tz=0.0) -> RigidTransform:
    return transform_from_params((tx, ty, tz, 0, 0, 0))


def rotate(rx=0.0, ry=0.0, rz=0.0) -> RigidTransform:
    return transform_from_params((0, 0, 0, rx, ry, rz))


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """``A o B``: apply ``B`` first, then ``A``."""
    return RigidTransform(A.matrix @ B.matrix)


def invert(T: RigidTransform) -> RigidTransform:
    R = T.rotation
    m = np.eye(4)
    m[:3, :3] = R.T
    m[:3, 3] = -R.T @ T.translation
    return RigidTransform(m)


def residual_params(Tg: RigidTransform, T: RigidTransform) -> np.ndarray:
    """Parameters of ``Tg o T^-1``, the residual the agent still has to cover."""
    return params_from_transform(compose(Tg, invert(T)))


def param_norm(v, weights=None) -> float:
    v = np.asarray(v, dtype=np.float64)
    if weights is None:
        return float(np.sqrt(np.dot(v, v)))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.sqrt(np.dot(w * v, v)))


def distance(Tg: RigidTransform, T: RigidTransform, weights=None) -> float:
    """L2 norm of the parameters of ``Tg o T^-1``.

    ``weights`` scales the squared per-parameter terms; ``None`` means unit
    weights, i.e. 1 mm counts the same as 1 degree.
    """
    return param_norm(residual_params(Tg, T), weights)


def random_affine(shear_range: float = 0.25, seed=None) -> AffineTransform:
    """Draw ``I + C`` with ``C_ij ~ U[-shear_range, shear_range]``.

    Near-singular draws are rejected and redrawn; :class:`Degenerate` is
    raised after 100 failed attempts.
    """
    if shear_range < 0:
        raise ValueError("shear_range must be non-negative")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        m = np.eye(4)
        m[:3, :3] += rng.uniform(-shear_range, shear_range, size=(3, 3))
        if abs(np.linalg.det(m[:3, :3])) > 1e-6:
            return AffineTransform(m)
    raise Degenerate(f"no nonsingular draw in 100 attempts (shear_range={shear_range})")


def transform_to_dict(T: RigidTransform, with_matrix: bool = True) -> dict:
    out = {"params": [float(x) for x in params_from_transform(T)]}
    if with_matrix:
        out["matrix"] = [float(x) for x in T.matrix.ravel()]
    return out


def transform_from_dict(d: dict) -> RigidTransform:
    if "params" in d:
        return transform_from_params(d["params"])
    return RigidTransform(np.asarray(d["matrix"], dtype=np.float64).reshape(4, 4))


def planar_params(theta_params) -> np.ndarray:
    """Embed a 2-D ``(tx, ty, theta)`` vector into the 6-parameter layout."""
    v = np.zeros(6)
    v[list(PLANAR_AXES)] = np.asarray(theta_params, dtype=np.float64)
    return v
