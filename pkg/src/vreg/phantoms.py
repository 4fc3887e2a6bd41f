"""Synthetic reference/floating pairs standing in for CT/CBCT data.

Three archetypes are available:

``simple``
    One smooth ellipsoid (ellipse in 2-D); the floating image is a
    gain-remapped copy.
``spine-like``
    A row of identical, equally spaced "vertebrae" along the head-foot axis
    (z in 3-D, y in 2-D) plus distractor objects.  The floating image only
    covers a few periods, so shifting it by one period is almost as good a
    match as the truth.
``cardiac-like``
    A smooth ellipsoid with a bright chamber; the floating image has reduced
    contrast and additive streak artifacts.  An epicardium-like surface mesh
    is returned in 3-D.

All pairs are aligned at the identity; intensities lie in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, identity
from .volume import Volume, centered_volume

KINDS = ("simple", "spine-like", "cardiac-like")


class UnknownSpec(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "simple"
    dims: tuple = (64, 64, 1)
    spacing: tuple = (2.0, 2.0, 2.0)
    # spine-like only
    period_mm: float = 24.0
    fov_periods: float = 3.0


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if t.size:
            area2 = np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)
            if area2.min() <= 2e-9:
                raise ValueError("mesh contains a degenerate (zero-area) triangle")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def transformed(self, T) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles)


@dataclass(frozen=True, eq=False)
class PhantomPair:
    kind: str
    reference: Volume
    floating: Volume
    landmarks: np.ndarray
    ground_truth: RigidTransform = field(default_factory=identity)
    mesh: TriangleMesh | None = None
    period_mm: float | None = None


def _grid_points(vol: Volume):
    nx, ny, nz = vol.dims
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    o, s = vol.origin, vol.spacing
    return o[0] + i * s[0], o[1] + j * s[1], o[2] + k * s[2]


def _ellipsoid(x, y, z, center, axes, edge, angle=0.0, planar=False):
    """Smooth indicator of an ellipsoid rotated by ``angle`` (rad) about z."""
    dx, dy, dz = x - center[0], y - center[1], z - center[2]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    w = -s * dx + c * dy
    r2 = (u / axes[0]) ** 2 + (w / axes[1]) ** 2
    if not planar:
        r2 = r2 + (dz / axes[2]) ** 2
    r = np.sqrt(r2)
    k = min(axes[:2] if planar else axes) / edge
    return 0.5 * (1.0 - np.tanh((r - 1.0) * k / 2.0))


def _ellipsoid_surface(center, axes, n, angle=0.0, planar=False):
    """``n`` points on the ellipsoid surface (on the ellipse when planar)."""
    if planar:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        u = axes[0] * np.cos(t)
        w = axes[1] * np.sin(t)
        z = np.zeros(n)
    else:
        g = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * g / n)
        th = np.pi * (1 + 5 ** 0.5) * g
        u = axes[0] * np.cos(th) * np.sin(phi)
        w = axes[1] * np.sin(th) * np.sin(phi)
        z = axes[2] * np.cos(phi)
    c, s = np.cos(angle), np.sin(angle)
    x = c * u - s * w + center[0]
    y = s * u + c * w + center[1]
    return np.column_stack([x, y, z + center[2]])


def _inside(vol: Volume, pts):
    idx = vol.physical_to_index(pts)
    hi = np.array(vol.dims) - 1
    return np.all((idx >= 0) & (idx <= hi), axis=1)


def _simple(spec, rng):
    ref = centered_volume(np.zeros(spec.dims[::-1]), spec.spacing)
    planar = ref.ndim == 2
    x, y, z = _grid_points(ref)
    fov = np.array(ref.dims) * np.array(ref.spacing)
    axes = np.array([rng.uniform(0.20, 0.26), rng.uniform(0.11, 0.15), rng.uniform(0.11, 0.15)]) * fov.max()
    center = np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), 0.0 if planar else rng.uniform(-4, 4)])
    angle = rng.uniform(-0.3, 0.3)
    edge = 1.5 * max(spec.spacing[:2])
    f = _ellipsoid(x, y, z, center, axes, edge, angle, planar)
    lm = _ellipsoid_surface(center, axes, 12 if planar else 32, angle=angle, planar=planar)
    return PhantomPair("simple", ref.with_data(f), ref.with_data(0.8 * f), lm[_inside(ref, lm)])


def _spine(spec, rng):
    ref = centered_volume(np.zeros(spec.dims[::-1]), spec.spacing)
    planar = ref.ndim == 2
    x, y, z = _grid_points(ref)
    ax = 1 if planar else 2  # head-foot axis
    coords = [x, y, z]
    along = coords[ax]
    P = float(spec.period_mm)
    edge = 1.0 * max(spec.spacing)
    extent = np.array(ref.dims) * np.array(ref.spacing)
    half = extent[ax] / 2.0
    phase = rng.uniform(-P / 4, P / 4)
    centers_along = np.arange(-np.ceil(half / P) - 1, np.ceil(half / P) + 2) * P + phase

    def place(lat0, ap0, along0):
        c = np.zeros(3)
        c[0] = lat0
        c[ax] = along0
        if not planar:
            c[1] = ap0
        return c

    def axes3(lat_a, ap_a, along_a):
        a = np.zeros(3)
        a[0] = lat_a
        a[ax] = along_a
        if not planar:
            a[1] = ap_a
        else:
            a[2] = 1.0
        return a

    body_axes = axes3(0.11 * extent[0], 0.09 * extent[0], 0.33 * P)
    proc_axes = axes3(0.04 * extent[0], 0.08 * extent[0], 0.22 * P)
    f = np.zeros_like(x)
    landmarks = []
    for c_al in centers_along:
        body_c = place(0.0, 0.05 * extent[0], c_al)
        proc_c = place(0.0, -0.12 * extent[0], c_al) if not planar else place(0.16 * extent[0], 0, c_al)
        f = np.maximum(f, _ellipsoid(x, y, z, body_c, body_axes, edge, planar=planar))
        f = np.maximum(f, 0.7 * _ellipsoid(x, y, z, proc_c, proc_axes, edge, planar=planar))
        landmarks.append(_ellipsoid_surface(body_c, body_axes, 8 if planar else 16, planar=planar))
    # distractors: a kidney-like blob and a dark stent-like bar, not periodic
    kid_along = rng.uniform(-0.6, 0.6) * P
    kid_c = place(-0.3 * extent[0], 0.0, kid_along)
    f = np.maximum(f, 0.5 * _ellipsoid(x, y, z, kid_c, axes3(0.08 * extent[0], 0.06 * extent[0], 0.45 * P),
                                       edge, planar=planar))
    body = 0.15 * _ellipsoid(x, y, z, np.zeros(3), axes3(0.42 * extent[0], 0.3 * extent[0], 10 * extent[ax]),
                             edge, planar=planar)
    stent = _ellipsoid(x, y, z, place(0.28 * extent[0], 0.0, rng.uniform(-0.5, 0.5) * P),
                       axes3(0.03 * extent[0], 0.03 * extent[0], 0.5 * P), edge, planar=planar)
    f = np.clip(np.maximum(f, body) - 0.12 * stent, 0.0, 1.0)

    fov_half = spec.fov_periods * P / 2.0
    fov_center = rng.uniform(-0.25, 0.25) * P
    window = 0.5 * (1 - np.tanh((np.abs(along - fov_center) - fov_half) / edge))
    noise = rng.normal(0.0, 0.02, size=f.shape)
    flo = np.clip(window * (0.9 * f + noise), 0.0, 1.0)
    lm = np.concatenate(landmarks)
    keep = _inside(ref, lm) & (np.abs(lm[:, ax] - fov_center) < fov_half - 0.5 * P / 2)
    return PhantomPair("spine-like", ref.with_data(f), ref.with_data(flo), lm[keep], period_mm=P)


def ellipsoid_mesh(center, axes, n_lat=12, n_lon=24) -> TriangleMesh:
    """UV-sphere triangulation of an ellipsoid surface."""
    verts = [np.array([0, 0, axes[2]])]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            th = 2 * np.pi * j / n_lon
            verts.append(np.array([axes[0] * np.sin(phi) * np.cos(th),
                                   axes[1] * np.sin(phi) * np.sin(th),
                                   axes[2] * np.cos(phi)]))
    verts.append(np.array([0, 0, -axes[2]]))
    verts = np.array(verts) + np.asarray(center)
    tris = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, b))
            tris.append((b, c, d))
    last = len(verts) - 1
    for j in range(n_lon):
        tris.append((last, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return TriangleMesh(verts, np.array(tris))


def _cardiac(spec, rng):
    ref = centered_volume(np.zeros(spec.dims[::-1]), spec.spacing)
    planar = ref.ndim == 2
    x, y, z = _grid_points(ref)
    extent = np.array(ref.dims) * np.array(ref.spacing)
    axes = np.array([0.24, 0.19, 0.21]) * extent.max() * rng.uniform(0.9, 1.1, size=3)
    center = np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), 0.0 if planar else rng.uniform(-4, 4)])
    angle = rng.uniform(-0.4, 0.4)
    edge = 1.5 * max(spec.spacing)
    heart = _ellipsoid(x, y, z, center, axes, edge, angle, planar)
    chamber_c = center + np.array([0.25 * axes[0], 0.1 * axes[1], 0.0])
    chamber = _ellipsoid(x, y, z, chamber_c, 0.4 * axes, edge, angle, planar)
    f = np.clip(0.55 * heart + 0.45 * chamber, 0.0, 1.0)
    # floating: weaker soft-tissue contrast, streaks radiating from a bright spot
    n_streaks = 6
    flo = 0.35 * heart + 0.35 * chamber
    src = chamber_c
    for _ in range(n_streaks):
        th = rng.uniform(0, np.pi)
        d = np.abs(-np.sin(th) * (x - src[0]) + np.cos(th) * (y - src[1]))
        flo = flo + rng.choice([-1.0, 1.0]) * 0.12 * np.exp(-0.5 * (d / (1.5 * spec.spacing[0])) ** 2)
    flo = np.clip(flo + 0.1, 0.0, 1.0)
    lm = _ellipsoid_surface(center, axes, 12 if planar else 32, angle=angle, planar=planar)
    mesh = None
    if not planar:
        m = ellipsoid_mesh(np.zeros(3), axes)
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        mesh = TriangleMesh(m.vertices @ R.T + center, m.triangles)
    return PhantomPair("cardiac-like", ref.with_data(f), ref.with_data(flo), lm[_inside(ref, lm)], mesh=mesh)


_BUILDERS = {"simple": _simple, "spine-like": _spine, "cardiac-like": _cardiac}


def generate_phantom(spec: PhantomSpec | str, seed: int = 0) -> PhantomPair:
    """Build a deterministic reference/floating pair aligned at the identity."""
    if isinstance(spec, str):
        spec = PhantomSpec(kind=spec)
    if spec.kind not in _BUILDERS:
        raise UnknownSpec(f"unknown phantom kind {spec.kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([int(seed), KINDS.index(spec.kind)])
    pair = _BUILDERS[spec.kind](spec, rng)
    ref = pair.reference.with_data(pair.reference.data.astype(np.float32))
    flo = pair.floating.with_data(pair.floating.data.astype(np.float32))
    return PhantomPair(pair.kind, ref, flo, pair.landmarks, pair.ground_truth, pair.mesh, pair.period_mm)
