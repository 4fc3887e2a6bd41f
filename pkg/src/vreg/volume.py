"""Scalar image grids and the operations the registration pipeline needs.

Arrays are stored ``(nz, ny, nx)`` in C order, so x varies fastest.  A 2-D
image is a volume with ``nz == 1``.  Physical coordinates (mm) of voxel
``(i, j, k)`` are ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import AffineTransform, RigidTransform, invert


class FileFormatError(ValueError):
    """A file does not follow the expected binary layout."""


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3:
            raise ValueError(f"volume data must be 2-D or 3-D, got shape {d.shape}")
        if d.dtype not in (np.float32, np.float64):
            d = d.astype(np.float64)
        d = np.ascontiguousarray(d)
        if not np.all(np.isfinite(d)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have three entries")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def ndim(self) -> int:
        return 2 if self.data.shape[0] == 1 else 3

    @property
    def center(self) -> np.ndarray:
        return self.index_to_physical((np.array(self.dims) - 1) / 2.0)

    def index_to_physical(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def physical_to_index(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def grid_affine(self) -> np.ndarray:
        """4x4 map from voxel index ``(i, j, k, 1)`` to physical mm."""
        m = np.diag([*self.spacing, 1.0])
        m[:3, 3] = self.origin
        return m

    def value_at(self, p) -> float:
        """Linearly interpolated value at one physical point (0 outside)."""
        idx = self.physical_to_index(p)
        A = np.zeros((3, 4))
        A[:, 3] = idx
        out, _ = kernels.resample_affine(self._as_f64(), A, 1, 1, 1, 0.0)
        return float(out[0, 0, 0])

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.origin)

    def _as_f64(self):
        return np.ascontiguousarray(self.data, dtype=np.float64)

    def same_grid(self, other: "Volume") -> bool:
        return (self.data.shape == other.data.shape and self.spacing == other.spacing
                and self.origin == other.origin)


def centered_volume(data, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Volume whose grid centre sits at the physical origin (z=0 for 2-D)."""
    d = np.asarray(data)
    if d.ndim == 2:
        d = d[None]
    nz, ny, nx = d.shape
    sp = np.asarray(spacing, dtype=np.float64)
    origin = -(np.array([nx, ny, nz]) - 1) / 2.0 * sp
    return Volume(d, tuple(sp), tuple(origin))


def _index_map(src: Volume, dst: Volume, matrix: np.ndarray) -> np.ndarray:
    """3x4 index-space map: dst voxel -> src voxel through physical ``matrix``."""
    src_inv = np.diag([1.0 / s for s in src.spacing] + [1.0])
    src_inv[:3, 3] = -np.asarray(src.origin) / np.asarray(src.spacing)
    return (src_inv @ matrix @ dst.grid_affine())[:3]


def resample_matrix(vol: Volume, inverse_matrix: np.ndarray, grid: Volume | None = None,
                    fill: float = 0.0, return_mask: bool = False):
    """Sample ``vol`` at ``inverse_matrix @ p`` for every point ``p`` of ``grid``."""
    grid = vol if grid is None else grid
    A = _index_map(vol, grid, np.asarray(inverse_matrix, dtype=np.float64))
    nx, ny, nz = grid.dims
    out, mask = kernels.resample_affine(vol._as_f64(), np.ascontiguousarray(A), nx, ny, nz, fill)
    res = Volume(out.astype(vol.data.dtype, copy=False), grid.spacing, grid.origin)
    if return_mask:
        return res, mask.astype(bool)
    return res


def resample(vol: Volume, T: RigidTransform, grid: Volume | None = None, fill: float = 0.0,
             return_mask: bool = False):
    """Pull-back resampling of ``vol`` under ``T``.

    The output voxel at physical point ``p`` takes the linearly interpolated
    value of ``vol`` at ``T^-1 p``; points outside the input domain get
    ``fill``.  The output lives on ``grid`` (default: the input grid).
    With ``return_mask`` the boolean in-domain mask is returned as well.
    """
    return resample_matrix(vol, invert(T).matrix, grid, fill, return_mask)


def warp_affine(vol: Volume, TA: AffineTransform, fill: float = 0.0) -> Volume:
    """Pull-back resampling under a general affine map, on the input grid."""
    return resample_matrix(vol, np.linalg.inv(TA.matrix), None, fill)


def difference_image(Ir: Volume, If: Volume, T: RigidTransform) -> Volume:
    """Observation ``Ir - T o If`` on the reference grid."""
    if Ir.data.shape != If.data.shape or Ir.spacing != If.spacing:
        raise DimMismatch(f"reference {Ir.dims}/{Ir.spacing} vs floating {If.dims}/{If.spacing}")
    moved = resample(If, T, grid=Ir)
    return Ir.with_data(Ir.data - moved.data)


def downsample(vol: Volume, factor: int) -> Volume:
    """Box-average pooling by ``factor`` along each axis (x, y, and z when 3-D).

    Trailing partial blocks are averaged over the voxels they actually
    contain.  The origin moves to the physical centre of the first block so
    physical coordinates keep their meaning.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return vol
    fz = 1 if vol.ndim == 2 else factor
    fac = np.array([factor, factor, fz])
    d = vol.data.astype(np.float64)
    for axis, f in zip((2, 1, 0), fac):
        n = d.shape[axis]
        starts = np.arange(0, n, f)
        sums = np.add.reduceat(d, starts, axis=axis)
        counts = np.diff(np.append(starts, n)).astype(np.float64)
        shape = [1, 1, 1]
        shape[axis] = len(starts)
        d = sums / counts.reshape(shape)
    sp = np.asarray(vol.spacing)
    origin = np.asarray(vol.origin) + (fac - 1) / 2.0 * sp
    return Volume(d.astype(vol.data.dtype), tuple(sp * fac), tuple(origin))


def crop_roi(vol: Volume, center, size) -> Volume:
    """Axis-aligned crop of ``size`` voxels (x, y, z) centred at the voxel nearest ``center``.

    Regions outside the parent volume are zero-padded; the origin is updated
    so each voxel keeps its physical position.
    """
    size = np.asarray(size, dtype=int).reshape(-1)
    if size.size == 2:
        size = np.append(size, 1)
    c = np.floor(vol.physical_to_index(center) + 0.5).astype(int)
    if vol.ndim == 2:
        c[2] = 0
    start = c - size // 2
    nx, ny, nz = vol.dims
    out = np.zeros((size[2], size[1], size[0]), dtype=vol.data.dtype)
    lo = np.maximum(start, 0)
    hi = np.minimum(start + size, [nx, ny, nz])
    if np.all(hi > lo):
        out[lo[2] - start[2]:hi[2] - start[2], lo[1] - start[1]:hi[1] - start[1],
            lo[0] - start[0]:hi[0] - start[0]] = vol.data[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
    origin = vol.index_to_physical(start)
    return Volume(out, vol.spacing, tuple(origin))


# -- file formats ---------------------------------------------------------

VOLUME_MAGIC = b"VREG"
VOLUME_VERSION = 1
_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sII3I3d3d")


def write_volume(path, vol: Volume) -> None:
    nx, ny, nz = vol.dims
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, _DTYPE_F32, nx, ny, nz,
                          *vol.spacing, *vol.origin)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FileFormatError(f"{path}: truncated header")
    magic, version, dtype, nx, ny, nz, *rest = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION or dtype != _DTYPE_F32:
        raise FileFormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    n = nx * ny * nz
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != n:
        raise FileFormatError(f"{path}: expected {n} voxels, found {body.size}")
    return Volume(body.reshape(nz, ny, nx).astype(np.float32), tuple(rest[:3]), tuple(rest[3:]))


def write_landmarks(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x_mm", "y_mm", "z_mm"])
        for i, p in enumerate(np.asarray(points, dtype=np.float64)):
            w.writerow([i, *(repr(float(x)) for x in p)])


def read_landmarks(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x_mm"]), float(r["y_mm"]), float(r["z_mm"])] for r in rows])
