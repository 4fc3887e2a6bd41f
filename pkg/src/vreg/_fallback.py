"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Semantics match the compiled versions exactly (same snapping, clamping and
binning rules); results agree to rounding.
"""

import numpy as np

_SNAP = 1e-9


def _snap(c):
    r = np.floor(c + 0.5)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def resample_affine(data, A, nx, ny, nz, fill=0.0):
    data = np.ascontiguousarray(data, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    inz, iny, inx = data.shape
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cx = _snap(A[0, 0] * i + (A[0, 1] * j + A[0, 2] * k + A[0, 3]))
    cy = _snap(A[1, 0] * i + (A[1, 1] * j + A[1, 2] * k + A[1, 3]))
    cz = _snap(A[2, 0] * i + (A[2, 1] * j + A[2, 2] * k + A[2, 3]))
    inside = ((cx >= 0) & (cy >= 0) & (cz >= 0)
              & (cx <= inx - 1) & (cy <= iny - 1) & (cz <= inz - 1))

    def corner(c, n):
        c0 = np.floor(np.where(inside, c, 0)).astype(np.intp)
        c0 = np.minimum(c0, max(n - 2, 0))
        f = np.where(inside, c, 0) - c0
        c1 = c0 + 1 if n > 1 else c0
        return c0, c1, f

    x0, x1, fx = corner(cx, inx)
    y0, y1, fy = corner(cy, iny)
    z0, z1, fz = corner(cz, inz)
    d = data
    v = ((1 - fz) * ((1 - fy) * ((1 - fx) * d[z0, y0, x0] + fx * d[z0, y0, x1])
                     + fy * ((1 - fx) * d[z0, y1, x0] + fx * d[z0, y1, x1]))
         + fz * ((1 - fy) * ((1 - fx) * d[z1, y0, x0] + fx * d[z1, y0, x1])
                 + fy * ((1 - fx) * d[z1, y1, x0] + fx * d[z1, y1, x1])))
    out = np.where(inside, v, fill)
    return out, inside.astype(np.uint8)


def joint_histogram(a, b, mask, bins, alo, ahi, blo, bhi):
    m = np.asarray(mask).astype(bool)
    a = np.asarray(a, dtype=np.float64)[m]
    b = np.asarray(b, dtype=np.float64)[m]
    sa = bins / (ahi - alo) if ahi > alo else 0.0
    sb = bins / (bhi - blo) if bhi > blo else 0.0
    ia = np.clip(((a - alo) * sa).astype(np.int64), 0, bins - 1)
    ib = np.clip(((b - blo) * sb).astype(np.int64), 0, bins - 1)
    counts = np.bincount(ia * bins + ib, minlength=bins * bins)
    return counts.reshape(bins, bins).astype(np.int64)
