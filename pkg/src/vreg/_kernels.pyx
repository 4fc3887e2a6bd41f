# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: linear resampling and the joint intensity histogram."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()

cdef double _SNAP = 1e-9


cdef inline double _snap(double c) nogil:
    cdef double r = floor(c + 0.5)
    if fabs(c - r) < _SNAP:
        return r
    return c


def resample_affine(const double[:, :, ::1] data, const double[:, ::1] A,
                    int nx, int ny, int nz, double fill=0.0):
    """Pull-back linear interpolation on an index-space affine map.

    ``A`` is 3x4 and maps output voxel indices ``(i, j, k)`` (x, y, z order)
    to input voxel indices.  Returns ``(values, inside)`` shaped
    ``(nz, ny, nx)``.
    """
    cdef int inz = data.shape[0], iny = data.shape[1], inx = data.shape[2]
    out = np.empty((nz, ny, nx), dtype=np.float64)
    inside = np.zeros((nz, ny, nx), dtype=np.uint8)
    cdef double[:, :, ::1] o = out
    cdef unsigned char[:, :, ::1] m = inside
    cdef int i, j, k, x0, y0, z0, x1, y1, z1
    cdef double cx, cy, cz, fx, fy, fz, v, bx, by, bz
    cdef double a00 = A[0, 0], a01 = A[0, 1], a02 = A[0, 2], a03 = A[0, 3]
    cdef double a10 = A[1, 0], a11 = A[1, 1], a12 = A[1, 2], a13 = A[1, 3]
    cdef double a20 = A[2, 0], a21 = A[2, 1], a22 = A[2, 2], a23 = A[2, 3]
    with nogil:
        for k in range(nz):
            for j in range(ny):
                bx = a01 * j + a02 * k + a03
                by = a11 * j + a12 * k + a13
                bz = a21 * j + a22 * k + a23
                for i in range(nx):
                    cx = _snap(a00 * i + bx)
                    cy = _snap(a10 * i + by)
                    cz = _snap(a20 * i + bz)
                    if (cx < 0 or cy < 0 or cz < 0 or cx > inx - 1
                            or cy > iny - 1 or cz > inz - 1):
                        o[k, j, i] = fill
                        continue
                    x0 = <int>floor(cx)
                    y0 = <int>floor(cy)
                    z0 = <int>floor(cz)
                    if x0 > inx - 2:
                        x0 = inx - 2 if inx > 1 else 0
                    if y0 > iny - 2:
                        y0 = iny - 2 if iny > 1 else 0
                    if z0 > inz - 2:
                        z0 = inz - 2 if inz > 1 else 0
                    fx = cx - x0
                    fy = cy - y0
                    fz = cz - z0
                    x1 = x0 + 1 if inx > 1 else x0
                    y1 = y0 + 1 if iny > 1 else y0
                    z1 = z0 + 1 if inz > 1 else z0
                    v = ((1 - fz) * ((1 - fy) * ((1 - fx) * data[z0, y0, x0] + fx * data[z0, y0, x1])
                                     + fy * ((1 - fx) * data[z0, y1, x0] + fx * data[z0, y1, x1]))
                         + fz * ((1 - fy) * ((1 - fx) * data[z1, y0, x0] + fx * data[z1, y0, x1])
                                 + fy * ((1 - fx) * data[z1, y1, x0] + fx * data[z1, y1, x1])))
                    o[k, j, i] = v
                    m[k, j, i] = 1
    return out, inside


def joint_histogram(const double[::1] a, const double[::1] b,
                    const unsigned char[::1] mask, int bins,
                    double alo, double ahi, double blo, double bhi):
    """Counts of ``(bin(a), bin(b))`` over voxels where ``mask`` is set."""
    counts = np.zeros((bins, bins), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] c = counts
    cdef Py_ssize_t n = a.shape[0], t
    cdef double sa = bins / (ahi - alo) if ahi > alo else 0.0
    cdef double sb = bins / (bhi - blo) if bhi > blo else 0.0
    cdef int ia, ib
    with nogil:
        for t in range(n):
            if not mask[t]:
                continue
            ia = <int>((a[t] - alo) * sa)
            ib = <int>((b[t] - blo) * sb)
            if ia >= bins:
                ia = bins - 1
            elif ia < 0:
                ia = 0
            if ib >= bins:
                ib = bins - 1
            elif ib < 0:
                ib = 0
            c[ia, ib] += 1
    return counts
