"""Classical comparator: histogram mutual information with multi-resolution local ascent.

A stand-in for a conventional intensity-based registration pipeline, not a
reproduction of any particular toolkit's optimizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import PLANAR_AXES, RigidTransform, params_from_transform, transform_from_params
from .volume import DimMismatch, Volume, downsample, resample

BINS = 50


class EmptyOverlap(ValueError):
    """No voxel lies inside both image domains."""


def joint_histogram(a, b, mask=None, bins: int = BINS) -> np.ndarray:
    """``bins x bins`` counts of intensity pairs over ``mask``.

    Bin edges span each image's minimum and maximum inside the mask.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    m = np.ones(a.shape, dtype=np.uint8) if mask is None else np.ascontiguousarray(mask, dtype=np.uint8)
    sel = m.astype(bool)
    if not sel.any():
        raise EmptyOverlap("empty overlap region")
    av, bv = a[sel], b[sel]
    return kernels.joint_histogram(a.ravel(), b.ravel(), m.ravel(), bins, float(av.min()), float(av.max()),
                                   float(bv.min()), float(bv.max()))


def mi_from_histogram(h) -> float:
    """``sum p(a,b) log(p(a,b) / (p(a) p(b)))`` in nats."""
    h = np.asarray(h, dtype=np.float64)
    n = h.sum()
    if n <= 0:
        raise EmptyOverlap("empty histogram")
    pa = h.sum(axis=1) / n
    pb = h.sum(axis=0) / n
    i, j = np.nonzero(h)
    p = h[i, j] / n
    return float(np.sum(p * (np.log(p) - np.log(pa[i]) - np.log(pb[j]))))


def entropy(img, bins: int = BINS) -> float:
    """Shannon entropy (nats) of the ``bins``-bin intensity histogram."""
    h = joint_histogram(img, img, None, bins).diagonal().astype(np.float64)
    p = h[h > 0] / h.sum()
    return float(-np.sum(p * np.log(p)))


def mutual_information(I1: Volume, I2: Volume, mask=None, bins: int = BINS) -> float:
    """Mutual information of two volumes on the same grid, over ``mask`` (default: everywhere)."""
    if I1.data.shape != I2.data.shape:
        raise DimMismatch(f"{I1.dims} vs {I2.dims}")
    return mi_from_histogram(joint_histogram(I1.data, I2.data, mask, bins))


@dataclass(frozen=True)
class Level:
    factor: int
    step: float  # initial step length (mm / degrees) along the normalized gradient
    max_iter: int


DEFAULT_SCHEDULE = (Level(4, 4.0, 40), Level(2, 2.0, 40), Level(1, 1.0, 40))


def _metric(Ir: Volume, If: Volume, p) -> float:
    moved, inside = resample(If, transform_from_params(p), grid=Ir, return_mask=True)
    try:
        return mutual_information(Ir, moved, inside)
    except EmptyOverlap:
        return -np.inf


def optimize_registration(Ir: Volume, If: Volume, T0: RigidTransform, schedule=DEFAULT_SCHEDULE,
                          fd_step: float = 0.5, min_step: float = 1e-3, axes=None):
    """Multi-resolution gradient ascent on MI over the rigid parameters.

    At each pyramid level the gradient comes from central differences of
    ``fd_step`` (mm / degrees).  A step along the normalized gradient is
    accepted if it increases MI; otherwise the step length is halved.  The
    level ends when the step falls below ``min_step`` or after
    ``max_iter`` iterations.  ``axes`` restricts the optimized parameters
    (default: all six in 3-D, the in-plane three for single-slice images).

    Returns ``(T_final, trace)`` with trace rows
    ``(level, iter, MI, tx, ty, tz, rx, ry, rz)`` for the start of each
    level and every accepted step.
    """
    if axes is None:
        axes = PLANAR_AXES if Ir.ndim == 2 else tuple(range(6))
    axes = list(axes)
    p = params_from_transform(T0)
    trace = []
    for li, lv in enumerate(schedule):
        lv = lv if isinstance(lv, Level) else Level(*lv)
        R, F = downsample(Ir, lv.factor), downsample(If, lv.factor)
        cur = _metric(R, F, p)
        trace.append((li, 0, cur, *p))
        step = float(lv.step)
        for it in range(1, lv.max_iter + 1):
            if step < min_step:
                break
            g = np.zeros(6)
            for a in axes:
                e = np.zeros(6)
                e[a] = fd_step
                g[a] = (_metric(R, F, p + e) - _metric(R, F, p - e)) / (2 * fd_step)
            gn = np.linalg.norm(g)
            if not np.isfinite(gn) or gn == 0:
                break
            while step >= min_step:
                cand = p + step * g / gn
                val = _metric(R, F, cand)
                if val > cur:
                    p, cur = cand, val
                    trace.append((li, it, cur, *p))
                    break
                step *= 0.5
    return transform_from_params(p), trace


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "iter", "MI", "tx", "ty", "tz", "rx", "ry", "rz"])
        for row in trace:
            w.writerow([row[0], row[1], *(repr(float(x)) for x in row[2:])])
