"""Coarse-to-fine registration with saliency-driven region of interest.

The coarse stage runs on down-sampled full field-of-view volumes.  The
network's input gradient at the final coarse pose marks the voxels that
drove its decision; their importance-weighted centroid centres a
high-resolution crop (shifted, if needed, to lie inside the reference) on
which the fine stage continues.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .env import MdpConfig
from .geometry import RigidTransform, distance, transform_to_dict
from .nn import Network, ShapeMismatch
from .policy import greedy_register, obs_tensor
from .volume import Volume, crop_roi, difference_image, downsample, resample


class EmptySelection(ValueError):
    """The percentile threshold does not single out any voxels."""


def saliency_map(net: Network, obs: Volume) -> Volume:
    """``|d(sum of outputs)/d(input)|`` from one backward pass, on the observation grid."""
    x = obs_tensor(obs)[None]
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeMismatch(f"network expects input {net.input_shape}, got {tuple(x.shape[1:])}")
    g = np.abs(net.input_gradient(x, train=False)[0]).astype(np.float64)
    return obs.with_data(g.reshape(obs.data.shape))


def attention_center(omega: Volume, percentile: float = 95.0) -> np.ndarray:
    """Importance-weighted centroid (mm) of the voxels at or above ``percentile``.

    Raises :class:`EmptySelection` when the map is constant or all-zero,
    since then the threshold does not select a meaningful region.
    """
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    w = np.asarray(omega.data, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("saliency must be finite and non-negative")
    if w.max() == w.min():
        raise EmptySelection("saliency map is constant")
    thr = np.percentile(w, percentile)
    sel = w >= thr
    weights = w[sel]
    if weights.sum() <= 0:
        raise EmptySelection("selected voxels carry no importance")
    kk, jj, ii = np.nonzero(sel)
    idx = np.stack([ii, jj, kk], axis=1).astype(np.float64)
    pts = omega.index_to_physical(idx)
    return (weights[:, None] * pts).sum(axis=0) / weights.sum()


@dataclass(frozen=True)
class HierarchyConfig:
    """Settings for :func:`hierarchical_register`.

    ``roi_size`` is in voxels (x, y, z) of the high-resolution volume;
    ``None`` uses the fine network's input size.
    """

    n1: int = 200
    n2: int = 100
    factor: int = 2
    roi_size: tuple | None = None
    percentile: float = 95.0
    mdp: MdpConfig = MdpConfig()
    randomize: bool = False

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 0:
            raise ValueError("n1 must be >= 1 and n2 >= 0")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def _roi_size(fine, cfg: HierarchyConfig, Ir: Volume):
    if cfg.roi_size is not None:
        return tuple(int(s) for s in cfg.roi_size)
    if isinstance(fine, Network):
        spatial = fine.input_shape[1:]
        return tuple(int(s) for s in reversed(spatial)) + ((1,) if len(spatial) == 2 else ())
    return Ir.dims


def clamp_center(vol: Volume, center, size) -> np.ndarray:
    """Move ``center`` (mm) so a ``size``-voxel crop stays inside ``vol`` where it fits.

    Axes on which the crop is larger than the volume are left unchanged.
    """
    size = np.asarray(size, dtype=int).reshape(-1)
    if size.size == 2:
        size = np.append(size, 1)
    dims = np.asarray(vol.dims)
    c = np.floor(vol.physical_to_index(center) + 0.5)
    lo, hi = size // 2, dims - size + size // 2
    fits = size <= dims
    c = np.where(fits, np.clip(c, lo, hi), c)
    return vol.index_to_physical(c)


def roi_observer(Ir_roi: Volume, If: Volume):
    """Observation ``Ir_roi - T o If`` on the ROI grid, sampling the whole floating volume."""
    def observe(T):
        return Ir_roi.with_data(Ir_roi.data - resample(If, T, grid=Ir_roi).data)
    return observe


def hierarchical_register(Ir: Volume, If: Volume, T0: RigidTransform, coarse, fine,
                          cfg: HierarchyConfig = HierarchyConfig(), Tg: RigidTransform | None = None,
                          rng=None):
    """Two-stage registration; returns ``(T_final, report)``.

    ``coarse`` and ``fine`` are networks or callables accepted by
    :func:`~vreg.policy.greedy_register`.  For a callable coarse policy the
    attention map falls back to the magnitude of the coarse observation.
    The report is JSON-serializable.
    """
    report = {"n1": cfg.n1, "n2": cfg.n2, "factor": cfg.factor}
    mdp = cfg.mdp

    t0 = time.perf_counter()
    Ir_c, If_c = downsample(Ir, cfg.factor), downsample(If, cfg.factor)
    T1, traj1 = greedy_register(Ir_c, If_c, T0, coarse, cfg.n1, cfg.randomize, rng, Tg, mdp)
    obs_c = difference_image(Ir_c, If_c, T1)
    omega = saliency_map(coarse, obs_c) if isinstance(coarse, Network) else obs_c.with_data(np.abs(obs_c.data))
    try:
        center = attention_center(omega, cfg.percentile)
        fallback = False
    except EmptySelection:
        center, fallback = Ir.center, True
    coarse_s = time.perf_counter() - t0
    report["coarse"] = {"trajectory": traj1.to_rows(), "wallclock_s": coarse_s,
                        "transform": transform_to_dict(T1, with_matrix=False)}
    size = _roi_size(fine, cfg, Ir)
    attended = center
    center = clamp_center(Ir, center, size)
    report["roi"] = {"center_mm": [float(c) for c in center], "attention_mm": [float(c) for c in attended],
                     "size_vox": list(size), "center_fallback": fallback}

    T2 = T1
    t1 = time.perf_counter()
    traj2 = None
    if cfg.n2 > 0:
        Ir_roi = crop_roi(Ir, center, size)
        T2, traj2 = greedy_register(Ir_roi, If, T1, fine, cfg.n2, cfg.randomize, rng, Tg, mdp,
                                    observe=roi_observer(Ir_roi, If))
    report["fine"] = {"trajectory": traj2.to_rows() if traj2 is not None else [],
                      "wallclock_s": time.perf_counter() - t1,
                      "transform": transform_to_dict(T2, with_matrix=False)}
    if Tg is not None:
        report["coarse"]["D_before"] = distance(Tg, T0, mdp.weights)
        report["coarse"]["D_after"] = distance(Tg, T1, mdp.weights)
        report["fine"]["D_before"] = report["coarse"]["D_after"]
        report["fine"]["D_after"] = distance(Tg, T2, mdp.weights)
    report["final"] = transform_to_dict(T2)
    return T2, report
