"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``VREG_PURE_PYTHON=1`` to force the numpy fallback.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _fallback

if os.environ.get("VREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        log.debug("compiled kernels unavailable, using numpy fallback")

resample_affine = _impl.resample_affine
joint_histogram = _impl.joint_histogram


def backends():
    """Map of available backend name -> module, for tests and benchmarks."""
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:  # pragma: no cover
        pass
    return out
