"""Compare the compiled and numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64]

Prints one line per (kernel, backend) with the best wall-clock time over
``--repeat`` runs, the speed-up over the numpy fallback, and the maximum
absolute difference to the fallback's result.
"""

import argparse
import time

import numpy as np

from vreg.geometry import transform_from_params
from vreg.kernels import backends
from vreg.phantoms import PhantomSpec, generate_phantom
from vreg.volume import _index_map


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64, help="edge length of the cubic test volume")
    args = ap.parse_args(argv)

    n = args.size
    pair = generate_phantom(PhantomSpec("simple", (n, n, n), (2.0, 2.0, 2.0)), 0)
    vol = pair.reference
    data = np.ascontiguousarray(vol.data, dtype=np.float64)
    T = transform_from_params([3.3, -2.1, 1.7, 4.0, -3.0, 7.5])
    A = np.ascontiguousarray(_index_map(vol, vol, np.linalg.inv(T.matrix)))
    b = np.ascontiguousarray(pair.floating.data, dtype=np.float64).ravel()
    a = data.ravel()
    mask = np.ones(a.size, dtype=np.uint8)
    lo_a, hi_a, lo_b, hi_b = a.min(), a.max(), b.min(), b.max()

    impls = backends()
    ref = {}
    print(f"volume {n}^3, best of {args.repeat}")
    for kernel in ("resample_affine", "joint_histogram"):
        times = {}
        for name in ("python", "cython"):
            if name not in impls:
                print(f"{kernel:16s} {name:7s} unavailable")
                continue
            mod = impls[name]
            if kernel == "resample_affine":
                fn = lambda: mod.resample_affine(data, A, n, n, n, 0.0)[0]  # noqa: E731
            else:
                fn = lambda: mod.joint_histogram(a, b, mask, 50, lo_a, hi_a, lo_b, hi_b)  # noqa: E731
            t, out = best_of(fn, args.repeat)
            times[name] = t
            if name == "python":
                ref[kernel] = out
            diff = float(np.max(np.abs(np.asarray(out, dtype=np.float64) - ref[kernel])))
            speed = times["python"] / t
            print(f"{kernel:16s} {name:7s} {t * 1e3:9.2f} ms  x{speed:6.1f}  max|diff| {diff:.3g}")


if __name__ == "__main__":
    main()
