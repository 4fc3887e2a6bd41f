"""Accuracy metrics (landmark and surface distances), success rates and benchmark reports."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, compose, distance, invert, transform_from_params

TRE_THRESHOLD = 10.0
MME_THRESHOLD = 20.0


def tre(landmarks, T_est: RigidTransform, T_gt: RigidTransform) -> float:
    """Mean Euclidean distance (mm) between landmarks mapped by the estimate and by the truth."""
    p = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("landmark set is empty")
    return float(np.mean(np.linalg.norm(T_est.apply(p) - T_gt.apply(p), axis=1)))


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point of each triangle ``(a, b, c)`` to point(s) ``p``.

    Region-based projection (vertex, edge or face region).  All arguments
    broadcast over a leading axis.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    if p.ndim == 1:
        return closest_points_on_triangles(p[None], a[None], b[None], c[None])[0]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(p.shape[:-1], dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == out.ndim else value
        done[:] = done | m

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones_like(done), a + v[..., None] * ab + w[..., None] * ac)
    return out


def point_mesh_distance(points, vertices, triangles, chunk: int = 256) -> np.ndarray:
    """Exact distance from each point to the nearest triangle of a mesh."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(triangles, dtype=np.intp)
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk, None, :]
        q = closest_points_on_triangles(p, a[None], b[None], c[None])
        out[s:s + chunk] = np.sqrt(((q - p) ** 2).sum(-1)).min(axis=1)
    return out


def mme(mesh_ref, mesh_float, T: RigidTransform) -> float:
    """Mean over ``T``-mapped floating vertices of the distance to the reference surface."""
    if len(mesh_ref.triangles) == 0 or len(mesh_float.vertices) == 0:
        raise ValueError("meshes must be non-empty")
    pts = T.apply(mesh_float.vertices)
    return float(np.mean(point_mesh_distance(pts, mesh_ref.vertices, mesh_ref.triangles)))


def success_rate(errors, threshold: float = TRE_THRESHOLD) -> float:
    """Fraction of errors at or below ``threshold``."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors given")
    return float(np.mean(e <= threshold))


def percentile_nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values given")
    if not 0 <= q <= 100:
        raise ValueError("q must lie in [0, 100]")
    k = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[k - 1])


# -- benchmark ---------------------------------------------------------------

@dataclass
class Case:
    """One test pair with ground truth; ``error`` maps an estimate to mm."""

    name: str
    reference: object
    floating: object
    ground_truth: RigidTransform
    landmarks: np.ndarray | None = None
    mesh_ref: object = None
    mesh_float: object = None

    def error(self, T: RigidTransform) -> float:
        if self.mesh_ref is not None and self.mesh_float is not None:
            return mme(self.mesh_ref, self.mesh_float, T)
        if self.landmarks is not None:
            return tre(self.landmarks, T, self.ground_truth)
        return distance(self.ground_truth, T)

    @property
    def threshold(self) -> float:
        return MME_THRESHOLD if self.mesh_ref is not None else TRE_THRESHOLD


CASE_COLUMNS = ["method", "case", "seed", "init_err", "final_err", "success", "steps", "wallclock_ms"]
SUMMARY_COLUMNS = ["method", "n", "success_rate", "p10", "p50", "p90"]


def benchmark(methods: dict, cases, n_perturb: int, sample_residual, seed: int = 0):
    """Run every method from ``n_perturb`` random de-alignments of every case.

    ``methods`` maps a name to ``register(Ir, If, T0) -> T`` or
    ``-> (T, steps)``.  Reference methods that need the truth set the
    attribute ``uses_ground_truth`` and receive it as a fourth argument.
    ``sample_residual(rng)`` draws a residual 6-vector; the start pose is
    ``inv(transform(v)) o Tg``.  A method that raises is recorded as a
    failure at its initial error.  Returns ``(rows, summary)`` as lists of
    dicts.
    """
    rows = []
    for ci, case in enumerate(cases):
        for k in range(n_perturb):
            rng = np.random.default_rng([seed, ci, k])
            v = np.asarray(sample_residual(rng), dtype=np.float64)
            T0 = compose(invert(transform_from_params(v)), case.ground_truth)
            init = case.error(T0)
            for name, register in methods.items():
                t = time.perf_counter()
                steps = 0
                try:
                    extra = (case.ground_truth,) if getattr(register, "uses_ground_truth", False) else ()
                    out = register(case.reference, case.floating, T0, *extra)
                    T, steps = out if isinstance(out, tuple) else (out, 0)
                    final = case.error(T)
                except Exception:  # noqa: BLE001 - a failing case must not abort the suite
                    final = init
                    ok = False
                else:
                    ok = final <= case.threshold
                rows.append({"method": name, "case": case.name, "seed": k, "init_err": init,
                             "final_err": final, "success": int(ok), "steps": int(steps),
                             "wallclock_ms": (time.perf_counter() - t) * 1e3})
    return rows, summarize(rows)


def summarize(rows) -> list[dict]:
    out = []
    for name in dict.fromkeys(r["method"] for r in rows):
        e = [r["final_err"] for r in rows if r["method"] == name]
        s = [r["success"] for r in rows if r["method"] == name]
        out.append({"method": name, "n": len(e), "success_rate": float(np.mean(s)),
                    "p10": percentile_nearest_rank(e, 10), "p50": percentile_nearest_rank(e, 50),
                    "p90": percentile_nearest_rank(e, 90)})
    return out


def write_rows(path, rows, columns, timing=True) -> None:
    """CSV writer; ``timing=False`` blanks wall-clock columns for reproducible files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            vals = []
            for c in columns:
                x = r[c]
                if c == "wallclock_ms" and not timing:
                    x = ""
                elif isinstance(x, float):
                    x = repr(x)
                vals.append(x)
            w.writerow(vals)


def summary_svg(summary, path=None, title="Registration error") -> str:
    """Bar chart of median error with 10th-90th percentile whiskers, one bar per method."""
    W, H, pad = 120 + 110 * len(summary), 320, 50
    top = max([s["p90"] for s in summary] + [1e-9])
    scale = (H - 2 * pad) / top
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" '
             f'font-size="12">', f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - 10}" y2="{H - pad}" stroke="black"/>']
    for i, s in enumerate(summary):
        x = pad + 20 + 110 * i
        y50 = H - pad - s["p50"] * scale
        parts.append(f'<rect x="{x}" y="{y50:.2f}" width="60" height="{s["p50"] * scale:.2f}" fill="#6a8caf"/>')
        y10, y90 = H - pad - s["p10"] * scale, H - pad - s["p90"] * scale
        parts.append(f'<line x1="{x + 30}" y1="{y10:.2f}" x2="{x + 30}" y2="{y90:.2f}" stroke="black"/>')
        parts.append(f'<text x="{x + 30}" y="{H - pad + 16}" text-anchor="middle">{s["method"]}</text>')
        parts.append(f'<text x="{x + 30}" y="{H - pad + 30}" text-anchor="middle">'
                     f'{100 * s["success_rate"]:.0f}% ok</text>')
    parts.append("</svg>")
    svg = "\n".join(parts)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def curves_svg(curves: dict, path=None, title="Success rate vs training steps") -> str:
    """Line chart of ``{name: [(step, rate), ...]}``."""
    W, H, pad = 480, 320, 50
    xmax = max([s for c in curves.values() for s, _ in c] + [1])
    colors = ["#c0392b", "#2e86c1", "#27ae60", "#8e44ad"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" '
             f'font-size="12">', f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - 10}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>']
    for i, (name, pts) in enumerate(curves.items()):
        xy = " ".join(f"{pad + s / xmax * (W - pad - 20):.2f},{H - pad - r * (H - 2 * pad):.2f}" for s, r in pts)
        col = colors[i % len(colors)]
        parts.append(f'<polyline points="{xy}" fill="none" stroke="{col}" stroke-width="2"/>')
        parts.append(f'<text x="{W - 90}" y="{pad + 16 * i}" fill="{col}">{name}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts)
    if path is not None:
        Path(path).write_text(svg)
    return svg
