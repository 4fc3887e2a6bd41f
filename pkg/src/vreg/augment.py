"""Training-set synthesis: random de-alignment, dense sampling near the truth, affine co-deformation."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import MdpConfig, q_targets
from .geometry import (PLANAR_AXES, AffineTransform, Degenerate, compose, invert,
                       random_affine, transform_from_params)
from .phantoms import PhantomPair, PhantomSpec, generate_phantom
from .policy import TrainingSample, obs_tensor
from .volume import difference_image, read_volume, warp_affine, write_volume


@dataclass(frozen=True)
class PerturbRange:
    """Symmetric per-parameter bounds (mm, degrees) in (tx, ty, tz, rx, ry, rz) order."""

    bounds: tuple = (30.0, 30.0, 30.0, 30.0, 30.0, 30.0)

    def __post_init__(self):
        b = tuple(float(x) for x in self.bounds)
        if len(b) != 6 or min(b) < 0:
            raise ValueError("bounds must be six non-negative numbers")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def planar(cls, t: float, r: float) -> "PerturbRange":
        b = [0.0] * 6
        b[PLANAR_AXES[0]] = b[PLANAR_AXES[1]] = t
        b[PLANAR_AXES[2]] = r
        return cls(tuple(b))

    def contains(self, v) -> bool:
        return bool(np.all(np.abs(np.asarray(v)) <= np.asarray(self.bounds) + 1e-12))


COARSE_E2 = PerturbRange((30, 30, 30, 30, 30, 30))
COARSE_E1 = PerturbRange((30, 30, 150, 30, 30, 30))
FINE = PerturbRange((5, 5, 5, 5, 5, 5))
COARSE_2D = PerturbRange.planar(30, 30)
FINE_2D = PerturbRange.planar(5, 5)


def fine_box_for(coarse: PerturbRange, fine: PerturbRange = FINE) -> PerturbRange:
    """Fine box restricted to the parameters the coarse range actually perturbs."""
    return PerturbRange(tuple(min(f, c) for f, c in zip(fine.bounds, coarse.bounds)))


def draw_residual(rng, coarse: PerturbRange, near_truth_fraction: float = 0.5,
                  fine: PerturbRange = FINE) -> np.ndarray:
    """Two-component mixture: the fine box with probability ``near_truth_fraction``, else the full range."""
    if not 0 <= near_truth_fraction <= 1:
        raise ValueError("near_truth_fraction must lie in [0, 1]")
    box = fine_box_for(coarse, fine) if rng.random() < near_truth_fraction else coarse
    b = np.asarray(box.bounds)
    return rng.uniform(-1.0, 1.0, size=6) * b


def sample_rng(seed: int, *index) -> np.random.Generator:
    """Per-sample generator derived from ``(seed, *index)``, independent of scheduling."""
    return np.random.default_rng([int(seed), *(int(i) for i in index)])


def make_sample(pair: PhantomPair, v, cfg: MdpConfig, provenance=None) -> TrainingSample:
    """Observation at residual ``v`` from the pair's ground truth, with analytic targets."""
    Tg = pair.ground_truth
    T = compose(invert(transform_from_params(v)), Tg)
    obs = difference_image(pair.reference, pair.floating, T)
    return TrainingSample(obs_tensor(obs).astype(np.float32), q_targets(v, cfg), dict(provenance or {}))


def random_dealign(pair: PhantomPair, coarse: PerturbRange, near_truth_fraction=0.5, seed=0,
                   cfg: MdpConfig = MdpConfig(), count=None, fine: PerturbRange = FINE, pair_index=0):
    """Yield de-aligned training samples (infinite unless ``count`` is given)."""
    i = 0
    while count is None or i < count:
        rng = sample_rng(seed, pair_index, i)
        v = draw_residual(rng, coarse, near_truth_fraction, fine)
        yield make_sample(pair, v, cfg, {"pair": pair_index, "seed": seed, "index": i,
                                         "v": [float(x) for x in v]})
        i += 1


def co_deform(pair: PhantomPair, TA: AffineTransform) -> PhantomPair:
    """Resample both images under the same affine map; landmarks and mesh follow the map."""
    if abs(np.linalg.det(TA.matrix[:3, :3])) <= 1e-6:
        raise Degenerate("affine transform is singular")
    mesh = pair.mesh
    if mesh is not None:
        from .phantoms import TriangleMesh

        mesh = TriangleMesh(TA.apply(mesh.vertices), mesh.triangles)
    return PhantomPair(pair.kind, warp_affine(pair.reference, TA), warp_affine(pair.floating, TA),
                       TA.apply(pair.landmarks), pair.ground_truth, mesh, pair.period_mm)


def planar_affine(shear_range: float, seed) -> AffineTransform:
    """In-plane version of the random co-deformation (z row and column left at identity)."""
    A = random_affine(shear_range, seed).matrix.copy()
    A[2, :3] = (0, 0, 1)
    A[:3, 2] = (0, 0, 1)
    return AffineTransform(A)


def make_arrays(pairs, n_per_pair, coarse: PerturbRange, cfg: MdpConfig, seed=0,
                near_truth_fraction=0.5, fine: PerturbRange = FINE):
    """In-memory dataset ``(X, Y, V)`` for ``n_per_pair`` samples from each pair."""
    X, Y, V = [], [], []
    for pi, pair in enumerate(pairs):
        for s in random_dealign(pair, coarse, near_truth_fraction, seed, cfg, n_per_pair, fine, pi):
            X.append(s.observation)
            Y.append(s.targets)
            V.append(s.provenance["v"])
    return np.stack(X), np.stack(Y), np.array(V)


# -- on-disk datasets --------------------------------------------------------

def _spec_to_json(spec: PhantomSpec) -> dict:
    return {"kind": spec.kind, "dims": list(spec.dims), "spacing": list(spec.spacing),
            "period_mm": spec.period_mm, "fov_periods": spec.fov_periods}


def phantom_from_json(d: dict) -> PhantomSpec:
    return PhantomSpec(d["kind"], tuple(d["dims"]), tuple(d["spacing"]),
                       d.get("period_mm", 24.0), d.get("fov_periods", 3.0))


def build_pairs(phantoms, seed, shear_range=0.0):
    """Phantom pairs for a manifest; pair ``i`` uses phantom seed ``seed + i``."""
    pairs = []
    for i, spec in enumerate(phantoms):
        pair = generate_phantom(spec, seed + i)
        if shear_range > 0:
            planar = pair.reference.ndim == 2
            TA = planar_affine(shear_range, [seed, i]) if planar else random_affine(shear_range, [seed, i])
            pair = co_deform(pair, TA)
        pairs.append(pair)
    return pairs


def build_dataset(out_dir, phantoms, counts, coarse: PerturbRange, seed=0, near_truth_fraction=0.5,
                  fine: PerturbRange = FINE, cfg: MdpConfig = MdpConfig(), shear_range=0.0) -> dict:
    """Write samples and a manifest; returns the manifest dict.

    ``counts`` is an int (same for every phantom) or one int per phantom.
    Samples go to ``samples/NNNNNN.vol`` with targets in ``targets.csv``.
    """
    out = Path(out_dir)
    phantoms = list(phantoms)
    if isinstance(counts, int):
        counts = [counts] * len(phantoms)
    if len(counts) != len(phantoms) or min(counts) < 1:
        raise ValueError("counts must be >= 1 for every phantom")
    (out / "samples").mkdir(parents=True, exist_ok=True)
    pairs = build_pairs(phantoms, seed, shear_range)
    arity = len(cfg.actions)
    rows = []
    k = 0
    for pi, (pair, n) in enumerate(zip(pairs, counts)):
        for s in random_dealign(pair, coarse, near_truth_fraction, seed, cfg, n, fine, pi):
            name = f"{k:06d}.vol"
            ref = pair.reference
            from .volume import Volume

            obs = s.observation if ref.ndim == 2 else s.observation[0]
            write_volume(out / "samples" / name, Volume(obs, ref.spacing, ref.origin))
            rows.append([name, pi, s.provenance["index"], *s.provenance["v"], *s.targets])
            k += 1
    with open(out / "targets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "pair", "index", "v1", "v2", "v3", "v4", "v5", "v6",
                    *[f"q{i + 1}" for i in range(arity)]])
        for r in rows:
            w.writerow([r[0], r[1], r[2], *(repr(float(x)) for x in r[3:])])
    manifest = {
        "phantoms": [_spec_to_json(p) for p in phantoms],
        "ranges": {"coarse": list(coarse.bounds), "fine": list(fine.bounds)},
        "near_truth_fraction": near_truth_fraction,
        "counts": list(counts),
        "seed": seed,
        "shear_range": shear_range,
        "mdp": {"gamma": cfg.gamma, "epsilon": cfg.epsilon, "bonus": cfg.bonus,
                "bounds": list(cfg.bounds), "dimensionality": cfg.dimensionality},
        "n_samples": k,
        "checksum": dataset_checksum(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def dataset_checksum(out_dir) -> str:
    out = Path(out_dir)
    h = hashlib.sha256()
    h.update((out / "targets.csv").read_bytes() if (out / "targets.csv").exists() else b"")
    for f in sorted((out / "samples").glob("*.vol")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def rebuild_from_manifest(manifest: dict, out_dir) -> dict:
    """Regenerate a dataset from its manifest."""
    mdp = manifest["mdp"]
    cfg = MdpConfig(gamma=mdp["gamma"], epsilon=mdp["epsilon"], bonus=mdp["bonus"],
                    bounds=tuple(mdp["bounds"]), dimensionality=mdp["dimensionality"])
    return build_dataset(out_dir, [phantom_from_json(p) for p in manifest["phantoms"]], manifest["counts"],
                         PerturbRange(tuple(manifest["ranges"]["coarse"])), manifest["seed"],
                         manifest["near_truth_fraction"], PerturbRange(tuple(manifest["ranges"]["fine"])),
                         cfg, manifest.get("shear_range", 0.0))


def load_dataset(out_dir):
    """Read a dataset written by :func:`build_dataset` as ``(X, Y, manifest)``."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    X, Y = [], []
    with open(out / "targets.csv", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        nq = sum(1 for h in header if h.startswith("q"))
        for row in r:
            vol = read_volume(out / "samples" / row[0])
            X.append(obs_tensor(vol))
            Y.append([float(x) for x in row[-nq:]])
    return np.stack(X).astype(np.float32), np.array(Y), manifest
