"""Desk-scale studies: the 2-D toy task, supervised vs exploration training, coarse-to-fine refinement.

The toy task registers in-plane rigid de-alignments of the "simple"
phantom at 32x32 (4 mm pixels).  It is small enough to train on a laptop CPU
in a couple of minutes and is shared by the tests and the ``compare``
subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import PerturbRange, make_arrays
from .env import MdpConfig, q_targets
from .geometry import compose, invert, transform_from_params
from .hierarchy import HierarchyConfig, hierarchical_register, roi_observer
from .nn import Network, desk_architecture
from .phantoms import PhantomPair, PhantomSpec, generate_phantom
from .policy import ImageEnv, TrainConfig, linear_schedule, success_rate_for, train_drl, train_dsl
from .volume import crop_roi, downsample


@dataclass(frozen=True)
class ToyTask:
    kind: str = "simple"
    size: int = 32
    spacing: float = 4.0
    n_phantoms: int = 8
    n_per_phantom: int = 1000
    translation: float = 30.0
    rotation: float = 30.0
    near_truth_fraction: float = 0.5
    seed: int = 0
    channels: tuple = (4, 8, 16)
    hidden: tuple = (64,)
    batch_norm: bool = True

    @property
    def spec(self) -> PhantomSpec:
        return PhantomSpec(self.kind, (self.size, self.size, 1), (self.spacing,) * 3)

    @property
    def mdp(self) -> MdpConfig:
        return MdpConfig(dimensionality=2, bounds=(self.translation, self.translation, 0, 0, 0, self.rotation))

    @property
    def coarse(self) -> PerturbRange:
        return PerturbRange.planar(self.translation, self.rotation)

    def pairs(self):
        return [generate_phantom(self.spec, self.seed + i) for i in range(self.n_phantoms)]

    def arrays(self, pairs=None):
        pairs = self.pairs() if pairs is None else pairs
        return make_arrays(pairs, self.n_per_phantom, self.coarse, self.mdp, self.seed,
                           self.near_truth_fraction)

    def network(self, seed: int = 0) -> Network:
        arch = desk_architecture((1, self.size, self.size), len(self.mdp.actions), self.channels,
                                 self.hidden, self.batch_norm)
        return Network(arch, seed)

    def eval_starts(self, n: int, seed: int = 12345):
        """``n`` held-out residuals, uniformly inside the training range."""
        rng = np.random.default_rng(seed)
        b = np.asarray(self.coarse.bounds)
        return [rng.uniform(-1, 1, 6) * b for _ in range(n)]


DEFAULT_TRAIN = TrainConfig(learning_rate=1e-3, decay=0.7, decay_every=2700, batch_size=32,
                            total_steps=4000, log_every=500)


def evaluate(net: Network, task: ToyTask, pairs, n_cases=100, n_steps=120, threshold=3.0,
             seed=12345):
    """Success rate and final distances over ``n_cases`` held-out de-alignments.

    Cases are spread round-robin over ``pairs``.
    """
    starts = task.eval_starts(n_cases, seed)
    d = np.empty(n_cases)
    for pi, pair in enumerate(pairs):
        idx = list(range(pi, n_cases, len(pairs)))
        if not idx:
            continue
        _, dd = success_rate_for(net, pair.reference, pair.floating, [starts[i] for i in idx],
                                 n_steps, threshold, task.mdp, pair.ground_truth)
        d[idx] = dd
    return float(np.mean(d < threshold)), d


class MultiPairEnv:
    """Episodes on a randomly chosen training pair (exploration-based training)."""

    def __init__(self, pairs, task: ToyTask, max_episode_steps=100):
        b = np.asarray(task.coarse.bounds)
        self.envs = [ImageEnv(p.reference, p.floating, task.mdp, lambda rng: rng.uniform(-1, 1, 6) * b,
                              max_episode_steps) for p in pairs]
        self.current = self.envs[0]

    def reset(self, rng):
        self.current = self.envs[int(rng.integers(len(self.envs)))]
        return self.current.reset(rng)

    def step(self, k):
        return self.current.step(k)


@dataclass
class CompareResult:
    checkpoints: list
    dsl: dict = field(default_factory=dict)  # seed -> list of success rates
    drl: dict = field(default_factory=dict)

    def mean_curve(self, which: str):
        runs = np.array(list(getattr(self, which).values()))
        return [(s, float(r)) for s, r in zip(self.checkpoints, runs.mean(axis=0))]

    @staticmethod
    def steps_to(curve, level):
        """First checkpoint whose rate reaches ``level``, or ``None``."""
        for s, r in curve:
            if r >= level:
                return s
        return None


def compare(task: ToyTask, checkpoints, seeds, train: TrainConfig = DEFAULT_TRAIN, n_eval=50,
            eval_steps=120, threshold=3.0, drl_episode_steps=100, target_sync=1000, log=None):
    """Success-rate-vs-steps curves for supervised (DSL) and exploration (DRL) training.

    Both learners share the architecture, optimizer, learning-rate schedule
    and the count of mini-batch updates; they are evaluated on the same
    held-out cases at every checkpoint.
    """
    checkpoints = sorted(int(c) for c in checkpoints)
    total = checkpoints[-1]
    pairs = task.pairs()
    X, Y, _ = task.arrays(pairs)
    res = CompareResult(checkpoints)
    for seed in seeds:
        cfg = TrainConfig(train.learning_rate, train.decay, train.decay_every, train.batch_size, total,
                          seed, train.rho, train.log_every)
        for name in ("dsl", "drl"):
            rates = []

            def cb(step, net, rates=rates, name=name):
                if step in checkpoints:
                    sr, _ = evaluate(net, task, pairs, n_eval, eval_steps, threshold)
                    rates.append(sr)
                    if log is not None:
                        log(f"{name} seed={seed} step={step} success={sr:.2f}")

            net = task.network(seed)
            if name == "dsl":
                train_dsl(X, Y, cfg, net, callback=cb)
            else:
                train_drl(lambda rng: MultiPairEnv(pairs, task, drl_episode_steps), cfg, net, task.mdp,
                          epsilon_schedule=linear_schedule(1.0, 0.1, max(1, total // 2)),
                          target_sync=target_sync, callback=cb)
            getattr(res, name)[seed] = rates
    return res


# -- coarse-to-fine study ----------------------------------------------------

@dataclass(frozen=True)
class HierarchyTask:
    """Two-stage registration on the periodic "spine-like" phantom.

    The coarse network sees the whole field of view down-sampled by
    ``factor``; the fine network sees ``roi`` x ``roi`` full-resolution
    crops placed anywhere inside the reference, trained on residuals within
    ``fine`` mm / degrees.
    """

    kind: str = "spine-like"
    size: int = 64
    spacing: float = 2.0
    factor: int = 4
    roi: int = 48
    n_phantoms: int = 8
    n_per_phantom: int = 1000
    translation: float = 15.0
    rotation: float = 15.0
    fine: float = 3.0
    seed: int = 0
    channels: tuple = (4, 8, 16)
    hidden: tuple = (64,)

    @property
    def spec(self) -> PhantomSpec:
        return PhantomSpec(self.kind, (self.size, self.size, 1), (self.spacing,) * 3)

    @property
    def mdp(self) -> MdpConfig:
        b = max(self.translation, self.fine)
        return MdpConfig(dimensionality=2, bounds=(2 * b, 2 * b, 0, 0, 0, 2 * max(self.rotation, self.fine)))

    @property
    def coarse(self) -> PerturbRange:
        return PerturbRange.planar(self.translation, self.rotation)

    def pairs(self):
        return [generate_phantom(self.spec, self.seed + i) for i in range(self.n_phantoms)]

    def _network(self, n: int, seed: int) -> Network:
        return Network(desk_architecture((1, n, n), len(self.mdp.actions), self.channels, self.hidden, True), seed)

    def coarse_arrays(self, pairs):
        small = [PhantomPair(p.kind, downsample(p.reference, self.factor), downsample(p.floating, self.factor),
                             p.landmarks, p.ground_truth) for p in pairs]
        return make_arrays(small, self.n_per_phantom, self.coarse, self.mdp, self.seed)[:2]

    def fine_arrays(self, pairs):
        """ROI observations at uniformly placed crops with residuals inside the fine box."""
        box = np.asarray(PerturbRange.planar(self.fine, self.fine).bounds)
        X, Y = [], []
        for pi, pair in enumerate(pairs):
            Ir = pair.reference
            lo, hi = self.roi // 2, self.size - self.roi + self.roi // 2
            for i in range(self.n_per_phantom):
                rng = np.random.default_rng([self.seed, 1, pi, i])
                v = rng.uniform(-1, 1, 6) * box
                idx = np.array([*rng.integers(lo, hi + 1, size=2), 0])
                roi = crop_roi(Ir, Ir.index_to_physical(idx), (self.roi, self.roi, 1))
                T = compose(invert(transform_from_params(v)), pair.ground_truth)
                X.append(roi_observer(roi, pair.floating)(T).data.astype(np.float32))
                Y.append(q_targets(v, self.mdp))
        return np.stack(X), np.stack(Y)

    def train(self, pairs, cfg: TrainConfig = DEFAULT_TRAIN):
        """Train ``(coarse_net, fine_net)`` by supervised regression."""
        X, Y = self.coarse_arrays(pairs)
        coarse, _ = train_dsl(X, Y, cfg, self._network(self.size // self.factor, self.seed))
        X, Y = self.fine_arrays(pairs)
        fine, _ = train_dsl(X, Y, cfg, self._network(self.roi, self.seed + 1))
        return coarse, fine


def hierarchy_study(task: HierarchyTask, coarse, fine, pairs, n_cases=60, n1=60, n2=20, seed=99):
    """Distance to the truth after each stage, for held-out starts inside the coarse range.

    Returns ``(d_coarse, d_fine)`` arrays of length ``n_cases``.
    """
    b = np.asarray(task.coarse.bounds)
    cfg = HierarchyConfig(n1=n1, n2=n2, factor=task.factor, roi_size=(task.roi, task.roi, 1), mdp=task.mdp)
    dc, df = np.empty(n_cases), np.empty(n_cases)
    for k in range(n_cases):
        pair = pairs[k % len(pairs)]
        v = np.random.default_rng([seed, k]).uniform(-1, 1, 6) * b
        T0 = compose(invert(transform_from_params(v)), pair.ground_truth)
        _, rep = hierarchical_register(pair.reference, pair.floating, T0, coarse, fine, cfg, Tg=pair.ground_truth)
        dc[k], df[k] = rep["coarse"]["D_after"], rep["fine"]["D_after"]
    return dc, df
