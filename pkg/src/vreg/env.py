"""The registration MDP.

The state is the current transform ``T_t``; what matters for rewards is the
residual ``v_t = params(T_g o T_t^-1)`` whose norm is the distance ``D``.
Every action changes one pose parameter by +-1 (mm or degree).

Two modes are supported:

* ``ideal``: ``v`` is authoritative and an action changes one component of
  ``v`` by exactly one unit.  This is the setting in which the analytic
  action values are defined and in which they are provably greedy-optimal.
* ``image``: ``T_t`` is authoritative; an action changes one parameter of
  ``T_t`` and ``v`` is recomputed.  For rotations the induced change of ``v``
  is only approximately one unit.

An action with ``sign=+1`` increases the pose parameter, which (for
translations, in ideal mode exactly) decreases the matching component of
``v`` by one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .geometry import (PARAM_NAMES, PLANAR_AXES, RigidTransform, compose, identity, invert,
                       param_norm, params_from_transform, residual_params, transform_from_params)


class DepthExceeded(RuntimeError):
    pass


IDEAL = "ideal"
IMAGE = "image"


@dataclass(frozen=True)
class Action:
    axis: int  # index into (tx, ty, tz, rx, ry, rz)
    sign: int  # +1 or -1

    @property
    def name(self) -> str:
        return f"{PARAM_NAMES[self.axis]}{'+' if self.sign > 0 else '-'}"

    def delta(self) -> np.ndarray:
        """Change of the pose parameter vector."""
        d = np.zeros(6)
        d[self.axis] = self.sign
        return d


def action_set(dimensionality: int = 3) -> list[Action]:
    """12 actions in 3-D, 6 in 2-D (over tx, ty and the in-plane rotation)."""
    if dimensionality == 3:
        axes = range(6)
    elif dimensionality == 2:
        axes = PLANAR_AXES
    else:
        raise ValueError("dimensionality must be 2 or 3")
    return [Action(a, s) for a in axes for s in (1, -1)]


@dataclass(frozen=True)
class MdpConfig:
    gamma: float = 0.9
    epsilon: float = 0.5
    bonus: float = 10.0
    bounds: tuple = (30.0, 30.0, 150.0, 30.0, 30.0, 30.0)
    weights: tuple | None = None
    dimensionality: int = 3

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.bonus <= self.gamma / (1 - self.gamma):
            raise ValueError(f"bonus must exceed gamma/(1-gamma)={self.gamma / (1 - self.gamma):.4g}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if len(self.bounds) != 6 or min(self.bounds) < 0:
            raise ValueError("bounds must be six non-negative numbers")
        if self.dimensionality not in (2, 3):
            raise ValueError("dimensionality must be 2 or 3")

    @property
    def actions(self) -> list[Action]:
        return action_set(self.dimensionality)

    def norm(self, v) -> float:
        return param_norm(v, self.weights)


@dataclass(frozen=True, eq=False)
class EnvState:
    """Registration state.

    In ideal mode the state is defined by its residual ``v``; the pose ``T``
    is derived from ``v`` and ``Tg`` the first time it is read.
    """

    pose: RigidTransform | None
    Tg: RigidTransform
    v: np.ndarray
    step_index: int = 0
    mode: str = IDEAL
    clamped: bool = False

    @property
    def T(self) -> RigidTransform:
        if self.pose is None:
            object.__setattr__(self, "pose", compose(invert(transform_from_params(self.v)), self.Tg))
        return self.pose

    @property
    def distance(self) -> float:
        return float(np.sqrt(np.dot(self.v, self.v)))


_IDENTITY = identity()


def ideal_state(v, Tg: RigidTransform | None = None, step_index: int = 0) -> EnvState:
    """State defined by its residual; ``T`` is ``inv(transform(v)) o Tg``."""
    v = np.array(v, dtype=np.float64).reshape(6)
    v.setflags(write=False)
    return EnvState(None, _IDENTITY if Tg is None else Tg, v, step_index, IDEAL)


def image_state(T: RigidTransform, Tg: RigidTransform, step_index: int = 0) -> EnvState:
    v = residual_params(Tg, T)
    v.setflags(write=False)
    return EnvState(T, Tg, v, step_index, IMAGE)


def leaves_box(v, v_next, cfg: MdpConfig) -> bool:
    """True if a move pushes some residual component further beyond its bound.

    Moves inside the box, and moves of an out-of-box state back toward it,
    are allowed.
    """
    a, b = np.abs(v), np.abs(v_next)
    return bool(np.any((b > np.asarray(cfg.bounds) + 1e-9) & (b > a + 1e-9)))


def apply_action(state: EnvState, action: Action) -> EnvState:
    """Successor state without bounds handling or reward."""
    if state.mode == IDEAL:
        v = state.v - action.delta()
        nxt = ideal_state(v, state.Tg, state.step_index + 1)
        return nxt
    p = params_from_transform(state.T) + action.delta()
    return image_state(transform_from_params(p), state.Tg, state.step_index + 1)


def step(state: EnvState, action: Action, cfg: MdpConfig = MdpConfig()):
    """Take ``action``; returns ``(next_state, reward)``.

    The reward is the decrease of the distance to the ground truth.  If the
    move would push the residual further outside the exploration box the
    state is kept as is (flagged via ``clamped``) and the reward is zero.
    """
    nxt = apply_action(state, action)
    if leaves_box(state.v, nxt.v, cfg):
        held = replace(state, step_index=state.step_index + 1, clamped=True)
        return held, 0.0
    return nxt, cfg.norm(state.v) - cfg.norm(nxt.v)


def is_terminal(state: EnvState, cfg: MdpConfig = MdpConfig()) -> bool:
    return cfg.norm(state.v) < cfg.epsilon


def action_distances(state: EnvState, cfg: MdpConfig = MdpConfig()) -> np.ndarray:
    """Distance to the ground truth after each action of ``cfg.actions``."""
    return np.array([cfg.norm(apply_action(state, a).v) if state.mode == IMAGE
                     else cfg.norm(state.v - a.delta()) for a in cfg.actions])


def optimal_action(state: EnvState, rng=None, cfg: MdpConfig = MdpConfig()) -> Action:
    """Action minimizing the post-action distance; ties (within 1e-12) broken by ``rng``.

    Without an ``rng`` the first minimizer in action-set order is returned.
    """
    d = action_distances(state, cfg)
    best = np.flatnonzero(d <= d.min() + 1e-12)
    acts = cfg.actions
    if rng is None or len(best) == 1:
        return acts[best[0]]
    return acts[int(rng.choice(best))]


# -- analytic action values ------------------------------------------------

def q_closed_form(p: int, cfg: MdpConfig = MdpConfig()) -> float:
    """Value of the optimal action when ``p + 1`` unit steps remain."""
    if p < 0:
        raise ValueError("p must be >= 0")
    g = cfg.gamma
    # (1 - g^(p+1)) / (1 - g) + g^p R, arranged so rounding keeps it monotone in p
    return 1 / (1 - g) + g ** p * (cfg.bonus - g / (1 - g))


def _continuous_tail(n0: float, cfg: MdpConfig) -> float:
    """Value of moving straight at the ground truth in unit steps from distance ``n0``."""
    g, eps = cfg.gamma, cfg.epsilon
    steps = max(1, math.floor(n0 - eps) + 1)
    last = n0 - (steps - 1)
    full = (1 - g ** (steps - 1)) / (1 - g)
    return full + g ** (steps - 1) * (last - abs(last - 1.0) + cfg.bonus)


def _greedy_path_rewards(v, cfg: MdpConfig, depth_cap: int):
    """Rewards along the greedy path from ``v`` and how the path ended.

    Returns ``(rewards, end)`` where ``end`` is ``"terminal"`` (bonus earned on
    the last reward) or ``("stall", distance)`` when no unit step decreases
    the distance before the tolerance is reached.
    """
    axes = list(PLANAR_AXES) if cfg.dimensionality == 2 else list(range(6))
    rewards = []
    if cfg.weights is None:
        a = [abs(float(v[i])) for i in axes]
        n2 = sum(x * x for x in a)
        eps = cfg.epsilon
        while True:
            if len(rewards) > depth_cap:
                raise DepthExceeded(f"greedy path exceeded {depth_cap} steps")
            i = max(range(len(a)), key=a.__getitem__)
            new2 = n2 - 2 * a[i] + 1
            if new2 >= n2:
                return rewards, ("stall", math.sqrt(n2))
            n_old, n_new = math.sqrt(n2), math.sqrt(max(new2, 0.0))
            rewards.append(n_old - n_new)
            a[i] = abs(a[i] - 1.0)
            n2 = new2
            if n_new < eps:
                return rewards, "terminal"
    state = np.asarray(v, dtype=np.float64).copy()
    w = np.asarray(cfg.weights, dtype=np.float64)
    deltas = np.array([a.delta() for a in cfg.actions])
    while True:
        if len(rewards) > depth_cap:
            raise DepthExceeded(f"greedy path exceeded {depth_cap} steps")
        cand = state - deltas
        d = np.sqrt(np.einsum("ij,ij,j->i", cand, cand, w))
        k = int(np.argmin(d))
        n_old = float(np.sqrt(np.dot(w * state, state)))
        if d[k] >= n_old:
            return rewards, ("stall", n_old)
        rewards.append(n_old - float(d[k]))
        state = cand[k]
        if d[k] < cfg.epsilon:
            return rewards, "terminal"


def _fold(rewards, end, cfg: MdpConfig) -> float:
    if end == "terminal":
        acc = rewards[-1] + cfg.bonus
        body = rewards[:-1]
    else:
        acc = _continuous_tail(end[1], cfg)
        body = rewards
    for r in reversed(body):
        acc = r + cfg.gamma * acc
    return acc


@lru_cache(maxsize=1 << 20)
def _state_value_cached(key, cfg: MdpConfig, depth_cap: int) -> float:
    rewards, end = _greedy_path_rewards(np.array(key), cfg, depth_cap)
    return _fold(rewards, end, cfg)


def state_value(v, cfg: MdpConfig = MdpConfig(), depth_cap: int | None = None) -> float:
    """``Q(s, a*)`` for the state with residual ``v`` (ideal mode).

    Follows the greedy optimal path until the tolerance is reached.  When the
    discrete path stalls short of the tolerance (possible for non-integer
    residuals) the remainder is valued as straight-line unit steps.
    """
    v = np.asarray(v, dtype=np.float64)
    if depth_cap is None:
        depth_cap = int(10 * (cfg.norm(v) + 10))
    if cfg.weights is None:
        # value depends only on the multiset of |v_i| over the active axes
        axes = list(PLANAR_AXES) if cfg.dimensionality == 2 else list(range(6))
        mags = sorted(abs(float(v[i])) for i in axes)
        key = [0.0] * 6
        for ax, m in zip(axes, mags):
            key[ax] = m
        key = tuple(key)
    else:
        key = tuple(float(x) for x in v)
    return _state_value_cached(key, cfg, depth_cap)


def q_value(state: EnvState, action: Action, cfg: MdpConfig = MdpConfig()) -> float:
    """Analytic action value: ``r + R`` if the action reaches the tolerance, else ``r + gamma * Q(s', a*)``.

    Evaluated on the residual in ideal mode regardless of ``state.mode``.
    Raises :class:`DepthExceeded` if the greedy path does not contract.
    """
    v = np.asarray(state.v, dtype=np.float64)
    v1 = v - action.delta()
    n0, n1 = cfg.norm(v), cfg.norm(v1)
    r = n0 - n1
    if n1 < cfg.epsilon:
        return r + cfg.bonus
    cap = int(10 * (n0 + 10))
    return r + cfg.gamma * state_value(v1, cfg, cap)


def q_vector(state: EnvState, cfg: MdpConfig = MdpConfig()) -> np.ndarray:
    """Analytic values of every action in ``cfg.actions``."""
    return np.array([q_value(state, a, cfg) for a in cfg.actions])


def q_targets(v, cfg: MdpConfig = MdpConfig()) -> np.ndarray:
    return q_vector(ideal_state(v), cfg)


class OraclePolicy:
    """Emits the analytic action values of the current state.

    Stands in for a perfectly trained network; needs the ground truth.
    """

    def __init__(self, cfg: MdpConfig = MdpConfig()):
        self.cfg = cfg

    def __call__(self, state: EnvState) -> np.ndarray:
        return q_vector(state, self.cfg)


@dataclass
class Transition:
    step: int
    v: np.ndarray
    action: Action
    reward: float
    q_target: float


@dataclass
class Trajectory:
    transitions: list = field(default_factory=list)
    final: EnvState | None = None

    def __len__(self):
        return len(self.transitions)

    def to_rows(self) -> list[dict]:
        """JSON-friendly list of transitions (NaN residuals become ``None``)."""
        def num(x):
            x = float(x)
            return None if np.isnan(x) else x
        return [{"step": t.step, "v": [num(x) for x in t.v], "action": t.action.name,
                 "reward": num(t.reward), "q": num(t.q_target)} for t in self.transitions]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "v1", "v2", "v3", "v4", "v5", "v6",
                        "action_axis", "action_sign", "reward", "q_target"])
            for t in self.transitions:
                w.writerow([t.step, *(repr(float(x)) for x in t.v), PARAM_NAMES[t.action.axis],
                            t.action.sign, repr(float(t.reward)), repr(float(t.q_target))])


def greedy_rollout(state: EnvState, q_fn, n_steps: int, cfg: MdpConfig = MdpConfig(),
                   stop_at_terminal: bool = True) -> Trajectory:
    """Repeatedly take the argmax of ``q_fn(state)``."""
    traj = Trajectory()
    acts = cfg.actions
    for _ in range(n_steps):
        if stop_at_terminal and is_terminal(state, cfg):
            break
        q = np.asarray(q_fn(state))
        k = int(np.argmax(q))
        nxt, r = step(state, acts[k], cfg)
        traj.transitions.append(Transition(state.step_index, np.array(state.v), acts[k], r, float(q[k])))
        state = nxt
    traj.final = state
    return traj
