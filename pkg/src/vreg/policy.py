"""Training and running the action-value network.

``train_dsl`` regresses the network onto analytic action values (supervised);
``train_drl`` is the exploration/replay Q-learning comparator.  Both use the
same network and optimizer.  ``greedy_register`` applies a trained network
(or an oracle) to an image pair.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .env import (EnvState, MdpConfig, Trajectory, Transition, image_state, is_terminal, leaves_box,
                  state_value)
from .geometry import (RigidTransform, compose, distance, identity, invert, params_from_transform,
                       transform_from_params)
from .nn import Network, RMSProp
from .volume import Volume, difference_image

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 6e-5
    decay: float = 0.7
    decay_every: int = 10000
    batch_size: int = 32
    total_steps: int = 1000
    seed: int = 0
    rho: float = 0.9
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay ** (step // self.decay_every)


@dataclass
class TrainingSample:
    observation: np.ndarray
    targets: np.ndarray
    provenance: dict = field(default_factory=dict)


def obs_tensor(vol: Volume) -> np.ndarray:
    """Network input ``(1, *spatial)`` for one observation volume."""
    d = vol.data
    return d if vol.ndim == 2 else d[None]


def loss(batch, net: Network) -> float:
    """Sum over samples and actions of squared output-target differences."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    X = np.stack([s.observation for s in batch])
    Y = np.stack([s.targets for s in batch])
    return batch_loss(net, X, Y)


def batch_loss(net: Network, X, Y, train=False) -> float:
    y = net.forward(X, train).astype(np.float64)
    return float(np.sum((y - Y) ** 2))


@dataclass
class LossCurve:
    rows: list = field(default_factory=list)  # (step, loss, lr)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for s, l, lr in self.rows:
                w.writerow([s, repr(float(l)), repr(float(lr))])


def _update(net, opt, X, Y, lr, mask=None):
    net.zero_grad()
    y = net.forward(X, train=True)
    diff = y.astype(np.float64) - Y
    if mask is not None:
        diff = diff * mask
    value = float(np.sum(diff ** 2))
    net.backward((2.0 * diff).astype(net.dtype))
    opt.lr = lr
    opt.step()
    return value


def train_dsl(X, Y, cfg: TrainConfig, net: Network, callback=None):
    """Supervised regression of ``net`` onto analytic action-value targets.

    ``X`` holds observations ``(M, 1, *spatial)``, ``Y`` targets ``(M, arity)``.
    Mini-batches are drawn by reshuffling each epoch with ``cfg.seed``.
    ``callback(step, net)`` is invoked after every update when given.
    Returns ``(net, LossCurve)``; raises :class:`NonFiniteLoss`.
    """
    X = np.asarray(X, dtype=net.dtype)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) != len(Y) or len(X) == 0:
        raise ValueError("dataset must be non-empty with matching targets")
    if Y.shape[1] != net.arity:
        raise ValueError(f"targets have {Y.shape[1]} entries, network has {net.arity} outputs")
    rng = np.random.default_rng(cfg.seed)
    opt = RMSProp(net, cfg.learning_rate, cfg.rho)
    curve = LossCurve()
    order = rng.permutation(len(X))
    pos = 0
    for step in range(cfg.total_steps):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(len(X))
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        lr = cfg.lr_at(step)
        value = _update(net, opt, X[idx], Y[idx], lr)
        if not np.isfinite(value):
            raise NonFiniteLoss(step, value)
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            curve.rows.append((step, value, lr))
        if callback is not None:
            callback(step + 1, net)
    return net, curve


# -- DRL comparator ----------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_shape, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=dtype)
        self.next_obs = np.zeros_like(self.obs)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self._n = 0
        self._pos = 0

    def __len__(self):
        return self._n

    def push(self, obs, action, reward, next_obs, done):
        i = self._pos
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = done
        self._pos = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def sample(self, rng, n):
        idx = rng.integers(0, self._n, size=n)
        return self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx]


def epsilon_greedy(q, eps, rng) -> int:
    if rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def linear_schedule(start=1.0, end=0.1, steps=1000):
    def eps(t):
        if t >= steps:
            return end
        return start + (end - start) * t / steps
    return eps


class ImageEnv:
    """Image-mode registration episode on one phantom pair, for exploration-based training."""

    def __init__(self, reference: Volume, floating: Volume, cfg: MdpConfig, sample_start,
                 max_episode_steps=100):
        self.reference, self.floating, self.cfg = reference, floating, cfg
        self.sample_start = sample_start  # rng -> residual 6-vector
        self.max_episode_steps = max_episode_steps
        self.actions = cfg.actions
        self.state: EnvState | None = None

    def observe(self):
        return obs_tensor(difference_image(self.reference, self.floating, self.state.T))

    def reset(self, rng):
        v = self.sample_start(rng)
        Tg = identity()
        T = compose(invert(transform_from_params(v)), Tg)
        self.state = image_state(T, Tg)
        return self.observe()

    def step(self, k: int):
        s = self.state
        p = params_from_transform(s.T) + self.actions[k].delta()
        nxt = image_state(transform_from_params(p), s.Tg, s.step_index + 1)
        if leaves_box(s.v, nxt.v, self.cfg):
            nxt = image_state(s.T, s.Tg, s.step_index + 1)
        reward = self.cfg.norm(s.v) - self.cfg.norm(nxt.v)
        self.state = nxt
        terminal = is_terminal(nxt, self.cfg)
        truncated = nxt.step_index >= self.max_episode_steps
        return self.observe(), reward, terminal, truncated


def train_drl(env_factory, cfg: TrainConfig, net: Network, mdp: MdpConfig = MdpConfig(),
              replay_capacity=50000, epsilon_schedule=None, target_sync=1000,
              learning_starts=None, callback=None):
    """Iterative Q-learning with epsilon-greedy exploration and uniform replay.

    One environment step and one mini-batch update per training step.
    Bootstrapped targets use a frozen copy of the network refreshed every
    ``target_sync`` steps; reaching the tolerance pays ``mdp.bonus`` and ends
    the episode.  Returns ``(net, LossCurve, stats)`` where ``stats`` has
    action counts and the replay size.
    """
    rng = np.random.default_rng(cfg.seed)
    eps_fn = epsilon_schedule or linear_schedule(1.0, 0.1, max(1, cfg.total_steps // 2))
    if not callable(eps_fn):
        eps_fn = (lambda e: (lambda t: e))(float(eps_fn))
    env = env_factory(rng)
    opt = RMSProp(net, cfg.learning_rate, cfg.rho)
    target = net.copy()
    buf = ReplayBuffer(replay_capacity, net.input_shape, net.dtype)
    learning_starts = cfg.batch_size if learning_starts is None else learning_starts
    curve = LossCurve()
    counts = np.zeros(net.arity, dtype=np.int64)
    obs = env.reset(rng)
    max_len = 0
    for step in range(cfg.total_steps):
        eps = eps_fn(step)
        if rng.random() < eps:
            a = int(rng.integers(net.arity))
        else:
            a = int(np.argmax(net.forward(obs[None])[0]))
        counts[a] += 1
        nobs, r, terminal, truncated = env.step(a)
        buf.push(obs, a, r, nobs, terminal)
        max_len = max(max_len, len(buf))
        obs = env.reset(rng) if (terminal or truncated) else nobs
        if len(buf) >= learning_starts:
            o, act, rew, no, done = buf.sample(rng, cfg.batch_size)
            q_next = target.forward(no).astype(np.float64).max(axis=1)
            y_taken = np.where(done, rew + mdp.bonus, rew + mdp.gamma * q_next)
            Y = np.zeros((len(o), net.arity))
            Y[np.arange(len(o)), act] = y_taken
            mask = np.zeros_like(Y)
            mask[np.arange(len(o)), act] = 1.0
            lr = cfg.lr_at(step)
            value = _update(net, opt, o, Y, lr, mask)
            if not np.isfinite(value):
                raise NonFiniteLoss(step, value)
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                curve.rows.append((step, value, lr))
        if (step + 1) % target_sync == 0:
            target.load_tensors(net)
        if callback is not None:
            callback(step + 1, net)
    return net, curve, {"action_counts": counts, "max_replay": max_len}


# -- test-time registration --------------------------------------------------

TOP3_PROBS = (0.8, 0.1, 0.1)


class ImageOracle:
    """Hard-wired 'network' returning the analytic action values of the true state.

    In image mode the returned vector is ``r + gamma * V(v')`` evaluated on the
    actual successor residuals, so its argmax is the distance-minimizing move.
    """

    def __init__(self, Tg: RigidTransform, cfg: MdpConfig = MdpConfig()):
        self.Tg, self.cfg = Tg, cfg

    def __call__(self, obs, T: RigidTransform) -> np.ndarray:
        s = image_state(T, self.Tg)
        n0 = self.cfg.norm(s.v)
        out = []
        for a in self.cfg.actions:
            p = params_from_transform(T) + a.delta()
            nxt = image_state(transform_from_params(p), self.Tg)
            n1 = self.cfg.norm(nxt.v)
            if n1 < self.cfg.epsilon:
                out.append(n0 - n1 + self.cfg.bonus)
            else:
                out.append(n0 - n1 + self.cfg.gamma * state_value(nxt.v, self.cfg))
        return np.array(out)


def _policy_q(policy, obs: Volume, T: RigidTransform) -> np.ndarray:
    if isinstance(policy, Network):
        return policy.forward(obs_tensor(obs)[None])[0].astype(np.float64)
    return np.asarray(policy(obs, T), dtype=np.float64)


def choose_action(q, rng=None, randomize=False, probs=TOP3_PROBS) -> int:
    """Argmax, or with ``randomize`` a draw among the top three with ``probs``."""
    q = np.asarray(q)
    if not randomize:
        return int(np.argmax(q))
    if rng is None:
        raise ValueError("randomize requires an rng")
    top = np.argsort(-q, kind="stable")[:len(probs)]
    p = np.asarray(probs[:len(top)], dtype=np.float64)
    return int(top[rng.choice(len(top), p=p / p.sum())])


def greedy_register(Ir: Volume, If: Volume, T0: RigidTransform, policy, N: int,
                    randomize=False, rng=None, Tg: RigidTransform | None = None,
                    cfg: MdpConfig = MdpConfig(), observe=None):
    """Apply ``N`` policy actions in image mode starting at ``T0``.

    ``policy`` is a :class:`~vreg.nn.Network` or a callable
    ``policy(observation, T) -> action values``.  When the ground truth
    ``Tg`` is given the trajectory records residuals and rewards.
    ``observe(T)`` overrides how the observation is formed (default
    ``difference_image(Ir, If, T)``).
    Returns ``(T_final, Trajectory)``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    acts = cfg.actions
    T = T0
    traj = Trajectory()
    if observe is None:
        def observe(T):
            return difference_image(Ir, If, T)
    for t in range(N):
        obs = observe(T)
        q = _policy_q(policy, obs, T)
        if len(q) != len(acts):
            raise ValueError(f"policy returned {len(q)} values for {len(acts)} actions")
        k = choose_action(q, rng, randomize)
        p = params_from_transform(T) + acts[k].delta()
        T_next = transform_from_params(p)
        if Tg is not None:
            v = params_from_transform(compose(Tg, invert(T)))
            r = distance(Tg, T) - distance(Tg, T_next)
        else:
            v, r = np.full(6, np.nan), np.nan
        traj.transitions.append(Transition(t, v, acts[k], r, float(q[k])))
        T = T_next
    if Tg is not None:
        traj.final = image_state(T, Tg, N)
    return T, traj


def register_batch(Ir: Volume, If: Volume, T0s, net: Network, N: int, cfg: MdpConfig = MdpConfig()):
    """Greedy registration of many starting poses at once (one batched forward per step)."""
    acts = cfg.actions
    deltas = np.array([a.delta() for a in acts])
    P = np.array([params_from_transform(T) for T in T0s])
    for _ in range(N):
        obs = np.stack([obs_tensor(difference_image(Ir, If, transform_from_params(p))) for p in P])
        q = net.forward(obs)
        P = P + deltas[np.argmax(q, axis=1)]
    return [transform_from_params(p) for p in P]


def success_rate_for(net: Network, Ir: Volume, If: Volume, starts, N: int, threshold: float,
                     cfg: MdpConfig = MdpConfig(), Tg: RigidTransform | None = None):
    """Fraction of start residuals ``v`` for which greedy registration ends with D < threshold."""
    Tg = identity() if Tg is None else Tg
    T0s = [compose(invert(transform_from_params(v)), Tg) for v in starts]
    finals = register_batch(Ir, If, T0s, net, N, cfg)
    d = np.array([distance(Tg, T) for T in finals])
    return float(np.mean(d < threshold)), d
