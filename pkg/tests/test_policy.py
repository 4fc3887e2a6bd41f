import numpy as np
import pytest

from vreg.env import MdpConfig, q_targets
from vreg.geometry import compose, distance, identity, invert, transform_from_params
from vreg.nn import Network, desk_architecture
from vreg.policy import (ImageEnv, ImageOracle, NonFiniteLoss, ReplayBuffer, TrainConfig, TrainingSample,
                         choose_action, greedy_register, linear_schedule, loss, register_batch, train_drl,
                         train_dsl)

PLANAR = MdpConfig(dimensionality=2)


def start_from(v, Tg=None):
    Tg = identity() if Tg is None else Tg
    return compose(invert(transform_from_params(v)), Tg)


def tiny_net(shape=(1, 8, 8), arity=6, seed=0):
    return Network(desk_architecture(shape, arity, (2,), (8,)), seed)


def test_loss_is_sum_of_squares():
    net = tiny_net()
    net.set_all(0.0)
    batch = [TrainingSample(np.zeros((1, 8, 8), np.float32), np.arange(6.0)) for _ in range(2)]
    assert loss(batch, net) == pytest.approx(2 * sum(k * k for k in range(6)))
    with pytest.raises(ValueError):
        loss([], net)


def test_train_dsl_reduces_loss():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 1, 8, 8)).astype(np.float32)
    Y = np.stack([q_targets(rng.uniform(-3, 3, 6) * [1, 1, 0, 0, 0, 1], PLANAR) for _ in range(64)])
    cfg = TrainConfig(1e-3, 0.7, 1000, 16, 300, log_every=10)
    net = tiny_net()
    before = float(np.sum((net.forward(X) - Y) ** 2))
    seen = []
    net, curve = train_dsl(X, Y, cfg, net, callback=lambda s, n: seen.append(s))
    after = float(np.sum((net.forward(X) - Y) ** 2))
    assert after < 0.2 * before
    assert seen == list(range(1, 301))
    assert curve.rows[0][0] == 0 and curve.rows[-1][0] == 299


def test_train_dsl_is_deterministic():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(32, 1, 8, 8)).astype(np.float32)
    Y = rng.normal(size=(32, 6))
    cfg = TrainConfig(1e-3, total_steps=20)
    a, _ = train_dsl(X, Y, cfg, tiny_net())
    b, _ = train_dsl(X, Y, cfg, tiny_net())
    assert a.to_bytes() == b.to_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_dsl_non_finite():
    X = np.ones((4, 1, 8, 8), np.float32)
    Y = np.full((4, 6), np.inf)
    with pytest.raises(NonFiniteLoss) as err:
        train_dsl(X, Y, TrainConfig(1e-3, total_steps=5, batch_size=2), tiny_net())
    assert err.value.step == 0


def test_train_dsl_rejects_bad_targets():
    with pytest.raises(ValueError):
        train_dsl(np.zeros((2, 1, 8, 8)), np.zeros((2, 4)), TrainConfig(1e-3), tiny_net())


def test_train_config_validation_and_decay():
    cfg = TrainConfig(1.0, 0.5, 10)
    assert cfg.lr_at(9) == 1.0 and cfg.lr_at(10) == 0.5 and cfg.lr_at(25) == 0.25
    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"total_steps": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**{"learning_rate": 1e-3, **bad})


def test_greedy_register_step_count(simple2d):
    Ir, If = simple2d.reference, simple2d.floating
    with pytest.raises(ValueError):
        greedy_register(Ir, If, identity(), tiny_net((1, 32, 32)), 0, cfg=PLANAR)
    T, traj = greedy_register(Ir, If, identity(), tiny_net((1, 32, 32)), 1, cfg=PLANAR)
    assert len(traj) == 1
    assert distance(T, identity()) == pytest.approx(1.0)


def test_oracle_reaches_truth_in_five_steps(simple2d):
    Tg = simple2d.ground_truth
    oracle = ImageOracle(Tg, PLANAR)
    T, traj = greedy_register(simple2d.reference, simple2d.floating, start_from([5, 0, 0, 0, 0, 0], Tg),
                              oracle, 5, Tg=Tg, cfg=PLANAR)
    assert distance(Tg, T) < 1e-9
    assert [t.action.name for t in traj.transitions] == ["tx+"] * 5
    assert np.allclose([t.reward for t in traj.transitions], 1.0)


def test_oracle_rotation_lattice(simple2d):
    Tg = simple2d.ground_truth
    T, _ = greedy_register(simple2d.reference, simple2d.floating, start_from([3, -2, 0, 0, 0, 4], Tg),
                           ImageOracle(Tg, PLANAR), 9, Tg=Tg, cfg=PLANAR)
    # rotations couple the translation residual, so the lattice is only approximate
    assert distance(Tg, T) < PLANAR.epsilon


def test_policy_arity_mismatch(simple2d):
    with pytest.raises(ValueError):
        greedy_register(simple2d.reference, simple2d.floating, identity(), lambda o, T: np.zeros(12), 1,
                        cfg=PLANAR)


def test_top3_randomisation():
    q = np.array([0.0, 5.0, 1.0, 4.0, 3.0, -1.0])
    assert choose_action(q) == 1
    with pytest.raises(ValueError):
        choose_action(q, randomize=True)
    draws = [choose_action(q, np.random.default_rng(s), True) for s in range(2000)]
    assert set(draws) == {1, 3, 4}
    assert np.mean(np.array(draws) == 1) == pytest.approx(0.8, abs=0.03)
    a = [choose_action(q, np.random.default_rng(7), True) for _ in range(3)]
    assert len(set(a)) == 1


def test_randomized_registration_is_reproducible(simple2d):
    net = tiny_net((1, 32, 32))
    args = (simple2d.reference, simple2d.floating, identity(), net, 6)
    a = greedy_register(*args, randomize=True, rng=np.random.default_rng(3), cfg=PLANAR)[1]
    b = greedy_register(*args, randomize=True, rng=np.random.default_rng(3), cfg=PLANAR)[1]
    assert [t.action for t in a.transitions] == [t.action for t in b.transitions]


def test_register_batch_matches_sequential(simple2d):
    net = tiny_net((1, 32, 32), seed=4)
    starts = [start_from(v) for v in ([4, 0, 0, 0, 0, 0], [-3, 2, 0, 0, 0, 5])]
    batch = register_batch(simple2d.reference, simple2d.floating, starts, net, 4, PLANAR)
    for T0, Tb in zip(starts, batch):
        Ts, _ = greedy_register(simple2d.reference, simple2d.floating, T0, net, 4, cfg=PLANAR)
        np.testing.assert_allclose(Ts.matrix, Tb.matrix, atol=1e-12)


def test_replay_buffer_ring():
    buf = ReplayBuffer(3, (2,))
    for i in range(5):
        buf.push(np.full(2, i), i % 2, float(i), np.full(2, i + 1), i == 4)
    assert len(buf) == 3
    assert sorted(buf.reward.tolist()) == [2.0, 3.0, 4.0]
    o, a, r, no, d = buf.sample(np.random.default_rng(0), 10)
    assert o.shape == (10, 2) and np.all(no[:, 0] == o[:, 0] + 1)
    with pytest.raises(ValueError):
        ReplayBuffer(0, (2,))


def test_linear_schedule():
    f = linear_schedule(1.0, 0.1, 10)
    assert f(0) == 1.0 and f(5) == pytest.approx(0.55) and f(10) == 0.1 and f(99) == 0.1


def test_image_env_rewards(simple2d):
    env = ImageEnv(simple2d.reference, simple2d.floating, PLANAR, lambda rng: np.array([1, 0, 0, 0, 0, 0.0]),
                   max_episode_steps=3)
    obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (1, 32, 32)
    k = [a.name for a in PLANAR.actions].index("tx+")
    _, r, terminal, truncated = env.step(k)
    assert r == pytest.approx(1.0) and terminal and not truncated


def test_train_drl_smoke(simple2d):
    def factory(rng):
        return ImageEnv(simple2d.reference, simple2d.floating, PLANAR,
                        lambda r: r.uniform(-3, 3, 6) * [1, 1, 0, 0, 0, 1], 10)

    net = tiny_net((1, 32, 32))
    net, curve, stats = train_drl(factory, TrainConfig(1e-3, total_steps=60, batch_size=8, log_every=10),
                                  net, PLANAR, replay_capacity=40, target_sync=20)
    assert stats["action_counts"].sum() == 60
    assert stats["max_replay"] == 40
    assert curve.rows and all(np.isfinite(l) for _, l, _ in curve.rows)
