import numpy as np
import pytest
from scipy import stats

import zeuslab.training as tr
from zeuslab.families import PointMassFamily
from zeuslab.nn import parameter_checksum
from zeuslab.training import (Agent, DivergenceError, ReplayBuffer, TrainConfig, WindowTracker,
                              ZeroShotViolation, build_model, collect_windows, evaluate_zero_shot,
                              train)

SMALL = dict(latent_dim=8, context_dim=4, hidden=32, q_hidden=32)


def small_setup(steps=300, seed=0, alpha=1.0):
    fam = PointMassFamily(horizon=20)
    model = build_model(fam, dict(SMALL, alpha=alpha), np.random.default_rng(seed))
    tcfg = TrainConfig(total_steps=steps, batch_size=32, probe_size=32, warmup_steps=40,
                       buffer_capacity=5000)
    return fam, model, tcfg


def test_zero_steps_leave_parameters():
    fam, model, tcfg = small_setup(steps=0)
    before = model.checksum()
    train(model, fam, [1.0, 2.0], tcfg, 0)
    assert model.checksum() == before


def test_training_is_deterministic():
    logs = []
    for _ in range(2):
        fam, model, tcfg = small_setup(steps=120)
        model, tlog, _ = train(model, fam, [1.0, 3.0], tcfg, 5)
        logs.append((tlog.csv_rows(), model.checksum()))
    assert logs[0] == logs[1]


def test_log_rows_and_breakdown():
    fam, model, tcfg = small_setup(steps=120)
    _, tlog, _ = train(model, fam, [1.0, 3.0], tcfg, 1)
    rows = tlog.csv_rows()
    assert rows[0] == ("step", "context_id", "return", "context_term", "dynamics_term",
                       "reward_term", "total")
    for _, ctx, dyn, rew, tot in tlog.updates:
        assert min(ctx, dyn, rew) >= 0
        assert tot == pytest.approx(ctx + dyn + rew)
    assert len(tlog.episodes) >= 2 * (120 // 20) - 2


def test_windows_never_straddle_episodes():
    fam, model, tcfg = small_setup(steps=90)
    _, _, buf = train(model, fam, [1.0, 2.0], tcfg, 2)
    obs_dim = model.cfg.obs_dim
    for i in range(len(buf)):
        w = buf.next_window[i]
        # the newest transition is the one stored at i
        assert np.allclose(w[-1, :obs_dim], buf.obs[i])
        # every earlier nonzero row belongs to the same episode, so its next
        # observation is the following row's observation
        for t in range(len(w) - 1):
            if np.any(w[t]):
                assert np.allclose(w[t, -obs_dim:], w[t + 1, :obs_dim])


def test_episode_start_windows_zero_padded():
    tracker = WindowTracker(3, 2)
    tracker.push(np.array([1.0, 2.0]))
    w = tracker.get()
    assert np.all(w[:2] == 0) and np.array_equal(w[2], [1.0, 2.0])
    tracker.reset()
    assert np.all(tracker.get() == 0)


def test_replay_uniform_sampling():
    buf = ReplayBuffer(50, 1, 1, 1, 4)
    for i in range(50):
        buf.add([i], 0, [0], 0.0, [i], np.zeros((1, 4)), np.zeros((1, 4)), 0, 0.5)
    idx = buf.sample_indices(20_000, np.random.default_rng(0))
    assert stats.chisquare(np.bincount(idx, minlength=50)).pvalue > 0.01


def test_replay_hides_context():
    buf = ReplayBuffer(4, 1, 1, 1, 4)
    buf.add([0], 0, [0], 0.0, [0], np.zeros((1, 4)), np.zeros((1, 4)), 0, 0.7)
    batch = buf.sample(3, np.random.default_rng(0))
    assert not any("context" in k for k in batch)
    assert buf.context_tags(np.array([0]))[0] == 0.7


def test_replay_ring_overwrites():
    buf = ReplayBuffer(3, 1, 1, 1, 4)
    for i in range(5):
        buf.add([i], 0, [0], 0.0, [i], np.zeros((1, 4)), np.zeros((1, 4)), 0, 0.0)
    assert len(buf) == 3 and sorted(buf.obs[:, 0]) == [2, 3, 4]


def test_model_losses_fall_on_fixed_batch():
    fam, model, tcfg = small_setup(steps=200)
    _, _, buf = train(model, fam, [1.0, 2.5, 4.0], tcfg, 3)
    agent = Agent(model, tcfg)
    batch = buf.sample(128, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    first = agent.update_representation(batch, rng)
    for _ in range(500):
        last = agent.update_representation(batch, rng)
    assert last.dynamics_term < first.dynamics_term
    assert last.reward_term < first.reward_term


def test_context_term_trends_down():
    fam, model, tcfg = small_setup(steps=600)
    _, tlog, _ = train(model, fam, [1.0, 2.5, 4.0], tcfg, 4)
    ctx = np.array([u[1] for u in tlog.updates])
    assert ctx[-50:].mean() < ctx[:50].mean()


def test_zero_shot_checksum_guard(monkeypatch):
    fam, model, _ = small_setup()
    before = model.checksum()
    evaluate_zero_shot(model, fam, [0.5, 6.0], 1, 0)
    assert model.checksum() == before

    original = tr.run_episode

    def tamper(model, env, rng, epsilon=0.0):
        model.q.params[1][0] += 1.0
        return original(model, env, rng, epsilon)

    monkeypatch.setattr(tr, "run_episode", tamper)
    with pytest.raises(ZeroShotViolation):
        evaluate_zero_shot(model, fam, [0.5], 1, 0)


def test_divergence_guard():
    fam, model, tcfg = small_setup()
    agent = Agent(model, tcfg)
    rng = np.random.default_rng(0)
    windows = collect_windows(model.cfg, fam, 1.0, 8, 0)
    B = len(windows)
    batch = {"obs": np.zeros((B, model.cfg.obs_dim)), "action": np.zeros(B, dtype=int),
             "action_vec": np.zeros((B, 2)), "reward": np.full(B, np.nan),
             "next_obs": np.zeros((B, model.cfg.obs_dim)), "window": windows,
             "next_window": windows}
    before = model.checksum()
    with pytest.raises(DivergenceError) as err:
        agent.update_critic(batch, rng)
    assert err.value.snapshot
    assert model.checksum() == before


def test_collect_windows_shapes():
    fam, model, _ = small_setup()
    w = collect_windows(model.cfg, fam, 2.0, 10, 0)
    assert w.shape == (10, model.cfg.k, model.cfg.transition_dim)


def test_eval_on_train_context_near_training_returns():
    fam, model, tcfg = small_setup(steps=1500)
    model, tlog, _ = train(model, fam, [1.0, 2.0], tcfg, 6)
    tail = tlog.returns_for(0)[-10:]
    ev = evaluate_zero_shot(model, fam, [1.0], 10, 99)[1.0]
    lo, hi = min(tail), max(tail)
    spread = max(hi - lo, 1.0)
    assert lo - spread <= ev <= hi + spread
