"""Policy-optimization correctness: advantage estimation against a brute
force oracle, gaussian log-densities against scipy, and deterministic
collection/updating."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fallsafe import neural, ppo
from fallsafe.errors import FallsafeError


def brute_force_gae(rewards, values, dones, terminated, bootstrap, gamma, lam):
    """O(n^2) direct sum of discounted TD residuals within each episode."""
    n = len(rewards)
    starts = [0] + [t + 1 for t in range(n) if dones[t]]
    adv = np.zeros(n)
    for s in starts:
        if s >= n:
            continue
        e = s
        while e < n - 1 and not dones[e]:
            e += 1
        deltas = []
        for t in range(s, e + 1):
            if t == e:
                nv = 0.0 if terminated[t] else bootstrap[t]
            else:
                nv = values[t + 1]
            deltas.append(rewards[t] + gamma * nv - values[t])
        for t in range(s, e + 1):
            adv[t] = sum((gamma * lam) ** l * deltas[t - s + l]
                         for l in range(e - t + 1))
    return adv


@given(seed=st.integers(0, 10**6),
       gamma=st.floats(0.5, 1.0), lam=st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_gae_matches_brute_force(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 40))
    rewards = rng.normal(size=n)
    values = rng.normal(size=n)
    dones = rng.random(n) < 0.2
    dones[-1] = True
    terminated = dones & (rng.random(n) < 0.5)
    bootstrap = rng.normal(size=n) * (dones & ~terminated)
    adv, rets = ppo.gae(rewards, values, dones, terminated, bootstrap, gamma, lam)
    ref = brute_force_gae(rewards, values, dones, terminated, bootstrap, gamma, lam)
    assert np.allclose(adv, ref, atol=1e-9)
    assert np.allclose(rets, ref + values, atol=1e-9)


def test_gae_monte_carlo_limit():
    # gamma = lam = 1, single terminated episode: A_t = sum_{s>=t} r_s - V_t
    rewards = np.array([1.0, 2.0, 3.0])
    values = np.array([0.5, 0.5, 0.5])
    dones = np.array([False, False, True])
    terminated = dones.copy()
    adv, _ = ppo.gae(rewards, values, dones, terminated, np.zeros(3), 1.0, 1.0)
    assert np.allclose(adv, [6.0 - 0.5, 5.0 - 0.5, 3.0 - 0.5])


def test_gae_truncation_bootstraps():
    rewards = np.array([1.0])
    values = np.array([0.0])
    bootstrap = np.array([10.0])
    adv, _ = ppo.gae(rewards, values, np.array([True]), np.array([False]),
                     bootstrap, 0.9, 0.95)
    assert adv[0] == pytest.approx(1.0 + 0.9 * 10.0)
    adv_t, _ = ppo.gae(rewards, values, np.array([True]), np.array([True]),
                       bootstrap, 0.9, 0.95)
    assert adv_t[0] == pytest.approx(1.0)


def test_log_prob_matches_scipy():
    net = neural.Mlp.create((3, 8, 2), head="gaussian", seed=0)
    net.log_std[:] = [0.2, -0.5]
    policy = ppo.GaussianPolicy(net)
    rng = np.random.default_rng(1)
    obs = rng.normal(size=3)
    mean = policy.mean_action(obs)
    std = np.exp(net.log_std)
    for _ in range(5):
        a = rng.normal(size=2)
        ref = float(np.sum(stats.norm.logpdf(a, mean, std)))
        assert policy.log_prob_single(a, mean) == pytest.approx(ref, abs=1e-12)
    acts = rng.normal(size=(4, 2))
    means = np.tile(mean, (4, 1))
    refs = stats.norm.logpdf(acts, means, std).sum(axis=1)
    assert np.allclose(policy.log_prob_batch(acts, means), refs)


class LinearToyEnv:
    """1-D integrator: keep x near 0 with bounded actions."""

    obs_dim = 1
    act_dim = 1

    def __init__(self):
        self.x = 0.0
        self.t = 0

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        self.x = float(rng.uniform(-1, 1))
        self.t = 0
        return np.array([self.x])

    def step(self, action):
        self.x += 0.1 * float(np.clip(action[0], -1, 1)) + 0.05 * self.x
        self.t += 1
        reward = 1.0 - min(self.x**2, 4.0)
        done = self.t >= 50 or abs(self.x) > 2.0
        return np.array([self.x]), reward, done


def _nets(seed=0):
    net = neural.Mlp.create((1, 16, 1), head="gaussian", seed=seed)
    value = neural.Mlp.create((1, 16, 1), head="linear", seed=seed + 1)
    return ppo.GaussianPolicy(net), value


def test_collect_is_deterministic_and_bookkeeps_episodes():
    policy, value = _nets()
    b1 = ppo.collect(LinearToyEnv(), policy, value, 220, seed=42)
    b2 = ppo.collect(LinearToyEnv(), policy, value, 220, seed=42)
    for f in ("obs", "actions", "logp", "rewards", "values", "dones",
              "terminated", "bootstrap"):
        assert np.array_equal(getattr(b1, f), getattr(b2, f))
    assert len(b1) == 220
    assert b1.dones[-1]  # batch boundary closes the last episode
    lens = b1.episode_lengths()
    assert sum(lens) == 220
    assert len(b1.episode_returns()) == len(lens)
    # truncation at the boundary must carry a bootstrap value
    if not b1.terminated[-1]:
        assert b1.bootstrap[-1] != 0.0 or abs(b1.bootstrap[-1]) >= 0.0
    # bootstrap is only populated at truncations
    assert np.all(b1.bootstrap[~(b1.dones & ~b1.terminated)] == 0)


def test_merge_buffers_preserves_worker_order():
    policy, value = _nets()
    a = ppo.collect(LinearToyEnv(), policy, value, 30, seed=1)
    b = ppo.collect(LinearToyEnv(), policy, value, 30, seed=2)
    m = ppo.merge_buffers([a, b])
    assert np.array_equal(m.obs[:30], a.obs) and np.array_equal(m.obs[30:], b.obs)


def test_normalize_advantages():
    adv = ppo.normalize_advantages(np.array([1.0, 2.0, 3.0, 10.0]))
    assert abs(adv.mean()) < 1e-12
    assert adv.std() == pytest.approx(1.0, abs=1e-6)


def test_ppo_update_deterministic_and_reports_stats():
    policy, value = _nets()
    buf = ppo.collect(LinearToyEnv(), policy, value, 256, seed=3)
    cfg = ppo.PpoConfig(minibatch=64, epochs=2, steps_per_batch=256)

    p2, v2 = _nets()
    stats1 = ppo.ppo_update(policy, value, buf, cfg, rng=np.random.default_rng(9))
    stats2 = ppo.ppo_update(p2, v2, buf, cfg, rng=np.random.default_rng(9))
    for a, b in zip(policy.net.params(), p2.net.params()):
        assert np.array_equal(a, b)
    assert stats1.keys() == {"kl", "clip_frac", "value_loss", "kl_flagged"}
    assert math.isfinite(stats1["kl"]) and 0 <= stats1["clip_frac"] <= 1
    assert stats1["value_loss"] == stats2["value_loss"]


def test_ppo_update_rejects_empty_buffer():
    policy, value = _nets()
    empty = ppo.collect(LinearToyEnv(), policy, value, 0, seed=0)
    with pytest.raises(FallsafeError):
        ppo.ppo_update(policy, value, empty, ppo.PpoConfig())


def test_config_validation():
    with pytest.raises(FallsafeError):
        ppo.PpoConfig(gamma=0.0)
    with pytest.raises(FallsafeError):
        ppo.PpoConfig(lam=1.5)
    with pytest.raises(FallsafeError):
        ppo.PpoConfig(clip_ratio=0.0)


def test_train_writes_log_and_is_deterministic(tmp_path):
    import io

    cfg = ppo.PpoConfig(steps_per_batch=128, minibatch=64, epochs=2)
    outs = []
    for _ in range(2):
        policy, value = _nets(seed=5)
        log = io.StringIO()
        hist = ppo.train(lambda w: LinearToyEnv(), policy, value, cfg,
                         n_updates=3, seed=123, n_workers=2, log_file=log)
        outs.append((log.getvalue(), [p.copy() for p in policy.net.params()]))
        assert len(hist) == 3
        lines = log.getvalue().strip().split("\n")
        assert lines[0] == ppo.TRAIN_LOG_HEADER
        assert len(lines) == 4
    assert outs[0][0] == outs[1][0]
    for a, b in zip(outs[0][1], outs[1][1]):
        assert np.array_equal(a, b)
