"""Fall-predictor correctness: the dual optimizer on known-separable
problems, cross-validation behavior, dataset plumbing, and the rollout
labeling rule checked against explicit continuation replays."""

import math
import os
import warnings

import numpy as np
import pytest

import conftest
from fallsafe import human_env as henv
from fallsafe import neural, ppo
from fallsafe import predictor as P
from fallsafe.errors import ConfigError, DimensionMismatch, FallsafeError


def _blobs(n=150, sep=2.0, seed=0, d=2):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(sep, 0.5, (n, d)), rng.normal(-sep, 0.5, (n, d))])
    y = np.r_[np.ones(n, int), np.zeros(n, int)]
    return X, y


def test_separable_blobs_perfect_and_kkt_satisfied():
    X, y = _blobs()
    model = P.train_svm(X, y, C=10.0, sigma=1.0)
    assert np.all(P.predict_labels(model, X) == y)
    assert P.kkt_violation(model, X, y) < 5e-3
    assert len(model.sv) < len(y)  # sparse solution


def test_xor_needs_kernel_and_kfold_solves_it():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    res = P.kfold_accuracy(X, y, k=6, C_grid=(10.0,), sigma_grid=(0.5, 1.0), seed=0)
    assert res["accuracy"] >= 0.95
    assert len(res["fold_accuracy"]) == 6
    assert 0.9 <= res["fall_recall"] <= 1.0


def test_tiny_c_collapses_to_majority_class():
    X, y = _blobs(n=60, seed=1)
    X, y = X[:90], y[:90]  # 60 safe vs 30 fall
    model = P.train_svm(X, y, C=1e-4, sigma=1.0)
    pred = P.predict_labels(model, X)
    assert np.mean(pred == P.LABEL_SAFE) > 0.95


def test_shuffled_labels_score_near_prior():
    X, y = _blobs(n=120, seed=2)
    rng = np.random.default_rng(3)
    y_shuf = rng.permutation(y)
    res = P.kfold_accuracy(X, y_shuf, k=6, C_grid=(1.0,), sigma_grid=(1.0,), seed=0)
    prior = max(np.mean(y_shuf), 1 - np.mean(y_shuf))
    assert res["accuracy"] < prior + 0.12


def test_margin_sign_convention():
    X, y = _blobs()
    model = P.train_svm(X, y, C=10.0, sigma=1.0)
    safe = P.predict(model, X[0])
    fall = P.predict(model, X[-1])
    assert safe["label"] == P.LABEL_SAFE and safe["margin"] >= 0
    assert fall["label"] == P.LABEL_FALL and fall["margin"] < 0


def test_stratified_folds_balanced_and_deterministic():
    y = np.r_[np.zeros(30, int), np.ones(90, int)]
    f1 = P.stratified_folds(y, 6, seed=4)
    f2 = P.stratified_folds(y, 6, seed=4)
    assert np.array_equal(f1, f2)
    for k in range(6):
        assert np.sum((f1 == k) & (y == 0)) == 5
        assert np.sum((f1 == k) & (y == 1)) == 15
    with pytest.raises(FallsafeError):
        P.stratified_folds(np.zeros(3), 6, seed=0)


def test_train_svm_validation():
    X, y = _blobs(n=20)
    with pytest.raises(FallsafeError):
        P.train_svm(X, np.ones(len(y)), C=1.0, sigma=1.0)
    with pytest.raises(ConfigError):
        P.train_svm(X, y, C=-1.0, sigma=1.0)
    with pytest.raises(ConfigError):
        P.train_svm(X, y, C=1.0, sigma=0.0)


def test_feature_subset_model_accepts_full_vectors():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 6))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    model = P.train_svm(X, y, C=10.0, sigma=1.0, feature_idx=(0, 1))
    assert model.feature_idx == (0, 1)
    # full 6-dim input rows are reduced internally
    acc = np.mean(P.predict_labels(model, X) == y)
    assert acc > 0.9
    with pytest.raises(DimensionMismatch):
        P.decision_function(model, np.zeros((1, 4)))


def test_model_checkpoint_roundtrip(tmp_path):
    X, y = _blobs(n=40)
    model = P.train_svm(X, y, C=3.0, sigma=1.5, feature_idx=(0, 1))
    path = tmp_path / "svm.bin"
    P.save_model(model, path)
    loaded = P.load_model(path)
    assert loaded.C == model.C and loaded.sigma == model.sigma
    assert loaded.feature_idx == model.feature_idx
    assert np.array_equal(P.decision_function(loaded, X),
                          P.decision_function(model, X))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ConfigError):
        P.load_model(bad)


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(25, 6))
    y = rng.integers(0, 2, 25)
    path = tmp_path / "data.csv"
    P.save_dataset(X, y, path)
    with open(path) as f:
        assert f.readline().strip() == P.dataset_header(6)
    X2, y2 = P.load_dataset(path)
    assert np.allclose(X, X2, atol=1e-9)
    assert np.array_equal(y, y2)


class _ConstantPolicy:
    """Fixed large joint-target offset: falls within a second, every episode."""

    def mean_action(self, obs):
        return np.full(6, 1.0)


def test_always_falling_policy_triggers_imbalance_warning(biped, clip):
    def make_env(w):
        return henv.HumanEnv(biped, clip)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        X, y = P.generate_dataset(make_env, _ConstantPolicy(), 60, seed=0)
    assert len(y) == 60
    assert np.mean(y == P.LABEL_FALL) > 0.9
    assert any("class imbalance" in str(w.message) for w in caught)


def test_generate_dataset_deterministic_across_worker_counts(biped, clip):
    def make_env(w):
        return henv.HumanEnv(biped, clip)

    pol = _ConstantPolicy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X1, y1 = P.generate_dataset(make_env, pol, 40, seed=9, n_workers=1)
        X2, y2 = P.generate_dataset(make_env, pol, 40, seed=9, n_workers=1)
    assert np.array_equal(X1, X2) and np.array_equal(y1, y2)


@pytest.mark.slow
def test_labels_match_explicit_continuation_replay(biped, clip):
    """The shared-continuation labeling rule re-derived sample by sample:
    replay the episode from scratch and check whether a fall happens within
    the horizon after the sampled step."""
    if not os.path.exists(conftest.WALKER_POLICY):
        pytest.skip("shipped walking policy not present")
    policy = ppo.GaussianPolicy(neural.load_checkpoint(conftest.WALKER_POLICY))
    env0 = henv.HumanEnv(biped, clip)
    policy.obs_shift, policy.obs_scale = env0.obs_shift_scale()

    def make_env(w):
        return henv.HumanEnv(biped, clip)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X, y, meta = P.generate_dataset(make_env, policy, 120, seed=13,
                                        return_meta=True)
    env = henv.HumanEnv(biped, clip)
    horizon = round(P.HORIZON_CYCLES * clip.cycle_s * env.cfg.control_hz)
    # group samples by episode to replay each episode once
    episodes = {}
    for (ep_seed, s), label in zip(meta, y):
        episodes.setdefault(ep_seed, []).append((s, label))
    for ep_seed, samples in episodes.items():
        obs = env.reset(ep_seed)
        fall_step = None
        step = 0
        last_needed = max(s for s, _ in samples) + horizon
        while step <= last_needed:
            obs, _, term = env.step(policy.mean_action(obs))
            step += 1
            if term:
                if env.diverged or not env.timed_out:
                    fall_step = step
                break
        for s, label in samples:
            fell = fall_step is not None and fall_step - s <= horizon
            expected = P.LABEL_FALL if fell else P.LABEL_SAFE
            assert label == expected
