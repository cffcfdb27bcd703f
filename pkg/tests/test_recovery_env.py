"""Device-side MDP contracts: sensor subsets, latency interpolation, the
hard torque clamp, and predictor-gate hysteresis."""

import numpy as np
import pytest

from fallsafe import neural, ppo
from fallsafe import predictor as P
from fallsafe import recovery_env as renv
from fallsafe.errors import ConfigError, DimensionMismatch
from fallsafe.predictor import SensorConfig


class _ZeroPolicy:
    def mean_action(self, obs):
        return np.zeros(6)


@pytest.fixture(scope="module")
def env(biped, clip):
    e = renv.RecoveryEnv(_ZeroPolicy(), biped, clip)
    return e


def _margin_model(margin):
    """1-feature-degenerate SVM whose decision value is the constant b."""
    return P.SvmModel(
        sv=np.zeros((0, 6)), coef=np.zeros(0), b=float(margin), C=1.0,
        sigma=1.0, mean=np.zeros(6), std=np.ones(6),
        feature_idx=tuple(range(6)))


class _BigPolicy:
    def mean_action(self, obs):
        return np.array([100.0, -100.0])


def test_sensor_subsets_and_dims():
    assert SensorConfig.IMU.dim == 2
    assert SensorConfig.ENCODER.dim == 4
    assert SensorConfig.BOTH.dim == 6
    assert SensorConfig.IMU.feature_idx == (0, 1)
    assert SensorConfig.ENCODER.feature_idx == (2, 3, 4, 5)
    shift, scale = renv.device_obs_shift_scale(SensorConfig.ENCODER)
    assert len(shift) == 4 and np.all(scale > 0)


def test_observation_dim_follows_sensor_config(biped, clip):
    for sensors in SensorConfig:
        cfg = renv.RecoveryEnvConfig(sensors=sensors)
        e = renv.RecoveryEnv(_ZeroPolicy(), biped, clip, config=cfg)
        obs = e.reset(0)
        assert obs.shape == (sensors.dim,)
        assert e.obs_dim == sensors.dim


def test_torque_clamp_is_exact(env):
    env.reset(1)
    env.step(np.array([500.0, -500.0]))
    lim = env.cfg.torque_limit_nm
    assert np.array_equal(env.last_device_tau, [lim, -lim])
    with pytest.raises(DimensionMismatch):
        env.step(np.zeros(3))


def test_latency_sampled_in_configured_range(env):
    lo, hi = env.cfg.latency_ms_range
    for seed in range(20):
        env.reset(seed)
        assert lo / 1000.0 <= env._latency <= hi / 1000.0


def test_delayed_obs_linear_interpolation(env):
    env.reset(2)
    for _ in range(6):
        env.step(np.zeros(2))
    t = env.human.time - env._latency
    times = np.array(env._dev_times)
    hist = np.array(env._dev_hist)
    expected = np.array([np.interp(t, times, hist[:, j])
                         for j in range(6)])
    assert np.allclose(env.delayed_device_obs(), expected, atol=1e-12)
    # at reset there is no history yet: the oldest sample is served
    env.reset(2)
    assert np.array_equal(env.delayed_device_obs(), env._dev_hist[0])


def test_push_scheduled_at_lead_in(env):
    env.reset(3)
    assert len(env.human.sim.pushes) == 1
    assert env.human.sim.pushes[0].onset == env.cfg.pre_push_s


def test_episode_terminates_within_cap(biped, clip):
    cfg = renv.RecoveryEnvConfig(episode_max_s=0.2)
    e = renv.RecoveryEnv(_ZeroPolicy(), biped, clip, config=cfg)
    e.reset(0)
    steps = 0
    term = False
    while not term and steps < 100:
        _, _, term = e.step(np.zeros(2))
        steps += 1
    assert term and steps <= round(0.2 * e.human.cfg.control_hz)


def test_gate_inactive_means_exactly_zero():
    gate = renv.GatedController(_margin_model(+5.0), _BigPolicy(),
                                renv.RecoveryEnvConfig(), 50.0, 1.0)
    obs = np.zeros(6)
    for _ in range(10):
        tau = gate(obs)
        assert np.array_equal(tau, np.zeros(2))
        assert not gate.state.active


def test_gate_activates_clamps_and_deactivates_with_hysteresis():
    cfg = renv.RecoveryEnvConfig()
    cycle_s, hz = 1.0, 50.0
    off_steps = round(cfg.gate_off_cycles * cycle_s * hz)
    danger = renv.GatedController(_margin_model(-1.0), _BigPolicy(), cfg, hz, cycle_s)
    tau = danger(np.zeros(6))
    assert danger.state.active
    assert np.array_equal(tau, [cfg.torque_limit_nm, -cfg.torque_limit_nm])

    # switch the predictor to safe: stays active for one full cycle of steps
    danger.svm = _margin_model(+1.0)
    for k in range(off_steps - 1):
        tau = danger(np.zeros(6))
        assert danger.state.active, f"deactivated early at step {k}"
        assert np.any(tau != 0)
    tau = danger(np.zeros(6))
    assert not danger.state.active
    assert np.array_equal(tau, np.zeros(2))

    # one unsafe reading while counting down resets the hysteresis
    danger.svm = _margin_model(-1.0)
    danger(np.zeros(6))
    danger.svm = _margin_model(+1.0)
    for _ in range(off_steps // 2):
        danger(np.zeros(6))
    danger.svm = _margin_model(-1.0)
    danger(np.zeros(6))
    assert danger.state.safe_steps == 0 and danger.state.active


def test_reward_components_penalize_deviation(biped, clip):
    e = renv.RecoveryEnv(_ZeroPolicy(), biped, clip)
    e.reset(4)
    _, r_zero, _ = e.step(np.zeros(2))
    e.reset(4)
    _, r_act, _ = e.step(np.array([30.0, 30.0]))
    # identical dynamics seed; the action penalty and the dynamics shift
    # should make maximal torque no better than zero torque at lead-in
    assert r_zero <= e.human.cfg.w_pose + e.human.cfg.w_com + e.human.cfg.w_feet
    assert np.isfinite(r_act)


def test_config_fail_closed_and_validation():
    with pytest.raises(ConfigError):
        renv.config_from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        renv.RecoveryEnvConfig(latency_ms_range=(50.0, 40.0))
    with pytest.raises(ConfigError):
        renv.RecoveryEnvConfig(torque_limit_nm=0.0)
    cfg = renv.config_from_dict({"sensors": "imu", "torque_limit_nm": 15})
    assert cfg.sensors is SensorConfig.IMU and cfg.torque_limit_nm == 15


def test_make_recovery_policy_shapes():
    pol = renv.make_recovery_policy(SensorConfig.IMU, seed=0)
    a = pol.mean_action(np.zeros(2))
    assert a.shape == (2,)
    assert np.allclose(np.exp(pol.net.log_std), 5.0)


def test_train_recovery_smoke(biped, clip):
    cfg = ppo.PpoConfig(steps_per_batch=64, minibatch=32, epochs=1)
    rcfg = renv.RecoveryEnvConfig(episode_max_s=1.0)
    policy, value, hist = renv.train_recovery(
        _ZeroPolicy(), rcfg, cfg, n_updates=2, seed=0,
        human_config=None, n_workers=1)
    assert len(hist) == 2
    assert policy.net.out_dim == 2 and value.out_dim == 1
