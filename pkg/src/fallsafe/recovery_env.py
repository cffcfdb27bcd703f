"""Device-side recovery MDP layered on the frozen walking policy.

The assistive device sees only its own sensors (pelvis IMU and/or hip
encoders), delayed by a per-episode latency, and can add at most 30 N·m at
each hip on top of whatever the human walking policy is doing. Episodes start
a short fixed window before a scheduled push so training concentrates on the
moments that matter. At deployment the device torque is gated by the fall
predictor; during training the gate is forced open so the policy receives
gradient everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import human_env as henv
from . import neural, predictor
from .errors import ConfigError, DimensionMismatch
from .predictor import SensorConfig

TORQUE_LIMIT_NM = 30.0
ACT_DIM = 2  # left hip, right hip


@dataclass(frozen=True)
class RecoveryEnvConfig:
    sensors: SensorConfig = SensorConfig.BOTH
    latency_ms_range: tuple[float, float] = (40.0, 50.0)
    torque_limit_nm: float = TORQUE_LIMIT_NM
    gate_on_margin: float = 0.0
    gate_off_cycles: float = 1.0
    w1: float = 1.0  # COM-velocity penalty
    w2: float = 0.5  # angular-velocity penalty
    w3: float = 0.01  # action penalty
    pre_push_s: float = 0.5  # episode lead-in before the scheduled push
    episode_max_s: float = 8.0

    def __post_init__(self):
        lo, hi = self.latency_ms_range
        if not (0 <= lo <= hi):
            raise ConfigError("latency range must satisfy 0 <= lo <= hi")
        if self.torque_limit_nm <= 0:
            raise ConfigError("torque limit must be positive")
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError("reward weights must be non-negative")


_CFG_KEYS = {
    "sensors", "latency_ms_range", "torque_limit_nm", "gate_on_margin",
    "gate_off_cycles", "w1", "w2", "w3", "pre_push_s", "episode_max_s",
}


def config_from_dict(doc: dict) -> RecoveryEnvConfig:
    """Build a config from a mapping, rejecting unknown keys."""
    unknown = set(doc) - _CFG_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in recovery env config")
    doc = dict(doc)
    if "sensors" in doc:
        doc["sensors"] = SensorConfig(doc["sensors"])
    if "latency_ms_range" in doc:
        doc["latency_ms_range"] = tuple(doc["latency_ms_range"])
    return RecoveryEnvConfig(**doc)


class RecoveryEnv:
    """Device MDP: `reset(seed) -> DeviceObs`, `step(tau) -> (obs, r, term)`.

    The policy input is the sensor-restricted, latency-delayed DeviceObs;
    the full simulator state feeds only the reward.
    """

    act_dim = ACT_DIM

    def __init__(
        self,
        walking_policy,
        model: dyn.ArticulatedModel | None = None,
        clip=None,
        human_config: henv.HumanEnvConfig | None = None,
        config: RecoveryEnvConfig | None = None,
    ):
        self.cfg = config if config is not None else RecoveryEnvConfig()
        self.human = henv.HumanEnv(model, clip, human_config)
        self.walking_policy = walking_policy
        self.obs_dim = self.cfg.sensors.dim
        self._max_steps = round(self.cfg.episode_max_s * self.human.cfg.control_hz)
        self._nominal_v = np.array([self.human.clip.speed, 0.0])
        self.diverged = False

    @property
    def clip(self):
        return self.human.clip

    def _record_device(self):
        self._dev_times.append(self.human.time)
        self._dev_hist.append(self.human.device_obs())

    def delayed_device_obs(self) -> np.ndarray:
        """Full 6-dim device vector at (now - latency), linearly interpolated
        between control-step samples."""
        t = self.human.time - self._latency
        times = self._dev_times
        hist = self._dev_hist
        if t <= times[0]:
            return hist[0].copy()
        k = np.searchsorted(times, t)  # times[k-1] < t <= times[k]
        if k >= len(times):
            return hist[-1].copy()
        w = (t - times[k - 1]) / (times[k] - times[k - 1])
        return (1 - w) * hist[k - 1] + w * hist[k]

    def observe(self) -> np.ndarray:
        """Sensor-restricted delayed observation (the policy's input)."""
        return self.delayed_device_obs()[list(self.cfg.sensors.feature_idx)]

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        # same magnitude/direction sampler as walking training, but the onset
        # is pinned a fixed window after the episode start
        p = self.human.cfg.push
        mag = rng.uniform(p.fmin, p.fmax)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        planar = max(mag * math.cos(theta), 1e-9)
        push = dyn.PushEvent(
            magnitude=planar,
            direction=(sign, 0.0),
            onset=self.cfg.pre_push_s,
            duration=p.duration_ms / 1000.0,
        )
        lo, hi = self.cfg.latency_ms_range
        self._latency = rng.uniform(lo, hi) / 1000.0
        self._human_obs = self.human.reset(int(rng.integers(2**63)), push=push)
        self._steps = 0
        self.diverged = False
        self._dev_times = [self.human.time]
        self._dev_hist = [self.human.device_obs()]
        return self.observe()

    def step(self, device_action):
        device_action = np.asarray(device_action, float)
        if device_action.shape != (ACT_DIM,):
            raise DimensionMismatch("device action must be (left, right) hip torque")
        lim = self.cfg.torque_limit_nm
        assist = np.clip(device_action, -lim, lim)
        self.last_device_tau = assist

        human_action = self.walking_policy.mean_action(self._human_obs)
        self._human_obs, _, term = self.human.step(human_action, hip_assist=assist)
        self._steps += 1
        self.diverged = self.human.diverged
        self._record_device()

        cfg = self.cfg
        if self.human.diverged:
            return self.observe(), 0.0, True
        frame = self.human.last_frame
        r = (
            self.human.last_imitation
            - cfg.w1 * float(np.linalg.norm(frame["vel"] - self._nominal_v))
            - cfg.w2 * abs(frame["omega"])
            - cfg.w3 * float(np.linalg.norm(assist))
        )
        terminated = term or self._steps >= self._max_steps
        return self.observe(), r, terminated


@dataclass
class GateState:
    """Hysteresis for predictor-gated assistance."""

    active: bool = False
    safe_steps: int = 0


class GatedController:
    """Predictor-gated recovery torques, evaluated once per control step.

    Activates the moment the predictor margin drops below the threshold;
    deactivates only after the predictor has reported safe for one full gait
    cycle of consecutive steps. Torques are exactly zero while inactive.
    """

    def __init__(self, svm: predictor.SvmModel, recovery_policy, cfg: RecoveryEnvConfig,
                 control_hz: float, cycle_s: float):
        self.svm = svm
        self.policy = recovery_policy
        self.cfg = cfg
        self.off_steps = round(cfg.gate_off_cycles * cycle_s * control_hz)
        self.state = GateState()

    def __call__(self, device_obs6: np.ndarray) -> np.ndarray:
        """Device torques for the current step given the raw 6-dim sensor
        vector (the predictor and policy apply their own feature subsets)."""
        margin = predictor.predict(self.svm, device_obs6)["margin"]
        st = self.state
        if margin < self.cfg.gate_on_margin:
            st.active = True
            st.safe_steps = 0
        elif st.active:
            st.safe_steps += 1
            if st.safe_steps >= self.off_steps:
                st.active = False
                st.safe_steps = 0
        if not st.active:
            return np.zeros(ACT_DIM)
        feats = device_obs6[list(self.cfg.sensors.feature_idx)]
        lim = self.cfg.torque_limit_nm
        return np.clip(self.policy.mean_action(feats), -lim, lim)


def device_obs_shift_scale(sensors: SensorConfig):
    """Fixed normalization for recovery-policy inputs."""
    full_scale = np.array([50.0, 5.0, 0.6, 0.6, 5.0, 5.0])
    idx = list(sensors.feature_idx)
    return np.zeros(len(idx)), full_scale[idx]


def make_recovery_policy(sensors: SensorConfig, seed: int):
    """Fresh 2x64 gaussian policy over the sensor subset, output in N·m."""
    from . import ppo

    net = neural.Mlp.create((sensors.dim, 64, 64, ACT_DIM), head="gaussian", seed=seed)
    net.log_std[:] = np.log(5.0)  # exploration scale in N·m
    shift, scale = device_obs_shift_scale(sensors)
    return ppo.GaussianPolicy(net, shift, scale)


def train_recovery(walking_policy, env_config: RecoveryEnvConfig,
                   ppo_config, n_updates: int, seed: int,
                   human_config=None, n_workers: int = 1, log_file=None,
                   progress=None):
    """PPO over the device MDP with the gate forced open; returns the policy
    and value networks plus the training history."""
    from . import ppo

    policy = make_recovery_policy(env_config.sensors, seed)
    value_net = neural.Mlp.create((env_config.sensors.dim, 64, 64, 1),
                                  head="linear", seed=seed + 1)

    def make_env(w):
        return RecoveryEnv(walking_policy, human_config=human_config,
                           config=env_config)

    history = ppo.train(make_env, policy, value_net, ppo_config, n_updates,
                        seed, n_workers=n_workers, log_file=log_file,
                        progress=progress)
    return policy, value_net, history
