"""Imitation-based walking MDP for the planar biped.

The agent outputs joint-target offsets around the phase-indexed reference
pose; a PD law converts them to torques at 50 Hz while the physics runs at a
finer substep. Observations are delayed by a fixed sensor latency. Each
episode schedules one horizontal push of random magnitude, direction, and
timing against the torso, which drives robustness during training.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from . import gait
from .errors import ConfigError, SimulationDiverged

OBS_DIM = 22
ACT_DIM = 6
MAX_TARGET_OFFSET = 1.0  # rad, clamp on the policy's PD-target offsets

PD_KP = np.array([150.0, 150.0, 90.0, 150.0, 150.0, 90.0])
PD_KD = np.array([15.0, 15.0, 9.0, 15.0, 15.0, 9.0])


@dataclass(frozen=True)
class PushConfig:
    fmin: float = 0.0  # N
    fmax: float = 800.0  # N
    duration_ms: float = 50.0
    onset_min_cycles: float = 1.0
    onset_max_cycles: float = 6.0

    def __post_init__(self):
        if not (0 <= self.fmin <= self.fmax):
            raise ConfigError("push magnitudes must satisfy 0 <= fmin <= fmax")
        if self.duration_ms <= 0:
            raise ConfigError("push duration must be positive")


@dataclass(frozen=True)
class HumanEnvConfig:
    control_hz: float = 50.0
    sim_dt: float = 0.002  # s
    delay_ms: float = 40.0
    push: PushConfig = field(default_factory=PushConfig)
    terminate_pelvis_ratio: float = 0.6
    episode_max_s: float = 20.0
    reset_noise_q: float = 0.01  # rad, joints and pitch
    reset_noise_qd: float = 0.05  # rad/s
    w_pose: float = 5.0
    w_com: float = 2.0
    w_feet: float = 0.5
    w_torque: float = 0.005

    def __post_init__(self):
        n_sub = 1.0 / (self.control_hz * self.sim_dt)
        if abs(n_sub - round(n_sub)) > 1e-9:
            raise ConfigError("1/control_hz must be a multiple of sim_dt")
        delay = self.delay_ms / 1000.0 * self.control_hz
        if abs(delay - round(delay)) > 1e-9:
            raise ConfigError("delay must be a whole number of control steps")

    @property
    def n_sub(self) -> int:
        return round(1.0 / (self.control_hz * self.sim_dt))

    @property
    def delay_steps(self) -> int:
        return round(self.delay_ms / 1000.0 * self.control_hz)

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_hz


_PUSH_KEYS = {"fmin", "fmax", "duration_ms", "onset_min_cycles", "onset_max_cycles"}
_CFG_KEYS = {
    "control_hz", "sim_dt", "delay_ms", "push", "terminate_pelvis_ratio",
    "episode_max_s", "reset_noise_q", "reset_noise_qd",
    "w_pose", "w_com", "w_feet", "w_torque",
}


def config_from_dict(doc: dict) -> HumanEnvConfig:
    """Build a config from a mapping, rejecting unknown keys."""
    unknown = set(doc) - _CFG_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in walker env config")
    doc = dict(doc)
    push_doc = doc.pop("push", {})
    unknown = set(push_doc) - _PUSH_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in push config")
    return HumanEnvConfig(push=PushConfig(**push_doc), **doc)


@dataclass
class EnvSnapshot:
    """Everything needed to resume an episode mid-flight (minus the rng)."""

    sim: dyn.SimState
    phase_total: float
    steps: int
    obs_buffer: list
    prev_omega: float
    last_tau: np.ndarray


class HumanEnv:
    """Walking environment; `reset(seed) -> obs`, `step(a) -> (obs, r, term)`."""

    obs_dim = OBS_DIM
    act_dim = ACT_DIM

    def __init__(
        self,
        model: dyn.ArticulatedModel | None = None,
        clip: gait.GaitClip | None = None,
        config: HumanEnvConfig | None = None,
    ):
        self.model = model if model is not None else dyn.default_biped()
        self.clip = clip if clip is not None else gait.default_clip(self.model)
        self.cfg = config if config is not None else HumanEnvConfig()
        s = self.model.structure
        self._act_idx = np.flatnonzero(s.tau_max > 0)
        if len(self._act_idx) != ACT_DIM:
            raise ConfigError("walker model must have 6 actuated joints")
        self._tau_max = s.tau_max[self._act_idx]
        self._sole = (0.5 * (dyn.FOOT_HEEL + dyn.FOOT_TOE), -dyn.ANKLE_HEIGHT)
        self._min_pelvis = self.cfg.terminate_pelvis_ratio * dyn.PELVIS_HEIGHT
        self._max_steps = round(self.cfg.episode_max_s * self.cfg.control_hz)
        self.sim: dyn.SimState | None = None
        self.diverged = False
        self.timed_out = False
        self._ref_cache = None
        self.push_scale = 1.0  # curriculum knob: scales sampled magnitudes

    # -- observation layout: [x_err, z, pitch, joints(6), qd(9), v_com(2),
    #    omega(1), phase(1)] --------------------------------------------------

    def obs_shift_scale(self):
        """Fixed normalization for policy inputs."""
        shift = np.zeros(OBS_DIM)
        shift[1] = 0.9  # pelvis height
        shift[18] = self.clip.speed  # forward COM speed
        scale = np.concatenate([
            [0.5, 0.3, 0.5], np.full(6, 1.0),  # pose
            np.full(9, 5.0),  # velocities
            [1.0, 1.0, 3.0, 1.0],  # com vel, omega, phase
        ])
        return shift, scale

    def _reference(self, phase_total: float) -> gait.ReferenceFrame:
        cached = self._ref_cache
        if cached is not None and cached[0] == phase_total:
            return cached[1]
        cycles = math.floor(phase_total)
        ref = self.clip.sample(phase_total - cycles, cycles=cycles)
        self._ref_cache = (phase_total, ref)
        return ref

    def _frame(self):
        return dyn.body_frame(
            self.model, self.sim,
            (("foot_l", self._sole), ("foot_r", self._sole)),
        )

    def _true_obs(self, frame=None, ref=None) -> np.ndarray:
        st = self.sim
        if ref is None:
            ref = self._reference(self._phase_total)
        if frame is None:
            frame = self._frame()
        return np.concatenate([
            [st.q[0] - ref.base[0], st.q[1], st.q[2]],
            st.q[3:9],
            st.qd,
            frame["vel"],
            [frame["omega"]],
            [self._phase_total % 1.0],
        ])

    def device_obs(self) -> np.ndarray:
        """Sensor view of the assistive device: pelvis IMU + hip encoders.

        [omega_dot, omega, q_hip_l, q_hip_r, qd_hip_l, qd_hip_r]; the angular
        acceleration is a backward difference over one control period.
        """
        st = self.sim
        omega = st.qd[2]
        omega_dot = (omega - self._prev_omega) / self.cfg.control_dt
        return np.array([omega_dot, omega, st.q[3], st.q[6], st.qd[3], st.qd[6]])

    @property
    def phase(self) -> float:
        return self._phase_total % 1.0

    @property
    def time(self) -> float:
        return self.sim.time

    def true_state(self) -> dyn.SimState:
        """Undelayed simulator state (for evaluation, not the policy)."""
        return self.sim.copy()

    def _sample_push(self, rng: np.random.Generator) -> dyn.PushEvent | None:
        p = self.cfg.push
        mag = rng.uniform(p.fmin, p.fmax) * self.push_scale
        # out-of-plane angle: only the sagittal component acts on the model
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        onset = rng.uniform(p.onset_min_cycles, p.onset_max_cycles) * self.clip.cycle_s
        planar = mag * math.cos(theta)
        if planar <= 0.0:
            return None
        return dyn.PushEvent(
            magnitude=planar,
            direction=(sign, 0.0),
            onset=onset,
            duration=p.duration_ms / 1000.0,
        )

    def reset(self, seed: int, *, phase=None, push="sample") -> np.ndarray:
        """Start an episode at a (random) reference phase.

        `push` is "sample" for the training distribution, None for no push,
        or an explicit PushEvent (evaluation).
        """
        rng = np.random.default_rng(seed)
        phi0 = rng.uniform() if phase is None else float(phase) % 1.0
        q, qd = self.clip.reference_state(phi0)
        q = q.copy()
        qd = qd.copy()
        q[2:9] += rng.normal(0.0, self.cfg.reset_noise_q, 7)
        qd += rng.normal(0.0, self.cfg.reset_noise_qd, 9)
        if push == "sample":
            ev = self._sample_push(rng)
        elif push is None:
            ev = None
        else:
            ev = push
        pushes = (ev,) if ev is not None else ()
        self.sim = dyn.SimState(q=q, qd=qd, pushes=pushes)
        self._phase_total = phi0
        self._steps = 0
        self._prev_omega = float(qd[2])
        self.last_tau = np.zeros(ACT_DIM)
        self.diverged = False
        self.timed_out = False
        self.last_imitation = 0.0
        self.last_frame = self._frame()
        obs = self._true_obs(self.last_frame)
        self._obs_buffer = deque([obs] * (self.cfg.delay_steps + 1),
                                 maxlen=self.cfg.delay_steps + 1)
        return self._obs_buffer[0].copy()

    def _pd_targets(self, action: np.ndarray) -> np.ndarray:
        ref = self._reference(self._phase_total)
        offset = np.clip(np.asarray(action, float), -MAX_TARGET_OFFSET, MAX_TARGET_OFFSET)
        return ref.joints + offset

    def step(self, action: np.ndarray, hip_assist=None):
        """Advance one control step; `hip_assist` is an optional external
        (left, right) hip torque added before the human joint-limit clamp."""
        if self.sim is None:
            raise ConfigError("step() before reset()")
        cfg = self.cfg
        target = self._pd_targets(action)
        st = self.sim
        nq = self.model.nq
        kp = np.zeros(nq)
        kd = np.zeros(nq)
        qt = np.zeros(nq)
        tau_ext = np.zeros(nq)
        kp[self._act_idx] = PD_KP
        kd[self._act_idx] = PD_KD
        qt[self._act_idx] = target
        if hip_assist is not None:
            tau_ext[self._act_idx[0]] = hip_assist[0]
            tau_ext[self._act_idx[3]] = hip_assist[1]
        # logged/penalized torque: the command as evaluated at step start
        # (the kernel re-evaluates the same law each substep)
        tau_j = dyn.pd_torque(st.q[3:9], st.qd[3:9], target, PD_KP, PD_KD)
        tau_j = tau_j + tau_ext[self._act_idx]
        tau_j = np.clip(tau_j, -self._tau_max, self._tau_max)
        self.last_tau = tau_j
        self._prev_omega = float(st.qd[2])
        try:
            self.sim = dyn.simulate(self.model, st, tau_ext, cfg.sim_dt, cfg.n_sub,
                                    kp=kp, kd=kd, q_target=qt)
        except SimulationDiverged:
            self.diverged = True
            obs = self._obs_buffer[0].copy()
            return obs, 0.0, True
        self._phase_total += cfg.control_dt / self.clip.cycle_s
        self._steps += 1

        ref = self._reference(self._phase_total)
        frame = self._frame()
        reward = self._reward(tau_j, frame, ref)
        fallen = self.sim.q[1] < self._min_pelvis
        self.timed_out = self._steps >= self._max_steps
        terminated = fallen or self.timed_out

        self._obs_buffer.append(self._true_obs(frame, ref))
        return self._obs_buffer[0].copy(), reward, terminated

    def _reward(self, tau_j: np.ndarray, frame, ref) -> float:
        cfg = self.cfg
        st = self.sim
        pose_err = np.concatenate([st.q[3:9] - ref.joints, [st.q[2] - ref.pitch]])
        com_err = frame["pos"] - ref.com
        feet_err = (frame["points"] - ref.feet).ravel()
        tau_n = tau_j / self._tau_max
        imitation = (
            cfg.w_pose * math.exp(-2.0 * float(pose_err @ pose_err))
            + cfg.w_com * math.exp(-0.5 * float(com_err @ com_err))
            + cfg.w_feet * math.exp(-2.0 * float(feet_err @ feet_err))
        )
        # downstream consumers (device reward, analysis) read these back
        self.last_imitation = imitation
        self.last_frame = frame
        return imitation - cfg.w_torque * float(tau_n @ tau_n)

    # -- snapshot/restore (used by dataset labeling) --------------------------

    def snapshot(self) -> EnvSnapshot:
        return EnvSnapshot(
            sim=self.sim.copy(),
            phase_total=self._phase_total,
            steps=self._steps,
            obs_buffer=[o.copy() for o in self._obs_buffer],
            prev_omega=self._prev_omega,
            last_tau=self.last_tau.copy(),
        )

    def restore(self, snap: EnvSnapshot):
        self.sim = snap.sim.copy()
        self._phase_total = snap.phase_total
        self._steps = snap.steps
        self._obs_buffer = deque([o.copy() for o in snap.obs_buffer],
                                 maxlen=self.cfg.delay_steps + 1)
        self._prev_omega = snap.prev_omega
        self.last_tau = snap.last_tau.copy()
        self.diverged = False
        self.timed_out = False
