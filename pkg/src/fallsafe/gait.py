"""Phase-indexed reference walking motion.

A clip is a periodic set of keyframes over the gait phase phi in [0,1),
interpolated with a periodic cubic spline. Phase 0 is left heel strike; the
left leg is in stance for roughly the first 60% of the cycle and in swing for
the remainder. Joint sign convention follows the dynamics module: hip flexion
positive, knee flexion NEGATIVE, ankle dorsiflexion positive.

COM and foot (end-effector) targets are derived by forward kinematics of the
keyframe poses, with the base placed so the stance foot stays planted and the
lowest foot point touches the ground. Horizontal channels are stored as
periodic residuals after removing the secular stride advance, so a sampled
reference can be reconstructed at any cycle count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from . import dynamics as dyn
from .errors import ConfigError

JOINT_NAMES = ("hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r")
LEG_SWAP = (3, 4, 5, 0, 1, 2)  # left<->right joint permutation

# left-leg joint angles over one cycle at 8 uniform phases, degrees
_PHASES = np.arange(8) / 8.0
_HIP_DEG = [16.0, 7.7, 0.0, -7.7, -11.5, 0.0, 16.0, 19.8]
_KNEE_DEG = [-5.0, -15.0, -8.0, -10.0, -20.0, -50.0, -62.0, -30.0]
_ANKLE_DEG = [0.0, -8.0, 5.0, 10.0, -5.0, -20.0, -5.0, 3.0]
_PITCH_RAD = 0.03  # slight constant forward lean
_CYCLE_S = 1.1
LEFT_SWING = (0.6, 1.0)  # phase window when the left foot is airborne


class PeriodicCubicSpline:
    """Natural periodic cubic spline through (phase, value) knots on [0,1)."""

    def __init__(self, phases: np.ndarray, values: np.ndarray):
        phases = np.asarray(phases, dtype=float)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[0] != phases.shape[0]:
            values = values.T
        n = len(phases)
        if n < 2:
            raise ConfigError("spline needs at least 2 keyframes")
        if np.any(np.diff(phases) <= 0) or phases[0] < 0 or phases[-1] >= 1:
            raise ConfigError("keyframe phases must be strictly increasing in [0,1)")
        self.x = phases
        self.y = values  # (n, C)
        h = np.diff(np.append(phases, phases[0] + 1.0))  # (n,)
        # cyclic tridiagonal system for second derivatives M
        A = np.zeros((n, n))
        rhs = np.zeros_like(values)
        for k in range(n):
            km, kp = (k - 1) % n, (k + 1) % n
            A[k, km] += h[km] / 6.0
            A[k, k] += (h[km] + h[k]) / 3.0
            A[k, kp] += h[k] / 6.0
            rhs[k] = (values[kp] - values[k]) / h[k] - (values[k] - values[km]) / h[km]
        self.m = np.linalg.solve(A, rhs)  # (n, C)
        self.h = h

    def _locate(self, phi: float) -> tuple[int, float]:
        phi = phi % 1.0
        k = int(np.searchsorted(self.x, phi, side="right") - 1)
        if k < 0:  # phi below first knot: wrapped final interval
            k = len(self.x) - 1
            phi += 1.0
        return k, phi

    def __call__(self, phi: float) -> np.ndarray:
        k, phi = self._locate(phi)
        kp = (k + 1) % len(self.x)
        h = self.h[k]
        a = self.x[k] + h - phi
        b = phi - self.x[k]
        return (
            self.m[k] * a**3 / (6 * h)
            + self.m[kp] * b**3 / (6 * h)
            + (self.y[k] / h - self.m[k] * h / 6) * a
            + (self.y[kp] / h - self.m[kp] * h / 6) * b
        )

    def derivative(self, phi: float) -> np.ndarray:
        k, phi = self._locate(phi)
        kp = (k + 1) % len(self.x)
        h = self.h[k]
        a = self.x[k] + h - phi
        b = phi - self.x[k]
        return (
            -self.m[k] * a**2 / (2 * h)
            + self.m[kp] * b**2 / (2 * h)
            - (self.y[k] / h - self.m[k] * h / 6)
            + (self.y[kp] / h - self.m[kp] * h / 6)
        )


@dataclass(frozen=True)
class ReferenceFrame:
    """Sampled reference at one phase: pose, COM, and foot targets."""

    joints: np.ndarray  # (6,) actuated joint angles, rad
    joint_vel: np.ndarray  # (6,) rad/s
    pitch: float
    base: np.ndarray  # (2,) world base position for a given cycle origin
    base_vel: np.ndarray  # (2,)
    com: np.ndarray  # (2,)
    feet: np.ndarray  # (2, 2) sole-midpoint targets, rows left/right


class GaitClip:
    """Periodic reference gait with FK-derived COM and foot targets."""

    def __init__(
        self,
        model: dyn.ArticulatedModel,
        phases: np.ndarray,
        joint_deg: np.ndarray,  # (n, 6) left+right, degrees
        pitch_rad: np.ndarray,  # (n,)
        cycle_s: float,
        left_swing: tuple[float, float] = LEFT_SWING,
    ):
        if len(phases) < 2:
            raise ConfigError("clip needs at least 2 keyframes")
        if cycle_s <= 0:
            raise ConfigError("cycle duration must be positive")
        self.model = model
        self.cycle_s = float(cycle_s)
        self.phases = np.asarray(phases, dtype=float)
        self.left_swing = left_swing
        joints = np.deg2rad(np.asarray(joint_deg, dtype=float))
        n = len(self.phases)

        s = model.structure
        sole_mid_x = 0.5 * (dyn.FOOT_HEEL + dyn.FOOT_TOE)
        sole = (sole_mid_x, -dyn.ANKLE_HEIGHT)

        # FK with base at origin: stance-foot anchoring then ground placement
        rel_lfoot = np.zeros((n, 2))
        rel_rfoot = np.zeros((n, 2))
        rel_com = np.zeros((n, 2))
        rel_minz = np.zeros(n)
        for k in range(n):
            q = np.zeros(s.nq)
            q[2] = pitch_rad[k]
            q[3:9] = joints[k]
            st = dyn.SimState(q=q, qd=np.zeros(s.nq))
            rel_lfoot[k] = dyn.point_world(model, st, "foot_l", sole)
            rel_rfoot[k] = dyn.point_world(model, st, "foot_r", sole)
            rel_com[k] = dyn.com_state(model, st)["pos"]
            pts, _, _ = dyn.contact_forces(model, st)
            rel_minz[k] = pts[:, 1].min()

        # base x: plant the stance-foot sole (left for phi<0.5, right after)
        half = self.phases < 0.5
        step_len = float(
            np.interp(0.5, self.phases, rel_rfoot[:, 0])
            - np.interp(0.5, self.phases, rel_lfoot[:, 0])
        )
        self.stride = 2.0 * step_len
        base_x = np.where(half, -rel_lfoot[:, 0], step_len - rel_rfoot[:, 0])
        base_z = -rel_minz
        self.speed = self.stride / self.cycle_s

        resid = lambda v: v - self.stride * self.phases  # remove secular advance
        chan = np.column_stack(
            [
                joints,  # 0:6
                pitch_rad,  # 6
                resid(base_x),  # 7
                base_z,  # 8
                resid(base_x + rel_com[:, 0]),  # 9 com x
                base_z + rel_com[:, 1],  # 10 com z
                resid(base_x + rel_lfoot[:, 0]),  # 11
                np.maximum(base_z + rel_lfoot[:, 1], 0.0),  # 12
                resid(base_x + rel_rfoot[:, 0]),  # 13
                np.maximum(base_z + rel_rfoot[:, 1], 0.0),  # 14
            ]
        )
        self._spline = PeriodicCubicSpline(self.phases, chan)

    def sample(self, phi: float, cycles: float = 0.0, x0: float = 0.0) -> ReferenceFrame:
        """Reference frame at phase phi, offset by whole cycles and origin x0."""
        phi_w = phi % 1.0
        v = self._spline(phi_w)
        dv = self._spline.derivative(phi_w) / self.cycle_s  # per second
        adv = self.stride * (cycles + phi_w) + x0
        feet = np.array(
            [[v[11] + adv, max(v[12], 0.0)], [v[13] + adv, max(v[14], 0.0)]]
        )
        return ReferenceFrame(
            joints=v[0:6],
            joint_vel=dv[0:6],
            pitch=float(v[6]),
            base=np.array([v[7] + adv, v[8]]),
            base_vel=np.array([dv[7] + self.speed, dv[8]]),
            com=np.array([v[9] + adv, v[10]]),
            feet=feet,
        )

    def reference_state(self, phi: float, cycles: float = 0.0, x0: float = 0.0):
        """Full (q, qd) of the reference pose for reset and playback."""
        f = self.sample(phi, cycles, x0)
        nq = self.model.nq
        q = np.zeros(nq)
        qd = np.zeros(nq)
        q[0:2] = f.base
        q[2] = f.pitch
        q[3:9] = f.joints
        qd[0:2] = f.base_vel
        qd[2] = float(self._spline.derivative(phi % 1.0)[6]) / self.cycle_s
        qd[3:9] = f.joint_vel
        return q, qd

    def in_left_swing(self, phi: float) -> bool:
        lo, hi = self.left_swing
        return lo <= (phi % 1.0) < hi


def sample(clip: GaitClip, phi: float) -> dict:
    """{q_ref, com_ref, ee_ref} at phase phi (single-cycle frame)."""
    f = clip.sample(phi)
    return {"q_ref": f.joints, "com_ref": f.com, "ee_ref": f.feet}


def advance(phi: float, dt: float, cycle_s: float) -> float:
    """Advance the phase variable by dt, wrapping modulo one cycle."""
    if cycle_s <= 0:
        raise ConfigError("cycle duration must be positive")
    if dt < 0:
        raise ConfigError("dt must be non-negative")
    return (phi + dt / cycle_s) % 1.0


def default_clip(model: dyn.ArticulatedModel | None = None) -> GaitClip:
    """Built-in 8-keyframe clip approximating normative sagittal gait curves."""
    if model is None:
        model = dyn.default_biped()
    hip = np.array(_HIP_DEG)
    knee = np.array(_KNEE_DEG)
    ankle = np.array(_ANKLE_DEG)
    # right leg is the left shifted by half a cycle
    roll = lambda v: np.roll(v, -4)
    joints = np.column_stack([hip, knee, ankle, roll(hip), roll(knee), roll(ankle)])
    pitch = np.full(8, _PITCH_RAD)
    return GaitClip(model, _PHASES, joints, pitch, _CYCLE_S)


_CLIP_KEYS = {"cycle_s", "pitch_rad", "keyframes"}
_FRAME_KEYS = {"phase", "joints_deg"}


def load_clip(path, model: dyn.ArticulatedModel | None = None) -> GaitClip:
    """Load a clip from a YAML keyframe list (fail-closed keys)."""
    if model is None:
        model = dyn.default_biped()
    with open(path) as f:
        doc = yaml.safe_load(f)
    unknown = set(doc) - _CLIP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in clip file")
    frames = doc["keyframes"]
    if len(frames) < 2:
        raise ConfigError("clip needs at least 2 keyframes")
    phases = []
    joints = []
    for fr in frames:
        unknown = set(fr) - _FRAME_KEYS
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} in keyframe")
        phases.append(float(fr["phase"]))
        row = [float(fr["joints_deg"][n]) for n in JOINT_NAMES]
        joints.append(row)
    pitch = np.full(len(phases), float(doc.get("pitch_rad", _PITCH_RAD)))
    return GaitClip(model, np.array(phases), np.array(joints), pitch, float(doc["cycle_s"]))
