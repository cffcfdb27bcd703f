"""Reduced-coordinate planar rigid-body simulator.

Planar sagittal model: world x is forward, z is up, rotations are CCW about
the out-of-plane axis. The kinematic tree is rooted either at a 3-DOF
floating base (x, z, pitch) or, for analytic test fixtures, at a 1-DOF pin
joint. Generalized coordinates order the base DOFs first, then one angle per
revolute joint in declaration order.

Ground contact is a penalty spring-damper at discrete foot points with a
Coulomb cap on the tangential force. Integration is semi-implicit Euler at a
fixed time step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import _core
from .errors import ConfigError, DimensionMismatch, SimulationDiverged

GRAVITY_DEFAULT = (0.0, -9.81)


@dataclass(frozen=True)
class LinkSpec:
    """One rigid segment; frame origin sits at its proximal joint."""

    name: str
    mass: float  # kg
    inertia: float  # kg m^2 about the COM
    com: tuple[float, float]  # COM offset in the link frame, m
    length: float  # segment length, m (bookkeeping)


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: str  # parent link name, or "world" for the root joint
    child: str
    kind: str  # "floating" | "pin" | "revolute"
    anchor: tuple[float, float] = (0.0, 0.0)  # in the parent frame (world for root)
    limits: tuple[float, float] = (-math.inf, math.inf)  # rad, revolute/pin only
    torque_limit: float = 0.0  # N m; 0 means unactuated


@dataclass(frozen=True)
class ContactParams:
    stiffness: float  # N/m
    damping: float  # N s/m
    friction: float  # Coulomb coefficient

    def __post_init__(self):
        if self.stiffness <= 0 or self.damping < 0 or self.friction < 0:
            raise ConfigError("contact parameters out of range")


@dataclass(frozen=True)
class ContactPoint:
    link: str
    offset: tuple[float, float]  # link frame, m
    foot: str  # "left" | "right"


@dataclass(frozen=True)
class PushEvent:
    """Timed horizontal force on a target link."""

    magnitude: float  # N
    direction: tuple[float, float]  # signed unit vector, zero vertical component
    onset: float  # s
    duration: float  # s
    target: str = "torso"

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("push duration must be positive")
        if abs(self.direction[1]) > 1e-12:
            raise ConfigError("push direction must be horizontal")
        if abs(math.hypot(*self.direction) - 1.0) > 1e-9:
            raise ConfigError("push direction must be a unit vector")

    @property
    def force(self) -> np.ndarray:
        return self.magnitude * np.asarray(self.direction)


class _Structure:
    """Flattened tree arrays derived from an ArticulatedModel."""

    def __init__(self, model: "ArticulatedModel"):
        names = [l.name for l in model.links]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate link names")
        index = {n: i for i, n in enumerate(names)}
        root_joints = [j for j in model.joints if j.parent == "world"]
        if len(root_joints) != 1:
            raise ConfigError("model must have exactly one root joint")
        root = root_joints[0]
        if root.kind not in ("floating", "pin"):
            raise ConfigError("root joint must be floating or pin")
        if index[root.child] != 0:
            raise ConfigError("root joint must attach the first link")

        self.nl = len(model.links)
        self.root_kind = root.kind
        self.root_anchor = np.asarray(root.anchor, dtype=float)
        nbase = 3 if root.kind == "floating" else 1
        self.nbase = nbase
        self.nq = nbase + (len(model.joints) - 1)

        self.parent = np.full(self.nl, -1, dtype=int)
        self.dof = np.full(self.nl, nbase - 1, dtype=int)  # dof rotating each link
        self.anchor_local = np.zeros((self.nl, 2))
        self.anchor_local[0] = self.root_anchor
        self.lo = np.full(self.nq, -math.inf)
        self.hi = np.full(self.nq, math.inf)
        self.tau_max = np.zeros(self.nq)
        if root.kind == "pin":
            self.lo[0], self.hi[0] = root.limits
            self.tau_max[0] = root.torque_limit

        seen = {root.child}
        d = nbase
        for j in model.joints:
            if j is root:
                continue
            if j.kind != "revolute":
                raise ConfigError(f"non-root joint {j.name} must be revolute")
            if j.parent not in seen:
                raise ConfigError(f"joint {j.name} parent declared after child")
            i = index[j.child]
            self.parent[i] = index[j.parent]
            self.dof[i] = d
            self.anchor_local[i] = j.anchor
            self.lo[d], self.hi[d] = j.limits
            self.tau_max[d] = j.torque_limit
            seen.add(j.child)
            d += 1
        if len(seen) != self.nl:
            raise ConfigError("kinematic tree does not cover all links")

        self.mass = np.array([l.mass for l in model.links])
        self.inertia = np.array([l.inertia for l in model.links])
        self.com_local = np.array([l.com for l in model.links])
        if np.any(self.mass <= 0) or np.any(self.inertia <= 0):
            raise ConfigError("masses and inertias must be strictly positive")

        # chain[i]: (dof, owning link) pairs from root to link i
        self.chain: list[list[tuple[int, int]]] = []
        for i in range(self.nl):
            ch = []
            k = i
            while k >= 0:
                ch.append((self.dof[k], k))
                k = self.parent[k]
            ch.reverse()
            self.chain.append(ch)

        self.contact_link = np.array(
            [index[c.link] for c in model.contact_points], dtype=np.int64
        )
        self.contact_offset = np.array([c.offset for c in model.contact_points]).reshape(
            -1, 2
        )
        self.contact_foot = [c.foot for c in model.contact_points]
        self.link_index = index

        # padded chain arrays for the compiled kernel
        depth = max(len(c) for c in self.chain)
        self.chain_dof = np.zeros((self.nl, depth), dtype=np.int64)
        self.chain_link = np.zeros((self.nl, depth), dtype=np.int64)
        self.chain_len = np.array([len(c) for c in self.chain], dtype=np.int64)
        for i, ch in enumerate(self.chain):
            for e, (d, lj) in enumerate(ch):
                self.chain_dof[i, e] = d
                self.chain_link[i, e] = lj
        self.contact_is_left = np.array(
            [f == "left" for f in self.contact_foot], dtype=np.bool_
        )
        self.parent = self.parent.astype(np.int64)
        self.dof = self.dof.astype(np.int64)


@dataclass
class ArticulatedModel:
    """Kinematic tree with masses, inertias, joint limits, and contact geometry."""

    links: list[LinkSpec]
    joints: list[JointSpec]
    contact: ContactParams
    contact_points: list[ContactPoint] = field(default_factory=list)
    gravity: tuple[float, float] = GRAVITY_DEFAULT

    def __post_init__(self):
        self._structure = _Structure(self)

    @property
    def structure(self) -> _Structure:
        return self._structure

    @property
    def nq(self) -> int:
        return self._structure.nq

    @property
    def total_mass(self) -> float:
        return float(self._structure.mass.sum())

    @property
    def torque_limits(self) -> np.ndarray:
        return self._structure.tau_max

    def actuated_dofs(self) -> np.ndarray:
        return np.flatnonzero(self._structure.tau_max > 0)


@dataclass
class SimState:
    """Generalized state plus clock, contact flags, and the push schedule."""

    q: np.ndarray
    qd: np.ndarray
    time: float = 0.0
    step_index: int = 0
    contact_left: bool = False
    contact_right: bool = False
    pushes: tuple[PushEvent, ...] = ()

    def copy(self) -> "SimState":
        return replace(self, q=self.q.copy(), qd=self.qd.copy())


def _perp(v):
    return np.array([-v[1], v[0]])


class _Kin:
    """Per-link world kinematics at (q, qd), with zero-acceleration bias terms."""

    __slots__ = ("o", "th", "vo", "om", "ao", "pc", "vc", "ac")

    def __init__(self, s: _Structure, q, qd):
        nl = s.nl
        o = np.empty((nl, 2))
        th = np.empty(nl)
        vo = np.empty((nl, 2))
        om = np.empty(nl)
        ao = np.empty((nl, 2))
        pc = np.empty((nl, 2))
        vc = np.empty((nl, 2))
        ac = np.empty((nl, 2))
        for i in range(nl):
            if i == 0:
                if s.root_kind == "floating":
                    o[0] = q[:2]
                    th[0] = q[2]
                    vo[0] = qd[:2]
                    om[0] = qd[2]
                else:
                    o[0] = s.root_anchor
                    th[0] = q[0]
                    vo[0] = 0.0
                    om[0] = qd[0]
                ao[0] = 0.0
            else:
                p = s.parent[i]
                c, sn = math.cos(th[p]), math.sin(th[p])
                ax, az = s.anchor_local[i]
                r = np.array([c * ax - sn * az, sn * ax + c * az])
                o[i] = o[p] + r
                th[i] = th[p] + q[s.dof[i]]
                vo[i] = vo[p] + om[p] * _perp(r)
                om[i] = om[p] + qd[s.dof[i]]
                ao[i] = ao[p] + om[p] * _perp(vo[i] - vo[p])
            c, sn = math.cos(th[i]), math.sin(th[i])
            cx, cz = s.com_local[i]
            rc = np.array([c * cx - sn * cz, sn * cx + c * cz])
            pc[i] = o[i] + rc
            vc[i] = vo[i] + om[i] * _perp(rc)
            ac[i] = ao[i] + om[i] * _perp(vc[i] - vo[i])
        self.o, self.th, self.vo, self.om = o, th, vo, om
        self.ao, self.pc, self.vc, self.ac = ao, pc, vc, ac


def _link_jacobian(s: _Structure, kin: _Kin, i: int, point: np.ndarray) -> np.ndarray:
    """2 x nq positional Jacobian of a world point attached to link i."""
    J = np.zeros((2, s.nq))
    if s.root_kind == "floating":
        J[0, 0] = 1.0
        J[1, 1] = 1.0
    for d, lj in s.chain[i]:
        J[:, d] += _perp(point - kin.o[lj])
    return J


def _check_state(model: ArticulatedModel, state: SimState):
    if state.q.shape != (model.nq,) or state.qd.shape != (model.nq,):
        raise DimensionMismatch(
            f"state dimension {state.q.shape} does not match model nq={model.nq}"
        )


def mass_matrix(model: ArticulatedModel, state: SimState) -> np.ndarray:
    """Joint-space inertia matrix, symmetric positive definite."""
    _check_state(model, state)
    s = model.structure
    kin = _Kin(s, state.q, state.qd)
    M = np.zeros((s.nq, s.nq))
    for i in range(s.nl):
        Jv = _link_jacobian(s, kin, i, kin.pc[i])
        Jw = np.zeros(s.nq)
        for d, _ in s.chain[i]:
            Jw[d] += 1.0
        M += s.mass[i] * Jv.T @ Jv + s.inertia[i] * np.outer(Jw, Jw)
    return 0.5 * (M + M.T)


def _bias_and_gravity(model: ArticulatedModel, kin: _Kin) -> np.ndarray:
    """Generalized gravity minus velocity-product terms: Q_g - C(q, qd)."""
    s = model.structure
    g = np.asarray(model.gravity)
    rhs = np.zeros(s.nq)
    for i in range(s.nl):
        Jv = _link_jacobian(s, kin, i, kin.pc[i])
        rhs += s.mass[i] * (Jv.T @ (g - kin.ac[i]))
    return rhs


def _apply_point_force(
    s: _Structure, kin: _Kin, link: int, point: np.ndarray, f: np.ndarray, out: np.ndarray
):
    if s.root_kind == "floating":
        out[0] += f[0]
        out[1] += f[1]
    for d, lj in s.chain[link]:
        out[d] += _perp(point - kin.o[lj]) @ f


def contact_forces(model: ArticulatedModel, state: SimState):
    """Penalty contact forces at the model's contact points.

    Returns (points, velocities, forces) arrays of shape (nc, 2); forces obey
    |f_t| <= mu * f_n exactly.
    """
    s = model.structure
    kin = _Kin(s, state.q, state.qd)
    return _contact_forces_kin(model, kin)


def _contact_forces_kin(model: ArticulatedModel, kin: _Kin):
    s = model.structure
    cp = model.contact
    nc = len(s.contact_link)
    pts = np.empty((nc, 2))
    vels = np.empty((nc, 2))
    forces = np.zeros((nc, 2))
    for k in range(nc):
        i = s.contact_link[k]
        c, sn = math.cos(kin.th[i]), math.sin(kin.th[i])
        ox, oz = s.contact_offset[k]
        r = np.array([c * ox - sn * oz, sn * ox + c * oz])
        P = kin.o[i] + r
        V = kin.vo[i] + kin.om[i] * _perp(r)
        pts[k] = P
        vels[k] = V
        if P[1] < 0.0:
            fn = max(0.0, -cp.stiffness * P[1] - cp.damping * V[1])
            ft = -cp.damping * V[0]
            cap = cp.friction * fn
            ft = min(max(ft, -cap), cap)
            forces[k] = (ft, fn)
    return pts, vels, forces


def forward_dynamics(
    model: ArticulatedModel,
    state: SimState,
    joint_torques: np.ndarray,
    external_forces: list[tuple[str, tuple[float, float], np.ndarray]] | None = None,
) -> np.ndarray:
    """Generalized accelerations from M qdd = tau + J^T f - C + Q_g.

    external_forces: list of (link name, point in link frame, world force).
    Contact is NOT applied here; `step` computes it from the penalty model.
    """
    _check_state(model, state)
    tau = np.asarray(joint_torques, dtype=float)
    if tau.shape != (model.nq,):
        raise DimensionMismatch("torque vector length must equal model DOF")
    s = model.structure
    unact = s.tau_max == 0
    if np.any(np.abs(tau[unact]) > 1e-12):
        raise DimensionMismatch("torque applied to unactuated DOF")
    kin = _Kin(s, state.q, state.qd)
    rhs = tau + _bias_and_gravity(model, kin)
    if external_forces:
        for link_name, point_local, f in external_forces:
            i = s.link_index[link_name]
            c, sn = math.cos(kin.th[i]), math.sin(kin.th[i])
            px, pz = point_local
            P = kin.o[i] + np.array([c * px - sn * pz, sn * px + c * pz])
            _apply_point_force(s, kin, i, P, np.asarray(f, dtype=float), rhs)
    M = np.zeros((s.nq, s.nq))
    for i in range(s.nl):
        Jv = _link_jacobian(s, kin, i, kin.pc[i])
        Jw = np.zeros(s.nq)
        for d, _ in s.chain[i]:
            Jw[d] += 1.0
        M += s.mass[i] * Jv.T @ Jv + s.inertia[i] * np.outer(Jw, Jw)
    return np.linalg.solve(M, rhs)


def step_reference(
    model: ArticulatedModel, state: SimState, joint_torques: np.ndarray, dt: float
) -> SimState:
    """Pure-numpy semi-implicit Euler step; the oracle for the compiled kernel."""
    _check_state(model, state)
    if dt == 0.0:
        return state.copy()
    s = model.structure
    tau = np.asarray(joint_torques, dtype=float).copy()
    if tau.shape != (model.nq,):
        raise DimensionMismatch("torque vector length must equal model DOF")
    lim = s.tau_max
    act = lim > 0
    tau[act] = np.clip(tau[act], -lim[act], lim[act])
    if np.any(np.abs(tau[~act]) > 1e-12):
        raise DimensionMismatch("torque applied to unactuated DOF")

    kin = _Kin(s, state.q, state.qd)
    rhs = tau + _bias_and_gravity(model, kin)

    pts, _vels, cf = _contact_forces_kin(model, kin)
    left = right = False
    for k in range(len(pts)):
        if cf[k, 1] > 0.0:
            _apply_point_force(s, kin, s.contact_link[k], pts[k], cf[k], rhs)
            if s.contact_foot[k] == "left":
                left = True
            else:
                right = True

    t0 = state.time
    for ev in state.pushes:
        if ev.onset - 1e-12 <= t0 < ev.onset + ev.duration - 1e-12:
            i = s.link_index[ev.target]
            _apply_point_force(s, kin, i, kin.o[i], ev.force, rhs)

    M = np.zeros((s.nq, s.nq))
    for i in range(s.nl):
        Jv = _link_jacobian(s, kin, i, kin.pc[i])
        Jw = np.zeros(s.nq)
        for d, _ in s.chain[i]:
            Jw[d] += 1.0
        M += s.mass[i] * Jv.T @ Jv + s.inertia[i] * np.outer(Jw, Jw)
    qdd = np.linalg.solve(M, rhs)

    qd = state.qd + qdd * dt
    q = state.q + qd * dt
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise SimulationDiverged(state.step_index)

    hit_lo = q < s.lo
    hit_hi = q > s.hi
    q = np.clip(q, s.lo, s.hi)
    qd[hit_lo | hit_hi] = 0.0  # restitution-free limit stop

    return SimState(
        q=q,
        qd=qd,
        time=t0 + dt,
        step_index=state.step_index + 1,
        contact_left=left,
        contact_right=right,
        pushes=state.pushes,
    )


def simulate(
    model: ArticulatedModel,
    state: SimState,
    joint_torques: np.ndarray,
    dt: float,
    n_sub: int = 1,
    kp=None,
    kd=None,
    q_target=None,
) -> SimState:
    """n_sub semi-implicit steps executed by the compiled kernel.

    With kp/kd/q_target set, the actuated torque is re-evaluated every
    substep as clip(kp (q_target - q) - kd qd + joint_torques, +-limit);
    otherwise the commanded torque is held constant (`step_reference`
    semantics).
    """
    _check_state(model, state)
    if dt == 0.0 or n_sub == 0:
        return state.copy()
    tau = np.asarray(joint_torques, dtype=float)
    if tau.shape != (model.nq,):
        raise DimensionMismatch("torque vector length must equal model DOF")
    s = model.structure
    unact = s.tau_max == 0
    if np.any(np.abs(tau[unact]) > 1e-12):
        raise DimensionMismatch("torque applied to unactuated DOF")
    zeros = np.zeros(model.nq)
    kp = zeros if kp is None else np.asarray(kp, float)
    kd = zeros if kd is None else np.asarray(kd, float)
    q_target = zeros if q_target is None else np.asarray(q_target, float)
    if kp.shape != (model.nq,) or kd.shape != (model.nq,) or q_target.shape != (model.nq,):
        raise DimensionMismatch("PD gain/target vectors must equal model DOF")
    if np.any(kp[unact] != 0.0) or np.any(kd[unact] != 0.0):
        raise DimensionMismatch("PD gains applied to unactuated DOF")
    npush = len(state.pushes)
    onset = np.empty(npush)
    dur = np.empty(npush)
    fx = np.empty(npush)
    fz = np.empty(npush)
    plink = np.empty(npush, dtype=np.int64)
    for i, ev in enumerate(state.pushes):
        onset[i] = ev.onset
        dur[i] = ev.duration
        f = ev.force
        fx[i], fz[i] = f[0], f[1]
        plink[i] = s.link_index[ev.target]
    finite_lo = np.where(np.isinf(s.lo), -1e300, s.lo)
    finite_hi = np.where(np.isinf(s.hi), 1e300, s.hi)
    q, qd, cl, cr, diverged = _core._simulate(
        state.q,
        state.qd,
        state.time,
        state.step_index,
        s.root_kind == "floating",
        s.root_anchor,
        s.parent,
        s.dof,
        s.anchor_local,
        s.com_local,
        s.mass,
        s.inertia,
        s.chain_dof,
        s.chain_link,
        s.chain_len,
        finite_lo,
        finite_hi,
        s.tau_max,
        np.asarray(model.gravity, dtype=float),
        s.contact_link,
        s.contact_offset,
        s.contact_is_left,
        model.contact.stiffness,
        model.contact.damping,
        model.contact.friction,
        onset,
        dur,
        fx,
        fz,
        plink,
        tau,
        kp,
        kd,
        q_target,
        dt,
        n_sub,
    )
    if diverged >= 0:
        raise SimulationDiverged(int(diverged))
    return SimState(
        q=q,
        qd=qd,
        time=state.time + n_sub * dt,
        step_index=state.step_index + n_sub,
        contact_left=bool(cl),
        contact_right=bool(cr),
        pushes=state.pushes,
    )


def step(
    model: ArticulatedModel, state: SimState, joint_torques: np.ndarray, dt: float
) -> SimState:
    """One semi-implicit Euler step with contact, pushes, and limit clamping."""
    return simulate(model, state, joint_torques, dt, 1)


def pd_torque(q_joint, qdot_joint, q_target, kp, kd, limit=math.inf):
    """PD law tau = kp (q_target - q) - kd qd, clamped to the joint limit."""
    tau = kp * (np.asarray(q_target) - np.asarray(q_joint)) - kd * np.asarray(qdot_joint)
    return np.clip(tau, -limit, limit)


def com_state(model: ArticulatedModel, state: SimState, prev_omega=None, dt=None):
    """COM position/velocity plus pelvis angular velocity and (optional) acceleration.

    Angular acceleration is a backward finite difference supplied by the
    caller via (prev_omega, dt); it is 0.0 when not provided.
    """
    _check_state(model, state)
    s = model.structure
    kin = _Kin(s, state.q, state.qd)
    m = s.mass
    pos = (m[:, None] * kin.pc).sum(axis=0) / m.sum()
    vel = (m[:, None] * kin.vc).sum(axis=0) / m.sum()
    omega = kin.om[0]
    omega_dot = 0.0 if prev_omega is None else (omega - prev_omega) / dt
    return {"pos": pos, "vel": vel, "omega": omega, "omega_dot": omega_dot}


def total_energy(model: ArticulatedModel, state: SimState) -> float:
    """Kinetic plus gravitational potential energy (contact springs excluded)."""
    s = model.structure
    kin = _Kin(s, state.q, state.qd)
    ke = 0.5 * float(
        np.sum(s.mass * np.sum(kin.vc**2, axis=1)) + np.sum(s.inertia * kin.om**2)
    )
    g = np.asarray(model.gravity)
    pe = -float(np.sum(s.mass * (kin.pc @ g)))
    return ke + pe


def link_kinematics(model: ArticulatedModel, state: SimState):
    """World origin/angle/COM arrays per link, for reward and analysis code."""
    s = model.structure
    kin = _Kin(s, state.q, state.qd)
    return {
        "origin": kin.o,
        "angle": kin.th,
        "origin_vel": kin.vo,
        "omega": kin.om,
        "com": kin.pc,
        "com_vel": kin.vc,
    }


def point_world(model: ArticulatedModel, state: SimState, link: str, offset) -> np.ndarray:
    """World position of a link-frame point."""
    s = model.structure
    kin = _Kin(s, state.q, state.qd)
    i = s.link_index[link]
    c, sn = math.cos(kin.th[i]), math.sin(kin.th[i])
    ox, oz = offset
    return kin.o[i] + np.array([c * ox - sn * oz, sn * ox + c * oz])


def body_frame(model: ArticulatedModel, state: SimState, points=()):
    """COM state plus world positions of (link, offset) points, one pass.

    Equivalent to com_state() + point_world() per point, but runs the
    compiled kinematics kernel once; hot-path code (reward, observations)
    uses this.
    """
    s = model.structure
    o, th, vo, om, ao, pc, vc, ac = _core._kin_arrays(
        state.q, state.qd, s.root_kind == "floating", s.root_anchor,
        s.parent, s.dof, s.anchor_local, s.com_local, s.nl,
    )
    m = s.mass
    out = {
        "pos": (m[:, None] * pc).sum(axis=0) / m.sum(),
        "vel": (m[:, None] * vc).sum(axis=0) / m.sum(),
        "omega": om[0],
    }
    pw = np.empty((len(points), 2))
    for k, (link, offset) in enumerate(points):
        i = s.link_index[link]
        c, sn = math.cos(th[i]), math.sin(th[i])
        ox, oz = offset
        pw[k, 0] = o[i, 0] + c * ox - sn * oz
        pw[k, 1] = o[i, 1] + sn * ox + c * oz
    out["points"] = pw
    return out


# --- default planar biped -------------------------------------------------

HUMAN_MASS = 80.0  # kg; 800 N * 0.05 s / 80 kg = 0.5 m/s velocity change
DEVICE_MASS = 3.0  # kg, lumped into the pelvis/torso link
HEIGHT = 1.75  # m

THIGH_LEN = 0.43
SHANK_LEN = 0.43
ANKLE_HEIGHT = 0.08
FOOT_HEEL = -0.06
FOOT_TOE = 0.19
PELVIS_HEIGHT = THIGH_LEN + SHANK_LEN + ANKLE_HEIGHT  # standing, all joints zero

HIP_LIMITS = (-1.0, 1.6)
KNEE_LIMITS = (-2.4, 0.02)  # flexion negative
ANKLE_LIMITS = (-1.0, 0.7)
HIP_TORQUE = 90.0
KNEE_TORQUE = 110.0
ANKLE_TORQUE = 45.0


def default_biped(device_mass: float = DEVICE_MASS) -> ArticulatedModel:
    """7-link, 9-DOF sagittal biped; Winter-style segment mass fractions."""
    m = HUMAN_MASS
    torso_m = 0.678 * m + device_mass  # head-arms-trunk plus device
    thigh_m = 0.100 * m
    shank_m = 0.0465 * m
    foot_m = 0.0145 * m
    links = [
        LinkSpec("torso", torso_m, torso_m * 0.8**2 / 12.0, (0.0, 0.33), 0.80),
        LinkSpec("thigh_l", thigh_m, thigh_m * THIGH_LEN**2 / 12.0, (0.0, -0.433 * THIGH_LEN), THIGH_LEN),
        LinkSpec("shank_l", shank_m, shank_m * SHANK_LEN**2 / 12.0, (0.0, -0.433 * SHANK_LEN), SHANK_LEN),
        LinkSpec("foot_l", foot_m, 0.04, (0.06, -0.05), FOOT_TOE - FOOT_HEEL),
        LinkSpec("thigh_r", thigh_m, thigh_m * THIGH_LEN**2 / 12.0, (0.0, -0.433 * THIGH_LEN), THIGH_LEN),
        LinkSpec("shank_r", shank_m, shank_m * SHANK_LEN**2 / 12.0, (0.0, -0.433 * SHANK_LEN), SHANK_LEN),
        LinkSpec("foot_r", foot_m, 0.04, (0.06, -0.05), FOOT_TOE - FOOT_HEEL),
    ]
    joints = [
        JointSpec("base", "world", "torso", "floating"),
        JointSpec("hip_l", "torso", "thigh_l", "revolute", (0.0, 0.0), HIP_LIMITS, HIP_TORQUE),
        JointSpec("knee_l", "thigh_l", "shank_l", "revolute", (0.0, -THIGH_LEN), KNEE_LIMITS, KNEE_TORQUE),
        JointSpec("ankle_l", "shank_l", "foot_l", "revolute", (0.0, -SHANK_LEN), ANKLE_LIMITS, ANKLE_TORQUE),
        JointSpec("hip_r", "torso", "thigh_r", "revolute", (0.0, 0.0), HIP_LIMITS, HIP_TORQUE),
        JointSpec("knee_r", "thigh_r", "shank_r", "revolute", (0.0, -THIGH_LEN), KNEE_LIMITS, KNEE_TORQUE),
        JointSpec("ankle_r", "shank_r", "foot_r", "revolute", (0.0, -SHANK_LEN), ANKLE_LIMITS, ANKLE_TORQUE),
    ]
    # 1e5/1e3 is explicitly unstable for the light foot at dt=2 ms; see notes
    contact = ContactParams(stiffness=5e4, damping=300.0, friction=1.0)
    pts = [
        ContactPoint("foot_l", (FOOT_HEEL, -ANKLE_HEIGHT), "left"),
        ContactPoint("foot_l", (FOOT_TOE, -ANKLE_HEIGHT), "left"),
        ContactPoint("foot_r", (FOOT_HEEL, -ANKLE_HEIGHT), "right"),
        ContactPoint("foot_r", (FOOT_TOE, -ANKLE_HEIGHT), "right"),
    ]
    return ArticulatedModel(links, joints, contact, pts)


# --- model config file ----------------------------------------------------

_MODEL_KEYS = {"links", "joints", "contact", "gravity"}
_LINK_KEYS = {"name", "mass", "inertia", "com", "length"}
_JOINT_KEYS = {"name", "parent", "child", "type", "anchor", "limits", "torque_limit"}
_CONTACT_KEYS = {"stiffness", "damping", "friction", "points"}
_POINT_KEYS = {"link", "offset", "foot"}


def _require_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")


def load_model(path) -> ArticulatedModel:
    """Load an ArticulatedModel from a YAML description (fail-closed keys)."""
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise ConfigError("model file must be a mapping")
    _require_keys(doc, _MODEL_KEYS, "model")
    links = []
    for d in doc.get("links", []):
        _require_keys(d, _LINK_KEYS, f"link {d.get('name')}")
        links.append(
            LinkSpec(d["name"], float(d["mass"]), float(d["inertia"]), tuple(d["com"]), float(d["length"]))
        )
    joints = []
    for d in doc.get("joints", []):
        _require_keys(d, _JOINT_KEYS, f"joint {d.get('name')}")
        joints.append(
            JointSpec(
                d["name"],
                d["parent"],
                d["child"],
                d["type"],
                tuple(d.get("anchor", (0.0, 0.0))),
                tuple(d.get("limits", (-math.inf, math.inf))),
                float(d.get("torque_limit", 0.0)),
            )
        )
    cd = doc["contact"]
    _require_keys(cd, _CONTACT_KEYS, "contact")
    contact = ContactParams(float(cd["stiffness"]), float(cd["damping"]), float(cd["friction"]))
    pts = []
    for d in cd.get("points", []):
        _require_keys(d, _POINT_KEYS, "contact point")
        pts.append(ContactPoint(d["link"], tuple(d["offset"]), d["foot"]))
    gravity = tuple(doc.get("gravity", GRAVITY_DEFAULT))
    return ArticulatedModel(links, joints, contact, pts, gravity)


def trajectory_header(nq: int) -> str:
    cols = ["t"]
    cols += [f"q{i}" for i in range(nq)]
    cols += [f"qdot{i}" for i in range(nq)]
    cols += [f"tau{i}" for i in range(nq)]
    cols += ["contact_l", "contact_r"]
    return ",".join(cols)


def trajectory_row(state: SimState, tau: np.ndarray) -> str:
    vals = [state.time, *state.q, *state.qd, *tau]
    return ",".join(f"{v:.10g}" for v in vals) + f",{int(state.contact_left)},{int(state.contact_right)}"
