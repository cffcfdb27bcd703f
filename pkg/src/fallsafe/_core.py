"""Hot-path simulation kernel.

Flat-array version of the dynamics step, JIT-compiled with numba when
available. Semantics are identical to the reference implementation in
`dynamics` (cross-checked by tests); this exists only because training and
evaluation need millions of steps.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is normally present
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


@njit(cache=True)
def _kin_arrays(
    q,
    qd,
    floating,
    root_anchor,
    parent,
    dof,
    anchor_local,
    com_local,
    nl,
):
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
            if floating:
                o[0, 0] = q[0]
                o[0, 1] = q[1]
                th[0] = q[2]
                vo[0, 0] = qd[0]
                vo[0, 1] = qd[1]
                om[0] = qd[2]
            else:
                o[0, 0] = root_anchor[0]
                o[0, 1] = root_anchor[1]
                th[0] = q[0]
                vo[0, 0] = 0.0
                vo[0, 1] = 0.0
                om[0] = qd[0]
            ao[0, 0] = 0.0
            ao[0, 1] = 0.0
        else:
            p = parent[i]
            c = np.cos(th[p])
            s = np.sin(th[p])
            rx = c * anchor_local[i, 0] - s * anchor_local[i, 1]
            rz = s * anchor_local[i, 0] + c * anchor_local[i, 1]
            o[i, 0] = o[p, 0] + rx
            o[i, 1] = o[p, 1] + rz
            th[i] = th[p] + q[dof[i]]
            vo[i, 0] = vo[p, 0] - om[p] * rz
            vo[i, 1] = vo[p, 1] + om[p] * rx
            om[i] = om[p] + qd[dof[i]]
            dvx = vo[i, 0] - vo[p, 0]
            dvz = vo[i, 1] - vo[p, 1]
            ao[i, 0] = ao[p, 0] - om[p] * dvz
            ao[i, 1] = ao[p, 1] + om[p] * dvx
        c = np.cos(th[i])
        s = np.sin(th[i])
        rcx = c * com_local[i, 0] - s * com_local[i, 1]
        rcz = s * com_local[i, 0] + c * com_local[i, 1]
        pc[i, 0] = o[i, 0] + rcx
        pc[i, 1] = o[i, 1] + rcz
        vc[i, 0] = vo[i, 0] - om[i] * rcz
        vc[i, 1] = vo[i, 1] + om[i] * rcx
        dvx = vc[i, 0] - vo[i, 0]
        dvz = vc[i, 1] - vo[i, 1]
        ac[i, 0] = ao[i, 0] - om[i] * dvz
        ac[i, 1] = ao[i, 1] + om[i] * dvx
    return o, th, vo, om, ao, pc, vc, ac


@njit(cache=True)
def _simulate(
    q0,
    qd0,
    t0,
    step0,
    # structure
    floating,
    root_anchor,
    parent,
    dof,
    anchor_local,
    com_local,
    mass,
    inertia,
    chain_dof,
    chain_link,
    chain_len,
    lo,
    hi,
    tau_max,
    gravity,
    # contact
    contact_link,
    contact_offset,
    contact_is_left,
    k_n,
    d_n,
    mu,
    # push schedule
    push_onset,
    push_dur,
    push_fx,
    push_fz,
    push_link,
    # command: tau = clip(kp (q_target - q) - kd qd + tau_ext, +-tau_max),
    # re-evaluated every substep; kp = kd = 0 gives plain constant torque
    tau_ext,
    kp,
    kd,
    q_target,
    dt,
    n_sub,
):
    """n_sub semi-implicit steps with a per-substep PD + feedforward command.

    Returns (q, qd, contact_left, contact_right, diverged_at) where
    diverged_at is -1 when all states stayed finite.
    """
    nq = q0.shape[0]
    nl = mass.shape[0]
    nc = contact_link.shape[0]
    npush = push_onset.shape[0]
    q = q0.copy()
    qd = qd0.copy()
    tau = np.zeros(nq)
    cl = False
    cr = False
    t = t0
    for sub in range(n_sub):
        for j in range(nq):
            if tau_max[j] > 0.0:
                v = kp[j] * (q_target[j] - q[j]) - kd[j] * qd[j] + tau_ext[j]
                if v > tau_max[j]:
                    v = tau_max[j]
                elif v < -tau_max[j]:
                    v = -tau_max[j]
                tau[j] = v
        o, th, vo, om, ao, pc, vc, ac = _kin_arrays(
            q, qd, floating, root_anchor, parent, dof, anchor_local, com_local, nl
        )
        rhs = tau.copy()
        M = np.zeros((nq, nq))
        Jv = np.zeros((2, nq))
        for i in range(nl):
            for j in range(nq):
                Jv[0, j] = 0.0
                Jv[1, j] = 0.0
            if floating:
                Jv[0, 0] = 1.0
                Jv[1, 1] = 1.0
            for e in range(chain_len[i]):
                d = chain_dof[i, e]
                lj = chain_link[i, e]
                Jv[0, d] -= pc[i, 1] - o[lj, 1]
                Jv[1, d] += pc[i, 0] - o[lj, 0]
            gx = gravity[0] - ac[i, 0]
            gz = gravity[1] - ac[i, 1]
            mi = mass[i]
            for j in range(nq):
                rhs[j] += mi * (Jv[0, j] * gx + Jv[1, j] * gz)
            for j in range(nq):
                jx = Jv[0, j]
                jz = Jv[1, j]
                if jx != 0.0 or jz != 0.0:
                    for k in range(j, nq):
                        M[j, k] += mi * (jx * Jv[0, k] + jz * Jv[1, k])
            Ii = inertia[i]
            for e in range(chain_len[i]):
                d = chain_dof[i, e]
                for e2 in range(chain_len[i]):
                    d2 = chain_dof[i, e2]
                    if d2 >= d:
                        M[d, d2] += Ii
        for j in range(nq):
            for k in range(j + 1, nq):
                M[k, j] = M[j, k]

        # penalty contact with Coulomb cap
        cl = False
        cr = False
        for kpt in range(nc):
            i = contact_link[kpt]
            c = np.cos(th[i])
            s = np.sin(th[i])
            rx = c * contact_offset[kpt, 0] - s * contact_offset[kpt, 1]
            rz = s * contact_offset[kpt, 0] + c * contact_offset[kpt, 1]
            px = o[i, 0] + rx
            pz = o[i, 1] + rz
            if pz < 0.0:
                vx = vo[i, 0] - om[i] * rz
                vz = vo[i, 1] + om[i] * rx
                fn = -k_n * pz - d_n * vz
                if fn < 0.0:
                    fn = 0.0
                ft = -d_n * vx
                cap = mu * fn
                if ft > cap:
                    ft = cap
                elif ft < -cap:
                    ft = -cap
                if fn > 0.0:
                    if contact_is_left[kpt]:
                        cl = True
                    else:
                        cr = True
                    if floating:
                        rhs[0] += ft
                        rhs[1] += fn
                    for e in range(chain_len[i]):
                        d = chain_dof[i, e]
                        lj = chain_link[i, e]
                        rhs[d] += -(pz - o[lj, 1]) * ft + (px - o[lj, 0]) * fn

        # scheduled pushes, applied at the target link origin
        for ip in range(npush):
            if push_onset[ip] - 1e-12 <= t < push_onset[ip] + push_dur[ip] - 1e-12:
                i = push_link[ip]
                fx = push_fx[ip]
                fz = push_fz[ip]
                if floating:
                    rhs[0] += fx
                    rhs[1] += fz
                for e in range(chain_len[i]):
                    d = chain_dof[i, e]
                    lj = chain_link[i, e]
                    rhs[d] += -(o[i, 1] - o[lj, 1]) * fx + (o[i, 0] - o[lj, 0]) * fz

        qdd = np.linalg.solve(M, rhs)
        ok = True
        for j in range(nq):
            qd[j] = qd[j] + qdd[j] * dt
            q[j] = q[j] + qd[j] * dt
            if not np.isfinite(q[j]) or not np.isfinite(qd[j]):
                ok = False
        if not ok:
            return q, qd, cl, cr, step0 + sub
        for j in range(nq):
            if q[j] < lo[j]:
                q[j] = lo[j]
                qd[j] = 0.0
            elif q[j] > hi[j]:
                q[j] = hi[j]
                qd[j] = 0.0
        t += dt
    return q, qd, cl, cr, -1
