"""Evaluation protocol: stability regions, push timing, torque profiles,
gait similarity, foot placement, and sensor/actuation ablations.

All experiments are seed-deterministic: every probe builds a fresh
environment, schedules one push at a controlled swing-phase timing, and runs
the frozen walking policy (optionally with predictor-gated recovery torques)
under mean actions. The planar stability region per push condition is the
largest verified-recoverable force found by bisection, and the region "size"
is the sum over conditions.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import human_env as henv
from . import predictor as pred
from . import recovery_env as renv
from .errors import FallsafeError

EVAL_PUSH_DURATION_S = 0.040
TIMINGS_PCT = (10, 30, 60, 90)
DIRECTIONS = (1, -1)
FORCE_CAP_N = 1200.0
FORCE_RESOLUTION_N = 10.0
WARMUP_CYCLES = 2
POST_CYCLES = 5
# evaluation episodes start at mid-stance; the phase-0 keyframe is the heel
# strike itself (swing foot at exact zero clearance), a degenerate contact
# state that random-phase training never produces
EVAL_RESET_PHASE = 0.25
SPEED_BAND = 0.20
EVAL_DEVICE_LATENCY_S = 0.040


@dataclass(frozen=True)
class PushCondition:
    direction: int  # +1 forward, -1 backward
    timing_pct: int  # % of the left swing phase
    duration: float = EVAL_PUSH_DURATION_S

    @property
    def name(self) -> str:
        tag = "fwd" if self.direction > 0 else "bwd"
        return f"{tag}{self.timing_pct}"


def default_conditions() -> tuple[PushCondition, ...]:
    return tuple(
        PushCondition(d, t) for d in DIRECTIONS for t in TIMINGS_PCT
    )


@dataclass
class ControllerStack:
    """Frozen walking policy plus optional predictor-gated recovery."""

    walking_policy: object
    svm: pred.SvmModel | None = None
    recovery_policy: object | None = None
    recovery_cfg: renv.RecoveryEnvConfig = field(default_factory=renv.RecoveryEnvConfig)
    human_cfg: henv.HumanEnvConfig | None = None

    @property
    def gated(self) -> bool:
        return self.svm is not None and self.recovery_policy is not None


@dataclass
class RolloutResult:
    terminated_early: bool  # fell (or diverged) at any point
    fell_before_push: bool
    com_speed: np.ndarray  # per control step, forward COM velocity
    times: np.ndarray
    phases: np.ndarray  # total phase progress per step
    joints: np.ndarray  # (n, 6)
    hip_l_applied: np.ndarray  # clamped total left-hip torque
    hip_l_device: np.ndarray  # device share
    contact_left: np.ndarray  # bool per step
    device_fired: bool
    push_onset: float
    final_speed: float  # mean forward COM speed over the last cycle


def _push_event(condition: PushCondition, force: float, clip) -> dyn.PushEvent | None:
    if force <= 0:
        return None
    lo, hi = clip.left_swing
    phase = lo + (hi - lo) * condition.timing_pct / 100.0
    onset = (WARMUP_CYCLES + phase - EVAL_RESET_PHASE) * clip.cycle_s
    return dyn.PushEvent(
        magnitude=force,
        direction=(float(condition.direction), 0.0),
        onset=onset,
        duration=condition.duration,
    )


def rollout(stack: ControllerStack, condition: PushCondition, force: float,
            seed: int, post_cycles: int = POST_CYCLES) -> RolloutResult:
    """One evaluation episode: warmup, push, observation window."""
    env = henv.HumanEnv(config=stack.human_cfg)
    clip = env.clip
    push = _push_event(condition, force, clip)
    onset = (push.onset if push is not None
             else (WARMUP_CYCLES + 0.7 - EVAL_RESET_PHASE) * clip.cycle_s)
    horizon = onset + (push.duration if push else 0.0) + post_cycles * clip.cycle_s
    n_steps = round(horizon * env.cfg.control_hz) + 1

    gate = None
    delay_steps = round(EVAL_DEVICE_LATENCY_S * env.cfg.control_hz)
    if stack.gated:
        gate = renv.GatedController(stack.svm, stack.recovery_policy,
                                    stack.recovery_cfg, env.cfg.control_hz,
                                    clip.cycle_s)

    obs = env.reset(seed, phase=EVAL_RESET_PHASE, push=push)
    dev_hist = deque([env.device_obs()] * (delay_steps + 1), maxlen=delay_steps + 1)
    rec = {k: [] for k in ("speed", "time", "phase", "joints", "hip_l", "hip_dev", "cl")}
    terminated_early = False
    fell_before_push = False
    device_fired = False
    phase0 = EVAL_RESET_PHASE
    for k in range(n_steps):
        assist = None
        dev_tau = np.zeros(2)
        if gate is not None:
            dev_tau = gate(dev_hist[0])
            if np.any(dev_tau != 0.0):
                device_fired = True
            assist = dev_tau
        t_before = env.time
        action = stack.walking_policy.mean_action(obs)
        obs, _, term = env.step(action, hip_assist=assist)
        dev_hist.append(env.device_obs())
        rec["time"].append(t_before)
        rec["phase"].append(phase0 + (k + 1) * env.cfg.control_dt / clip.cycle_s)
        rec["speed"].append(env.last_frame["vel"][0])
        rec["joints"].append(env.sim.q[3:9].copy())
        rec["hip_l"].append(env.last_tau[0])
        rec["hip_dev"].append(dev_tau[0])
        rec["cl"].append(env.sim.contact_left)
        if term and not env.timed_out:
            terminated_early = True
            fell_before_push = t_before < onset
            break

    speed = np.array(rec["speed"])
    steps_per_cycle = round(clip.cycle_s * env.cfg.control_hz)
    final = speed[-steps_per_cycle:] if len(speed) >= steps_per_cycle else speed
    return RolloutResult(
        terminated_early=terminated_early,
        fell_before_push=fell_before_push,
        com_speed=speed,
        times=np.array(rec["time"]),
        phases=np.array(rec["phase"]),
        joints=np.array(rec["joints"]),
        hip_l_applied=np.array(rec["hip_l"]),
        hip_l_device=np.array(rec["hip_dev"]),
        contact_left=np.array(rec["cl"], bool),
        device_fired=device_fired,
        push_onset=onset,
        final_speed=float(np.mean(final)),
    )


def probe_success(stack: ControllerStack, condition: PushCondition,
                  force: float, seed: int) -> bool:
    """Recovery = no fall within the observation window and COM speed back
    inside the nominal band."""
    r = rollout(stack, condition, force, seed)
    if r.terminated_early:
        if r.fell_before_push:
            raise FallsafeError(
                f"baseline gait fell before the push (condition {condition.name},"
                f" force {force:g} N, seed {seed}); configuration rejected"
            )
        return False
    nominal = henv.HumanEnv(config=stack.human_cfg).clip.speed
    return abs(r.final_speed - nominal) <= SPEED_BAND * nominal


@dataclass
class StabilityRegion:
    f_max: dict  # PushCondition -> largest verified recoverable force (N)

    @property
    def size(self) -> float:
        return float(sum(self.f_max.values()))


def stability_region(stack: ControllerStack, conditions=None, seed: int = 0,
                     cap: float = FORCE_CAP_N,
                     resolution: float = FORCE_RESOLUTION_N) -> StabilityRegion:
    """Bisection per condition between 0 and `cap` to `resolution` newtons.

    The zero-force probe must succeed (a walker that cannot walk is
    rejected); the returned force is the largest probe that actually
    recovered, so region membership is monotone by construction.
    """
    if conditions is None:
        conditions = default_conditions()
    out = {}
    for ci, cond in enumerate(conditions):
        probe_seed = seed * 1000 + ci  # fixed per condition
        if not probe_success(stack, cond, 0.0, probe_seed):
            raise FallsafeError(
                f"unpushed gait failed the recovery criterion for {cond.name}"
            )
        lo, hi = 0.0, float(cap)
        if probe_success(stack, cond, hi, probe_seed):
            out[cond] = hi
            continue
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if probe_success(stack, cond, mid, probe_seed):
                lo = mid
            else:
                hi = mid
        out[cond] = lo
    return StabilityRegion(out)


def compare_regions(region_a: StabilityRegion, region_b: StabilityRegion) -> float:
    """Relative expansion of a over b: size(a)/size(b) - 1."""
    if set(region_a.f_max) != set(region_b.f_max):
        raise FallsafeError("regions cover different condition sets")
    if region_b.size == 0:
        raise FallsafeError("reference region has zero size")
    return region_a.size / region_b.size - 1.0


def write_stability_csv(region: StabilityRegion, path):
    with open(path, "w") as f:
        f.write("condition,direction,timing_pct,f_max_n\n")
        for cond in sorted(region.f_max, key=lambda c: (-c.direction, c.timing_pct)):
            f.write(f"{cond.name},{cond.direction},{cond.timing_pct},"
                    f"{region.f_max[cond]:.10g}\n")


# --- push-timing experiment ---------------------------------------------------


def timing_experiment(stack: ControllerStack, seed: int = 0) -> dict:
    """Per-timing region size plus cycle-indexed COM-speed traces after a
    recoverable push (at the measured maximum force)."""
    sizes = {}
    traces = {}
    for t in TIMINGS_PCT:
        conds = [PushCondition(d, t) for d in DIRECTIONS]
        region = stability_region(stack, conds, seed=seed)
        sizes[t] = region.size
        fwd = conds[0]
        r = rollout(stack, fwd, region.f_max[fwd], seed * 1000)
        post = r.com_speed[r.times >= r.push_onset]
        env_cfg = stack.human_cfg or henv.HumanEnvConfig()
        spc = round(henv.HumanEnv(config=stack.human_cfg).clip.cycle_s * env_cfg.control_hz)
        traces[t] = [float(np.mean(post[c * spc:(c + 1) * spc]))
                     for c in range(POST_CYCLES) if len(post[c * spc:(c + 1) * spc])]
    return {"region_size": sizes, "com_speed_cycles": traces}


def write_timing_csv(result: dict, path):
    with open(path, "w") as f:
        f.write("timing_pct,cycle,com_speed_mean\n")
        for t in sorted(result["com_speed_cycles"]):
            for c, v in enumerate(result["com_speed_cycles"][t]):
                f.write(f"{t},{c + 1},{v:.10g}\n")


# --- torque profiles ----------------------------------------------------------

N_PHASE_BINS = 10


def torque_profiles(stack: ControllerStack, n_trials: int = 50,
                    force_range=(200.0, 800.0), timing_pct: int = 30,
                    seed: int = 0) -> dict:
    """Per-phase-bin mean/std of left-hip torque over pushed trials for three
    sources: the human PD component, the device share, and their (applied)
    combination. Combined = human + recovery bin-wise by construction."""
    rng = np.random.default_rng(seed)
    cond = PushCondition(1, timing_pct)
    per_trial = {"human": [], "recovery": [], "combined": []}
    for trial in range(n_trials):
        force = rng.uniform(*force_range)
        r = rollout(stack, cond, force, seed * 1000 + trial)
        phase_bin = np.floor((r.phases % 1.0) * N_PHASE_BINS).astype(int)
        combined = r.hip_l_applied
        recovery = r.hip_l_device
        human = combined - recovery
        bins = {k: np.full(N_PHASE_BINS, np.nan) for k in per_trial}
        for b in range(N_PHASE_BINS):
            m = phase_bin == b
            if m.any():
                bins["human"][b] = human[m].mean()
                bins["recovery"][b] = recovery[m].mean()
                bins["combined"][b] = combined[m].mean()
        for k in per_trial:
            per_trial[k].append(bins[k])
    out = {}
    for k, rows in per_trial.items():
        arr = np.array(rows)
        out[k] = {
            "mean": np.nanmean(arr, axis=0),
            "std": np.nanstd(arr, axis=0) if n_trials > 1 else np.zeros(N_PHASE_BINS),
        }
    return out


def write_torque_csv(profiles: dict, path):
    with open(path, "w") as f:
        f.write("phase_bin,source,mean_nm,std_nm\n")
        for source in ("human", "recovery", "combined"):
            stats = profiles[source]
            for b in range(N_PHASE_BINS):
                f.write(f"{b},{source},{stats['mean'][b]:.10g},{stats['std'][b]:.10g}\n")


# --- gait similarity ----------------------------------------------------------


def gait_similarity(stack: ControllerStack, seed: int = 0,
                    n_cycles: int = 6) -> dict:
    """Joint-angle RMSE against the clip over one heel-strike-aligned cycle,
    plus the left-hip (angle, torque) loop for that cycle."""
    env = henv.HumanEnv(config=stack.human_cfg)
    clip = env.clip
    cond = PushCondition(1, 30)
    r = rollout(stack, cond, 0.0, seed, post_cycles=n_cycles)
    if r.terminated_early:
        raise FallsafeError("policy fell during the unperturbed similarity rollout")
    # heel-strike alignment: rising edges of left-foot contact
    strikes = np.flatnonzero(r.contact_left[1:] & ~r.contact_left[:-1]) + 1
    # ignore scuffs: require near-cycle spacing
    spc = clip.cycle_s * env.cfg.control_hz
    strikes = [s for i, s in enumerate(strikes)
               if i == 0 or s - strikes[i - 1] > 0.5 * spc]
    strikes = [s for s in strikes if r.times[s] > WARMUP_CYCLES * clip.cycle_s]
    if len(strikes) < 2:
        raise FallsafeError("policy did not complete a full gait cycle")
    a, b = strikes[-2], strikes[-1]
    phases = (np.arange(a, b) - a) / (b - a)
    # The contact rising edge is not exactly the clip's phase-0 touchdown
    # (penalty contact fires on penetration, and sensing delay lags the
    # tracked phase), so align the cycle by the circular phase shift that
    # minimizes total joint RMSE before scoring.
    best_err = None
    for shift in np.arange(-0.12, 0.1201, 0.005):
        ref = np.array([clip.sample((p + shift) % 1.0).joints for p in phases])
        err = r.joints[a:b] - ref
        if best_err is None or (err**2).mean() < (best_err**2).mean():
            best_err = err
    rmse = np.sqrt((best_err**2).mean(axis=0))
    loop_angle = r.joints[a:b, 0]
    loop_torque = r.hip_l_applied[a:b]
    closure = math.hypot(loop_angle[0] - loop_angle[-1],
                         (loop_torque[0] - loop_torque[-1]) / 100.0)
    return {
        "rmse": rmse,  # per joint, dynamics ordering
        "hip_loop": np.column_stack([loop_angle, loop_torque]),
        "loop_closure": closure,
    }


# --- foot placement -----------------------------------------------------------


def foot_placement_analysis(stack: ControllerStack, push_magnitudes,
                            seed: int = 0, timing_pct: int = 30) -> dict:
    """Forward foot-placement offset at the first post-push left heel strike
    versus COM velocity just after the push; least-squares line and
    residuals."""
    mags = sorted(set(float(m) for m in push_magnitudes))
    if len(mags) < 2:
        raise FallsafeError("need at least two distinct push magnitudes")
    cond = PushCondition(1, timing_pct)
    records = []
    for mi, force in enumerate(mags):
        r = rollout(stack, cond, force, seed * 1000 + mi)
        after = r.times >= r.push_onset + EVAL_PUSH_DURATION_S
        if not after.any():
            continue
        k0 = int(np.argmax(after))
        v_com = float(r.com_speed[k0])
        strikes = np.flatnonzero(r.contact_left[1:] & ~r.contact_left[:-1]) + 1
        strikes = strikes[strikes > k0]
        if len(strikes) == 0:
            continue
        ks = int(strikes[0])
        # forward offset of the landing foot relative to the hip at strike
        env = henv.HumanEnv(config=stack.human_cfg)
        env.reset(0, phase=0.0, push=None)
        # joints at strike -> foot x relative to base via FK on a scratch state
        st = dyn.SimState(q=np.concatenate([[0.0, 0.0], [0.0], r.joints[ks]]),
                          qd=np.zeros(9))
        foot = dyn.point_world(env.model, st, "foot_l",
                               (0.5 * (dyn.FOOT_HEEL + dyn.FOOT_TOE), -dyn.ANKLE_HEIGHT))
        records.append((v_com, float(foot[0])))
    if len(records) < 2:
        raise FallsafeError("too few valid foot-placement records")
    v = np.array([r[0] for r in records])
    d = np.array([r[1] for r in records])
    a, b = np.polyfit(v, d, 1)
    residuals = d - (a * v + b)
    return {"records": records, "slope": float(a), "intercept": float(b),
            "residuals": residuals}


def write_footplace_csv(result: dict, path):
    with open(path, "w") as f:
        f.write("v_com,delta_m,residual_m\n")
        for (v, d), res in zip(result["records"], result["residuals"]):
            f.write(f"{v:.10g},{d:.10g},{res:.10g}\n")


# --- ablation -----------------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    sensors: pred.SensorConfig
    torque_limit_nm: float


def default_ablation_specs() -> tuple[AblationSpec, ...]:
    return tuple(
        AblationSpec(s, lim)
        for s in (pred.SensorConfig.BOTH, pred.SensorConfig.IMU, pred.SensorConfig.ENCODER)
        for lim in (30.0, 15.0)
    )


def run_ablation(walking_policy, X, y, specs, seed: int,
                 ppo_config, rec_updates: int, svm_params=(10.0, 2.0),
                 conditions=None, human_cfg=None, n_workers: int = 1,
                 kfold_subsample: int | None = 2000,
                 train_subsample: int | None = 10000,
                 progress=None) -> list[dict]:
    """Train a predictor and recovery policy per cell; evaluate each cell's
    stability region with shared seeds. Failures are recorded per row."""
    C, sigma = svm_params
    Xt, yt = pred.stratified_subsample(X, y, train_subsample, seed)
    rows = []
    for si, spec in enumerate(specs):
        row = {"sensors": spec.sensors.value, "limit_nm": spec.torque_limit_nm,
               "pred_acc": math.nan, "region_size": math.nan, "error": ""}
        try:
            res = pred.kfold_accuracy(X, y, k=6, C_grid=(C,), sigma_grid=(sigma,),
                                      seed=seed, feature_idx=spec.sensors.feature_idx,
                                      subsample=kfold_subsample)
            row["pred_acc"] = res["accuracy"]
            svm = pred.train_svm(Xt, yt, C, sigma, feature_idx=spec.sensors.feature_idx)
            rec_cfg = renv.RecoveryEnvConfig(sensors=spec.sensors,
                                             torque_limit_nm=spec.torque_limit_nm)
            policy, _, _ = renv.train_recovery(
                walking_policy, rec_cfg, ppo_config, rec_updates, seed + si,
                human_config=human_cfg, n_workers=n_workers)
            stack = ControllerStack(walking_policy, svm, policy, rec_cfg, human_cfg)
            region = stability_region(stack, conditions, seed=seed)
            row["region_size"] = region.size
        except FallsafeError as exc:
            row["error"] = str(exc)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_ablation_csv(rows: list[dict], path):
    with open(path, "w") as f:
        f.write("sensors,limit_nm,pred_acc,region_size\n")
        for r in rows:
            f.write(f"{r['sensors']},{r['limit_nm']:.10g},{r['pred_acc']:.10g},"
                    f"{r['region_size']:.10g}\n")
