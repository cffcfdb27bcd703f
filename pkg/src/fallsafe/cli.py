"""Command-line entry point.

Every command takes `--config <yaml> --seed <u64> --out <dir>` and writes its
artifacts plus a manifest (command, resolved-config hash, seed, wall time,
artifact list) and a resolved-config snapshot into the output directory.
Randomness flows from the single seed through named per-component substreams
(sha256 of "seed:component"), so any command rerun with the same config and
seed reproduces its CSV artifacts byte for byte. Partial outputs are removed
if a command fails.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import yaml

from . import dynamics as dyn
from . import evalharness as evalh
from . import gait
from . import human_env as henv
from . import neural
from . import ppo
from . import predictor as pred
from . import recovery_env as renv
from .errors import ConfigError, FallsafeError, MissingArtifact

_TOP_KEYS = {"model", "gait", "ppo", "human_env", "predictor", "recovery_env", "eval"}
_PPO_RUN_KEYS = {"walker_updates", "recovery_updates", "curriculum_frac"}
_PRED_KEYS = {"n_samples", "horizon_cycles", "C_grid", "sigma_grid",
              "kfold_subsample", "train_subsample"}
_EVAL_KEYS = {
    "stability_cap_n", "resolution_n", "torque_trials", "torque_force_range",
    "timing_pct", "foot_push_magnitudes", "ablation_recovery_updates",
    "ablation_svm_C", "ablation_svm_sigma",
}


class RunConfig:
    """Resolved run configuration; unknown keys anywhere are rejected."""

    def __init__(self, doc: dict):
        doc = doc or {}
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

        model_doc = doc.get("model") or {}
        if set(model_doc) - {"path"}:
            raise ConfigError("model section accepts only 'path'")
        gait_doc = doc.get("gait") or {}
        if set(gait_doc) - {"path"}:
            raise ConfigError("gait section accepts only 'path'")
        self.model_path = model_doc.get("path")
        self.gait_path = gait_doc.get("path")

        ppo_doc = dict(doc.get("ppo") or {})
        self.walker_updates = int(ppo_doc.pop("walker_updates", 2000))
        self.recovery_updates = int(ppo_doc.pop("recovery_updates", 150))
        self.curriculum_frac = float(ppo_doc.pop("curriculum_frac", 0.5))
        allowed = {f.name for f in ppo.PpoConfig.__dataclass_fields__.values()}
        unknown = set(ppo_doc) - allowed
        if unknown:
            raise ConfigError(f"unknown ppo keys {sorted(unknown)}")
        self.ppo = ppo.PpoConfig(**ppo_doc)

        self.human_env = henv.config_from_dict(doc.get("human_env") or {})
        self.recovery_env = renv.config_from_dict(doc.get("recovery_env") or {})

        pred_doc = dict(doc.get("predictor") or {})
        unknown = set(pred_doc) - _PRED_KEYS
        if unknown:
            raise ConfigError(f"unknown predictor keys {sorted(unknown)}")
        self.pred_n_samples = int(pred_doc.get("n_samples", 50000))
        self.pred_horizon_cycles = float(pred_doc.get("horizon_cycles", 2.0))
        self.pred_c_grid = tuple(pred_doc.get("C_grid", (0.1, 1.0, 10.0, 100.0)))
        self.pred_sigma_grid = tuple(pred_doc.get("sigma_grid", (0.5, 1.0, 2.0, 4.0)))
        self.pred_kfold_subsample = pred_doc.get("kfold_subsample", 2000)
        self.pred_train_subsample = pred_doc.get("train_subsample", 10000)

        eval_doc = dict(doc.get("eval") or {})
        unknown = set(eval_doc) - _EVAL_KEYS
        if unknown:
            raise ConfigError(f"unknown eval keys {sorted(unknown)}")
        self.stability_cap = float(eval_doc.get("stability_cap_n", evalh.FORCE_CAP_N))
        self.resolution = float(eval_doc.get("resolution_n", evalh.FORCE_RESOLUTION_N))
        self.torque_trials = int(eval_doc.get("torque_trials", 50))
        self.torque_force_range = tuple(eval_doc.get("torque_force_range", (200.0, 800.0)))
        self.timing_pct = int(eval_doc.get("timing_pct", 30))
        self.foot_pushes = tuple(eval_doc.get(
            "foot_push_magnitudes", (0.0, 100.0, 200.0, 300.0, 400.0)))
        self.ablation_recovery_updates = int(eval_doc.get("ablation_recovery_updates", 60))
        self.ablation_svm = (float(eval_doc.get("ablation_svm_C", 10.0)),
                             float(eval_doc.get("ablation_svm_sigma", 2.0)))

        self.raw = doc

    def model(self):
        return dyn.load_model(self.model_path) if self.model_path else dyn.default_biped()

    def clip(self, model):
        return gait.load_clip(self.gait_path, model) if self.gait_path else gait.default_clip(model)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return RunConfig(yaml.safe_load(f))


def config_hash(cfg: RunConfig) -> str:
    def canon(x):
        if isinstance(x, dict):
            return {k: canon(x[k]) for k in sorted(x)}
        if isinstance(x, (list, tuple)):
            return [canon(v) for v in x]
        return x
    return hashlib.sha256(json.dumps(canon(cfg.raw), sort_keys=True).encode()).hexdigest()


def component_seed(seed: int, component: str, worker: int = 0) -> int:
    """Documented substream derivation: sha256 of 'seed:component:worker'."""
    h = hashlib.sha256(f"{seed}:{component}:{worker}".encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


class Run:
    """Artifact tracking for one command; removes partial outputs on failure."""

    def __init__(self, command, cfg: RunConfig, seed: int, out_dir):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.out = out_dir
        self.artifacts = []
        self.t0 = time.time()
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self.out, name)
        self.artifacts.append(name)
        return p

    def cleanup(self):
        for name in self.artifacts:
            p = os.path.join(self.out, name)
            if os.path.exists(p):
                os.remove(p)

    def finish(self):
        snap = os.path.join(self.out, "resolved_config.yaml")
        with open(snap, "w") as f:
            yaml.safe_dump(self.cfg.raw, f, sort_keys=True)
        manifest = os.path.join(self.out, "manifest.txt")
        with open(manifest, "w") as f:
            f.write(f"command: {self.command}\n")
            f.write(f"config_hash: {config_hash(self.cfg)}\n")
            f.write(f"seed: {self.seed}\n")
            f.write(f"wall_time_s: {time.time() - self.t0:.3f}\n")
            f.write("artifacts:\n")
            for a in self.artifacts:
                f.write(f"  - {a}\n")
            f.write("  - resolved_config.yaml\n")


def _require(path, flag: str, producer: str):
    if path is None or not os.path.exists(path):
        raise MissingArtifact(path or f"<{flag}>", producer)


def _load_walker(cfg: RunConfig, checkpoint) -> ppo.GaussianPolicy:
    _require(checkpoint, "--checkpoint", "train-walker")
    policy = ppo.GaussianPolicy(neural.load_checkpoint(checkpoint))
    env = henv.HumanEnv(cfg.model(), None, cfg.human_env)
    policy.obs_shift, policy.obs_scale = env.obs_shift_scale()
    return policy


def _load_recovery(cfg: RunConfig, checkpoint) -> ppo.GaussianPolicy:
    _require(checkpoint, "--recovery", "train-recovery")
    net = neural.load_checkpoint(checkpoint)
    shift, scale = renv.device_obs_shift_scale(cfg.recovery_env.sensors)
    return ppo.GaussianPolicy(net, shift, scale)


def _stack(cfg: RunConfig, args, need_recovery: bool) -> evalh.ControllerStack:
    walking = _load_walker(cfg, args.checkpoint)
    svm = None
    recovery = None
    if need_recovery:
        _require(args.predictor, "--predictor", "train-predictor")
        svm = pred.load_model(args.predictor)
        recovery = _load_recovery(cfg, args.recovery)
    return evalh.ControllerStack(walking, svm, recovery, cfg.recovery_env,
                                 cfg.human_env)


# --- commands -----------------------------------------------------------------


def cmd_train_walker(run: Run, args):
    cfg = run.cfg
    model = cfg.model()
    clip = cfg.clip(model)
    policy = ppo.GaussianPolicy(neural.Mlp.create(
        (henv.OBS_DIM, 128, 128, henv.ACT_DIM), head="gaussian",
        seed=component_seed(run.seed, "walker-policy-init")))
    env0 = henv.HumanEnv(model, clip, cfg.human_env)
    policy.obs_shift, policy.obs_scale = env0.obs_shift_scale()
    value = neural.Mlp.create((henv.OBS_DIM, 128, 128, 1), head="linear",
                              seed=component_seed(run.seed, "walker-value-init"))

    envs = []

    def make_env(w):
        e = henv.HumanEnv(model, clip, cfg.human_env)
        e.push_scale = 0.0
        envs.append(e)
        return e

    ramp = max(1, round(cfg.curriculum_frac * cfg.walker_updates))

    def progress(row):
        scale = min(1.0, (row["update"] + 1) / ramp)
        for e in envs:
            e.push_scale = scale
        if row["update"] % 10 == 0:
            print(f"update {row['update']}: return {row['mean_return']:.1f} "
                  f"ep_len {row['mean_ep_len']:.0f} push_scale {scale:.2f}",
                  flush=True)

    with open(run.path("train_walker_log.csv"), "w") as log:
        ppo.train(make_env, policy, value, cfg.ppo, cfg.walker_updates,
                  component_seed(run.seed, "walker-train"),
                  n_workers=args.workers, log_file=log, progress=progress)
    neural.save_checkpoint(policy.net, run.path("walker_policy.bin"))
    neural.save_checkpoint(value, run.path("walker_value.bin"))


def cmd_train_recovery(run: Run, args):
    cfg = run.cfg
    walking = _load_walker(cfg, args.checkpoint)

    def progress(row):
        if row["update"] % 10 == 0:
            print(f"update {row['update']}: return {row['mean_return']:.1f}", flush=True)

    with open(run.path("train_recovery_log.csv"), "w") as log:
        policy, value, _ = renv.train_recovery(
            walking, cfg.recovery_env, cfg.ppo, cfg.recovery_updates,
            component_seed(run.seed, "recovery-train"),
            human_config=cfg.human_env, n_workers=args.workers,
            log_file=log, progress=progress)
    neural.save_checkpoint(policy.net, run.path("recovery_policy.bin"))
    neural.save_checkpoint(value, run.path("recovery_value.bin"))


def cmd_gen_falldata(run: Run, args):
    cfg = run.cfg
    walking = _load_walker(cfg, args.checkpoint)
    model = cfg.model()
    clip = cfg.clip(model)

    def make_env(w):
        return henv.HumanEnv(model, clip, cfg.human_env)

    X, y = pred.generate_dataset(make_env, walking, cfg.pred_n_samples,
                                 component_seed(run.seed, "falldata"),
                                 n_workers=args.workers,
                                 horizon_cycles=cfg.pred_horizon_cycles)
    pred.save_dataset(X, y, run.path("falldata.csv"))
    print(f"{len(y)} samples, fall fraction {np.mean(y == pred.LABEL_FALL):.3f}",
          flush=True)


def cmd_train_predictor(run: Run, args):
    cfg = run.cfg
    _require(args.dataset, "--dataset", "gen-falldata")
    X, y = pred.load_dataset(args.dataset)
    res = pred.kfold_accuracy(X, y, k=6, C_grid=cfg.pred_c_grid,
                              sigma_grid=cfg.pred_sigma_grid,
                              seed=component_seed(run.seed, "predictor-folds"),
                              subsample=cfg.pred_kfold_subsample)
    with open(run.path("predictor_cv.csv"), "w") as f:
        f.write("C,sigma,accuracy,fall_recall\n")
        f.write(f"{res['C']:.10g},{res['sigma']:.10g},{res['accuracy']:.10g},"
                f"{res['fall_recall']:.10g}\n")
    Xt, yt = pred.stratified_subsample(
        X, y, cfg.pred_train_subsample,
        component_seed(run.seed, "predictor-train-subsample"))
    model = pred.train_svm(Xt, yt, res["C"], res["sigma"])
    pred.save_model(model, run.path("predictor.bin"))
    print(f"best C={res['C']} sigma={res['sigma']} "
          f"accuracy={res['accuracy']:.4f} fall_recall={res['fall_recall']:.4f}",
          flush=True)


def cmd_eval_stability(run: Run, args):
    cfg = run.cfg
    stack = _stack(cfg, args, need_recovery=True)
    base = evalh.ControllerStack(stack.walking_policy, human_cfg=cfg.human_env)
    seed = component_seed(run.seed, "eval-stability") % 10**6
    region_base = evalh.stability_region(base, seed=seed, cap=cfg.stability_cap,
                                         resolution=cfg.resolution)
    region_rec = evalh.stability_region(stack, seed=seed, cap=cfg.stability_cap,
                                        resolution=cfg.resolution)
    evalh.write_stability_csv(region_base, run.path("stability_baseline.csv"))
    evalh.write_stability_csv(region_rec, run.path("stability.csv"))
    expansion = evalh.compare_regions(region_rec, region_base)
    with open(run.path("expansion.csv"), "w") as f:
        f.write("metric,value\n")
        f.write(f"baseline_size_n,{region_base.size:.10g}\n")
        f.write(f"recovery_size_n,{region_rec.size:.10g}\n")
        f.write(f"expansion,{expansion:.10g}\n")
    print(f"baseline {region_base.size:.0f} N, with recovery {region_rec.size:.0f} N, "
          f"expansion {expansion * 100:.1f}%", flush=True)


def cmd_eval_timing(run: Run, args):
    cfg = run.cfg
    stack = _stack(cfg, args, need_recovery=args.recovery is not None)
    res = evalh.timing_experiment(stack, seed=component_seed(run.seed, "eval-timing") % 10**6)
    evalh.write_timing_csv(res, run.path("timing.csv"))
    with open(run.path("timing_regions.csv"), "w") as f:
        f.write("timing_pct,region_size_n\n")
        for t in sorted(res["region_size"]):
            f.write(f"{t},{res['region_size'][t]:.10g}\n")
    print("region size by timing:", res["region_size"], flush=True)


def cmd_eval_torque(run: Run, args):
    cfg = run.cfg
    stack = _stack(cfg, args, need_recovery=True)
    prof = evalh.torque_profiles(stack, n_trials=cfg.torque_trials,
                                 force_range=cfg.torque_force_range,
                                 timing_pct=cfg.timing_pct,
                                 seed=component_seed(run.seed, "eval-torque") % 10**6)
    evalh.write_torque_csv(prof, run.path("torque.csv"))


def cmd_eval_gait(run: Run, args):
    cfg = run.cfg
    stack = _stack(cfg, args, need_recovery=False)
    seed = component_seed(run.seed, "eval-gait") % 10**6
    sim = evalh.gait_similarity(stack, seed=seed)
    with open(run.path("gait_rmse.csv"), "w") as f:
        f.write("joint,rmse_rad\n")
        for name, v in zip(gait.JOINT_NAMES, sim["rmse"]):
            f.write(f"{name},{v:.10g}\n")
    with open(run.path("hip_loop.csv"), "w") as f:
        f.write("angle_rad,torque_nm\n")
        for ang, tq in sim["hip_loop"]:
            f.write(f"{ang:.10g},{tq:.10g}\n")
    foot = evalh.foot_placement_analysis(stack, cfg.foot_pushes, seed=seed,
                                         timing_pct=cfg.timing_pct)
    evalh.write_footplace_csv(foot, run.path("footplace.csv"))
    print("hip RMSE:", float(sim["rmse"][0]), "slope:", foot["slope"], flush=True)


def cmd_ablate(run: Run, args):
    cfg = run.cfg
    walking = _load_walker(cfg, args.checkpoint)
    _require(args.dataset, "--dataset", "gen-falldata")
    X, y = pred.load_dataset(args.dataset)
    rows = evalh.run_ablation(
        walking, X, y, evalh.default_ablation_specs(),
        component_seed(run.seed, "ablation") % 10**6,
        cfg.ppo, cfg.ablation_recovery_updates, svm_params=cfg.ablation_svm,
        human_cfg=cfg.human_env, n_workers=args.workers,
        kfold_subsample=cfg.pred_kfold_subsample,
        train_subsample=cfg.pred_train_subsample,
        progress=lambda row: print(row, flush=True))
    evalh.write_ablation_csv(rows, run.path("ablation.csv"))


def cmd_rollout(run: Run, args):
    cfg = run.cfg
    walking = _load_walker(cfg, args.checkpoint)
    model = cfg.model()
    env = henv.HumanEnv(model, cfg.clip(model), cfg.human_env)
    obs = env.reset(component_seed(run.seed, "rollout") % 10**6, push=None)
    with open(run.path("rollout.csv"), "w") as f:
        f.write(dyn.trajectory_header(model.nq) + "\n")
        tau = np.zeros(model.nq)
        f.write(dyn.trajectory_row(env.sim, tau) + "\n")
        for _ in range(round(cfg.human_env.episode_max_s * cfg.human_env.control_hz)):
            obs, _, term = env.step(walking.mean_action(obs))
            tau[3:9] = env.last_tau
            f.write(dyn.trajectory_row(env.sim, tau) + "\n")
            if term:
                break
    print(f"rollout ended at t={env.sim.time:.2f}s "
          f"(terminated={'yes' if term and not env.timed_out else 'no'})", flush=True)


_COMMANDS = {
    "train-walker": cmd_train_walker,
    "train-recovery": cmd_train_recovery,
    "gen-falldata": cmd_gen_falldata,
    "train-predictor": cmd_train_predictor,
    "eval-stability": cmd_eval_stability,
    "eval-timing": cmd_eval_timing,
    "eval-torque": cmd_eval_torque,
    "eval-gait": cmd_eval_gait,
    "ablate": cmd_ablate,
    "rollout": cmd_rollout,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fallsafe",
                                description="fall-prevention pipeline commands")
    p.add_argument("command", choices=sorted(_COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="walking-policy checkpoint")
    p.add_argument("--recovery", help="recovery-policy checkpoint")
    p.add_argument("--predictor", help="predictor checkpoint")
    p.add_argument("--dataset", help="labeled fall dataset CSV")
    p.add_argument("--workers", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0:
        print("error: seed must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = Run(args.command, cfg, args.seed, args.out)
    try:
        _COMMANDS[args.command](run, args)
    except MissingArtifact as exc:
        run.cleanup()
        print(f"error: missing artifact {exc.path}; produce it with "
              f"`fallsafe {exc.producer}`", file=sys.stderr)
        return 1
    except FallsafeError as exc:
        run.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
