"""Clipped-surrogate policy optimization with generalized advantage estimation.

Environments are duck-typed: `reset(seed) -> obs`, `step(action) ->
(obs, reward, terminated)`, plus `obs_dim`/`act_dim` attributes. Rollouts are
fixed-length batches; episodes cut at the batch boundary are treated as
truncations and bootstrapped with the value estimate of the next state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .errors import DimensionMismatch, FallsafeError


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    learning_rate: float = 3e-4
    steps_per_batch: int = 8192
    entropy_coef: float = 0.0
    kl_flag: float = 0.15  # epoch-mean KL above this stops further epochs

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise FallsafeError("gamma must be in (0, 1]")
        if not (0 <= self.lam <= 1):
            raise FallsafeError("lambda must be in [0, 1]")
        if self.clip_ratio <= 0:
            raise FallsafeError("clip ratio must be positive")


@dataclass
class RolloutBuffer:
    """Per-step rollout storage with episode boundary bookkeeping."""

    obs: np.ndarray  # (N, do)
    actions: np.ndarray  # (N, da)
    logp: np.ndarray  # (N,)
    rewards: np.ndarray  # (N,)
    values: np.ndarray  # (N,)
    dones: np.ndarray  # (N,) bool: episode ended after this step
    terminated: np.ndarray  # (N,) bool: true termination (else truncation)
    bootstrap: np.ndarray  # (N,) value of next state where dones & ~terminated

    def __len__(self) -> int:
        return len(self.rewards)

    def episode_returns(self) -> list[float]:
        out, acc = [], 0.0
        for r, d in zip(self.rewards, self.dones):
            acc += r
            if d:
                out.append(acc)
                acc = 0.0
        return out

    def episode_lengths(self) -> list[int]:
        out, n = [], 0
        for d in self.dones:
            n += 1
            if d:
                out.append(n)
                n = 0
        return out


class GaussianPolicy:
    """Diagonal-gaussian policy over a mean network and learnable log-std."""

    def __init__(self, net: neural.Mlp, obs_shift=None, obs_scale=None):
        if net.head != "gaussian":
            raise FallsafeError("policy network must have a gaussian head")
        self.net = net
        self.obs_shift = np.zeros(net.in_dim) if obs_shift is None else np.asarray(obs_shift, float)
        self.obs_scale = np.ones(net.in_dim) if obs_scale is None else np.asarray(obs_scale, float)

    def normalize(self, obs):
        return (np.asarray(obs, float) - self.obs_shift) / self.obs_scale

    def mean_action(self, obs) -> np.ndarray:
        return self.net.forward(self.normalize(obs))

    def act(self, obs, rng: np.random.Generator):
        mean = self.mean_action(obs)
        std = np.exp(self.net.log_std)
        action = mean + std * rng.standard_normal(mean.shape)
        return action, self.log_prob_single(action, mean)

    def log_prob_single(self, action, mean) -> float:
        std = np.exp(self.net.log_std)
        z = (action - mean) / std
        return float(-0.5 * np.sum(z * z) - np.sum(self.net.log_std) - 0.5 * len(std) * math.log(2 * math.pi))

    def log_prob_batch(self, actions, means) -> np.ndarray:
        std = np.exp(self.net.log_std)
        z = (actions - means) / std
        k = actions.shape[1]
        return -0.5 * np.sum(z * z, axis=1) - np.sum(self.net.log_std) - 0.5 * k * math.log(2 * math.pi)


def gae(rewards, values, dones, terminated, bootstrap, gamma, lam):
    """Advantages and returns.

    delta_t = r_t + gamma V_{t+1} - V_t, A_t = delta_t + gamma lam A_{t+1};
    at episode ends V_{t+1} is 0 for terminations and the stored bootstrap
    value for truncations. returns = advantages + values.
    """
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    n = len(rewards)
    adv = np.zeros(n)
    next_v = 0.0
    next_a = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_v = 0.0 if terminated[t] else bootstrap[t]
            next_a = 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        adv[t] = delta + gamma * lam * next_a
        next_v = values[t]
        next_a = adv[t]
    return adv, adv + values


def collect(env, policy: GaussianPolicy, value_net: neural.Mlp, n_steps: int, seed: int) -> RolloutBuffer:
    """Gather exactly n_steps transitions; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    obs_l, act_l, logp_l, rew_l = [], [], [], []
    done_l, term_l, next_obs_at_done = [], [], {}
    obs = env.reset(int(rng.integers(2**63)))
    for t in range(n_steps):
        action, logp = policy.act(obs, rng)
        next_obs, reward, terminated = env.step(action)
        obs_l.append(np.asarray(obs, float))
        act_l.append(np.asarray(action, float))
        logp_l.append(logp)
        rew_l.append(reward)
        truncate = (t == n_steps - 1) and not terminated
        done = terminated or truncate
        done_l.append(done)
        term_l.append(bool(terminated))
        if done and not terminated:
            next_obs_at_done[t] = np.asarray(next_obs, float)
        obs = env.reset(int(rng.integers(2**63))) if terminated else next_obs
    n = n_steps
    if n == 0:
        z = np.zeros(0)
        do = getattr(env, "obs_dim", 0)
        da = getattr(env, "act_dim", 0)
        return RolloutBuffer(np.zeros((0, do)), np.zeros((0, da)), z, z, z,
                             z.astype(bool), z.astype(bool), z)
    obs_arr = np.stack(obs_l)
    values = value_net.forward(policy.normalize(obs_arr)).reshape(-1)
    bootstrap = np.zeros(n)
    for t, nobs in next_obs_at_done.items():
        bootstrap[t] = float(value_net.forward(policy.normalize(nobs))[0])
    return RolloutBuffer(
        obs=obs_arr,
        actions=np.stack(act_l),
        logp=np.array(logp_l),
        rewards=np.array(rew_l, float),
        values=values,
        dones=np.array(done_l, bool),
        terminated=np.array(term_l, bool),
        bootstrap=bootstrap,
    )


def merge_buffers(buffers: list[RolloutBuffer]) -> RolloutBuffer:
    """Concatenate worker rollouts in worker-index order."""
    return RolloutBuffer(*[np.concatenate([getattr(b, f) for b in buffers]) for f in
                           ("obs", "actions", "logp", "rewards", "values", "dones",
                            "terminated", "bootstrap")])


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(
    policy: GaussianPolicy,
    value_net: neural.Mlp,
    buffer: RolloutBuffer,
    config: PpoConfig,
    policy_opt: neural.AdamState | None = None,
    value_opt: neural.AdamState | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """One PPO update over the buffer; returns {kl, clip_frac, value_loss}."""
    n = len(buffer)
    if n == 0:
        raise FallsafeError("cannot update from an empty buffer")
    net = policy.net
    if policy_opt is None:
        policy_opt = neural.AdamState.for_params(net.params())
    if value_opt is None:
        value_opt = neural.AdamState.for_params(value_net.params())
    if rng is None:
        rng = np.random.default_rng(0)

    adv, returns = gae(buffer.rewards, buffer.values, buffer.dones,
                       buffer.terminated, buffer.bootstrap, config.gamma, config.lam)
    adv = normalize_advantages(adv)
    nobs = policy.normalize(buffer.obs)

    eps = config.clip_ratio
    kl_total, clip_total, vloss_total, batches = 0.0, 0.0, 0.0, 0
    stop = False
    for _ in range(config.epochs):
        if stop:
            break
        epoch_kl, epoch_batches = 0.0, 0
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            ob, ac = nobs[idx], buffer.actions[idx]
            a_n = adv[idx]
            old_logp = buffer.logp[idx]
            m = len(idx)

            means, cache = net.forward_cached(ob)
            std = np.exp(net.log_std)
            new_logp = policy.log_prob_batch(ac, means)
            ratio = np.exp(np.clip(new_logp - old_logp, -30, 30))
            unclipped = ratio * a_n
            clipped = np.clip(ratio, 1 - eps, 1 + eps) * a_n
            use_unclipped = unclipped <= clipped  # min() picks this branch
            glogp = np.where(use_unclipped, ratio * a_n, 0.0) / m

            z = (ac - means) / std
            dmean = glogp[:, None] * z / std
            grads = net.backward(cache, dmean)
            dlogstd = (glogp[:, None] * (z * z - 1.0)).sum(axis=0)
            dlogstd += config.entropy_coef  # dH/dlog_std = 1 per dim
            grads.append(dlogstd)
            # ascend: Adam minimizes, so negate
            neural.opt_step(net.params(), [-g for g in grads], policy_opt, config.learning_rate)

            v, vcache = value_net.forward_cached(ob)
            verr = v.reshape(-1) - returns[idx]
            vloss = 0.5 * float(np.mean(verr**2))
            if not np.isfinite(vloss):
                raise FallsafeError("non-finite value loss; aborting update")
            vgrads = value_net.backward(vcache, (verr / m)[:, None])
            neural.opt_step(value_net.params(), vgrads, value_opt, config.learning_rate)

            kl = float(np.mean(old_logp - new_logp))
            kl_total += kl
            epoch_kl += kl
            epoch_batches += 1
            clip_total += float(np.mean(np.abs(ratio - 1.0) > eps))
            vloss_total += vloss
            batches += 1
            # early stop: once the policy has moved past the trust region,
            # further minibatches on the same stale data destabilize it
            if abs(epoch_kl / epoch_batches) > config.kl_flag:
                stop = True
                break

    stats = {
        "kl": kl_total / batches,
        "clip_frac": clip_total / batches,
        "value_loss": vloss_total / batches,
    }
    if not math.isfinite(stats["kl"]):
        raise FallsafeError("non-finite KL in update")
    stats["kl_flagged"] = abs(stats["kl"]) > config.kl_flag
    return stats


TRAIN_LOG_HEADER = "update,steps,mean_return,mean_ep_len,kl,clip_frac,value_loss"


def train(
    make_env,
    policy: GaussianPolicy,
    value_net: neural.Mlp,
    config: PpoConfig,
    n_updates: int,
    seed: int,
    n_workers: int = 1,
    log_file=None,
    progress=None,
):
    """Run PPO for n_updates batches; returns list of per-update stat dicts.

    Workers are independent seeded environments collected in worker-index
    order, so the merged batch is deterministic for a given seed.
    """
    envs = [make_env(w) for w in range(n_workers)]
    per_worker = config.steps_per_batch // n_workers
    policy_opt = neural.AdamState.for_params(policy.net.params())
    value_opt = neural.AdamState.for_params(value_net.params())
    ss = np.random.SeedSequence(seed)
    history = []
    if log_file is not None:
        log_file.write(TRAIN_LOG_HEADER + "\n")
    for u in range(n_updates):
        child = ss.spawn(1)[0]
        worker_seeds = child.generate_state(n_workers + 1)
        buffers = [
            collect(envs[w], policy, value_net, per_worker, int(worker_seeds[w]))
            for w in range(n_workers)
        ]
        buf = merge_buffers(buffers)
        stats = ppo_update(policy, value_net, buf, config,
                           policy_opt, value_opt,
                           np.random.default_rng(int(worker_seeds[-1])))
        rets = buf.episode_returns()
        lens = buf.episode_lengths()
        row = {
            "update": u,
            "steps": (u + 1) * per_worker * n_workers,
            "mean_return": float(np.mean(rets)) if rets else math.nan,
            "mean_ep_len": float(np.mean(lens)) if lens else math.nan,
            **stats,
        }
        history.append(row)
        if log_file is not None:
            log_file.write(
                f"{row['update']},{row['steps']},{row['mean_return']:.10g},"
                f"{row['mean_ep_len']:.10g},{row['kl']:.10g},"
                f"{row['clip_frac']:.10g},{row['value_loss']:.10g}\n"
            )
            log_file.flush()
        if progress is not None:
            progress(row)
    return history
