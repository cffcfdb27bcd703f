"""Rollout-labeled fall prediction from device-observable state.

Dataset generation runs the trained walking policy deterministically (mean
actions) through pushed episodes and records the device sensor vector at
control steps near each push plus sparser background samples. A sample is
labeled 0 (fall) when a continuation rollout from that state, with no
further external pushes, terminates within the labeling horizon: the fall
must be predictable from the state itself, not from a push that has not
happened yet. For samples taken after the push window has closed, the
deterministic episode remainder *is* that continuation, so the label is read
off the episode outcome; samples taken before or during the push are
re-simulated from a snapshot with the push schedule cleared.

The classifier is an RBF-kernel SVM trained by sequential pairwise dual
optimization on standardized features.
"""

from __future__ import annotations

import enum
import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from ._core import njit
from .errors import ConfigError, DimensionMismatch, FallsafeError

DEVICE_OBS_DIM = 6  # [omega_dot, omega, q_hip_l, q_hip_r, qd_hip_l, qd_hip_r]


class SensorConfig(enum.Enum):
    """Which device sensors feed the predictor (and the recovery policy)."""

    IMU = "imu"
    ENCODER = "encoder"
    BOTH = "both"

    @property
    def feature_idx(self) -> tuple[int, ...]:
        return _FEATURE_IDX[self]

    @property
    def dim(self) -> int:
        return len(self.feature_idx)


_FEATURE_IDX = {
    SensorConfig.IMU: (0, 1),
    SensorConfig.ENCODER: (2, 3, 4, 5),
    SensorConfig.BOTH: (0, 1, 2, 3, 4, 5),
}

LABEL_FALL = 0
LABEL_SAFE = 1
HORIZON_CYCLES = 2.0
PUSH_WINDOW_S = 0.5  # dense sampling half-width around the push
BACKGROUND_RATE = 0.1


# --- dataset generation -----------------------------------------------------


def generate_dataset(make_env, policy, n_samples, seed, n_workers=1,
                     horizon_cycles=HORIZON_CYCLES, return_meta=False):
    """Labeled (X, y) with X (n, 6) device observations and y in {0, 1}.

    Workers are independent seeded episode streams merged in worker order,
    so output is deterministic for a given seed regardless of n_workers.
    With return_meta, also returns per-sample (episode seed, control step)
    so labels can be re-derived by explicit continuation rollouts.
    """
    if n_samples == 0:
        empty = (np.zeros((0, DEVICE_OBS_DIM)), np.zeros(0, dtype=int))
        return empty + ([],) if return_meta else empty
    per = [n_samples // n_workers] * n_workers
    per[-1] += n_samples - sum(per)
    ss = np.random.SeedSequence(seed)
    streams = ss.spawn(n_workers)
    xs, ys, metas = [], [], []
    for w in range(n_workers):
        X, y, meta = _worker_samples(make_env(w), policy, per[w], streams[w],
                                     horizon_cycles)
        xs.append(X)
        ys.append(y)
        metas.extend(meta)
    X = np.concatenate(xs)[:n_samples]
    y = np.concatenate(ys)[:n_samples]
    metas = metas[:n_samples]
    frac = y.mean()
    minority = min(frac, 1.0 - frac)
    if minority < 0.10:
        warnings.warn(
            f"class imbalance: minority class fraction {minority:.3f} < 0.10",
            stacklevel=2,
        )
    if return_meta:
        return X, y, metas
    return X, y


def _worker_samples(env, policy, n_needed, seed_seq, horizon_cycles):
    rng = np.random.default_rng(seed_seq)
    horizon = round(horizon_cycles * env.clip.cycle_s * env.cfg.control_hz)
    max_sample_step = round(env.cfg.episode_max_s * env.cfg.control_hz) - horizon
    xs, ys, meta = [], [], []
    while len(xs) < n_needed:
        ep_seed = int(rng.integers(2**63))
        obs = env.reset(ep_seed)
        onset = env.sim.pushes[0].onset if env.sim.pushes else None
        ep_x, ep_step = [], []
        step = 0
        fall_step = None
        while True:
            t = env.time
            if step <= max_sample_step:
                dense = onset is not None and abs(t - onset) <= PUSH_WINDOW_S
                if dense or rng.random() < BACKGROUND_RATE:
                    ep_x.append(env.device_obs())
                    ep_step.append(step)
            obs, _, term = env.step(policy.mean_action(obs))
            step += 1
            if term:
                if env.diverged or not env.timed_out:
                    fall_step = step
                break
            # stop once the dense window is past and every pending sample
            # has survived a full horizon (their labels are already 1)
            past_push = onset is None or t > onset + PUSH_WINDOW_S
            if ep_step and past_push and step - ep_step[-1] > horizon:
                break
        for x, s in zip(ep_x, ep_step):
            fell = fall_step is not None and fall_step - s <= horizon
            xs.append(x)
            ys.append(LABEL_FALL if fell else LABEL_SAFE)
            meta.append((ep_seed, s))
    return (np.array(xs[:n_needed]), np.array(ys[:n_needed], dtype=int),
            meta[:n_needed])


def dataset_header(d: int) -> str:
    return ",".join(f"x{i+1}" for i in range(d)) + ",label"


def save_dataset(X, y, path):
    X = np.asarray(X, float)
    with open(path, "w") as f:
        f.write(dataset_header(X.shape[1]) + "\n")
        for row, label in zip(X, y):
            f.write(",".join(f"{v:.10g}" for v in row) + f",{int(label)}\n")


def load_dataset(path):
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    return data[:, :-1], data[:, -1].astype(int)


# --- RBF-SVM via sequential pairwise optimization ----------------------------


@njit(cache=True)
def _kernel_row(X, i, gamma):
    n, d = X.shape
    out = np.empty(n)
    for j in range(n):
        s = 0.0
        for k in range(d):
            dd = X[i, k] - X[j, k]
            s += dd * dd
        out[j] = math.exp(-gamma * s)
    return out


@njit(cache=True)
def _take_step(X, y, alpha, E, b, C, gamma, i1, i2):
    """Attempt a pairwise update; returns (success, new_b)."""
    if i1 == i2:
        return False, b
    a1, a2 = alpha[i1], alpha[i2]
    y1, y2 = y[i1], y[i2]
    if y1 != y2:
        L, H = max(0.0, a2 - a1), min(C, C + a2 - a1)
    else:
        L, H = max(0.0, a1 + a2 - C), min(C, a1 + a2)
    if H - L < 1e-12:
        return False, b
    k1 = _kernel_row(X, i1, gamma)
    k2 = _kernel_row(X, i2, gamma)
    eta = 2.0 * k1[i2] - k1[i1] - k2[i2]
    if eta >= -1e-12:
        return False, b
    a2new = a2 - y2 * (E[i1] - E[i2]) / eta
    a2new = min(H, max(L, a2new))
    if abs(a2new - a2) < 1e-10 * (a2new + a2 + 1e-10):
        return False, b
    a1new = a1 + y1 * y2 * (a2 - a2new)
    d1 = y1 * (a1new - a1)
    d2 = y2 * (a2new - a2)
    b1 = b - E[i1] - d1 * k1[i1] - d2 * k1[i2]
    b2 = b - E[i2] - d1 * k1[i2] - d2 * k2[i2]
    if 0.0 < a1new < C:
        bnew = b1
    elif 0.0 < a2new < C:
        bnew = b2
    else:
        bnew = 0.5 * (b1 + b2)
    for j in range(E.shape[0]):
        E[j] += d1 * k1[j] + d2 * k2[j] + (bnew - b)
    alpha[i1] = a1new
    alpha[i2] = a2new
    return True, bnew


@njit(cache=True)
def _smo(X, y, C, gamma, tol, max_iter):
    """Pairwise dual ascent; returns (alpha, b, converged)."""
    n = X.shape[0]
    alpha = np.zeros(n)
    b = 0.0
    E = -y.astype(np.float64)  # f(x) - y with f == 0 initially
    examine_all = True
    for sweep in range(max_iter):
        changed = 0
        for i2 in range(n):
            if not examine_all and (alpha[i2] <= 0.0 or alpha[i2] >= C):
                continue
            r2 = E[i2] * y[i2]
            if not ((r2 < -tol and alpha[i2] < C) or (r2 > tol and alpha[i2] > 0.0)):
                continue
            # first choice: maximize |E1 - E2| over non-bound points
            best, i1 = -1.0, -1
            for j in range(n):
                if 0.0 < alpha[j] < C:
                    gap = abs(E[j] - E[i2])
                    if gap > best:
                        best, i1 = gap, j
            ok = False
            if i1 >= 0:
                ok, b = _take_step(X, y, alpha, E, b, C, gamma, i1, i2)
            if not ok:  # fall back to non-bound points, then everything
                start = (i2 + 1 + sweep) % n
                for off in range(n):
                    j = (start + off) % n
                    if 0.0 < alpha[j] < C:
                        ok, b = _take_step(X, y, alpha, E, b, C, gamma, j, i2)
                        if ok:
                            break
            if not ok:
                start = (i2 + 1 + sweep) % n
                for off in range(n):
                    j = (start + off) % n
                    ok, b = _take_step(X, y, alpha, E, b, C, gamma, j, i2)
                    if ok:
                        break
            if ok:
                changed += 1
        if examine_all:
            if changed == 0:
                return alpha, b, True
            examine_all = False
        elif changed == 0:
            examine_all = True
    return alpha, b, False


@njit(cache=True)
def _decision(sv, coef, b, gamma, X):
    n, d = X.shape
    m = sv.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = b
        for j in range(m):
            acc = 0.0
            for k in range(d):
                dd = sv[j, k] - X[i, k]
                acc += dd * dd
            s += coef[j] * math.exp(-gamma * acc)
        out[i] = s
    return out


@dataclass
class SvmModel:
    """Trained RBF-SVM: decision f(x) = sum coef_i K(sv_i, x) + b."""

    sv: np.ndarray  # (n_sv, d) standardized support vectors
    coef: np.ndarray  # (n_sv,) alpha_i * y_i
    b: float
    C: float
    sigma: float
    mean: np.ndarray  # (d,) feature standardization
    std: np.ndarray  # (d,)
    feature_idx: tuple[int, ...] = tuple(range(DEVICE_OBS_DIM))
    alpha: np.ndarray | None = None  # full dual vector; kept for diagnostics,
    # not serialized

    @property
    def gamma(self) -> float:
        return 1.0 / (2.0 * self.sigma**2)

    def standardize(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] == DEVICE_OBS_DIM and len(self.feature_idx) != DEVICE_OBS_DIM:
            X = X[:, list(self.feature_idx)]
        if X.shape[1] != len(self.mean):
            raise DimensionMismatch(
                f"expected {len(self.mean)} features, got {X.shape[1]}"
            )
        return (X - self.mean) / self.std


def train_svm(X, y, C, sigma, tol=1e-3, max_iter=200,
              feature_idx=None) -> SvmModel:
    """Fit on raw features and {0,1} labels; standardization is internal."""
    X = np.asarray(X, float)
    y = np.asarray(y)
    if feature_idx is not None:
        X = X[:, list(feature_idx)]
    else:
        feature_idx = tuple(range(X.shape[1]))
    classes = np.unique(y)
    if len(classes) < 2:
        raise FallsafeError("training data contains a single class")
    if C <= 0 or sigma <= 0:
        raise ConfigError("C and sigma must be positive")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Xs = (X - mean) / std
    ypm = np.where(y == LABEL_SAFE, 1.0, -1.0)
    gamma = 1.0 / (2.0 * sigma**2)
    alpha, b, _ = _smo(np.ascontiguousarray(Xs), ypm, float(C), gamma, tol, max_iter)
    keep = alpha > 1e-10
    return SvmModel(
        sv=Xs[keep].copy(),
        coef=(alpha * ypm)[keep].copy(),
        b=float(b),
        C=float(C),
        sigma=float(sigma),
        mean=mean,
        std=std,
        feature_idx=tuple(int(i) for i in feature_idx),
        alpha=alpha,
    )


def decision_function(model: SvmModel, X) -> np.ndarray:
    Xs = np.ascontiguousarray(model.standardize(X))
    return _decision(model.sv, model.coef, model.b, model.gamma, Xs)


def predict(model: SvmModel, x):
    """{label, margin} for a single device observation; f >= 0 means safe."""
    f = float(decision_function(model, np.atleast_2d(x))[0])
    return {"label": LABEL_SAFE if f >= 0 else LABEL_FALL, "margin": f}


def predict_labels(model: SvmModel, X) -> np.ndarray:
    return np.where(decision_function(model, X) >= 0, LABEL_SAFE, LABEL_FALL)


def kkt_violation(model: SvmModel, X, y) -> float:
    """Max KKT residual of the dual solution on its training set.

    Requires the in-memory model (the full alpha vector is not serialized).
    """
    if model.alpha is None:
        raise FallsafeError("KKT check needs a model with its training alphas")
    X = np.asarray(X, float)
    if model.feature_idx != tuple(range(X.shape[1])):
        X = X[:, list(model.feature_idx)]
    f = decision_function(model, X)
    ypm = np.where(np.asarray(y) == LABEL_SAFE, 1.0, -1.0)
    margins = ypm * f
    worst = 0.0
    for a, m in zip(model.alpha, margins):
        if a < 1e-10:
            worst = max(worst, 1.0 - m)  # want y f >= 1
        elif a > model.C - 1e-10:
            worst = max(worst, m - 1.0)  # want y f <= 1
        else:
            worst = max(worst, abs(m - 1.0))
    return worst


def stratified_subsample(X, y, n, seed):
    """At most n rows, preserving the class ratio; deterministic per seed."""
    X = np.asarray(X)
    y = np.asarray(y)
    if n is None or len(y) <= n:
        return X, y
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        take = max(1, round(n * len(idx) / len(y)))
        keep.append(rng.choice(idx, min(take, len(idx)), replace=False))
    keep = np.sort(np.concatenate(keep))
    return X[keep], y[keep]


def stratified_folds(y, k, seed):
    """Deterministic stratified fold assignment, one int per sample."""
    y = np.asarray(y)
    if len(y) < k:
        raise FallsafeError(f"need at least {k} samples for {k} folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=int)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        folds[idx] = np.arange(len(idx)) % k
    return folds


def kfold_accuracy(X, y, k=6, C_grid=(0.1, 1.0, 10.0, 100.0),
                   sigma_grid=(0.5, 1.0, 2.0, 4.0), seed=0,
                   feature_idx=None, subsample=None) -> dict:
    """Grid-searched k-fold accuracy; {C, sigma, accuracy, fold_accuracy}.

    `subsample` caps the training rows per fold during the grid search (the
    winning cell is re-validated on the full folds).
    """
    if k < 2:
        raise ConfigError("k must be at least 2")
    X = np.asarray(X, float)
    y = np.asarray(y)
    folds = stratified_folds(y, k, seed)
    rng = np.random.default_rng(seed + 1)

    def run(C, sigma, cap):
        accs = []
        recalls = []
        for f in range(k):
            tr = folds != f
            te = ~tr
            Xi, yi = X[tr], y[tr]
            if cap is not None and len(yi) > cap:
                pick = rng.choice(len(yi), cap, replace=False)
                Xi, yi = Xi[pick], yi[pick]
            model = train_svm(Xi, yi, C, sigma, feature_idx=feature_idx)
            pred = predict_labels(model, X[te])
            accs.append(float(np.mean(pred == y[te])))
            falls = y[te] == LABEL_FALL
            if falls.any():
                recalls.append(float(np.mean(pred[falls] == LABEL_FALL)))
        return float(np.mean(accs)), accs, float(np.mean(recalls)) if recalls else math.nan

    best = None
    for C in C_grid:
        for sigma in sigma_grid:
            acc, _, _ = run(C, sigma, subsample)
            if best is None or acc > best[0]:
                best = (acc, C, sigma)
    _, C, sigma = best
    acc, fold_acc, fall_recall = run(C, sigma, subsample)
    return {
        "C": C,
        "sigma": sigma,
        "accuracy": acc,
        "fold_accuracy": fold_acc,
        "fall_recall": fall_recall,
    }


# --- model checkpoint ---------------------------------------------------------
# Little-endian: magic, u32 version, u32 d, u32 feature indices, u32 n_sv,
# f8 C, sigma, b; then f8 payload mean, std, coef, sv rows.

_MAGIC = b"FSSVM"
_FORMAT_VERSION = 1


def save_model(model: SvmModel, path):
    d = len(model.mean)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _FORMAT_VERSION, d, len(model.sv)))
        f.write(struct.pack(f"<I{d}I", d, *model.feature_idx))
        f.write(struct.pack("<ddd", model.C, model.sigma, model.b))
        for arr in (model.mean, model.std, model.coef, model.sv):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> SvmModel:
    with open(path, "rb") as f:
        if f.read(5) != _MAGIC:
            raise ConfigError(f"{path} is not a predictor checkpoint")
        version, d, n_sv = struct.unpack("<III", f.read(12))
        if version != _FORMAT_VERSION:
            raise ConfigError(f"unsupported predictor checkpoint version {version}")
        (nf,) = struct.unpack("<I", f.read(4))
        feature_idx = struct.unpack(f"<{nf}I", f.read(4 * nf))
        C, sigma, b = struct.unpack("<ddd", f.read(24))
        mean = np.frombuffer(f.read(8 * d), dtype="<f8").copy()
        std = np.frombuffer(f.read(8 * d), dtype="<f8").copy()
        coef = np.frombuffer(f.read(8 * n_sv), dtype="<f8").copy()
        sv = np.frombuffer(f.read(8 * n_sv * d), dtype="<f8").reshape(n_sv, d).copy()
        return SvmModel(sv, coef, b, C, sigma, mean, std, tuple(feature_idx))
