"""Minimal feed-forward networks with exact reverse-mode gradients.

Networks are lists of affine layers with tanh hidden activations. Two head
types: "linear" (value functions) and "gaussian" (policies: linear mean plus
a state-independent learnable log-std vector). Parameters live in plain
numpy arrays; gradients share their shapes. The optimizer is Adam with bias
correction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch

LOG_STD_INIT = np.log(0.3)
_MAGIC = b"FSNET"
_FORMAT_VERSION = 1
_ACT_TAGS = {"tanh": 0}
_HEAD_TAGS = {"linear": 0, "gaussian": 1}


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    qm, r = np.linalg.qr(a)
    qm = qm * np.sign(np.diag(r))
    if rows < cols:
        qm = qm.T
    # C-contiguous so a reloaded checkpoint reproduces forward() bit-exactly
    return np.ascontiguousarray(gain * qm[:rows, :cols])


@dataclass
class Mlp:
    """MLP with tanh hidden layers; parameters are weights + biases (+ log_std)."""

    sizes: tuple[int, ...]
    head: str = "linear"  # "linear" | "gaussian"
    weights: list[np.ndarray] = field(default_factory=list)  # (out, in) each
    biases: list[np.ndarray] = field(default_factory=list)
    log_std: np.ndarray | None = None

    @classmethod
    def create(cls, sizes, head="linear", seed=0, head_gain=None):
        if head not in _HEAD_TAGS:
            raise ConfigError(f"unknown head {head}")
        if len(sizes) < 2:
            raise ConfigError("need at least input and output sizes")
        rng = np.random.default_rng(seed)
        if head_gain is None:
            head_gain = 0.01 if head == "gaussian" else 1.0
        ws, bs = [], []
        for li in range(len(sizes) - 1):
            gain = head_gain if li == len(sizes) - 2 else 1.0
            ws.append(_orthogonal(rng, sizes[li + 1], sizes[li], gain))
            bs.append(np.zeros(sizes[li + 1]))
        log_std = np.full(sizes[-1], LOG_STD_INIT) if head == "gaussian" else None
        return cls(tuple(int(s) for s in sizes), head, ws, bs, log_std)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        p = []
        for w, b in zip(self.weights, self.biases):
            p.extend([w, b])
        if self.log_std is not None:
            p.append(self.log_std)
        return p

    def set_params(self, params: list[np.ndarray]):
        cur = self.params()
        if len(params) != len(cur):
            raise DimensionMismatch("parameter list length mismatch")
        for dst, src in zip(cur, params):
            if dst.shape != src.shape:
                raise DimensionMismatch("parameter shape mismatch")
            dst[...] = src

    def copy(self) -> "Mlp":
        return Mlp(
            self.sizes,
            self.head,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            None if self.log_std is None else self.log_std.copy(),
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Network output (the mean, for a gaussian head). x: (d,) or (N, d)."""
        y, _ = self.forward_cached(np.atleast_2d(np.asarray(x, dtype=float)))
        return y[0] if np.asarray(x).ndim == 1 else y

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatch(
                f"input dim {x.shape} does not match network input {self.in_dim}"
            )
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if li != last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, cache: list[np.ndarray], upstream: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(upstream * output) w.r.t. weights and biases.

        Does not include log_std (handled analytically by the caller); the
        returned list matches `params()` minus the log_std entry.
        """
        upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
        if upstream.shape != cache[-1].shape:
            raise DimensionMismatch("upstream gradient shape mismatch")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        delta = upstream
        for li in range(len(self.weights) - 1, -1, -1):
            inp = cache[li]
            if li != len(self.weights) - 1:
                delta = delta * (1.0 - cache[li + 1] ** 2)
            grads[2 * li] = delta.T @ inp
            grads[2 * li + 1] = delta.sum(axis=0)
            if li > 0:
                delta = delta @ self.weights[li]
        return grads

    def gradient_for_input(self, x: np.ndarray, upstream: np.ndarray) -> list[np.ndarray]:
        """Convenience: forward then backward in one call."""
        _, cache = self.forward_cached(np.atleast_2d(x))
        return self.backward(cache, np.atleast_2d(upstream))


@dataclass
class AdamState:
    """First/second moment accumulators; step counter drives bias correction."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    skipped: int = 0  # updates dropped because of non-finite gradients

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def opt_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Adam update in place; returns False (and skips) on non-finite gradients."""
    if len(params) != len(grads):
        raise DimensionMismatch("params/grads length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# --- checkpoint format ------------------------------------------------------
# Little-endian. Header: magic, u32 version, u32 n_sizes, u32 sizes...,
# u32 activation tag, u32 head tag; then float64 row-major payload: W0, b0,
# W1, b1, ..., log_std (gaussian head only).


def save_checkpoint(net: Mlp, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _FORMAT_VERSION, len(net.sizes)))
        f.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
        f.write(struct.pack("<II", _ACT_TAGS["tanh"], _HEAD_TAGS[net.head]))
        for w, b in zip(net.weights, net.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if net.log_std is not None:
            f.write(np.ascontiguousarray(net.log_std, dtype="<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    with open(path, "rb") as f:
        if f.read(5) != _MAGIC:
            raise ConfigError(f"{path} is not a network checkpoint")
        version, n = struct.unpack("<II", f.read(8))
        if version != _FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        sizes = struct.unpack(f"<{n}I", f.read(4 * n))
        act, head_tag = struct.unpack("<II", f.read(8))
        if act != _ACT_TAGS["tanh"]:
            raise ConfigError("unsupported activation tag")
        head = {v: k for k, v in _HEAD_TAGS.items()}[head_tag]
        ws, bs = [], []
        for li in range(n - 1):
            w = np.frombuffer(f.read(8 * sizes[li + 1] * sizes[li]), dtype="<f8")
            ws.append(w.reshape(sizes[li + 1], sizes[li]).copy())
            bs.append(np.frombuffer(f.read(8 * sizes[li + 1]), dtype="<f8").copy())
        log_std = None
        if head == "gaussian":
            log_std = np.frombuffer(f.read(8 * sizes[-1]), dtype="<f8").copy()
        return Mlp(tuple(sizes), head, ws, bs, log_std)
