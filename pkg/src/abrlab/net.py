"""Numpy policy/value network with hand-written gradients.

Architecture: two tanh hidden layers shared by a softmax action head and a
scalar value head. Parameters live in one flat float64 vector; layers are
views into it, which keeps the optimizer and checkpoint format trivial.
No autodiff anywhere; `backward` is the analytic chain rule and is verified
against central finite differences in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim import PlayerState, VideoSpec, nominal_top_rung_bytes

CHECKPOINT_FORMAT = "abrlab-policy"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    history_len: int = 8
    throughput_scale_bps: float = 200e6  # generous link-rate reference


def feature_dim(fc: FeatureConfig, num_rungs: int) -> int:
    return fc.history_len + num_rungs + 3


def featurize(state: PlayerState, spec: VideoSpec, fc: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Fixed-size observation vector, everything scaled to roughly [0, 1].

    Layout: [buffer fill, previous rung rate / top rate,
             last `history_len` effective throughputs (oldest first) / scale,
             remaining-chunk fraction, per-rung next chunk sizes / top size].
    """
    hist = np.asarray(state.throughput_history, dtype=np.float64)
    k = fc.history_len
    if hist.size >= k:
        hist = hist[-k:]
    else:
        hist = np.concatenate([np.zeros(k - hist.size), hist])
    rates = np.asarray(state.ladder_kbps, dtype=np.float64)
    out = np.empty(feature_dim(fc, rates.size))
    out[0] = state.buffer_s / spec.buffer_max_s
    out[1] = rates[state.prev_rung] / rates[-1]
    out[2 : 2 + k] = hist / fc.throughput_scale_bps
    out[2 + k] = state.remaining_chunks / spec.num_chunks
    out[3 + k :] = state.next_chunk_sizes / nominal_top_rung_bytes(spec)
    return out


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    num_actions: int
    hidden: tuple[int, int] = (64, 64)


def _layout(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, (h1, h2), a = cfg.input_dim, cfg.hidden, cfg.num_actions
    return [
        ("w1", (d, h1)), ("b1", (h1,)),
        ("w2", (h1, h2)), ("b2", (h2,)),
        ("wp", (h2, a)), ("bp", (a,)),
        ("wv", (h2,)), ("bv", (1,)),
    ]


class PolicyNet:
    """Flat-parameter MLP; `self.params` is the single source of truth."""

    def __init__(self, cfg: NetConfig, params: np.ndarray | None = None):
        self.cfg = cfg
        self.layout = _layout(cfg)
        self.size = int(sum(np.prod(s) for _, s in self.layout))
        if params is None:
            params = np.zeros(self.size)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {params.shape}")
        self.params = params
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self._views[name] = self.params[offset : offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.cfg, self.params.copy())


def init_policy_net(cfg: NetConfig, seed: int) -> PolicyNet:
    """Seeded init: 1/sqrt(fan-in) hidden layers, a near-uniform action head."""
    rng = np.random.default_rng(seed)
    net = PolicyNet(cfg)
    d, (h1, h2) = cfg.input_dim, cfg.hidden
    net["w1"][:] = rng.normal(0.0, 1.0 / np.sqrt(d), net["w1"].shape)
    net["w2"][:] = rng.normal(0.0, 1.0 / np.sqrt(h1), net["w2"].shape)
    net["wp"][:] = rng.normal(0.0, 0.01 / np.sqrt(h2), net["wp"].shape)
    net["wv"][:] = rng.normal(0.0, 1.0 / np.sqrt(h2), net["wv"].shape)
    return net


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(net: PolicyNet, x: np.ndarray, with_cache: bool = False):
    """(action_probs, value) for one feature vector or a batch."""
    single = x.ndim == 1
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h1 = np.tanh(xb @ net["w1"] + net["b1"])
    h2 = np.tanh(h1 @ net["w2"] + net["b2"])
    logits = h2 @ net["wp"] + net["bp"]
    values = h2 @ net["wv"] + net["bv"][0]
    probs = softmax(logits)
    if single:
        probs, values = probs[0], float(values[0])
    if with_cache:
        return probs, values, (xb, h1, h2, logits)
    return probs, values


def backward(net: PolicyNet, x: np.ndarray, dlogits: np.ndarray, dvalue: np.ndarray, cache=None) -> np.ndarray:
    """Flat parameter gradient of sum_i (dlogits_i . logits_i + dvalue_i * value_i).

    Callers express any scalar loss through its per-sample gradients at the
    two heads; the returned vector is the sum over the batch (divide upstream
    by n for a mean).
    """
    if cache is None:
        _, _, cache = forward(net, np.atleast_2d(x), with_cache=True)
    xb, h1, h2, _ = cache
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    dvalue = np.asarray(dvalue, dtype=np.float64).reshape(-1)

    grad = np.zeros_like(net.params)
    g = PolicyNet(net.cfg, grad)  # same layout, zero-filled
    g["wp"][:] = h2.T @ dlogits
    g["bp"][:] = dlogits.sum(axis=0)
    g["wv"][:] = h2.T @ dvalue
    g["bv"][:] = dvalue.sum()
    dh2 = dlogits @ net["wp"].T + dvalue[:, None] * net["wv"][None, :]
    dz2 = dh2 * (1.0 - h2 * h2)
    g["w2"][:] = h1.T @ dz2
    g["b2"][:] = dz2.sum(axis=0)
    dh1 = dz2 @ net["w2"].T
    dz1 = dh1 * (1.0 - h1 * h1)
    g["w1"][:] = xb.T @ dz1
    g["b1"][:] = dz1.sum(axis=0)
    return grad


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; deterministic given the generator state."""
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(probs), u, side="right"), probs.size - 1))


def greedy_action(probs: np.ndarray) -> int:
    """Most probable rung; ties resolve to the lower index."""
    return int(np.argmax(probs))


class Adam:
    """Adam with bias correction and optional global-gradient-norm clipping."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, max_grad_norm: float | None = 0.5):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def clip(self, grad: np.ndarray) -> np.ndarray:
        if self.max_grad_norm is None:
            return grad
        norm = float(np.linalg.norm(grad))
        if norm > self.max_grad_norm and norm > 0.0:
            return grad * (self.max_grad_norm / norm)
        return grad

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        g = self.clip(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_checkpoint(path: str | Path, net: PolicyNet, metadata: dict | None = None) -> None:
    """One JSON manifest line, then the raw little-endian float64 parameters.

    Deliberately not an archive format: identical inputs produce identical
    bytes, so checkpoint hashes are reproducible.
    """
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "net": {"input_dim": net.cfg.input_dim, "num_actions": net.cfg.num_actions,
                "hidden": list(net.cfg.hidden)},
        "layout": [[name, list(shape)] for name, shape in net.layout],
        "meta": metadata or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyNet, dict]:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a policy checkpoint (bad manifest line)") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    cfg = NetConfig(
        input_dim=int(manifest["net"]["input_dim"]),
        num_actions=int(manifest["net"]["num_actions"]),
        hidden=tuple(int(h) for h in manifest["net"]["hidden"]),
    )
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    net = PolicyNet(cfg, params)
    return net, manifest.get("meta", {})


def make_greedy_policy(net: PolicyNet, spec: VideoSpec, fc: FeatureConfig = FeatureConfig()):
    def decide(state: PlayerState) -> int:
        probs, _ = forward(net, featurize(state, spec, fc))
        return greedy_action(probs)
    return decide


def make_sampling_policy(net: PolicyNet, spec: VideoSpec, rng: np.random.Generator,
                         fc: FeatureConfig = FeatureConfig()):
    def decide(state: PlayerState) -> int:
        probs, _ = forward(net, featurize(state, spec, fc))
        return sample_action(probs, rng)
    return decide
