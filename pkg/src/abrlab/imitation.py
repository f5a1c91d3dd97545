"""Behavior cloning with dataset aggregation against a clairvoyant planner.

Each round rolls the current policy (sampling its own actions, so the state
distribution is the learner's, not the expert's), labels every visited state
with the future-seeing planner, appends to a never-discarded dataset, and
fits by cross-entropy for a few epochs. Later rounds therefore cover the
mistakes earlier policies made.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .net import (Adam, FeatureConfig, NetConfig, PolicyNet, backward, feature_dim,
                  featurize, forward, greedy_action, init_policy_net, sample_action)
from .policies import beam_expert_decide
from .sim import QoEWeights, SessionEnv, VideoSpec
from .traces import ThroughputTrace

PROB_FLOOR = 1e-12

# Labeler: (state, trace) -> rung index. Injectable so degenerate teachers
# can stand in for the planner.
ExpertFn = Callable[[object, ThroughputTrace], int]


@dataclass(frozen=True)
class BcConfig:
    dagger_iterations: int = 15
    rollout_steps: int = 2000
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    expert_horizon: int = 5


@dataclass
class ImitationDataset:
    """Append-only (features, expert rung) pairs aggregated across rounds."""

    feature_blocks: list[np.ndarray] = field(default_factory=list)
    label_blocks: list[np.ndarray] = field(default_factory=list)

    def append(self, features: np.ndarray, labels: np.ndarray) -> None:
        self.feature_blocks.append(np.asarray(features, dtype=np.float64))
        self.label_blocks.append(np.asarray(labels, dtype=int))

    @property
    def size(self) -> int:
        return int(sum(b.shape[0] for b in self.feature_blocks))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.feature_blocks:
            raise ValueError("empty imitation dataset")
        return np.vstack(self.feature_blocks), np.concatenate(self.label_blocks)


def imitation_loss(net: PolicyNet, features: np.ndarray, labels: np.ndarray,
                   clamp_counter: dict | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against expert rungs, with its parameter gradient.

    Probabilities below 1e-12 are clamped inside the log (and counted when a
    counter dict is passed); clamped rows contribute no gradient, consistent
    with the clamped loss.
    """
    labels = np.asarray(labels, dtype=int)
    probs, _, cache = forward(net, np.atleast_2d(features), with_cache=True)
    n = labels.size
    picked = probs[np.arange(n), labels]
    clamped = picked < PROB_FLOOR
    if clamp_counter is not None and np.any(clamped):
        clamp_counter["clamped"] = clamp_counter.get("clamped", 0) + int(clamped.sum())
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits[clamped] = 0.0
    dlogits /= n
    grads = backward(net, None, dlogits, np.zeros(n), cache=cache)
    return loss, grads


def expert_agreement(net: PolicyNet, features: np.ndarray, labels: np.ndarray) -> float:
    probs, _ = forward(net, np.atleast_2d(features))
    picks = np.argmax(probs, axis=1)
    return float(np.mean(picks == np.asarray(labels)))


def _default_expert(spec: VideoSpec, w: QoEWeights, horizon: int) -> ExpertFn:
    def expert(state, trace):
        return beam_expert_decide(state, trace, spec, w, horizon)
    return expert


def _collect_labeled_states(
    net: PolicyNet, traces: list[ThroughputTrace], spec: VideoSpec, w: QoEWeights,
    cfg: BcConfig, fc: FeatureConfig, rng: np.random.Generator, history_len: int,
    expert_fn: ExpertFn,
) -> tuple[np.ndarray, np.ndarray]:
    # Exactly cfg.rollout_steps learner-visited states, expert-labeled; the
    # last episode is abandoned mid-flight once the quota is reached.
    feats = np.empty((cfg.rollout_steps, feature_dim(fc, spec.ladder.num_rungs)))
    labels = np.empty(cfg.rollout_steps, dtype=int)
    collected = 0
    while collected < cfg.rollout_steps:
        trace = traces[int(rng.integers(len(traces)))]
        env = SessionEnv(trace, spec, w, history_len=history_len)
        state = env.reset()
        while not env.done and collected < cfg.rollout_steps:
            feats[collected] = featurize(state, spec, fc)
            labels[collected] = expert_fn(state, trace)
            collected += 1
            probs, _ = forward(net, feats[collected - 1])
            state, _, done = env.step(sample_action(probs, rng))
            if done:
                break
    return feats, labels


def dagger_round(
    net: PolicyNet, dataset: ImitationDataset, traces: list[ThroughputTrace],
    spec: VideoSpec, w: QoEWeights, cfg: BcConfig, fc: FeatureConfig,
    rng: np.random.Generator, opt: Adam, history_len: int = 8,
    expert_fn: ExpertFn | None = None,
) -> dict:
    """One aggregation round: collect, label, append, fit. Returns round stats."""
    if expert_fn is None:
        expert_fn = _default_expert(spec, w, cfg.expert_horizon)
    feats, labels = _collect_labeled_states(net, traces, spec, w, cfg, fc, rng, history_len, expert_fn)
    dataset.append(feats, labels)
    all_feats, all_labels = dataset.arrays()
    n = all_labels.size
    clamp_counter: dict = {}
    epoch_losses = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            _, grads = imitation_loss(net, all_feats[idx], all_labels[idx], clamp_counter)
            opt.step(net.params, grads)
        epoch_losses.append(imitation_loss(net, all_feats, all_labels)[0])
    return {
        "dataset_size": n,
        "loss": epoch_losses[-1] if epoch_losses else imitation_loss(net, all_feats, all_labels)[0],
        "epoch_losses": epoch_losses,
        "agreement": expert_agreement(net, all_feats, all_labels),
        "clamped_logs": clamp_counter.get("clamped", 0),
    }


def pretrain(
    traces: list[ThroughputTrace], spec: VideoSpec, w: QoEWeights,
    cfg: BcConfig = BcConfig(), fc: FeatureConfig = FeatureConfig(),
    seed: int = 0, net: PolicyNet | None = None, history_len: int = 8,
    expert_fn: ExpertFn | None = None,
) -> tuple[PolicyNet, list[dict]]:
    """Full aggregation schedule. Deterministic per seed; zero rounds returns
    the freshly initialized net untouched with an empty report."""
    if not traces:
        raise ValueError("no training traces")
    if net is None:
        net = init_policy_net(NetConfig(feature_dim(fc, spec.ladder.num_rungs), spec.ladder.num_rungs), seed)
    rng = np.random.default_rng([seed, 101])
    opt = Adam(net.size, lr=cfg.learning_rate, max_grad_norm=None)
    dataset = ImitationDataset()
    report: list[dict] = []
    for rnd in range(cfg.dagger_iterations):
        stats = dagger_round(net, dataset, traces, spec, w, cfg, fc, rng, opt, history_len, expert_fn)
        stats["round"] = rnd + 1
        report.append(stats)
    return net, report
