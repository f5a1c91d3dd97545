"""Clipped policy-gradient fine-tuning with a tail-risk penalty.

Rewards are the per-chunk QoE. At each episode's terminal step a hinge
penalty proportional to how far the episode's total rebuffering exceeds the
rolling tail quantile is subtracted, which pushes optimization pressure onto
the worst episodes instead of the average one. Everything below (advantage
estimation, the clipped surrogate, reward normalization) is the standard
recipe, hand-rolled on numpy.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .net import Adam, FeatureConfig, PolicyNet, backward, featurize, forward, sample_action
from .sim import QoEWeights, SessionEnv, VideoSpec
from .traces import ThroughputTrace


@dataclass(frozen=True)
class PpoConfig:
    total_steps: int = 50_000
    n_steps: int = 512          # per environment stream, per update
    n_envs: int = 4
    minibatch_size: int = 64
    epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    reward_clip: float = 10.0


@dataclass(frozen=True)
class CvarConfig:
    alpha: float = 0.90
    penalty_weight: float = 20.0  # 0 disables shaping entirely
    budget_s: float = 0.0
    window: int = 512             # episodes of rebuffer history for the quantile


def empirical_cvar(values, alpha: float) -> tuple[float, float]:
    """(tail threshold, expected shortfall) of a sample.

    The threshold is the ascending order statistic at rank ceil(alpha * n);
    the second value adds the mean excess above it, rescaled by 1 - alpha.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empirical_cvar of an empty sample")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    xi = float(v[max(int(math.ceil(alpha * v.size)), 1) - 1])
    cvar = xi + float(np.sum(np.maximum(v - xi, 0.0))) / ((1.0 - alpha) * v.size)
    return xi, cvar


@dataclass(frozen=True)
class EpisodeInfo:
    terminal_index: int   # position of the episode's last step in the batch
    rebuffer_s: float
    qoe: float
    length: int
    truncated: bool


@dataclass
class RolloutBatch:
    features: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    env_slices: list[tuple[int, int]]
    bootstrap_values: np.ndarray          # one per env stream; 0 when it ended on done
    episodes: list[EpisodeInfo] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.rewards.size)


def shape_terminal_rewards(batch: RolloutBatch, cfg: CvarConfig, rolling_rebuffers) -> RolloutBatch:
    """Subtract the tail-excess hinge from each completed episode's last reward.

    The quantile threshold comes from the rolling window of recent episode
    rebuffer totals (the caller keeps it capped at cfg.window). A zero
    penalty weight returns the batch unchanged, bit for bit.
    """
    if cfg.penalty_weight == 0.0 or not batch.episodes:
        return batch
    window = np.asarray(rolling_rebuffers, dtype=np.float64)
    if window.size == 0:
        raise ValueError("rolling rebuffer window is empty; warm it up with the current batch")
    xi, _ = empirical_cvar(window, cfg.alpha)
    rewards = batch.rewards.copy()
    scale = cfg.penalty_weight / (1.0 - cfg.alpha)
    for ep in batch.episodes:
        excess = ep.rebuffer_s - cfg.budget_s - xi
        if excess > 0.0:
            rewards[ep.terminal_index] -= scale * excess
    return replace(batch, rewards=rewards)


def gae_advantages(batch: RolloutBatch, gamma: float, lam: float, normalize: bool = True) -> RolloutBatch:
    """Generalized advantage estimates plus value targets (advantage + value).

    Runs backwards within each env stream, bootstrapping unfinished tails
    from the stored next-state value. Advantages are normalized to zero mean
    and unit variance across the whole update unless disabled.
    """
    adv = np.zeros_like(batch.rewards)
    for e, (lo, hi) in enumerate(batch.env_slices):
        last_adv = 0.0
        next_value = float(batch.bootstrap_values[e])
        for t in range(hi - 1, lo - 1, -1):
            nonterminal = 0.0 if batch.dones[t] else 1.0
            delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t]
            last_adv = delta + gamma * lam * nonterminal * last_adv
            adv[t] = last_adv
            next_value = float(batch.values[t])
    returns = adv + batch.values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    batch.advantages = adv
    batch.returns = returns
    return batch


def clipped_surrogate(ratio: np.ndarray, advantages: np.ndarray, clip_range: float) -> np.ndarray:
    """Per-sample pessimistic surrogate min(r*A, clip(r)*A)."""
    return np.minimum(ratio * advantages, np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantages)


def ppo_update(net: PolicyNet, batch: RolloutBatch, cfg: PpoConfig, opt: Adam,
               rng: np.random.Generator) -> dict:
    """Several epochs of shuffled minibatch ascent on the clipped objective.

    Maximizes surrogate - value_coef * value MSE (no entropy term). Gradients
    flow only through samples where the unclipped branch is active, matching
    the subgradient of the min.
    """
    if batch.advantages is None or batch.returns is None:
        raise ValueError("run gae_advantages before ppo_update")
    n = batch.size
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0, "approx_kl": 0.0}
    n_minibatches = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = perm[lo : lo + cfg.minibatch_size]
            m = idx.size
            feats = batch.features[idx]
            acts = batch.actions[idx]
            adv = batch.advantages[idx]
            rets = batch.returns[idx]
            old_logp = batch.logprobs[idx]

            probs, values, cache = forward(net, feats, with_cache=True)
            new_logp = np.log(probs[np.arange(m), acts])
            ratio = np.exp(new_logp - old_logp)
            clipped = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)
            unclipped_active = (ratio * adv) <= (clipped * adv)

            coeff = np.where(unclipped_active, ratio * adv, 0.0) / m
            dlogits = -coeff[:, None] * (np.eye(probs.shape[1])[acts] - probs)
            dvalue = cfg.value_coef * 2.0 * (values - rets) / m
            grads = backward(net, None, dlogits, dvalue, cache=cache)
            opt.step(net.params, grads)

            stats["policy_loss"] += float(-np.mean(clipped_surrogate(ratio, adv, cfg.clip_range)))
            stats["value_loss"] += float(np.mean((values - rets) ** 2))
            stats["clip_fraction"] += float(np.mean(np.abs(ratio - 1.0) > cfg.clip_range))
            stats["approx_kl"] += float(np.mean(old_logp - new_logp))
            n_minibatches += 1
    for k in stats:
        stats[k] /= max(n_minibatches, 1)
    return stats


class _RunningReturnStd:
    """Running variance of the discounted return, SB3-style reward scaler."""

    def __init__(self, gamma: float, n_envs: int, clip: float):
        self.gamma = gamma
        self.clip = clip
        self.ret = np.zeros(n_envs)
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def normalize(self, reward: float, env: int, done: bool) -> float:
        self.ret[env] = self.gamma * self.ret[env] + reward
        batch_mean, batch_var = self.ret[env], 0.0
        delta = batch_mean - self.mean
        tot = self.count + 1.0
        self.mean += delta / tot
        self.var = (self.var * self.count + batch_var + delta * delta * self.count / tot) / tot
        self.count = tot
        if done:
            self.ret[env] = 0.0
        return float(np.clip(reward / np.sqrt(self.var + 1e-8), -self.clip, self.clip))


class RolloutCollector:
    """Round-robin driver for several persistent environment streams."""

    def __init__(self, net: PolicyNet, traces: list[ThroughputTrace], spec: VideoSpec,
                 w: QoEWeights, ppo: PpoConfig, fc: FeatureConfig,
                 rng: np.random.Generator, history_len: int = 8):
        self.net = net
        self.traces = traces
        self.spec = spec
        self.w = w
        self.ppo = ppo
        self.fc = fc
        self.rng = rng
        self.history_len = history_len
        self._envs: list[SessionEnv | None] = [None] * ppo.n_envs
        self._states = [None] * ppo.n_envs
        self._ep_rebuf = np.zeros(ppo.n_envs)
        self._ep_qoe = np.zeros(ppo.n_envs)
        self._ep_len = np.zeros(ppo.n_envs, dtype=int)

    def _ensure_env(self, e: int):
        if self._envs[e] is None:
            trace = self.traces[int(self.rng.integers(len(self.traces)))]
            self._envs[e] = SessionEnv(trace, self.spec, self.w, history_len=self.history_len)
            self._states[e] = self._envs[e].reset()
            self._ep_rebuf[e] = self._ep_qoe[e] = 0.0
            self._ep_len[e] = 0

    def collect(self) -> RolloutBatch:
        ppo = self.ppo
        n = ppo.n_steps * ppo.n_envs
        d = None
        feats = None
        actions = np.empty(n, dtype=int)
        logprobs = np.empty(n)
        rewards = np.empty(n)
        values = np.empty(n)
        dones = np.zeros(n, dtype=bool)
        env_slices = []
        bootstraps = np.zeros(ppo.n_envs)
        episodes: list[EpisodeInfo] = []
        i = 0
        for e in range(ppo.n_envs):
            lo = i
            for _ in range(ppo.n_steps):
                self._ensure_env(e)
                state = self._states[e]
                x = featurize(state, self.spec, self.fc)
                if feats is None:
                    d = x.size
                    feats = np.empty((n, d))
                probs, value = forward(self.net, x)
                a = sample_action(probs, self.rng)
                next_state, outcome, done = self._envs[e].step(a)
                feats[i] = x
                actions[i] = a
                logprobs[i] = float(np.log(probs[a]))
                values[i] = value
                if outcome is None:  # trace ran out mid-download
                    rewards[i] = 0.0
                else:
                    rewards[i] = outcome.qoe
                    self._ep_rebuf[e] += outcome.rebuffer_s
                    self._ep_qoe[e] += outcome.qoe
                self._ep_len[e] += 1
                dones[i] = done
                if done:
                    episodes.append(EpisodeInfo(
                        terminal_index=i,
                        rebuffer_s=float(self._ep_rebuf[e]),
                        qoe=float(self._ep_qoe[e]),
                        length=int(self._ep_len[e]),
                        truncated=self._envs[e].truncated,
                    ))
                    self._envs[e] = None
                    self._states[e] = None
                else:
                    self._states[e] = next_state
                i += 1
            if self._states[e] is not None:
                _, bootstraps[e] = forward(self.net, featurize(self._states[e], self.spec, self.fc))
            env_slices.append((lo, i))
        return RolloutBatch(
            features=feats, actions=actions, logprobs=logprobs, rewards=rewards,
            values=values, dones=dones, env_slices=env_slices,
            bootstrap_values=bootstraps, episodes=episodes,
        )


def finetune(
    net: PolicyNet, traces: list[ThroughputTrace], spec: VideoSpec, w: QoEWeights,
    ppo: PpoConfig = PpoConfig(), cvar: CvarConfig = CvarConfig(),
    fc: FeatureConfig = FeatureConfig(), seed: int = 0, history_len: int = 8,
) -> tuple[PolicyNet, list[dict]]:
    """Risk-shaped fine-tuning loop; returns the tuned net and per-update rows.

    Per update: collect n_steps * n_envs transitions, fold finished episodes'
    rebuffer totals into the rolling window (on the first batch the window IS
    the batch), shape terminal rewards, normalize by the running return std,
    estimate advantages, and run the clipped update. Deterministic per seed.
    """
    if not traces:
        raise ValueError("no training traces")
    rng = np.random.default_rng([seed, 202])
    opt = Adam(net.size, lr=ppo.learning_rate, max_grad_norm=ppo.max_grad_norm)
    collector = RolloutCollector(net, traces, spec, w, ppo, fc, rng, history_len)
    scaler = _RunningReturnStd(ppo.gamma, ppo.n_envs, ppo.reward_clip)
    rolling: deque = deque(maxlen=cvar.window)
    curve: list[dict] = []
    steps_done = 0
    update = 0
    while steps_done < ppo.total_steps:
        batch = collector.collect()
        steps_done += batch.size
        update += 1
        for ep in batch.episodes:
            rolling.append(ep.rebuffer_s)
        shaped = shape_terminal_rewards(batch, cvar, list(rolling))
        raw_rewards = batch.rewards
        norm = np.empty_like(shaped.rewards)
        for e, (lo, hi) in enumerate(shaped.env_slices):
            for t in range(lo, hi):
                norm[t] = scaler.normalize(shaped.rewards[t], e, bool(shaped.dones[t]))
        shaped = replace(shaped, rewards=norm)
        shaped = gae_advantages(shaped, ppo.gamma, ppo.gae_lambda)
        stats = ppo_update(net, shaped, ppo, opt, rng)
        ep_rebufs = [ep.rebuffer_s for ep in batch.episodes]
        xi, batch_cvar = empirical_cvar(list(rolling), cvar.alpha) if rolling else (0.0, 0.0)
        curve.append({
            "update": update,
            "steps": steps_done,
            "episodes": len(batch.episodes),
            "mean_episode_qoe": float(np.mean([ep.qoe for ep in batch.episodes])) if batch.episodes else 0.0,
            "mean_episode_rebuffer_s": float(np.mean(ep_rebufs)) if ep_rebufs else 0.0,
            "xi": xi,
            "window_cvar": batch_cvar,
            "shaped_episodes": int(sum(ep.rebuffer_s - cvar.budget_s - xi > 0 for ep in batch.episodes))
            if cvar.penalty_weight else 0,
            "mean_raw_reward": float(raw_rewards.mean()),
            **{f"ppo_{k}": v for k, v in stats.items()},
        })
    return net, curve
