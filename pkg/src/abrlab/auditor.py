"""Runtime action auditor: feasibility screening of requested rungs.

Before a chunk request executes, the auditor checks whether its predicted
download time fits inside the buffer minus a guard. Requests outside the
feasible set are projected down to the largest feasible rung at or below the
request; an empty feasible set falls back to the lowest rung. The auditor
only ever moves requests down, so it can cap tail risk but never adds it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .policies import bulk_download_times, trace_cumulative_bytes
from .sim import PlayerState
from .traces import ThroughputTrace

_EMPTY = np.zeros(0, dtype=int)


@dataclass(frozen=True)
class AuditConfig:
    guard_s: float = 0.0
    capacity_margin: float = 0.90  # multiplies predicted capacity before the check
    enabled: bool = True

    def __post_init__(self):
        if self.guard_s < 0:
            raise ValueError("guard_s must be non-negative")
        if not (0.0 < self.capacity_margin <= 1.0):
            raise ValueError("capacity_margin must lie in (0, 1]")


@dataclass(frozen=True)
class AuditDecision:
    raw_rung: int
    safe_rung: int
    intervened: bool
    fallback: bool
    predicted_capacity_bps: float = float("nan")
    effective_capacity_bps: float = float("nan")
    feasible_rungs: np.ndarray = field(default_factory=lambda: _EMPTY)


def feasible_set(state: PlayerState, sizes_bytes: np.ndarray, predicted_bps: float,
                 cfg: AuditConfig = AuditConfig()) -> np.ndarray:
    """Rungs whose predicted download time fits the buffer budget.

    A rung `a` is feasible when 8*size[a] / (margin * predicted) <=
    buffer - guard (boundary inclusive). Empty whenever buffer <= guard.
    """
    if predicted_bps <= 0.0:
        raise ValueError("predicted capacity must be positive")
    budget = state.buffer_s - cfg.guard_s
    if budget <= 0.0:
        return _EMPTY
    times = 8.0 * np.asarray(sizes_bytes, dtype=np.float64) / (cfg.capacity_margin * predicted_bps)
    return np.nonzero(times <= budget)[0]


def audit_action(raw_rung: int, feasible: np.ndarray) -> tuple[int, bool]:
    """Project a request onto the feasible set, downward only.

    Returns (safe_rung, intervened): the largest feasible rung at or below
    the request, the lowest rung when nothing qualifies, and an intervention
    flag that is set exactly when the executed rung differs from the request.
    """
    feasible = np.asarray(feasible, dtype=int)
    at_or_below = feasible[feasible <= raw_rung]
    safe = int(at_or_below.max()) if at_or_below.size else 0
    return safe, safe != raw_rung


def decision_violation(size_bytes: float, realized_bps: float, buffer_s: float, guard_s: float = 0.0) -> bool:
    """Did this chunk, at its realized throughput, overrun the buffer budget?"""
    if realized_bps <= 0.0:
        raise ValueError("realized capacity must be positive")
    return 8.0 * size_bytes / realized_bps > buffer_s - guard_s


def make_auditor(predictor, cfg: AuditConfig = AuditConfig()):
    """Wrap a scalar capacity predictor as a run_session auditor.

    The predictor must expose `predict(history_bps) -> bps` and `input_len_s`.
    With no measured history yet (session start) no forecast exists, so the
    request passes through unaudited; the empty-set fallback still applies
    whenever the buffer is at or below the guard, which needs no forecast.
    """
    input_len = int(getattr(predictor, "input_len_s", 0)) or None

    def auditor(state: PlayerState, history_bps: np.ndarray, raw_rung: int):
        if not cfg.enabled:
            return None
        if state.buffer_s - cfg.guard_s <= 0.0:
            safe, intervened = audit_action(raw_rung, _EMPTY)
            return AuditDecision(raw_rung, safe, intervened, fallback=True)
        tail = history_bps[-input_len:] if input_len else history_bps
        if tail.size == 0:
            return None
        predicted = float(predictor.predict(tail))
        feasible = feasible_set(state, state.next_chunk_sizes, predicted, cfg)
        safe, intervened = audit_action(raw_rung, feasible)
        return AuditDecision(
            raw_rung, safe, intervened,
            fallback=feasible.size == 0,
            predicted_capacity_bps=predicted,
            effective_capacity_bps=cfg.capacity_margin * predicted,
            feasible_rungs=feasible,
        )

    return auditor


def make_oracle_auditor(trace: ThroughputTrace, cfg: AuditConfig = AuditConfig(capacity_margin=1.0)):
    """Diagnostic auditor that screens with each rung's true realized capacity.

    Feasibility uses exact future download times (equivalent to plugging the
    realized per-rung capacity into the screening inequality), so any
    admitted action is violation-free by construction. The logged prediction
    is the executed rung's realized capacity. The margin is not applied: the
    oracle has nothing to hedge.
    """
    cum = trace_cumulative_bytes(trace)
    bps = trace.throughput_bps
    t0 = float(trace.times_s[0])

    def auditor(state: PlayerState, history_bps: np.ndarray, raw_rung: int):
        if not cfg.enabled:
            return None
        sizes = np.asarray(state.next_chunk_sizes, dtype=np.float64)
        starts = np.full(sizes.size, state.wall_time_s)
        d = bulk_download_times(cum, bps, t0, starts, sizes)
        budget = state.buffer_s - cfg.guard_s
        feasible = np.nonzero(d <= budget)[0] if budget > 0.0 else _EMPTY
        safe, intervened = audit_action(raw_rung, feasible)
        realized = 8.0 * sizes[safe] / d[safe]
        return AuditDecision(
            raw_rung, safe, intervened,
            fallback=feasible.size == 0,
            predicted_capacity_bps=realized,
            effective_capacity_bps=realized,
            feasible_rungs=feasible,
        )

    return auditor
