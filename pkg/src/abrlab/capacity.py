"""Safe-capacity forecasting: point predictor, calibrated lower bound, and
decision-level evaluation of predictors inside audited sessions.

The lower bound is a multiplicative correction: collect realized/predicted
ratios on calibration traces, take a low order-statistic quantile, and scale
the point forecast by it. Under exchangeability the bound is then exceeded by
reality all but about a `delta` fraction of the time, which is exactly the
miss rate the tests check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .auditor import AuditConfig, decision_violation, make_auditor, make_oracle_auditor
from .metrics import RiskReport, build_report
from .sim import QoEWeights, SessionLog, VideoSpec, run_session
from .traces import ThroughputTrace


@dataclass(frozen=True)
class PredictorConfig:
    input_len_s: int = 75
    horizon_s: int = 15
    delta: float = 0.10
    candidates: tuple[str, ...] = ("point", "lower-bound")

    def __post_init__(self):
        if self.input_len_s < 1 or self.horizon_s < 1:
            raise ValueError("input_len_s and horizon_s must be at least 1")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class PredictorInput:
    history_bps: np.ndarray  # most recent 1 Hz samples, oldest first
    horizon_s: int


def point_predict(inp: PredictorInput) -> float:
    """Mean of the last min(horizon, available) seconds of history."""
    h = np.asarray(inp.history_bps, dtype=np.float64)
    if h.size == 0:
        raise ValueError("cannot forecast from an empty history")
    return float(h[-min(inp.horizon_s, h.size):].mean())


def realized_target(trace: ThroughputTrace, t: float, horizon_s: int) -> float:
    """Mean throughput over [t, t + horizon); the window must fit the trace."""
    i0 = int(round(t - float(trace.times_s[0])))
    if i0 < 0 or i0 + horizon_s > trace.times_s.size:
        raise ValueError(f"window [{t}, {t + horizon_s}) outside trace {trace.trace_id!r}")
    return float(trace.throughput_bps[i0 : i0 + horizon_s].mean())


def lower_quantile(values: Sequence[float], delta: float) -> float:
    """Ascending order statistic at rank ceil(delta * n), 1-indexed."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    rank = max(int(math.ceil(delta * v.size)), 1)
    return float(v[rank - 1])


class PointPredictor:
    """Trailing-mean capacity forecast."""

    def __init__(self, cfg: PredictorConfig = PredictorConfig()):
        self.cfg = cfg
        self.predictor_id = "point"

    @property
    def input_len_s(self) -> int:
        return self.cfg.input_len_s

    def predict(self, history_bps: np.ndarray) -> float:
        tail = np.asarray(history_bps, dtype=np.float64)[-self.cfg.input_len_s:]
        return point_predict(PredictorInput(tail, self.cfg.horizon_s))


class LowerBoundPredictor:
    """Point forecast scaled by a calibrated low quantile of realized/point."""

    def __init__(self, point: PointPredictor, scale: float):
        if scale <= 0.0:
            raise ValueError("calibrated scale must be positive")
        self.point = point
        self.scale = float(scale)
        self.predictor_id = "lower-bound"

    @property
    def input_len_s(self) -> int:
        return self.point.input_len_s

    def predict(self, history_bps: np.ndarray) -> float:
        return self.scale * self.point.predict(history_bps)


class OraclePredictor:
    """Marker for the diagnostic auditor that sees true future capacity."""

    is_oracle = True
    predictor_id = "oracle"
    input_len_s = 0

    def predict(self, history_bps: np.ndarray) -> float:  # pragma: no cover
        raise NotImplementedError("the oracle binds to a trace inside the session runner")


@dataclass(frozen=True)
class CalibrationResult:
    scale: float
    delta: float
    horizon_s: int
    input_len_s: int
    n_windows: int


def calibration_ratios(point: PointPredictor, traces: Sequence[ThroughputTrace]) -> np.ndarray:
    """realized/predicted for every valid 1 s window of every trace."""
    cfg = point.cfg
    ratios: list[float] = []
    for trace in traces:
        bps = trace.throughput_bps
        t0 = float(trace.times_s[0])
        for i in range(1, bps.size - cfg.horizon_s + 1):
            predicted = point.predict(bps[:i])
            realized = realized_target(trace, t0 + i, cfg.horizon_s)
            ratios.append(realized / predicted)
    return np.asarray(ratios)


MIN_CALIBRATION_WINDOWS = 50


def calibrate_lower_bound(point: PointPredictor, traces: Sequence[ThroughputTrace],
                          delta: float | None = None) -> CalibrationResult:
    """Fit the multiplicative lower-bound scale on calibration traces."""
    delta = point.cfg.delta if delta is None else delta
    ratios = calibration_ratios(point, traces)
    if ratios.size < MIN_CALIBRATION_WINDOWS:
        raise ValueError(f"need at least {MIN_CALIBRATION_WINDOWS} calibration windows, got {ratios.size}")
    return CalibrationResult(
        scale=lower_quantile(ratios, delta),
        delta=delta,
        horizon_s=point.cfg.horizon_s,
        input_len_s=point.cfg.input_len_s,
        n_windows=int(ratios.size),
    )


def coverage_miss_rate(lb: LowerBoundPredictor, traces: Sequence[ThroughputTrace]) -> tuple[float, int]:
    """(fraction of fresh windows where reality undercuts the bound, n windows)."""
    cfg = lb.point.cfg
    misses = 0
    total = 0
    for trace in traces:
        bps = trace.throughput_bps
        t0 = float(trace.times_s[0])
        for i in range(1, bps.size - cfg.horizon_s + 1):
            bound = lb.predict(bps[:i])
            realized = realized_target(trace, t0 + i, cfg.horizon_s)
            misses += realized < bound
            total += 1
    if total == 0:
        raise ValueError("no evaluation windows")
    return misses / total, total


def violation_rate(violations: Sequence[bool]) -> float:
    """Share of admitted decisions that still overran the budget."""
    v = np.asarray(violations, dtype=bool)
    return float(v.mean()) if v.size else 0.0


def high_risk_overrate(predicted_bps: Sequence[float], realized_bps: Sequence[float],
                       fraction: float = 0.3) -> float:
    """Overprediction rate on the ceil(fraction * n) lowest-capacity samples."""
    p = np.asarray(predicted_bps, dtype=np.float64)
    c = np.asarray(realized_bps, dtype=np.float64)
    if p.size != c.size or p.size == 0:
        raise ValueError("predicted/realized samples must be non-empty and aligned")
    k = int(math.ceil(fraction * c.size))
    hard = np.argsort(c, kind="stable")[:k]
    return float(np.mean(p[hard] > c[hard]))


@dataclass(frozen=True)
class DecisionEvalResult:
    predictor_id: str
    v_dec: float
    overrate_hr: float
    n_decisions: int
    n_admitted: int
    report: RiskReport
    logs: tuple[SessionLog, ...]


def evaluate_predictor_decisions(
    predictor, policy: Callable, traces: Sequence[ThroughputTrace],
    spec: VideoSpec, w: QoEWeights, guard_s: float = 0.0,
    capacity_margin: float = 0.90, history_len: int = 8,
) -> DecisionEvalResult:
    """Run audited sessions and score the predictor at decision level.

    v_dec counts violations only over admitted (executed, non-fallback)
    decisions; the overprediction rate is computed on the lowest-30% realized
    capacity slice of all forecasted decisions. Chunks decided before any
    history existed carry no forecast and are excluded from both.
    """
    if not traces:
        raise ValueError("no traces to evaluate")
    oracle = bool(getattr(predictor, "is_oracle", False))
    cfg = AuditConfig(guard_s=guard_s, capacity_margin=1.0 if oracle else capacity_margin)
    logs: list[SessionLog] = []
    predicted: list[float] = []
    realized: list[float] = []
    admitted_violations: list[bool] = []
    for trace in traces:
        aud = make_oracle_auditor(trace, cfg) if oracle else make_auditor(predictor, cfg)
        log = run_session(trace, spec, w, policy, auditor=aud, history_len=history_len)
        logs.append(log)
        for o in log.outcomes:
            if math.isnan(o.predicted_capacity_bps):
                continue
            predicted.append(o.predicted_capacity_bps)
            realized.append(o.effective_throughput_bps)
            if not o.fallback:
                admitted_violations.append(
                    decision_violation(o.size_bytes, o.effective_throughput_bps, o.buffer_before_s, guard_s)
                )
    v_dec = violation_rate(admitted_violations)
    overrate = high_risk_overrate(predicted, realized) if predicted else 0.0
    pid = getattr(predictor, "predictor_id", predictor.__class__.__name__)
    report = build_report(pid, logs, v_dec=v_dec, overrate_hr=overrate)
    return DecisionEvalResult(
        predictor_id=pid,
        v_dec=v_dec,
        overrate_hr=overrate,
        n_decisions=len(predicted),
        n_admitted=len(admitted_violations),
        report=report,
        logs=tuple(logs),
    )


def select_predictor(results: Sequence[DecisionEvalResult], qoe_tolerance: float = 0.03) -> str:
    """Least worst-5% rebuffering among candidates within (1 - tol) of best QoE.

    Ties break toward the lower decision-violation rate, then lexicographic id.
    """
    if not results:
        raise ValueError("no predictor candidates to select from")
    best_qoe = max(r.report.qoe_mean for r in results)
    floor = best_qoe * (1.0 - qoe_tolerance) if best_qoe >= 0 else best_qoe * (1.0 + qoe_tolerance)
    eligible = [r for r in results if r.report.qoe_mean >= floor]
    chosen = min(eligible, key=lambda r: (r.report.rebuf_worst5_s, r.v_dec, r.predictor_id))
    return chosen.predictor_id
