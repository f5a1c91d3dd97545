"""Chunk-level streaming simulator replayed against throughput traces.

The model: a session downloads T chunks back to back. Downloading rung `a` of
chunk `t` moves `8 * S_t(a)` bits through the trace starting at the current
wall-clock time (1 s granularity, final second pro-rated). Playback stalls
when the download outlasts the buffer; afterwards the buffer gains one chunk
duration and is capped. Per-chunk quality is bitrate minus stall and switch
penalties. Wall-clock time advances only by download time; decisions are
instantaneous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .traces import ThroughputTrace

DEFAULT_LADDER_KBPS = (3000, 8000, 15000, 30000, 60000, 120000)


class TraceExhaustedError(RuntimeError):
    """The trace ended before the requested bytes finished downloading."""


@dataclass(frozen=True)
class BitrateLadder:
    rungs_kbps: tuple[int, ...] = DEFAULT_LADDER_KBPS

    def __post_init__(self):
        r = tuple(int(x) for x in self.rungs_kbps)
        object.__setattr__(self, "rungs_kbps", r)
        if len(r) < 2:
            raise ValueError("a bitrate ladder needs at least 2 rungs")
        if any(b <= 0 for b in r) or any(b >= c for b, c in zip(r, r[1:])):
            raise ValueError("ladder rungs must be positive and strictly ascending")

    @property
    def num_rungs(self) -> int:
        return len(self.rungs_kbps)

    def rates_bps(self) -> np.ndarray:
        return np.asarray(self.rungs_kbps, dtype=np.float64) * 1000.0


@dataclass(frozen=True)
class QoEWeights:
    rebuffer_penalty: float = 40.0   # quality units per stalled second
    smoothness_penalty: float = 1.0  # quality units per Mbit/s of switch


@dataclass(frozen=True)
class VideoSpec:
    num_chunks: int = 48
    chunk_duration_s: float = 4.0
    ladder: BitrateLadder = field(default_factory=BitrateLadder)
    size_jitter: tuple[float, float] = (0.9, 1.1)
    jitter_seed: int = 2024
    buffer_max_s: float = 60.0
    initial_prev_rung: int = 0
    initial_buffer_s: float | None = None  # None -> one chunk duration of pre-roll

    def __post_init__(self):
        if self.num_chunks < 1:
            raise ValueError("num_chunks must be at least 1")
        if self.chunk_duration_s <= 0 or self.buffer_max_s <= 0:
            raise ValueError("chunk_duration_s and buffer_max_s must be positive")
        lo, hi = self.size_jitter
        if not (0.0 < lo <= hi):
            raise ValueError("size_jitter bounds must satisfy 0 < low <= high")
        if not (0 <= self.initial_prev_rung < self.ladder.num_rungs):
            raise ValueError("initial_prev_rung outside the ladder")
        if self.initial_buffer_s is None:
            object.__setattr__(self, "initial_buffer_s", self.chunk_duration_s)
        if self.initial_buffer_s < 0 or self.initial_buffer_s > self.buffer_max_s:
            raise ValueError("initial_buffer_s must lie in [0, buffer_max_s]")
        jit = np.random.default_rng(self.jitter_seed).uniform(lo, hi, self.num_chunks)
        object.__setattr__(self, "_jitter", jit)

    def jitter_multiplier(self, chunk_index: int) -> float:
        return float(self._jitter[chunk_index])


def chunk_size(spec: VideoSpec, chunk_index: int, rung: int) -> float:
    """Bytes of rung `rung` at chunk `chunk_index`, including per-chunk jitter."""
    if not (0 <= chunk_index < spec.num_chunks):
        raise ValueError(f"chunk_index {chunk_index} outside [0, {spec.num_chunks})")
    if not (0 <= rung < spec.ladder.num_rungs):
        raise ValueError(f"rung {rung} outside the ladder")
    nominal = spec.ladder.rungs_kbps[rung] * 1000.0 * spec.chunk_duration_s / 8.0
    return nominal * spec.jitter_multiplier(chunk_index)


def chunk_sizes(spec: VideoSpec, chunk_index: int) -> np.ndarray:
    """Bytes for every rung of one chunk."""
    return np.array([chunk_size(spec, chunk_index, a) for a in range(spec.ladder.num_rungs)])


def nominal_top_rung_bytes(spec: VideoSpec) -> float:
    """Jitter-free size of the largest rung; the feature-scaling reference."""
    return spec.ladder.rungs_kbps[-1] * 1000.0 * spec.chunk_duration_s / 8.0


def download_chunk(trace: ThroughputTrace, start_time_s: float, size_bytes: float) -> tuple[float, float]:
    """Step the trace second by second until `size_bytes` arrive.

    Returns (download_time_s, effective_throughput_bps); the final second is
    pro-rated. Raises TraceExhaustedError if the trace ends first.
    """
    if size_bytes <= 0:
        raise ValueError("size_bytes must be positive")
    t0 = float(trace.times_s[0])
    n = trace.times_s.size
    if start_time_s < t0 - 1e-9 or start_time_s >= t0 + n - 1e-12:
        raise TraceExhaustedError(f"start time {start_time_s:.3f}s outside trace {trace.trace_id!r}")
    u = float(start_time_s)
    remaining = float(size_bytes)
    while True:
        k = int(math.floor(u - t0 + 1e-12))
        if k >= n:
            raise TraceExhaustedError(f"trace {trace.trace_id!r} exhausted mid-download")
        rate_bytes = trace.throughput_bps[k] / 8.0
        boundary = t0 + k + 1.0
        capacity = rate_bytes * (boundary - u)
        if remaining <= capacity:
            u += remaining / rate_bytes
            break
        remaining -= capacity
        u = boundary
    d = u - float(start_time_s)
    return d, 8.0 * float(size_bytes) / d


def rebuffer_time(download_time_s: float, buffer_s: float) -> float:
    return max(download_time_s - buffer_s, 0.0)


def advance_buffer(buffer_s: float, download_time_s: float, chunk_duration_s: float, buffer_max_s: float) -> float:
    return min(buffer_max_s, max(buffer_s - download_time_s, 0.0) + chunk_duration_s)


def chunk_qoe(rate_kbps: float, prev_rate_kbps: float, rebuffer_s: float, w: QoEWeights) -> float:
    return (
        rate_kbps / 1000.0
        - w.rebuffer_penalty * rebuffer_s
        - w.smoothness_penalty * abs(rate_kbps - prev_rate_kbps) / 1000.0
    )


@dataclass(frozen=True)
class PlayerState:
    """Everything a decision function may look at before requesting a chunk.

    `throughput_history` holds the most recent per-chunk effective
    throughputs (bps), oldest first, zero-padded at the front to a fixed
    length. `ladder_kbps`, `chunk_duration_s` and `wall_time_s` are player
    context: the ladder the rungs index into, content seconds per chunk, and
    where the session clock currently sits on the trace.
    """

    chunk_index: int
    buffer_s: float
    prev_rung: int
    throughput_history: np.ndarray
    remaining_chunks: int
    next_chunk_sizes: np.ndarray
    ladder_kbps: tuple[int, ...]
    chunk_duration_s: float
    buffer_max_s: float
    wall_time_s: float


@dataclass(frozen=True)
class ChunkOutcome:
    chunk_index: int
    rung: int
    raw_rung: int
    audited: bool
    fallback: bool
    size_bytes: float
    download_time_s: float
    rebuffer_s: float
    effective_throughput_bps: float
    qoe: float
    buffer_before_s: float
    buffer_after_s: float
    predicted_capacity_bps: float = float("nan")
    effective_capacity_bps: float = float("nan")


@dataclass
class SessionLog:
    trace_id: str
    num_chunks_planned: int
    outcomes: list[ChunkOutcome]
    truncated: bool = False

    @property
    def session_qoe(self) -> float:
        return float(sum(o.qoe for o in self.outcomes))

    @property
    def session_rebuffer_s(self) -> float:
        return float(sum(o.rebuffer_s for o in self.outcomes))

    @property
    def audit_interventions(self) -> int:
        return sum(1 for o in self.outcomes if o.audited)


CSV_FIELDS = (
    "chunk_index", "rung", "raw_rung", "audited", "fallback", "size_bytes",
    "download_time_s", "rebuffer_s", "effective_throughput_bps", "qoe",
    "buffer_before_s", "buffer_after_s", "predicted_capacity_bps",
    "effective_capacity_bps",
)


def session_to_csv(log: SessionLog, path: str | Path) -> None:
    lines = [",".join(CSV_FIELDS)]
    for o in log.outcomes:
        row = [repr(float(v)) if isinstance(v, float) else str(int(v))
               for v in (getattr(o, f) for f in CSV_FIELDS)]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def session_summary(log: SessionLog) -> dict:
    n = len(log.outcomes)
    return {
        "trace_id": log.trace_id,
        "num_chunks_planned": log.num_chunks_planned,
        "chunks_downloaded": n,
        "truncated": log.truncated,
        "session_qoe": log.session_qoe,
        "session_rebuffer_s": log.session_rebuffer_s,
        "audit_interventions": log.audit_interventions,
        "audit_rate": (log.audit_interventions / n) if n else 0.0,
    }


def session_to_json(log: SessionLog, path: str | Path) -> None:
    Path(path).write_text(json.dumps(session_summary(log), indent=2, sort_keys=True) + "\n", encoding="utf-8")


PolicyFn = Callable[[PlayerState], int]
# An auditor maps (state, measured past trace samples, requested rung) to a
# decision object exposing safe_rung / intervened / fallback / capacity fields,
# or None for "not audited".
AuditorFn = Callable[[PlayerState, np.ndarray, int], object]


class SessionEnv:
    """Step-level session driver; run_session and the trainers share it."""

    def __init__(self, trace: ThroughputTrace, spec: VideoSpec, w: QoEWeights, history_len: int = 8):
        if history_len < 1:
            raise ValueError("history_len must be at least 1")
        self.trace = trace
        self.spec = spec
        self.w = w
        self.history_len = history_len
        self._sizes = np.vstack([chunk_sizes(spec, t) for t in range(spec.num_chunks)])
        self.reset()

    def reset(self) -> PlayerState:
        self._t = 0
        self._now = float(self.trace.times_s[0])
        self._buffer = float(self.spec.initial_buffer_s)
        self._prev = int(self.spec.initial_prev_rung)
        self._hist = np.zeros(self.history_len)
        self.outcomes: list[ChunkOutcome] = []
        self.truncated = False
        return self._state()

    def _state(self) -> PlayerState:
        return PlayerState(
            chunk_index=self._t,
            buffer_s=self._buffer,
            prev_rung=self._prev,
            throughput_history=self._hist.copy(),
            remaining_chunks=self.spec.num_chunks - self._t,
            next_chunk_sizes=self._sizes[self._t].copy(),
            ladder_kbps=self.spec.ladder.rungs_kbps,
            chunk_duration_s=self.spec.chunk_duration_s,
            buffer_max_s=self.spec.buffer_max_s,
            wall_time_s=self._now,
        )

    def measured_history_bps(self) -> np.ndarray:
        """Trace samples whose full second has elapsed before the wall clock."""
        elapsed = int(math.floor(self._now - float(self.trace.times_s[0]) + 1e-12))
        return self.trace.throughput_bps[: max(elapsed, 0)]

    @property
    def done(self) -> bool:
        return self.truncated or self._t >= self.spec.num_chunks

    def step(self, rung: int, audit: object | None = None, raw_rung: int | None = None):
        """Download one chunk. Returns (next_state_or_None, outcome_or_None, done)."""
        if self.done:
            raise RuntimeError("step() on a finished session")
        rung = int(rung)
        if not (0 <= rung < self.spec.ladder.num_rungs):
            raise ValueError(f"policy requested rung {rung} outside the ladder")
        raw = rung if raw_rung is None else int(raw_rung)
        size = float(self._sizes[self._t, rung])
        try:
            d, c = download_chunk(self.trace, self._now, size)
        except TraceExhaustedError:
            self.truncated = True
            return None, None, True
        rebuf = rebuffer_time(d, self._buffer)
        rates = self.spec.ladder.rungs_kbps
        q = chunk_qoe(rates[rung], rates[self._prev], rebuf, self.w)
        buf_after = advance_buffer(self._buffer, d, self.spec.chunk_duration_s, self.spec.buffer_max_s)
        outcome = ChunkOutcome(
            chunk_index=self._t,
            rung=rung,
            raw_rung=raw,
            audited=bool(getattr(audit, "intervened", False)),
            fallback=bool(getattr(audit, "fallback", False)),
            size_bytes=size,
            download_time_s=d,
            rebuffer_s=rebuf,
            effective_throughput_bps=c,
            qoe=q,
            buffer_before_s=self._buffer,
            buffer_after_s=buf_after,
            predicted_capacity_bps=float(getattr(audit, "predicted_capacity_bps", float("nan"))),
            effective_capacity_bps=float(getattr(audit, "effective_capacity_bps", float("nan"))),
        )
        self.outcomes.append(outcome)
        self._now += d
        self._buffer = buf_after
        self._prev = rung
        self._hist = np.append(self._hist[1:], c)
        self._t += 1
        done = self.done
        return (None if done else self._state()), outcome, done

    def finish(self) -> SessionLog:
        return SessionLog(
            trace_id=self.trace.trace_id,
            num_chunks_planned=self.spec.num_chunks,
            outcomes=list(self.outcomes),
            truncated=self.truncated,
        )


def run_session(
    trace: ThroughputTrace,
    spec: VideoSpec,
    w: QoEWeights,
    policy: PolicyFn,
    auditor: AuditorFn | None = None,
    history_len: int = 8,
) -> SessionLog:
    """Replay one full session of `spec` against `trace` under `policy`.

    When an auditor is supplied, every requested rung passes through it and
    the (possibly projected) safe rung is executed; the log records both. A
    trace that ends early truncates the session and flags the log.
    """
    env = SessionEnv(trace, spec, w, history_len=history_len)
    state = env.reset()
    while not env.done:
        raw = int(policy(state))
        decision = auditor(state, env.measured_history_bps(), raw) if auditor is not None else None
        rung = int(getattr(decision, "safe_rung", raw)) if decision is not None else raw
        state, _, done = env.step(rung, audit=decision, raw_rung=raw)
        if done:
            break
    return env.finish()
