"""Synthesize satellite-like throughput traces and poke at their structure.

Run from the repo root:  python demos/01_synthesize_traces.py
"""

import tempfile
from pathlib import Path

import numpy as np

from abrlab.traces import (SynthConfig, handover_heavy_subset, ingest_trace,
                           split_traces, synthesize_trace, write_trace)


def main():
    cfg = SynthConfig(duration_s=600, seed=(7, 0))
    trace = synthesize_trace(cfg, trace_id="demo-0000")
    mbps = trace.throughput_bps / 1e6

    print(f"trace {trace.trace_id}: {trace.duration_s:.0f}s, "
          f"mean {mbps.mean():.1f} Mbit/s, min {mbps.min():.1f}, max {mbps.max():.1f}")
    print(f"handovers at t = {np.asarray(trace.handover_times_s)[:6]} ... "
          f"({len(trace.handover_times_s)} total)")

    # the dip after each handover is the stress the auditor exists for
    h = int(trace.handover_times_s[3])
    window = mbps[max(h - 3, 0):h + 6]
    print("\nthroughput around handover #4 (Mbit/s):")
    print("  " + " ".join(f"{v:6.1f}" for v in window))

    # round-trip through the on-disk CSV format
    with tempfile.TemporaryDirectory() as tmp:
        write_trace(trace, tmp)
        back = ingest_trace(Path(tmp) / "demo-0000.csv")
        assert np.array_equal(back.throughput_bps, trace.throughput_bps)
        print("\nCSV round-trip: exact")

    # build a pool with varied dwell times, split it, and pull out the
    # handover-dense stress subset
    pool = [synthesize_trace(SynthConfig(duration_s=600, regime_dwell_s=float(5 + 5 * (i % 6)),
                                         seed=(7, i)), trace_id=f"demo-{i:04d}")
            for i in range(20)]
    train, cal, test = split_traces([t.trace_id for t in pool], (0.7, 0.15, 0.15), seed=7)
    print(f"\nsplit 20 traces into train={len(train)} cal={len(cal)} test={len(test)}")

    heavy = handover_heavy_subset(pool, window_s=300.0, top_fraction=0.3)
    rate = {t.trace_id: len(t.handover_times_s) for t in pool}
    print(f"handover-heavy subset ({len(heavy)} traces): "
          + ", ".join(f"{tid}({rate[tid]})" for tid in heavy[:5]))


if __name__ == "__main__":
    main()
