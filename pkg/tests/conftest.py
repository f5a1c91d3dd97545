"""Session-wide fixtures: synthetic trace pools and the trained policy stack."""

import pytest

from abrlab.capacity import (LowerBoundPredictor, PointPredictor, PredictorConfig,
                             calibrate_lower_bound)
from abrlab.imitation import BcConfig, pretrain
from abrlab.risk_ppo import CvarConfig, PpoConfig, finetune
from abrlab.sim import QoEWeights, VideoSpec
from abrlab.traces import SynthConfig, synthesize_trace

STACK_SEEDS = (0, 1, 2)


def _pool(tag: str, n: int, base: int) -> list:
    return [synthesize_trace(SynthConfig(duration_s=600, seed=(base, i)), trace_id=f"{tag}-{i:04d}")
            for i in range(n)]


@pytest.fixture(scope="session")
def trace_pools():
    """Disjoint train/calibration/test pools at the default synthesis settings.

    The test pool is sized for tail statistics (210 sessions puts 10+ sessions
    in the worst-5% slice).
    """
    return {
        "train": _pool("train", 100, 11),
        "cal": _pool("cal", 40, 22),
        "test": _pool("test", 210, 33),
    }


@pytest.fixture(scope="session")
def trained_stack(trace_pools):
    """Cloned and risk-fine-tuned policies for three seeds, plus the calibrated bound.

    Trains at the default budgets, so this takes a couple of minutes of CPU;
    it is built once per session and only when a test asks for it.
    """
    spec, w = VideoSpec(), QoEWeights()
    point = PointPredictor(PredictorConfig())
    scale = calibrate_lower_bound(point, trace_pools["cal"]).scale
    nets = {}
    for seed in STACK_SEEDS:
        bc_net, _ = pretrain(trace_pools["train"], spec, w, BcConfig(), seed=seed)
        rl_net = bc_net.copy()
        rl_net, _ = finetune(rl_net, trace_pools["train"], spec, w,
                             PpoConfig(), CvarConfig(), seed=seed)
        nets[seed] = {"bc": bc_net, "rl": rl_net}
    return {
        "spec": spec,
        "w": w,
        "point": point,
        "lower": LowerBoundPredictor(point, scale),
        "seeds": STACK_SEEDS,
        "nets": nets,
    }
