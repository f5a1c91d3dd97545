"""Experiment configuration: one YAML file drives every pipeline stage.

The config round-trips exactly (parse -> serialize -> parse is identity) and
each stage derives a content fingerprint from the config subset it depends
on. Artifacts record the fingerprint they were built under, so a stale
checkpoint cannot silently flow into evaluation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .capacity import PredictorConfig
from .imitation import BcConfig
from .net import FeatureConfig
from .policies import BolaConfig, MpcConfig
from .risk_ppo import CvarConfig, PpoConfig
from .sim import BitrateLadder, QoEWeights, VideoSpec
from .traces import SynthConfig

ALL_METHODS = ("rate-rule", "bola", "robust-mpc", "bc-only", "bc+rl", "bc+audit", "full")


@dataclass(frozen=True)
class TraceSection:
    count: int = 100
    duration_s: int = 600
    regime_mean_log_mbps: float = SynthConfig.regime_mean_log_mbps
    regime_sigma_log: float = SynthConfig.regime_sigma_log
    regime_dwell_s: float = SynthConfig.regime_dwell_s
    handover_dip_fraction: float = SynthConfig.handover_dip_fraction
    handover_dip_duration_s: float = SynthConfig.handover_dip_duration_s
    ar1_rho: float = SynthConfig.ar1_rho
    ar1_sigma_mbps: float = SynthConfig.ar1_sigma_mbps
    split_train: float = 0.70
    split_calibration: float = 0.15
    split_test: float = 0.15

    def synth_config(self, seed) -> SynthConfig:
        return SynthConfig(
            duration_s=self.duration_s,
            regime_mean_log_mbps=self.regime_mean_log_mbps,
            regime_sigma_log=self.regime_sigma_log,
            regime_dwell_s=self.regime_dwell_s,
            handover_dip_fraction=self.handover_dip_fraction,
            handover_dip_duration_s=self.handover_dip_duration_s,
            ar1_rho=self.ar1_rho,
            ar1_sigma_mbps=self.ar1_sigma_mbps,
            seed=seed,
        )

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_calibration, self.split_test)


@dataclass(frozen=True)
class VideoSection:
    num_chunks: int = 48
    chunk_duration_s: float = 4.0
    ladder_kbps: tuple[int, ...] = (3000, 8000, 15000, 30000, 60000, 120000)
    size_jitter_low: float = 0.9
    size_jitter_high: float = 1.1
    jitter_seed: int = 2024
    buffer_max_s: float = 60.0
    initial_prev_rung: int = 0
    initial_buffer_s: float | None = None

    def video_spec(self) -> VideoSpec:
        return VideoSpec(
            num_chunks=self.num_chunks,
            chunk_duration_s=self.chunk_duration_s,
            ladder=BitrateLadder(self.ladder_kbps),
            size_jitter=(self.size_jitter_low, self.size_jitter_high),
            jitter_seed=self.jitter_seed,
            buffer_max_s=self.buffer_max_s,
            initial_prev_rung=self.initial_prev_rung,
            initial_buffer_s=self.initial_buffer_s,
        )


@dataclass(frozen=True)
class AuditSection:
    guard_s: float = 0.0
    capacity_margin: float = 0.90
    enabled: bool = True


@dataclass(frozen=True)
class EvalSection:
    methods: tuple[str, ...] = ALL_METHODS
    handover_window_s: float = 300.0
    handover_top_fraction: float = 0.30
    severe_threshold_s: float = 10.0
    tail_fraction: float = 0.05
    qoe_tolerance: float = 0.03
    margin_grid: tuple[float, ...] = (0.90, 0.95, 1.00)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    output_dir: str = "runs/exp"
    history_len: int = 8
    traces: TraceSection = field(default_factory=TraceSection)
    video: VideoSection = field(default_factory=VideoSection)
    qoe: QoEWeights = field(default_factory=QoEWeights)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    cvar: CvarConfig = field(default_factory=CvarConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    audit: AuditSection = field(default_factory=AuditSection)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    bola: BolaConfig = field(default_factory=BolaConfig)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTIONS = {
    "traces": TraceSection,
    "video": VideoSection,
    "qoe": QoEWeights,
    "features": FeatureConfig,
    "bc": BcConfig,
    "ppo": PpoConfig,
    "cvar": CvarConfig,
    "predictor": PredictorConfig,
    "audit": AuditSection,
    "mpc": MpcConfig,
    "bola": BolaConfig,
    "eval": EvalSection,
}

_TUPLE_FIELDS = {"ladder_kbps", "methods", "margin_grid", "candidates"}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    raw = asdict(cfg)
    for section in raw.values():
        if isinstance(section, dict):
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
    return raw


def _coerce_scalar(value, annotation: str):
    # YAML 1.1 reads unsigned exponents like 2.0e8 as strings; repair here.
    if value is None or isinstance(value, bool):
        return value
    if annotation.startswith("float") and isinstance(value, (int, str)):
        return float(value)
    if annotation.startswith("int") and isinstance(value, str):
        return int(value)
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(data.pop(name, {}) or {})
        fields = cls.__dataclass_fields__
        unknown = set(section) - set(fields)
        if unknown:
            raise ValueError(f"config section {name!r}: unknown keys {sorted(unknown)}")
        for key in _TUPLE_FIELDS & set(section):
            section[key] = tuple(section[key])
        for key in set(section) - _TUPLE_FIELDS:
            section[key] = _coerce_scalar(section[key], str(fields[key].type))
        kwargs[name] = cls(**section)
    top_valid = {"seed", "output_dir", "history_len"}
    unknown = set(data) - top_valid
    if unknown:
        raise ValueError(f"config: unknown top-level keys {sorted(unknown)}")
    return ExperimentConfig(**{**data, **kwargs})


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False),
        encoding="utf-8",
    )


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def traces_fingerprint(cfg: ExperimentConfig) -> str:
    return _digest({"seed": cfg.seed, "traces": config_to_dict(cfg)["traces"]})


def bc_fingerprint(cfg: ExperimentConfig) -> str:
    raw = config_to_dict(cfg)
    return _digest({
        "upstream": traces_fingerprint(cfg), "seed": cfg.seed, "history_len": cfg.history_len,
        "video": raw["video"], "qoe": raw["qoe"], "features": raw["features"], "bc": raw["bc"],
    })


def ppo_fingerprint(cfg: ExperimentConfig) -> str:
    raw = config_to_dict(cfg)
    ppo = dict(raw["ppo"])
    ppo.pop("total_steps")  # resuming to a larger budget is not staleness
    return _digest({
        "upstream": bc_fingerprint(cfg), "ppo": ppo, "cvar": raw["cvar"],
    })


def calibration_fingerprint(cfg: ExperimentConfig) -> str:
    raw = config_to_dict(cfg)
    return _digest({
        "upstream": traces_fingerprint(cfg), "predictor": raw["predictor"],
    })


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, out: str | None = None,
                   penalty_weight: float | None = None, margin: float | None = None,
                   guard: float | None = None, methods: tuple[str, ...] | None = None) -> ExperimentConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    if penalty_weight is not None:
        cfg = replace(cfg, cvar=replace(cfg.cvar, penalty_weight=penalty_weight))
    if margin is not None:
        cfg = replace(cfg, audit=replace(cfg.audit, capacity_margin=margin))
    if guard is not None:
        cfg = replace(cfg, audit=replace(cfg.audit, guard_s=guard))
    if methods is not None:
        unknown = set(methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {ALL_METHODS}")
        cfg = replace(cfg, eval=replace(cfg.eval, methods=tuple(methods)))
    return cfg
