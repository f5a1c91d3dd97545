"""Config serialization, scalar repair, fingerprints, and CLI-style overrides."""

import dataclasses
import json
from pathlib import Path

import pytest
import yaml

from abrlab.config import (
    ALL_METHODS,
    ExperimentConfig,
    TraceSection,
    VideoSection,
    bc_fingerprint,
    calibration_fingerprint,
    config_from_dict,
    config_to_dict,
    load_config,
    ppo_fingerprint,
    save_config,
    traces_fingerprint,
    with_overrides,
)

REPO_ROOT = Path(__file__).resolve().parents[1]


def _tweak(**changes) -> ExperimentConfig:
    """Fresh default config with nested replacements, e.g. _tweak(video={"num_chunks": 12})."""
    cfg = ExperimentConfig()
    for name, value in changes.items():
        if isinstance(value, dict):
            cfg = dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **value)})
        else:
            cfg = dataclasses.replace(cfg, **{name: value})
    return cfg


class TestRoundTrip:
    def test_default_dict_round_trip(self):
        cfg = ExperimentConfig()
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_modified_dict_round_trip(self):
        cfg = _tweak(
            seed=11,
            history_len=5,
            output_dir="runs/elsewhere",
            traces={"count": 12, "duration_s": 240},
            video={"num_chunks": 12, "ladder_kbps": (1000, 2000, 4000)},
            cvar={"penalty_weight": 5.0},
            eval={"methods": ("bola", "full"), "margin_grid": (0.8, 1.0)},
            predictor={"candidates": ("oracle",)},
        )
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_yaml_file_round_trip(self, tmp_path):
        cfg = _tweak(seed=3, video={"initial_buffer_s": 8.0}, audit={"enabled": False})
        path = tmp_path / "exp.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_dict_is_json_serializable(self):
        raw = config_to_dict(ExperimentConfig())
        assert json.loads(json.dumps(raw)) == raw
        assert isinstance(raw["video"]["ladder_kbps"], list)
        assert isinstance(raw["eval"]["methods"], list)

    def test_saved_yaml_is_a_plain_mapping(self, tmp_path):
        path = tmp_path / "exp.yaml"
        save_config(ExperimentConfig(), path)
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        assert isinstance(data, dict)
        for section in ("traces", "video", "qoe", "features", "bc", "ppo",
                        "cvar", "predictor", "audit", "mpc", "bola", "eval"):
            assert section in data
        assert {"seed", "output_dir", "history_len"} <= set(data)

    def test_shipped_default_config_matches_code_defaults(self):
        cfg = load_config(REPO_ROOT / "configs" / "default.yaml")
        assert cfg == dataclasses.replace(ExperimentConfig(), output_dir="runs/default")


class TestScalarRepair:
    def test_unsigned_exponent_string_becomes_float(self):
        # YAML 1.1 parses 2.5e8 (no sign in the exponent) as a string.
        cfg = config_from_dict({"features": {"throughput_scale_bps": "2.5e8"}})
        assert cfg.features.throughput_scale_bps == 2.5e8
        assert isinstance(cfg.features.throughput_scale_bps, float)

    def test_unsigned_exponent_round_trips_through_a_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("features:\n  throughput_scale_bps: 1.5e8\n", encoding="utf-8")
        assert load_config(path).features.throughput_scale_bps == 1.5e8

    def test_int_literal_for_float_field(self):
        cfg = config_from_dict({"video": {"chunk_duration_s": 4}})
        assert isinstance(cfg.video.chunk_duration_s, float)
        assert cfg.video.chunk_duration_s == 4.0

    def test_string_for_int_field(self):
        cfg = config_from_dict({"video": {"num_chunks": "12"}})
        assert cfg.video.num_chunks == 12
        assert isinstance(cfg.video.num_chunks, int)

    def test_optional_float_field(self):
        assert config_from_dict({"video": {"initial_buffer_s": None}}).video.initial_buffer_s is None
        got = config_from_dict({"video": {"initial_buffer_s": 16}}).video.initial_buffer_s
        assert got == 16.0 and isinstance(got, float)

    def test_bool_field_not_coerced(self):
        cfg = config_from_dict({"audit": {"enabled": False}})
        assert cfg.audit.enabled is False

    def test_tuple_fields_accept_lists(self):
        cfg = config_from_dict({
            "video": {"ladder_kbps": [1000, 2000, 4000]},
            "eval": {"methods": ["bola", "full"], "margin_grid": [0.8, 1.0]},
            "predictor": {"candidates": ["point"]},
        })
        assert cfg.video.ladder_kbps == (1000, 2000, 4000)
        assert cfg.eval.methods == ("bola", "full")
        assert cfg.eval.margin_grid == (0.8, 1.0)
        assert cfg.predictor.candidates == ("point",)


class TestValidation:
    def test_unknown_section_key_rejected(self):
        with pytest.raises(ValueError, match=r"'video'.*nope"):
            config_from_dict({"video": {"nope": 1}})

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ValueError, match="top-level"):
            config_from_dict({"sead": 7})

    def test_unknown_section_name_rejected(self):
        with pytest.raises(ValueError, match="top-level"):
            config_from_dict({"vides": {"num_chunks": 12}})

    def test_empty_file_yields_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert load_config(path) == ExperimentConfig()

    def test_comment_only_file_yields_defaults(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("# nothing but a comment\n", encoding="utf-8")
        assert load_config(path) == ExperimentConfig()

    def test_non_mapping_file_rejected(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ValueError, match="mapping"):
            load_config(path)


class TestFingerprints:
    FPS = (traces_fingerprint, bc_fingerprint, ppo_fingerprint, calibration_fingerprint)

    def test_shape_and_distinctness(self):
        cfg = ExperimentConfig()
        prints = [fp(cfg) for fp in self.FPS]
        for p in prints:
            assert len(p) == 16
            assert set(p) <= set("0123456789abcdef")
        assert len(set(prints)) == len(prints)
        assert [fp(cfg) for fp in self.FPS] == prints  # deterministic

    def test_traces_fingerprint_sensitivity(self):
        base = traces_fingerprint(ExperimentConfig())
        assert traces_fingerprint(_tweak(seed=8)) != base
        assert traces_fingerprint(_tweak(traces={"count": 99})) != base
        assert traces_fingerprint(_tweak(traces={"regime_dwell_s": 20.0})) != base
        # downstream knobs do not touch the trace stage
        assert traces_fingerprint(_tweak(video={"num_chunks": 12})) == base
        assert traces_fingerprint(_tweak(ppo={"learning_rate": 1e-5})) == base
        assert traces_fingerprint(_tweak(output_dir="runs/other")) == base

    def test_bc_fingerprint_sensitivity(self):
        base = bc_fingerprint(ExperimentConfig())
        changed = [
            _tweak(seed=8),
            _tweak(history_len=4),
            _tweak(traces={"count": 99}),      # upstream cascades
            _tweak(video={"num_chunks": 12}),
            _tweak(qoe={"rebuffer_penalty": 10.0}),
            _tweak(features={"throughput_scale_bps": 1e8}),
            _tweak(bc={"epochs": 9}),
        ]
        assert all(bc_fingerprint(c) != base for c in changed)
        unchanged = [
            _tweak(ppo={"learning_rate": 1e-5}),
            _tweak(cvar={"penalty_weight": 0.0}),
            _tweak(predictor={"delta": 0.2}),
            _tweak(audit={"capacity_margin": 0.5}),
            _tweak(eval={"methods": ("bola",)}),
        ]
        assert all(bc_fingerprint(c) == base for c in unchanged)

    def test_ppo_fingerprint_ignores_total_steps(self):
        base = ppo_fingerprint(ExperimentConfig())
        assert ppo_fingerprint(_tweak(ppo={"total_steps": 512})) == base
        assert ppo_fingerprint(_tweak(ppo={"learning_rate": 1e-5})) != base
        assert ppo_fingerprint(_tweak(ppo={"gamma": 0.5})) != base
        assert ppo_fingerprint(_tweak(cvar={"penalty_weight": 0.0})) != base
        assert ppo_fingerprint(_tweak(qoe={"rebuffer_penalty": 10.0})) != base  # upstream
        assert ppo_fingerprint(_tweak(predictor={"delta": 0.2})) == base

    def test_calibration_fingerprint_sensitivity(self):
        base = calibration_fingerprint(ExperimentConfig())
        assert calibration_fingerprint(_tweak(predictor={"horizon_s": 5})) != base
        assert calibration_fingerprint(_tweak(traces={"count": 99})) != base
        assert calibration_fingerprint(_tweak(seed=8)) != base
        # the calibration stage never sees the policy stack
        assert calibration_fingerprint(_tweak(bc={"epochs": 9})) == base
        assert calibration_fingerprint(_tweak(ppo={"gamma": 0.5})) == base
        assert calibration_fingerprint(_tweak(video={"num_chunks": 12})) == base


class TestWithOverrides:
    def test_no_overrides_is_identity(self):
        cfg = ExperimentConfig()
        assert with_overrides(cfg) == cfg

    def test_individual_knobs(self):
        cfg = ExperimentConfig()
        assert with_overrides(cfg, seed=3) == _tweak(seed=3)
        assert with_overrides(cfg, out="runs/x") == _tweak(output_dir="runs/x")
        assert with_overrides(cfg, penalty_weight=0.0) == _tweak(cvar={"penalty_weight": 0.0})
        assert with_overrides(cfg, margin=0.8) == _tweak(audit={"capacity_margin": 0.8})
        assert with_overrides(cfg, guard=1.5) == _tweak(audit={"guard_s": 1.5})
        assert with_overrides(cfg, methods=("bola", "full")) == _tweak(eval={"methods": ("bola", "full")})

    def test_combined_overrides(self):
        got = with_overrides(ExperimentConfig(), seed=9, out="runs/y", penalty_weight=5.0,
                             margin=1.0, guard=0.5, methods=("full",))
        want = _tweak(seed=9, output_dir="runs/y", cvar={"penalty_weight": 5.0},
                      audit={"capacity_margin": 1.0, "guard_s": 0.5}, eval={"methods": ("full",)})
        assert got == want

    def test_method_order_preserved(self):
        got = with_overrides(ExperimentConfig(), methods=("full", "bola"))
        assert got.eval.methods == ("full", "bola")

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match=r"bc\+teleport"):
            with_overrides(ExperimentConfig(), methods=("bola", "bc+teleport"))
        # every published method name is accepted
        assert with_overrides(ExperimentConfig(), methods=ALL_METHODS).eval.methods == ALL_METHODS


class TestSectionHelpers:
    def test_synth_config_wiring(self):
        ts = TraceSection(duration_s=240, regime_dwell_s=10.0, ar1_sigma_mbps=0.5)
        sc = ts.synth_config(seed=(1, 2))
        assert sc.duration_s == 240
        assert sc.regime_dwell_s == 10.0
        assert sc.ar1_sigma_mbps == 0.5
        assert sc.seed == (1, 2)

    def test_split_fractions(self):
        assert TraceSection().split_fractions == (0.70, 0.15, 0.15)

    def test_video_spec_wiring(self):
        vs = VideoSection(num_chunks=12, ladder_kbps=(1000, 2000), initial_prev_rung=1)
        spec = vs.video_spec()
        assert spec.num_chunks == 12
        assert spec.ladder.rungs_kbps == (1000, 2000)
        assert spec.size_jitter == (0.9, 1.1)
        assert spec.initial_prev_rung == 1
