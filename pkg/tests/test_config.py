from pathlib import Path

import pytest

from kvshare.config import (ConfigError, PolicyConfig, RunConfig, SchedulerParams, config_from_dict,
                            load_config)
from kvshare.engine import GB, ActivationParams, ModelSpec
from kvshare.pagealloc import PAGE_BYTES

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"


def minimal(**extra):
    raw = {"models": [{"id": "a", "weight_gb": 16, "token_kv_kb": 128, "ttft_slo": 0.5, "tpot_slo": 0.1}]}
    raw.update(extra)
    return raw


def test_defaults_match_design_values():
    s = SchedulerParams()
    assert (s.tau, s.idle_threshold, s.tick, s.rate_window, s.pressure_free_fraction) == (0.05, 10.0, 10.0, 60.0, 0.10)
    cfg = config_from_dict(minimal())
    assert cfg.buffer_pages == 8
    assert cfg.map_latency == pytest.approx(0.2e-3)
    assert cfg.page_bytes == PAGE_BYTES == 2 * 2**20
    assert cfg.reserve_fraction == 0.05
    m = cfg.models[0]
    assert m.alpha == pytest.approx(0.006) and m.chunk_size == 512
    assert cfg.activation.engine_init_s == 5.0
    assert cfg.policy.kind == "prism" and cfg.policy.admission == "mh"


def test_baseline_policies_default_to_fifo_admission():
    for kind in ("static_partition", "mux_flexible", "qlm_timeshare"):
        assert PolicyConfig(kind=kind).admission == "fifo"


def test_example_config_loads():
    cfg = load_config(EXAMPLE)
    assert cfg.model_ids == ["chat-a", "chat-b", "code", "rare"]
    assert cfg.n_gpus == 2 and cfg.gpu_capacity_bytes == 80 * GB
    assert len(cfg.synth.profiles) == 4


@pytest.mark.parametrize("raw, field", [
    ({"models": []}, "models"),
    (minimal(policy={"kind": "roundrobin"}), "policy.kind"),
    (minimal(policy={"admission": "lifo"}), "policy.admission"),
    (minimal(gpus={"count": 0}), "gpus.count"),
    (minimal(gpus={"count": "two"}), "gpus.count"),
    (minimal(schema=7), "schema"),
    (minimal(scheduler={"activation_method": "magic"}), "scheduler.activation_method"),
    ({"models": [{"id": "a", "weight_gb": 90, "token_kv_kb": 128, "ttft_slo": 1, "tpot_slo": 1}]}, "models.a.weight_gb"),
    ({"models": [{"id": "a", "weight_gb": 9, "token_kv_kb": 4096, "ttft_slo": 1, "tpot_slo": 1}]}, "models.a.token_kv_kb"),
    ({"models": [{"id": "a", "weight_gb": 9, "token_kv_kb": 8, "ttft_slo": 1, "tpot_slo": 1, "tp": 2}]}, "models.a.tp"),
    ({"models": [{"id": "a", "weight_gb": 9, "token_kv_kb": 8, "tpot_slo": 1}]}, "models.a.ttft_slo"),
    (minimal(policy={"kind": "static_partition", "fractions": {"zz": 0.5}}), "policy.fractions"),
    (minimal(policy={"kind": "dedicated"}, gpus={"count": 1},
             models=[{"id": i, "weight_gb": 9, "token_kv_kb": 8, "ttft_slo": 1, "tpot_slo": 1} for i in "ab"]),
     "policy.kind"),
    ([1, 2], "config"),
])
def test_bad_fields_are_named(raw, field):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert field in str(exc.value)


def test_duplicate_model_ids_rejected():
    raw = minimal()
    raw["models"] = raw["models"] * 2
    with pytest.raises(ConfigError, match="duplicate"):
        config_from_dict(raw)


def test_invalid_yaml_is_a_config_error(tmp_path):
    f = tmp_path / "bad.yaml"
    f.write_text("models: [\n")
    with pytest.raises(ConfigError):
        load_config(f)


def test_relative_trace_path_resolved_against_config(tmp_path):
    import yaml
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump(minimal(trace={"path": "t.jsonl"})))
    assert load_config(f).trace_path == str(tmp_path / "t.jsonl")


def test_with_policy_replaces_only_the_policy():
    cfg = RunConfig(models=[ModelSpec("a", GB, 1024, 1.0, 0.1)], activation=ActivationParams())
    other = cfg.with_policy("qlm_timeshare", group_window=2.0)
    assert other.policy.kind == "qlm_timeshare" and other.policy.group_window == 2.0
    assert cfg.policy.kind == "prism" and other.models is cfg.models
