"""Run configuration: dataclasses, defaults and YAML loading.

Every tunable default lives here so the CLI, the simulator and the tests
agree on one value.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .engine import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_CHUNK, DEFAULT_ENGINE_INIT_S,
                     DEFAULT_REALIGN_S, DEFAULT_RESERVE_FRACTION, GB, ActivationParams, ModelSpec,
                     default_activation_table)
from .pagealloc import DEFAULT_BUFFER_PAGES, DEFAULT_MAP_LATENCY_S, PAGE_BYTES
from .workload import profile_from_dict

SCHEMA_VERSION = 1

POLICY_KINDS = ("prism", "static_partition", "mux_flexible", "qlm_timeshare", "dedicated")
DEFAULT_ADMISSION = {
    "prism": "mh",
    "dedicated": "mh",
    "static_partition": "fifo",
    "mux_flexible": "fifo",
    "qlm_timeshare": "fifo",
}


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


class StartupError(ConfigError):
    """The configuration cannot be simulated, for example a model fits nowhere."""


@dataclass
class SchedulerParams:
    tau: float = 0.05
    idle_threshold: float = 10.0
    tick: float = 10.0
    rate_window: float = 60.0
    pressure_free_fraction: float = 0.10
    activation_method: str = "parallel"
    enable_placement: bool = True
    enable_eviction: bool = True


@dataclass
class PolicyConfig:
    kind: str = "prism"
    admission: Optional[str] = None
    # static_partition: model -> fraction of its GPU (weights + KV)
    fractions: Optional[dict] = None
    # mux_flexible / static_partition / dedicated: model -> gpu; computed from the first window if None
    colocation: Optional[dict] = None
    # qlm_timeshare: requests of one model arriving within this window form a group
    group_window: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"policy.kind: unknown policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.admission is None:
            self.admission = DEFAULT_ADMISSION[self.kind]
        if self.admission not in ("mh", "fifo"):
            raise ConfigError(f"policy.admission: expected 'mh' or 'fifo', got {self.admission!r}")


@dataclass
class SynthSpec:
    profiles: list
    rate_scale: float = 1.0


@dataclass
class RunConfig:
    models: list
    n_gpus: int = 1
    gpu_capacity_bytes: int = 80 * GB
    page_bytes: int = PAGE_BYTES
    engine_pool_size: int = 4
    buffer_pages: int = DEFAULT_BUFFER_PAGES
    map_latency: float = DEFAULT_MAP_LATENCY_S
    reserve_fraction: float = DEFAULT_RESERVE_FRACTION
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sched: SchedulerParams = field(default_factory=SchedulerParams)
    activation: ActivationParams = field(default_factory=ActivationParams)
    slo_scale: float = 1.0
    tpot_slo_scale: float = 1.0
    seed: int = 0
    trace_path: Optional[str] = None
    synth: Optional[SynthSpec] = None
    trace_scale: int = 1
    sample_period: float = 0.5
    iteration_log: bool = False
    alloc_log: bool = False

    def model(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    @property
    def model_ids(self) -> list:
        return [m.model_id for m in self.models]

    def validate(self) -> None:
        if not self.models:
            raise ConfigError("models: at least one model is required")
        ids = self.model_ids
        if len(set(ids)) != len(ids):
            raise ConfigError("models: duplicate model ids")
        if self.n_gpus < 1:
            raise ConfigError("gpus.count: must be >= 1")
        if self.gpu_capacity_bytes <= 0:
            raise ConfigError("gpus.capacity_gb: must be positive")
        if self.slo_scale <= 0 or self.tpot_slo_scale <= 0:
            raise ConfigError("slo_scale: must be positive")
        for m in self.models:
            if m.token_kv_bytes > self.page_bytes:
                raise ConfigError(f"models.{m.model_id}.token_kv_kb: larger than a page")
            if m.weight_bytes >= self.gpu_capacity_bytes:
                raise ConfigError(f"models.{m.model_id}.weight_gb: does not fit on a GPU")
            if m.tp_degree != 1:
                raise ConfigError(f"models.{m.model_id}.tp: the simulator runs tp=1 models only")
        if self.sched.activation_method not in ("parallel", "naive"):
            raise ConfigError("scheduler.activation_method: expected 'parallel' or 'naive'")
        if self.policy.kind == "dedicated" and self.n_gpus < len(self.models):
            raise ConfigError("policy.kind: dedicated needs one GPU per model")
        if self.policy.fractions:
            unknown = set(self.policy.fractions) - set(ids)
            if unknown:
                raise ConfigError(f"policy.fractions: unknown model(s) {sorted(unknown)}")
        if self.policy.colocation:
            unknown = set(self.policy.colocation) - set(ids)
            if unknown:
                raise ConfigError(f"policy.colocation: unknown model(s) {sorted(unknown)}")

    def with_policy(self, kind: str, **kw) -> "RunConfig":
        return replace(self, policy=PolicyConfig(kind=kind, **kw))


# -- YAML ------------------------------------------------------------------------------


def _get(d: dict, key: str, default, where: str, typ=float):
    if d is None or key not in d or d[key] is None:
        return default
    try:
        return typ(d[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected {typ.__name__}, got {d[key]!r}") from None


def _model_from_dict(d: dict, engine_defaults: dict) -> ModelSpec:
    if "id" not in d:
        raise ConfigError("models[]: every model needs an 'id'")
    mid = str(d["id"])
    where = f"models.{mid}"
    eng = dict(engine_defaults)
    eng.update({k: v for k, v in d.items() if v is not None})
    try:
        return ModelSpec(
            model_id=mid,
            weight_bytes=int(_get(d, "weight_gb", None, where) * GB) if "weight_gb" in d else _req(d, "weight_bytes", where),
            token_kv_bytes=int(_get(d, "token_kv_kb", None, where) * 1024) if "token_kv_kb" in d else _req(d, "token_kv_bytes", where),
            ttft_slo=_get(d, "ttft_slo", None, where) or _req(d, "ttft_slo", where),
            tpot_slo=_get(d, "tpot_slo", None, where) or _req(d, "tpot_slo", where),
            chunk_size=_get(eng, "chunk", DEFAULT_CHUNK, where, int),
            tp_degree=_get(d, "tp", 1, where, int),
            alpha=_get(eng, "alpha_ms", DEFAULT_ALPHA * 1e3, where) / 1e3,
            beta=_get(eng, "beta_us", DEFAULT_BETA * 1e6, where) / 1e6,
            prefill_speed=_get(d, "prefill_speed", None, where),
            layout=d.get("layout"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def _req(d, key, where):
    if key not in d:
        raise ConfigError(f"{where}.{key}: required")
    return int(d[key]) if key.endswith("bytes") else float(d[key])


def config_from_dict(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    schema = raw.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"schema: unsupported version {schema!r}")
    engine_defaults = raw.get("engine") or {}
    models = [_model_from_dict(m, engine_defaults) for m in raw.get("models") or []]
    g = raw.get("gpus") or {}
    s = raw.get("scheduler") or {}
    a = raw.get("activation") or {}
    p = raw.get("policy") or {}
    o = raw.get("outputs") or {}
    sched = SchedulerParams(
        tau=_get(s, "tau", SchedulerParams.tau, "scheduler"),
        idle_threshold=_get(s, "idle_threshold", SchedulerParams.idle_threshold, "scheduler"),
        tick=_get(s, "tick", SchedulerParams.tick, "scheduler"),
        rate_window=_get(s, "rate_window", SchedulerParams.rate_window, "scheduler"),
        pressure_free_fraction=_get(s, "pressure_free_fraction", SchedulerParams.pressure_free_fraction, "scheduler"),
        activation_method=str(s.get("activation_method", SchedulerParams.activation_method)),
        enable_placement=bool(s.get("enable_placement", True)),
        enable_eviction=bool(s.get("enable_eviction", True)),
    )
    activation = ActivationParams(
        table=default_activation_table(),
        realign_s=_get(a, "realign_s", DEFAULT_REALIGN_S, "activation"),
        engine_init_s=_get(a, "engine_init_s", DEFAULT_ENGINE_INIT_S, "activation"),
    )
    policy = PolicyConfig(
        kind=str(p.get("kind", "prism")),
        admission=p.get("admission"),
        fractions=p.get("fractions"),
        colocation=p.get("colocation"),
        group_window=_get(p, "group_window", 1.0, "policy"),
    )
    trace = raw.get("trace") or {}
    trace_path = trace.get("path")
    if trace_path and base_dir is not None and not Path(trace_path).is_absolute():
        trace_path = str(base_dir / trace_path)
    synth = None
    if trace.get("synth"):
        sy = trace["synth"]
        try:
            synth = SynthSpec(profiles=[profile_from_dict(x) for x in sy.get("models", [])],
                              rate_scale=float(sy.get("rate_scale", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"trace.synth: {exc}") from None
    cfg = RunConfig(
        models=models,
        n_gpus=_get(g, "count", 1, "gpus", int),
        gpu_capacity_bytes=int(_get(g, "capacity_gb", 80, "gpus") * GB),
        page_bytes=int(_get(g, "page_mb", PAGE_BYTES / 2**20, "gpus") * 2**20),
        engine_pool_size=_get(g, "engine_pool", 4, "gpus", int),
        buffer_pages=_get(g, "buffer_pages", DEFAULT_BUFFER_PAGES, "gpus", int),
        map_latency=_get(g, "map_latency_ms", DEFAULT_MAP_LATENCY_S * 1e3, "gpus") / 1e3,
        reserve_fraction=_get(s, "reserve_fraction", DEFAULT_RESERVE_FRACTION, "scheduler"),
        policy=policy,
        sched=sched,
        activation=activation,
        slo_scale=_get(raw, "slo_scale", 1.0, "config"),
        tpot_slo_scale=_get(raw, "tpot_slo_scale", 1.0, "config"),
        seed=_get(raw, "seed", 0, "config", int),
        trace_path=trace_path,
        synth=synth,
        trace_scale=_get(trace, "scale", 1, "trace", int),
        sample_period=_get(o, "sample_period", 0.5, "outputs"),
        iteration_log=bool(o.get("iteration_log", False)),
        alloc_log=bool(o.get("alloc_log", False)),
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)
