"""Synthetic workloads that exercise the policies under memory pressure.

Each builder returns ``(RunConfig, profiles)``; draw a trace with
``synth_trace(profiles, seed)``.
"""
from __future__ import annotations

from .config import RunConfig
from .engine import GB, ModelSpec
from .workload import LengthDist, ModelProfile


def long_tail_mix(duration: float = 60.0, warmup: float = 10.0, hot_rate: float = 24.0,
                  warm_hot_rate: float = 5.0, tail_rate: float = 2.0, tail_warm_rate: float = 1.0,
                  burst: float = 8.0, weight_gb: float = 19.0, token_kv_kb: int = 512,
                  prompt: int = 256, output: int = 64, capacity_gb: float = 80.0,
                  pool: int = 8) -> tuple:
    """Eight models on two GPUs: two hot models and six long-tail ones.

    After a warm-up where every model sees light traffic, the hot models jump
    to ``hot_rate`` while each tail model goes idle apart from one staggered
    burst, so which models deserve memory changes over the run.
    """
    models, profiles = [], []
    lengths = (LengthDist(prompt, 0.5, 16, 4 * prompt), LengthDist(output, 0.5, 4, 4 * output))
    for i in range(8):
        hot = i < 2
        models.append(ModelSpec(f"m{i}", int(weight_gb * GB), token_kv_kb * 1024,
                                0.25 if hot else 0.5, 0.1))
        if hot:
            segs = [(warmup, warm_hot_rate), (duration - warmup, hot_rate)]
        else:
            start = warmup + 10 + (i - 2) * (duration - warmup - 10 - burst) / 5
            segs = [(warmup, tail_warm_rate), (start - warmup, 0.0), (burst, tail_rate),
                    (max(0.0, duration - start - burst), 0.0)]
        profiles.append(ModelProfile(f"m{i}", segs, *lengths))
    cfg = RunConfig(models=models, n_gpus=2, gpu_capacity_bytes=int(capacity_gb * GB), engine_pool_size=pool)
    return cfg, profiles


def two_phase(phase: float = 20.0, calm: tuple = (10.0, 2.0), surge: tuple = (2.0, 30.0),
              weight_gb: float = 8.0, token_kv_kb: int = 128, prompt: int = 1024, output: int = 256,
              capacity_gb: float = 40.0) -> tuple:
    """Two models on one GPU; model ``b`` surges in the second phase.

    ``calm`` and ``surge`` give the (a, b) request rates of each phase. The
    surge starts at ``phase`` seconds and ends at ``2 * phase``.
    """
    models = [ModelSpec(m, int(weight_gb * GB), token_kv_kb * 1024, 0.5, 0.1) for m in ("a", "b")]
    lengths = (LengthDist(prompt, 0.5, 16, 4 * prompt), LengthDist(output, 0.5, 4, 4 * output))
    profiles = [ModelProfile("a", [(phase, calm[0]), (phase, surge[0])], *lengths),
                ModelProfile("b", [(phase, calm[1]), (phase, surge[1])], *lengths)]
    return RunConfig(models=models, n_gpus=1, gpu_capacity_bytes=int(capacity_gb * GB)), profiles


def strict_and_loose(base_rate: float = 20.0, burst_rate: float = 40.0, bursts: int = 3,
                     burst_len: float = 4.0, gap: float = 6.0, loose_rate: float = 2.0,
                     strict_slo: float = 0.3, loose_slo: float = 1.0, strict_prompt: int = 1024,
                     strict_output: int = 16, loose_prompt: int = 4096, loose_output: int = 256,
                     weight_gb: float = 8.0, token_kv_kb: int = 128, capacity_gb: float = 23.0) -> tuple:
    """A tight-SLO short-prompt model bursting next to a loose-SLO long-prompt one.

    Both share one GPU whose free memory is only a few long requests deep.
    """
    models = [ModelSpec("strict", int(weight_gb * GB), token_kv_kb * 1024, strict_slo, 0.1),
              ModelSpec("loose", int(weight_gb * GB), token_kv_kb * 1024, loose_slo, 0.1)]
    segs = [(gap, base_rate)]
    for _ in range(bursts):
        segs += [(burst_len, burst_rate), (gap, base_rate)]
    duration = sum(d for d, _ in segs)
    profiles = [
        ModelProfile("strict", segs, LengthDist(strict_prompt, 0.3, 8, 4 * strict_prompt),
                     LengthDist(strict_output, 0.3, 2, 4 * strict_output)),
        ModelProfile("loose", [(duration, loose_rate)], LengthDist(loose_prompt, 0.3, 8, 4 * loose_prompt),
                     LengthDist(loose_output, 0.3, 2, 4 * loose_output)),
    ]
    return RunConfig(models=models, n_gpus=1, gpu_capacity_bytes=int(capacity_gb * GB)), profiles
