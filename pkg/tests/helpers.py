"""Small configurations shared by the simulator, policy and CLI tests."""
from kvshare.config import PolicyConfig, RunConfig
from kvshare.engine import GB, ModelSpec
from kvshare.workload import TraceEvent


def spec(mid, weight_gb=8, kv_kb=128, ttft=0.5, tpot=0.1):
    return ModelSpec(mid, int(weight_gb * GB), kv_kb * 1024, ttft, tpot)


def config(models, n_gpus=1, capacity_gb=40, kind="prism", **kw):
    pol = {k: kw.pop(k) for k in ("fractions", "colocation", "admission", "group_window") if k in kw}
    return RunConfig(models=models, n_gpus=n_gpus, gpu_capacity_bytes=int(capacity_gb * GB),
                     policy=PolicyConfig(kind=kind, **pol), **kw)


def events(*rows):
    """``rows`` of ``(t, model, prompt, output)``; sorted by time."""
    return sorted((TraceEvent(*r) for r in rows), key=lambda e: e.arrival_time)
