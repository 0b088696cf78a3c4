"""Multi-model request traces: parsing, scaling, synthesis and statistics."""
from __future__ import annotations

import json
import math
import statistics
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named sub-stream of a root seed.

    Each subsystem (``trace``, ``jitter``, ``fuzz``...) draws from its own
    stream, so changing how much one of them consumes leaves the others intact.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


class TraceError(ValueError):
    """Malformed or invalid trace content."""


@dataclass(frozen=True)
class TraceEvent:
    arrival_time: float
    model_id: str
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if not self.arrival_time >= 0:
            raise TraceError(f"negative arrival time {self.arrival_time}")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise TraceError("prompt and output lengths must be >= 1")

    def to_json(self) -> str:
        return json.dumps({"t": self.arrival_time, "model": self.model_id,
                           "prompt": self.prompt_tokens, "output": self.output_tokens})


def parse_trace(path) -> list[TraceEvent]:
    events: list[TraceEvent] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ev = TraceEvent(float(rec["t"]), str(rec["model"]), int(rec["prompt"]), int(rec["output"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
            if events and ev.arrival_time < events[-1].arrival_time:
                raise TraceError(f"{path}:{lineno}: arrival time goes backwards")
            events.append(ev)
    return events


def write_trace(events: Iterable[TraceEvent], path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def scale_trace(trace: Sequence[TraceEvent], factor: int, seed: int = 0,
                jitter: float = 1.0) -> list[TraceEvent]:
    """Replicate every event ``factor`` times.

    Copies beyond the first are shifted by a uniform offset in ``[0, jitter)``
    seconds; lengths are kept as in the original event.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"scale factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return list(trace)
    rng = rng_stream(seed, "jitter")
    offsets = rng.uniform(0.0, jitter, size=(len(trace), factor - 1))
    out = []
    for ev, offs in zip(trace, offsets):
        out.append(ev)
        for o in offs:
            out.append(TraceEvent(ev.arrival_time + float(o), ev.model_id, ev.prompt_tokens, ev.output_tokens))
    out.sort(key=lambda e: e.arrival_time)
    return out


# -- statistics -------------------------------------------------------------------


@dataclass
class ModelStats:
    requests: int
    cv: Optional[float]
    idle_intervals: list = field(default_factory=list)
    median_idle: Optional[float] = None
    idle_per_hour: Optional[float] = None


@dataclass
class WorkloadStats:
    models: dict
    duration: float
    idle_threshold: float

    def to_dict(self) -> dict:
        out = {}
        for mid, st in sorted(self.models.items()):
            out[mid] = {
                "requests": st.requests,
                "cv": st.cv,
                "idle_intervals": len(st.idle_intervals),
                "idle_over_threshold": sum(1 for g in st.idle_intervals if g > self.idle_threshold),
                "median_idle": st.median_idle,
                "idle_per_hour": st.idle_per_hour,
                "idle_available": st.median_idle is not None,
            }
        return out


def coefficient_of_variation(counts: Sequence[float]) -> Optional[float]:
    """Population sigma/mu; None when the mean is zero."""
    mu = statistics.fmean(counts) if counts else 0.0
    if mu <= 0:
        return None
    return statistics.pstdev(counts, mu) / mu


def compute_stats(trace: Sequence[TraceEvent], idle_threshold: float = 10.0,
                  bin_seconds: float = 60.0) -> WorkloadStats:
    """Per-model request counts, per-minute CV and idle-gap statistics.

    Minute bins start at the first arrival of the trace so that statistics do
    not change when the whole trace is shifted in time.
    """
    if not trace:
        raise TraceError("cannot compute statistics of an empty trace")
    t0 = min(e.arrival_time for e in trace)
    t1 = max(e.arrival_time for e in trace)
    duration = t1 - t0
    nbins = max(1, int(math.floor(duration / bin_seconds)) + 1)
    hours = duration / 3600.0
    by_model: dict[str, list[float]] = {}
    for e in trace:
        by_model.setdefault(e.model_id, []).append(e.arrival_time - t0)
    models = {}
    for mid, times in by_model.items():
        times.sort()
        counts = [0] * nbins
        for t in times:
            counts[min(nbins - 1, int(t // bin_seconds))] += 1
        gaps = [b - a for a, b in zip(times, times[1:])]
        st = ModelStats(requests=len(times), cv=coefficient_of_variation(counts), idle_intervals=gaps)
        if gaps:
            st.median_idle = statistics.median(gaps)
            long_gaps = sum(1 for g in gaps if g > idle_threshold)
            st.idle_per_hour = long_gaps / hours if hours > 0 else None
        models[mid] = st
    return WorkloadStats(models=models, duration=duration, idle_threshold=idle_threshold)


def popularity_split(stats: WorkloadStats, model_fraction: float) -> float:
    """Share of all requests sent to the least popular ``model_fraction`` of models."""
    counts = sorted(st.requests for st in stats.models.values())
    k = int(round(model_fraction * len(counts)))
    total = sum(counts)
    return sum(counts[:k]) / total if total else 0.0


def empirical_cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    vals = sorted(values)
    n = len(vals)
    return [(v, (i + 1) / n) for i, v in enumerate(vals)]


# -- synthesis --------------------------------------------------------------------


@dataclass
class LengthDist:
    """Lognormal token-length distribution given by its median and log-sigma."""

    median: float
    sigma: float = 0.0
    lo: int = 1
    hi: int = 1 << 20

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.sigma <= 0:
            vals = np.full(n, self.median)
        else:
            vals = rng.lognormal(math.log(self.median), self.sigma, size=n)
        return np.clip(np.rint(vals), max(1, self.lo), self.hi).astype(int)


@dataclass
class ModelProfile:
    """Piecewise-constant arrival rate: ``segments`` is a list of ``(duration_s, rate_per_s)``."""

    model_id: str
    segments: list
    prompt: LengthDist = field(default_factory=lambda: LengthDist(512))
    output: LengthDist = field(default_factory=lambda: LengthDist(128))


def synth_trace(profiles: Sequence[ModelProfile], seed: int = 0, rate_scale: float = 1.0) -> list[TraceEvent]:
    """Poisson arrivals per model and per constant-rate segment.

    Each model draws from its own stream derived from ``seed`` and its
    position, so adding a model does not perturb the others.
    """
    events: list[TraceEvent] = []
    for pos, prof in enumerate(profiles):
        rng = rng_stream(seed, "trace", pos)
        start = 0.0
        times: list[float] = []
        for dur, rate in prof.segments:
            if dur < 0 or rate < 0 or not math.isfinite(dur) or not math.isfinite(rate):
                raise ValueError(f"bad segment ({dur}, {rate}) for {prof.model_id}")
            lam = rate * rate_scale
            if lam > 0 and dur > 0:
                n = rng.poisson(lam * dur)
                times.extend(np.sort(rng.uniform(start, start + dur, size=n)).tolist())
            start += dur
        n = len(times)
        prompts = prof.prompt.sample(rng, n)
        outputs = prof.output.sample(rng, n)
        events.extend(TraceEvent(t, prof.model_id, int(p), int(o)) for t, p, o in zip(times, prompts, outputs))
    events.sort(key=lambda e: (e.arrival_time, e.model_id))
    return events


def profile_from_dict(d: dict) -> ModelProfile:
    def dist(x, default):
        if x is None:
            return LengthDist(default)
        if isinstance(x, (int, float)):
            return LengthDist(float(x))
        return LengthDist(**x)

    return ModelProfile(
        model_id=str(d["model"]),
        segments=[(float(a), float(b)) for a, b in d["segments"]],
        prompt=dist(d.get("prompt"), 512),
        output=dist(d.get("output"), 128),
    )
