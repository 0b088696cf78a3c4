"""Analytical model of a serving engine.

An iteration costs ``alpha + beta * tokens`` where ``tokens`` counts the
decode tokens of the running batch plus the prefill chunk. KV slots come from
the engine's :class:`~kvshare.pagealloc.KvPool`; when a decode step cannot get
memory the most recently admitted request is preempted and recomputed later.
"""
from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .pagealloc import (PAGE_BYTES, AllocFailure, KvPool, PhysicalLedger, UsageError,
                        alloc_kvcache, free_kvcache)

GB = 1024**3

DEFAULT_ALPHA = 0.006
DEFAULT_BETA = 4e-6
DEFAULT_CHUNK = 512
DEFAULT_RESERVE_FRACTION = 0.05
DEFAULT_ENGINE_INIT_S = 5.0
DEFAULT_REALIGN_S = 0.1

# engine states
POOLED, ALIGNING, LOADING, SERVING, DRAINING = "pooled", "aligning", "loading", "serving", "draining"


@dataclass
class ModelSpec:
    model_id: str
    weight_bytes: int
    token_kv_bytes: int
    ttft_slo: float
    tpot_slo: float
    chunk_size: int = DEFAULT_CHUNK
    tp_degree: int = 1
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    prefill_speed: Optional[float] = None
    layout: Optional[str] = None

    def __post_init__(self):
        for name in ("weight_bytes", "token_kv_bytes", "ttft_slo", "tpot_slo", "chunk_size", "tp_degree"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{self.model_id}: {name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"{self.model_id}: iteration cost constants must be non-negative")

    @property
    def c(self) -> float:
        """Chunked-prefill speed in tokens/s."""
        if self.prefill_speed is not None:
            return self.prefill_speed
        return self.chunk_size / (self.alpha + self.beta * self.chunk_size)

    def prefill_time(self, prompt_tokens: int) -> float:
        return prompt_tokens / self.c

    def iteration_time(self, tokens: int) -> float:
        return self.alpha + self.beta * tokens

    @property
    def layout_key(self) -> str:
        return self.layout or self.model_id


# -- activation latency -----------------------------------------------------------


def _interp(anchors: Sequence[tuple], x: float) -> float:
    xs = [a for a, _ in anchors]
    ys = [b for _, b in anchors]
    if len(xs) == 1:
        return ys[0]
    i = bisect.bisect_right(xs, x)
    i = min(max(i, 1), len(xs) - 1)
    x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def default_activation_table() -> dict:
    """Weight-load latency anchors (bytes -> seconds) per (tp, method)."""
    return {
        (1, "parallel"): [(0, 0.4), (16 * GB, 0.7), (28 * GB, 1.3)],
        (1, "naive"): [(0, 0.5), (16 * GB, 4.97), (28 * GB, 7.1)],
        (8, "parallel"): [(0, 0.9), (140 * GB, 1.5)],
        (8, "naive"): [(0, 1.2), (140 * GB, 7.2)],
    }


@dataclass
class ActivationParams:
    table: dict = field(default_factory=default_activation_table)
    realign_s: float = DEFAULT_REALIGN_S
    engine_init_s: float = DEFAULT_ENGINE_INIT_S

    def load_latency(self, weight_bytes: float, tp_degree: int = 1, method: str = "parallel") -> float:
        """Weight-load time; interpolated linearly in bytes between anchors.

        A TP degree missing from the table reuses the nearest listed degree,
        evaluated at the weight size that gives the same bytes per rank.
        """
        if method not in ("parallel", "naive"):
            raise ValueError(f"unknown activation method {method!r}")
        tps = sorted({tp for tp, m in self.table if m == method})
        if not tps:
            raise ValueError(f"no activation anchors for method {method!r}")
        if tp_degree in tps:
            return _interp(self.table[(tp_degree, method)], weight_bytes)
        near = min(tps, key=lambda t: (abs(t - tp_degree), t))
        return _interp(self.table[(near, method)], weight_bytes * near / tp_degree)


# -- requests -----------------------------------------------------------------------


class Request:
    """A request as seen by the simulator. ``output`` is never read by schedulers."""

    __slots__ = ("req_id", "model_id", "arrival", "prompt", "output", "ttft_slo", "speed",
                 "prefill_target", "prefilled", "generated", "first_token", "completion",
                 "preemptions", "extents", "kv_tokens", "admit_seq", "gpu")

    def __init__(self, req_id, model_id, arrival, prompt, output, ttft_slo, speed):
        self.req_id = req_id
        self.model_id = model_id
        self.arrival = arrival
        self.prompt = prompt
        self.output = output
        self.ttft_slo = ttft_slo
        self.speed = speed
        self.prefill_target = prompt
        self.prefilled = 0
        self.generated = 0
        self.first_token: Optional[float] = None
        self.completion: Optional[float] = None
        self.preemptions = 0
        self.extents: list = []
        self.kv_tokens = 0
        self.admit_seq = -1
        self.gpu: Optional[int] = None

    @property
    def deadline(self) -> float:
        return self.arrival + self.ttft_slo

    @property
    def exec_estimate(self) -> float:
        return self.prompt / self.speed

    @property
    def in_prefill(self) -> bool:
        return self.prefilled < self.prefill_target

    def __repr__(self):
        return f"Request({self.req_id}, {self.model_id}, a={self.arrival:.3f}, p={self.prompt})"


@dataclass
class IterationOutcome:
    duration: float = 0.0
    chunk_tokens: int = 0
    decode_tokens: int = 0
    first_tokens: list = field(default_factory=list)
    completions: list = field(default_factory=list)
    preemptions: list = field(default_factory=list)


class Engine:
    """A serving-engine shell; bound to one model at a time."""

    def __init__(self, engine_id: int, gpu_id: int = 0, reserve_fraction: float = DEFAULT_RESERVE_FRACTION):
        self.engine_id = engine_id
        self.gpu_id = gpu_id
        self.status = POOLED
        self.spec: Optional[ModelSpec] = None
        self.pool: Optional[KvPool] = None
        self.ledger: Optional[PhysicalLedger] = None
        self.running: list[Request] = []
        self.waiting: deque[Request] = deque()
        self.layouts: set = set()
        self.reserve_fraction = reserve_fraction
        self._seq = 0

    # -- admission-side queries ------------------------------------------------
    @property
    def reserved_buffer_pages(self) -> int:
        if self.pool is None:
            return 0
        return int(math.ceil(self.reserve_fraction * self.pool.mapped_count))

    @property
    def has_work(self) -> bool:
        return bool(self.running or self.waiting)

    def pending_prefill_tokens(self) -> int:
        n = sum(r.prefill_target - r.prefilled for r in self.running if r.in_prefill)
        return n + sum(r.prefill_target - r.prefilled for r in self.waiting)

    def accepting(self) -> bool:
        """Whether some request of at least one token could start prefill next iteration."""
        if self.status != SERVING:
            return False
        pending = self.pending_prefill_tokens()
        if pending >= self.spec.chunk_size:
            return False
        decode = sum(1 for r in self.running if not r.in_prefill)
        need = 1 + pending + decode + self.reserved_buffer_pages * self.pool.tokens_per_page
        return self.pool.capacity_left() >= need

    def committed_pages(self) -> int:
        """Pages this engine will take next iteration for its prefill chunk, decode and reserve."""
        if self.status != SERVING:
            return 0
        decode = sum(1 for r in self.running if not r.in_prefill)
        chunk = min(self.pending_prefill_tokens(), self.spec.chunk_size)
        tokens = max(0, chunk + decode - self.pool.free_slots_in_mapped())
        return -(-tokens // self.pool.tokens_per_page) + self.reserved_buffer_pages

    def can_accept(self, req: Request) -> bool:
        """True if ``req`` would begin prefill in the very next iteration."""
        if self.status != SERVING:
            return False
        pending = self.pending_prefill_tokens()
        chunk = self.spec.chunk_size
        if pending >= chunk:
            return False
        decode = sum(1 for r in self.running if not r.in_prefill)
        need = min(req.prefill_target, chunk - pending) + pending + decode
        need += self.reserved_buffer_pages * self.pool.tokens_per_page
        return self.pool.capacity_left() >= need

    def submit(self, req: Request) -> None:
        self.waiting.append(req)

    # -- execution ----------------------------------------------------------
    def _alloc(self, r: Request, n: int) -> None:
        ext = self.pool.alloc_extents(n)
        r.extents.extend(ext)
        r.kv_tokens += n

    def release(self, r: Request) -> None:
        if r.extents:
            self.pool.free_extents(r.extents)
        r.extents = []
        r.kv_tokens = 0

    def _preempt(self, victim: Request, out: IterationOutcome) -> None:
        self.release(victim)
        self.running.remove(victim)
        victim.prefill_target = victim.prompt + victim.generated
        victim.prefilled = 0
        victim.preemptions += 1
        self.waiting.appendleft(victim)
        out.preemptions.append(victim)

    def step(self, now: float) -> IterationOutcome:
        """Run one iteration starting at ``now``; timestamps land at ``now + duration``."""
        if self.status not in (SERVING, DRAINING):
            raise UsageError(f"engine {self.engine_id} is {self.status}, cannot step")
        self.ledger.now = now
        out = IterationOutcome()
        spec = self.spec

        # decode: every request past prefill produces one token
        decoding = [r for r in self.running if not r.in_prefill]
        ext = []
        while decoding:
            try:
                ext = self.pool.alloc_extents(len(decoding))
                break
            except AllocFailure:
                victim = self.running[-1]
                self._preempt(victim, out)
                if victim in decoding:
                    decoding.remove(victim)
        slots = ((idx, s) for idx, ss in ext for s in ss)
        for r, (idx, s) in zip(decoding, slots):
            ext_r = r.extents
            if ext_r and ext_r[-1][0] == idx:
                ext_r[-1][1].append(s)
            else:
                ext_r.append((idx, [s]))
            r.kv_tokens += 1
        for r in decoding:
            r.generated += 1
        out.decode_tokens = len(decoding)

        # prefill: one chunk drawn from partially prefilled requests, then the queue head
        budget = spec.chunk_size
        finished_prefill = []
        for r in [r for r in self.running if r.in_prefill]:
            if budget <= 0:
                break
            piece = min(budget, r.prefill_target - r.prefilled)
            done = r.prefilled + piece == r.prefill_target
            extra = 1 if done and r.generated == 0 else 0
            try:
                self._alloc(r, piece + extra)
            except AllocFailure:
                budget = 0
                break
            r.prefilled += piece
            budget -= piece
            out.chunk_tokens += piece
            if done:
                finished_prefill.append(r)
        while budget > 0 and self.waiting and self.status == SERVING:
            r = self.waiting[0]
            piece = min(budget, r.prefill_target - r.prefilled)
            done = r.prefilled + piece == r.prefill_target
            extra = 1 if done and r.generated == 0 else 0
            reserve = self.reserved_buffer_pages * self.pool.tokens_per_page
            if self.pool.capacity_left() < piece + extra + reserve:
                break
            try:
                self._alloc(r, piece + extra)
            except AllocFailure:
                break
            self.waiting.popleft()
            r.admit_seq = self._seq
            self._seq += 1
            self.running.append(r)
            r.prefilled += piece
            budget -= piece
            out.chunk_tokens += piece
            if done:
                finished_prefill.append(r)

        tokens = out.decode_tokens + out.chunk_tokens
        if tokens == 0:
            return out
        out.duration = spec.iteration_time(tokens) + self.pool.take_map_cost()
        t_end = now + out.duration
        for r in finished_prefill:
            if r.generated == 0:
                r.generated = 1
                r.first_token = t_end
                out.first_tokens.append(r)
        for r in list(self.running):
            if not r.in_prefill and r.generated >= r.output:
                r.completion = t_end
                out.completions.append(r)
        return out

    def finish(self, out: IterationOutcome) -> None:
        """Release KV of requests that completed in ``out``."""
        for r in out.completions:
            self.release(r)
            self.running.remove(r)


# -- GPU with an engine pool -----------------------------------------------------------


class GpuNode:
    """One GPU: its physical ledger plus engines bound to models or pooled."""

    def __init__(self, gpu_id: int, capacity_bytes: int, page_bytes: int = PAGE_BYTES,
                 buffer_target: int = 8, map_latency: float = 0.0002, pool_size: int = 4,
                 reserve_fraction: float = DEFAULT_RESERVE_FRACTION):
        self.gpu_id = gpu_id
        self.capacity_bytes = capacity_bytes
        self.ledger = PhysicalLedger(capacity_bytes // page_bytes, gpu_id, buffer_target, map_latency, page_bytes)
        self.reserve_fraction = reserve_fraction
        self._next_engine = 0
        self.pooled: list[Engine] = [self._new_engine() for _ in range(pool_size)]
        self.engines: dict[str, Engine] = {}

    def _new_engine(self) -> Engine:
        e = Engine(self._next_engine, self.gpu_id, self.reserve_fraction)
        self._next_engine += 1
        return e

    def weight_bytes_resident(self) -> int:
        return self.ledger.weights_total * self.ledger.page_bytes


@dataclass
class ActivationOutcome:
    engine: Engine
    latency: float
    realigned: bool
    cold_engine: bool


def activate(gpu: GpuNode, spec: ModelSpec, method: str = "parallel",
             params: Optional[ActivationParams] = None, kv_cap_pages: Optional[int] = None,
             with_engine_init: bool = False) -> ActivationOutcome:
    """Bind ``spec`` to a pooled engine on ``gpu`` and claim its weight memory.

    The engine is left in LOADING; the caller flips it to SERVING once
    ``latency`` has elapsed. ``with_engine_init`` charges a full engine start
    even when a pooled engine exists (stop-and-restart swapping).
    """
    params = params or ActivationParams()
    if spec.model_id in gpu.engines:
        raise UsageError(f"{spec.model_id} already active on GPU {gpu.gpu_id}")
    gpu.ledger.reserve_weights(spec.model_id, spec.weight_bytes)  # AllocFailure if no room
    cold = not gpu.pooled
    eng = gpu.pooled.pop(0) if gpu.pooled else gpu._new_engine()
    latency = params.load_latency(spec.weight_bytes, spec.tp_degree, method)
    if cold or with_engine_init:
        latency += params.engine_init_s
    realigned = spec.layout_key not in eng.layouts
    if realigned:
        latency += params.realign_s
        eng.layouts.add(spec.layout_key)
    eng.spec = spec
    eng.ledger = gpu.ledger
    eng.pool = alloc_kvcache(gpu.ledger, spec.model_id, spec.token_kv_bytes,
                             max(1, gpu.ledger.capacity_pages), max_pages=kv_cap_pages)
    eng.status = LOADING
    gpu.engines[spec.model_id] = eng
    return ActivationOutcome(eng, latency, realigned, cold)


def deactivate(gpu: GpuNode, engine: Engine) -> None:
    """Return ``engine`` to the pool, unmapping its KV and dropping its weights."""
    if engine.status not in (SERVING, DRAINING, LOADING):
        raise UsageError(f"cannot deactivate engine in state {engine.status}")
    if engine.has_work:
        raise UsageError(f"engine for {engine.spec.model_id} still has live requests")
    free_kvcache(gpu.ledger, engine.pool)
    gpu.ledger.release_weights(engine.spec.model_id)
    del gpu.engines[engine.spec.model_id]
    engine.pool = None
    engine.spec = None
    engine.status = POOLED
    gpu.pooled.append(engine)


# -- steady-state throughput ---------------------------------------------------------


def throughput_of(kv_budget_bytes: int, spec: ModelSpec, workload_mix: Sequence[tuple] = ((512, 256),),
                  horizon: float = 30.0, warmup: float = 5.0, page_bytes: int = PAGE_BYTES) -> float:
    """Output tokens/s of one engine with a saturated queue and a capped KV pool."""
    worst = max(p + o for p, o in workload_mix)
    tpp = page_bytes // spec.token_kv_bytes
    budget_pages = kv_budget_bytes // page_bytes
    if budget_pages * tpp < worst + 1:
        raise ValueError(f"KV budget {kv_budget_bytes} B cannot hold one request of {worst} tokens")
    ledger = PhysicalLedger(budget_pages, buffer_target=0, map_latency=0.0, page_bytes=page_bytes)
    eng = Engine(0)
    eng.spec = spec
    eng.ledger = ledger
    eng.pool = alloc_kvcache(ledger, spec.model_id, spec.token_kv_bytes, budget_pages)
    eng.status = SERVING
    now, produced, rid = 0.0, 0, 0
    while now < horizon:
        while len(eng.waiting) < 4:
            p, o = workload_mix[rid % len(workload_mix)]
            eng.submit(Request(rid, spec.model_id, now, p, o, spec.ttft_slo, spec.c))
            rid += 1
        out = eng.step(now)
        if out.duration <= 0:
            raise RuntimeError("engine made no progress with a saturated queue")
        eng.finish(out)
        if now >= warmup:
            produced += out.decode_tokens + len(out.first_tokens)
        now += out.duration
    return produced / (now - warmup)
