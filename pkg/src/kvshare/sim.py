"""Deterministic discrete-event simulation of a multi-model GPU cluster.

Time is an integer count of microseconds. Events at the same instant are
ordered by kind (arrivals first) and then by insertion sequence, so a run is
a pure function of its configuration, trace and seed.

Iterations of the engines sharing one GPU are serialised: the GPU runs one
iteration at a time, rotating round-robin over engines that have work.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .admission import dispatch, moore_hodgson
from .config import SCHEMA_VERSION, ConfigError, RunConfig
from .engine import (DRAINING, GB, LOADING, SERVING, GpuNode, IterationOutcome, Request, activate,
                     deactivate)
from .pagealloc import AllocFailure
from .policies import make_policy
from .workload import TraceEvent, parse_trace, scale_trace, synth_trace

US = 1_000_000
# minimum spacing of memory-pressure triggered eviction checks on one GPU
PRESSURE_CHECK_GAP_US = US

# event kinds, in same-timestamp priority order
ARRIVAL, ITERATION_DONE, ACTIVATION_DONE, SCHEDULER_TICK, EVICTION_CHECK, BUFFER_REFILL, SAMPLE = range(7)
KIND_NAMES = ("arrival", "iteration_done", "activation_done", "scheduler_tick",
              "eviction_check", "buffer_refill", "sample")


def to_us(t: float) -> int:
    return int(round(t * US))


def dur_us(seconds: float) -> int:
    return max(1, int(math.ceil(seconds * US - 1e-6)))


class SharedHeadroom:
    """Free GPU pages not yet promised to any engine during one dispatch round."""

    def __init__(self, node: GpuNode, engines):
        self.pages = node.ledger.available_pages - sum(e.committed_pages() for e in engines)

    def claim(self, eng, r: Request) -> bool:
        room = eng.spec.chunk_size - eng.pending_prefill_tokens()
        need = -(-min(r.prefill_target, room) // eng.pool.tokens_per_page)
        if need > self.pages:
            return False
        self.pages -= need
        return True


class GpuRuntime:
    """Per-GPU simulator state around a :class:`GpuNode`."""

    def __init__(self, node: GpuNode):
        self.node = node
        self.queue: list[Request] = []       # GPU-level queue (deadline admission)
        self.hold: dict[str, list] = {}       # requests waiting for a loading engine (FIFO admission)
        self.busy = False
        self.busy_until = 0
        self.last_engine = -1
        self.refill_pending = False
        self.last_pressure_check = -PRESSURE_CHECK_GAP_US
        self.resident: Optional[str] = None   # time-sharing policy only
        self.swapping = False
        self.series: list = []                # (t, mapped_kv_bytes, kvpr, cumulative_kv_byte_seconds)

    @property
    def gpu_id(self) -> int:
        return self.node.gpu_id

    def queued_for(self, model_id: str) -> int:
        n = sum(1 for r in self.queue if r.model_id == model_id)
        n += len(self.hold.get(model_id, ()))
        eng = self.node.engines.get(model_id)
        if eng is not None:
            n += len(eng.waiting)
        return n


@dataclass
class SimMetrics:
    """Everything a run produces; per-request latencies allow post-hoc SLO rescaling."""

    policy: str
    seed: int
    models: dict                  # model -> {"ttft_slo", "tpot_slo"}
    requests: list                # dicts, ordered by req_id
    counts: dict
    throughput: dict
    series: dict                  # gpu -> list of (t, mapped_kv_bytes, kvpr, cum_kv_byte_seconds)
    kv_byte_seconds: dict         # gpu -> integral of mapped KV bytes over the run
    makespan: float
    slo_scale: float = 1.0
    tpot_slo_scale: float = 1.0
    queue_log: list = field(default_factory=list)
    plan_log: list = field(default_factory=list)
    iteration_log: list = field(default_factory=list)
    alloc_log: list = field(default_factory=list)

    def attainment(self, slo_scale: Optional[float] = None, tpot_slo_scale: Optional[float] = None) -> dict:
        return attainment(self, slo_scale, tpot_slo_scale)

    def summary(self, slo_scale: Optional[float] = None) -> dict:
        att = self.attainment(slo_scale)
        return {
            "schema": SCHEMA_VERSION,
            "policy": self.policy,
            "seed": self.seed,
            "slo_scale": self.slo_scale if slo_scale is None else slo_scale,
            "attainment": att,
            "throughput": self.throughput,
            "counts": self.counts,
            "kv_byte_seconds": {str(k): v for k, v in self.kv_byte_seconds.items()},
            "makespan": self.makespan,
            "requests": len(self.requests),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _met(value: Optional[float], limit: float) -> bool:
    return value is not None and value <= limit + 1e-9


def attainment(metrics: SimMetrics, slo_scale: Optional[float] = None,
               tpot_slo_scale: Optional[float] = None) -> dict:
    """Per-model and overall fraction of requests meeting scaled SLOs.

    Requests with a single output token have no TPOT and are left out of the
    TPOT fraction.
    """
    ts = metrics.slo_scale if slo_scale is None else slo_scale
    ps = metrics.tpot_slo_scale if tpot_slo_scale is None else tpot_slo_scale
    per: dict = {m: [0, 0, 0, 0] for m in metrics.models}
    for r in metrics.requests:
        slo = metrics.models[r["model"]]
        acc = per[r["model"]]
        acc[0] += 1
        acc[1] += _met(r["ttft"], ts * slo["ttft_slo"])
        if r["tpot"] is not None:
            acc[2] += 1
            acc[3] += _met(r["tpot"], ps * slo["tpot_slo"])
    out = {}
    tot = [0, 0, 0, 0]
    for m, (n, ok, nt, okt) in per.items():
        out[m] = {"ttft": ok / n if n else 1.0, "tpot": okt / nt if nt else 1.0, "requests": n}
        tot = [a + b for a, b in zip(tot, (n, ok, nt, okt))]
    out["_all"] = {"ttft": tot[1] / tot[0] if tot[0] else 1.0,
                   "tpot": tot[3] / tot[2] if tot[2] else 1.0, "requests": tot[0]}
    return out


def _union_length(intervals: list) -> float:
    total, end = 0.0, -math.inf
    for a, b in sorted(intervals):
        if b <= end:
            continue
        total += b - max(a, end)
        end = b
    return total


def build_requests(cfg: RunConfig, trace: Sequence[TraceEvent]) -> list[Request]:
    specs = {m.model_id: m for m in cfg.models}
    reqs = []
    for i, ev in enumerate(trace):
        spec = specs[ev.model_id]
        reqs.append(Request(i, ev.model_id, ev.arrival_time, ev.prompt_tokens, ev.output_tokens,
                            spec.ttft_slo * cfg.slo_scale, spec.c))
    return reqs


class Simulator:
    def __init__(self, cfg: RunConfig, trace: Sequence[TraceEvent], seed: Optional[int] = None,
                 keep_event_log: bool = False):
        cfg.validate()
        if not trace:
            raise ConfigError("trace: no requests")
        unknown = sorted({e.model_id for e in trace} - set(cfg.model_ids))
        if unknown:
            raise ConfigError(f"trace: unknown model(s) {', '.join(unknown)}")
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.trace = list(trace)
        self.specs = {m.model_id: m for m in cfg.models}
        self.gpus = [GpuRuntime(GpuNode(i, cfg.gpu_capacity_bytes, cfg.page_bytes, cfg.buffer_pages,
                                        cfg.map_latency, cfg.engine_pool_size, cfg.reserve_fraction))
                     for i in range(cfg.n_gpus)]
        if cfg.alloc_log:
            for g in self.gpus:
                g.node.ledger.log = []
        self.requests = build_requests(cfg, self.trace)
        self.policy = make_policy(cfg)
        self.mh = cfg.policy.admission == "mh"
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.loc: dict[str, int] = {}
        self.unplaced: dict[str, list] = {}
        self.rate = {m: 0.0 for m in self.specs}
        self._window_counts = {m: 0 for m in self.specs}
        self.last_active = {m: 0.0 for m in self.specs}
        self.counts = {"migrations": 0, "evictions": 0, "activations": 0, "preemptions": 0, "swaps": 0}
        self.remaining = len(self.requests)
        self.plan_log: list = []
        self.queue_log: list = []
        self.iteration_log: list = []
        self.event_log: Optional[list] = [] if keep_event_log else None

    # -- clock and events -------------------------------------------------------------
    @property
    def now_s(self) -> float:
        return self.now / US

    def push(self, t: int, kind: int, payload=None) -> None:
        if t < self.now:
            raise RuntimeError(f"event {KIND_NAMES[kind]} scheduled in the past ({t} < {self.now})")
        heapq.heappush(self._heap, (t, kind, self._seq, payload))
        self._seq += 1

    # -- rates --------------------------------------------------------------------------
    def first_window_rates(self) -> dict:
        window = self.cfg.sched.rate_window
        t0 = self.trace[0].arrival_time
        counts = {m: 0 for m in self.specs}
        for ev in self.trace:
            if ev.arrival_time - t0 >= window:
                break
            counts[ev.model_id] += 1
        return {m: c / window for m, c in counts.items()}

    def _update_rates(self) -> None:
        tick = self.cfg.sched.tick
        a = 1.0 - math.exp(-tick / self.cfg.sched.rate_window)
        for m in self.rate:
            self.rate[m] = a * (self._window_counts[m] / tick) + (1 - a) * self.rate[m]
            self._window_counts[m] = 0

    def gpu_kvpr(self, g: int) -> float:
        node = self.gpus[g].node
        w = 0.0
        for m, eng in node.engines.items():
            if eng.status != DRAINING:
                w += self.rate[m] / self.specs[m].ttft_slo
        shared = (node.capacity_bytes - node.weight_bytes_resident()) / GB
        return w / shared if shared > 0 else math.inf

    # -- mechanisms used by policies ---------------------------------------------------------
    def engine_for(self, model_id: str):
        g = self.loc.get(model_id)
        if g is None:
            return None
        return self.gpus[g].node.engines.get(model_id)

    def model_busy(self, model_id: str) -> bool:
        g = self.loc.get(model_id)
        if g is None:
            return False
        gr = self.gpus[g]
        eng = gr.node.engines.get(model_id)
        if eng is None or eng.status != SERVING or eng.has_work:
            return True
        return gr.queued_for(model_id) > 0

    def start_activation(self, g: int, model_id: str, method: str, with_engine_init: bool = False,
                         kv_cap_pages: Optional[int] = None, warm: bool = False) -> bool:
        gr = self.gpus[g]
        spec = self.specs[model_id]
        if model_id in gr.node.engines:
            return False
        gr.node.ledger.advance(self.now_s)
        try:
            outcome = activate(gr.node, spec, method, self.cfg.activation, kv_cap_pages, with_engine_init)
        except AllocFailure:
            return False
        self.loc[model_id] = g
        self.last_active[model_id] = self.now_s
        if warm:
            outcome.engine.status = SERVING
        else:
            self.counts["activations"] += 1
            self.push(self.now + dur_us(outcome.latency), ACTIVATION_DONE, (g, outcome.engine))
        return True

    def stop_engine(self, g: int, eng) -> None:
        gr = self.gpus[g]
        gr.node.ledger.advance(self.now_s)
        model_id = eng.spec.model_id
        deactivate(gr.node, eng)
        if self.loc.get(model_id) == g:
            del self.loc[model_id]

    def evict(self, g: int, model_id: str) -> None:
        eng = self.gpus[g].node.engines[model_id]
        self.stop_engine(g, eng)
        self.counts["evictions"] += 1

    def migrate(self, model_id: str, src: int, dst: int) -> bool:
        """Start serving ``model_id`` on ``dst``; the copy on ``src`` drains and then stops."""
        old = self.gpus[src].node.engines.get(model_id)
        if old is None or old.status != SERVING:
            return False
        if not self.start_activation(dst, model_id, self.cfg.sched.activation_method):
            return False
        self.counts["migrations"] += 1
        old.status = DRAINING
        moved = [r for r in old.waiting]
        old.waiting.clear()
        src_rt = self.gpus[src]
        keep = []
        for r in src_rt.queue:
            (moved if r.model_id == model_id else keep).append(r)
        src_rt.queue = keep
        moved.extend(src_rt.hold.pop(model_id, []))
        moved.sort(key=lambda r: (r.arrival, r.req_id))
        for r in moved:
            self._deliver(dst, r)
        if not old.has_work:
            self.stop_engine(src, old)
        return True

    def enqueue(self, g: int, r: Request) -> None:
        self._deliver(g, r)
        self.schedule_gpu(g)

    def _deliver(self, g: int, r: Request) -> None:
        gr = self.gpus[g]
        r.gpu = g
        if self.mh:
            gr.queue.append(r)
            return
        eng = gr.node.engines.get(r.model_id)
        if eng is not None and eng.status == SERVING:
            eng.submit(r)
        else:
            gr.hold.setdefault(r.model_id, []).append(r)

    def hold_unplaced(self, r: Request) -> None:
        self.unplaced.setdefault(r.model_id, []).append(r)

    def release_unplaced(self, model_id: str) -> None:
        g = self.loc[model_id]
        for r in self.unplaced.pop(model_id, []):
            self._deliver(g, r)
        self.schedule_gpu(g)

    # -- GPU-local scheduling and execution ------------------------------------------------
    def schedule_gpu(self, g: int) -> None:
        gr = self.gpus[g]
        if self.mh and gr.queue:
            serving = {m: e for m, e in gr.node.engines.items() if e.status == SERVING}
            if any(e.accepting() for e in serving.values()):
                start = max(self.now, gr.busy_until) / US
                cand, late = [], []
                for r in gr.queue:
                    if r.model_id in serving:
                        # a request that misses its deadline even when run alone is always
                        # the removal victim, so it can skip the selection pass
                        (cand if start + r.exec_estimate <= r.deadline else late).append(r)
                if cand or late:
                    decision = moore_hodgson(cand, start)
                    decision.deferred.extend(late)
                    sent = dispatch(decision, serving,
                                    headroom=SharedHeadroom(gr.node, serving.values()))
                    if sent:
                        gone = {r.req_id for r in sent}
                        gr.queue = [r for r in gr.queue if r.req_id not in gone]
        if not gr.busy:
            self._start_iteration(g)

    def _runnable(self, gr: GpuRuntime) -> list:
        engs = [e for e in gr.node.engines.values() if e.status in (SERVING, DRAINING) and e.has_work]
        engs.sort(key=lambda e: e.engine_id)
        if not engs:
            return engs
        # rotate so the engine after the last one served comes first
        k = next((i for i, e in enumerate(engs) if e.engine_id > gr.last_engine), 0)
        return engs[k:] + engs[:k]

    def _start_iteration(self, g: int) -> None:
        gr = self.gpus[g]
        engs = self._runnable(gr)
        if not engs:
            return
        for _ in range(1 + sum(len(e.running) for e in engs)):
            for eng in engs:
                out = eng.step(self.now_s)
                self.counts["preemptions"] += len(out.preemptions)
                if out.duration > 0:
                    self._launch(gr, eng, out)
                    return
            # nothing progressed: memory is held by stalled prefills; preempt the newest one
            stalled = [e for e in engs if e.running]
            if not stalled:
                return
            victim_eng = max(stalled, key=lambda e: e.running[-1].admit_seq)
            victim_eng._preempt(victim_eng.running[-1], IterationOutcome())
            self.counts["preemptions"] += 1

    def _launch(self, gr: GpuRuntime, eng, out) -> None:
        end = self.now + dur_us(out.duration)
        end_s = end / US
        for r in out.first_tokens:
            r.first_token = end_s
        for r in out.completions:
            r.completion = end_s
        gr.busy = True
        gr.busy_until = end
        gr.last_engine = eng.engine_id
        if self.cfg.iteration_log:
            self.iteration_log.append((self.now_s, gr.gpu_id, eng.spec.model_id,
                                       len(eng.running), out.chunk_tokens,
                                       (end - self.now) / 1e3, len(out.preemptions)))
        self.push(end, ITERATION_DONE, (gr.gpu_id, eng, out))

    # -- handlers ------------------------------------------------------------------------
    def _on_arrival(self, r: Request) -> None:
        self._window_counts[r.model_id] += 1
        self.last_active[r.model_id] = self.now_s
        self.policy.route(self, r)

    def _on_iteration_done(self, g: int, eng, out) -> None:
        gr = self.gpus[g]
        gr.node.ledger.advance(self.now_s)
        eng.finish(out)
        if out.completions:
            self.remaining -= len(out.completions)
            self.last_active[eng.spec.model_id] = self.now_s
        gr.busy = False
        if eng.status == DRAINING and not eng.has_work:
            self.stop_engine(g, eng)
        self._maybe_refill(g)
        self._pressure_signal(g)
        self.policy.on_progress(self, g)
        self.schedule_gpu(g)

    def _pressure_signal(self, g: int) -> None:
        """Run an extra eviction check as soon as a GPU runs short of free memory."""
        if not self.policy.uses_ticks:
            return
        gr = self.gpus[g]
        led = gr.node.ledger
        if led.available_pages >= self.cfg.sched.pressure_free_fraction * led.capacity_pages:
            return
        if self.now - gr.last_pressure_check < PRESSURE_CHECK_GAP_US:
            return
        gr.last_pressure_check = self.now
        self.push(self.now, EVICTION_CHECK, g)

    def _on_activation_done(self, g: int, eng) -> None:
        if eng.status != LOADING:
            return
        eng.status = SERVING
        gr = self.gpus[g]
        model_id = eng.spec.model_id
        self.last_active[model_id] = self.now_s
        for r in gr.hold.pop(model_id, []):
            eng.submit(r)
        gr.swapping = False
        self.policy.on_progress(self, g)
        self.schedule_gpu(g)

    def _maybe_refill(self, g: int) -> None:
        gr = self.gpus[g]
        led = gr.node.ledger
        deficit = min(led.buffer_target - led.buffer_pages, led.free_pages)
        if deficit > 0 and not gr.refill_pending:
            gr.refill_pending = True
            self.push(self.now + dur_us(led.refill_latency(deficit)), BUFFER_REFILL, g)

    def _on_buffer_refill(self, g: int) -> None:
        gr = self.gpus[g]
        gr.refill_pending = False
        gr.node.ledger.advance(self.now_s)
        gr.node.ledger.refill_buffer()
        self.schedule_gpu(g)

    def sample(self, g: Optional[int] = None) -> None:
        t = self.now_s
        for gr in (self.gpus if g is None else [self.gpus[g]]):
            led = gr.node.ledger
            cum = led.mapped_page_seconds(t) * led.page_bytes
            gr.series.append((t, led.kv_bytes(), self.gpu_kvpr(gr.gpu_id), cum))
            if g is None:
                for m in sorted(gr.node.engines):
                    self.queue_log.append((t, gr.gpu_id, m, gr.queued_for(m)))

    def _recurring(self) -> bool:
        return self.remaining > 0

    # -- main loop ------------------------------------------------------------------------
    def run(self) -> SimMetrics:
        self.policy.setup(self)
        for gr in self.gpus:
            gr.node.ledger.refill_buffer()
        for r in self.requests:
            self.push(to_us(r.arrival), ARRIVAL, r)
        tick = to_us(self.cfg.sched.tick)
        # rates are measured under every policy so KVPR series are comparable
        self.push(tick, SCHEDULER_TICK)
        if self.policy.uses_ticks:
            self.push(tick, EVICTION_CHECK)
        period = to_us(self.cfg.sample_period)
        self.push(0, SAMPLE)
        while self._heap:
            t, kind, _, payload = heapq.heappop(self._heap)
            self.now = t
            if self.event_log is not None:
                self.event_log.append(self._describe(t, kind, payload))
            if kind == ARRIVAL:
                self._on_arrival(payload)
            elif kind == ITERATION_DONE:
                self._on_iteration_done(*payload)
            elif kind == ACTIVATION_DONE:
                self._on_activation_done(*payload)
            elif kind == SCHEDULER_TICK:
                self._update_rates()
                self.policy.tick(self)
                if self._recurring():
                    self.push(t + tick, SCHEDULER_TICK)
            elif kind == EVICTION_CHECK:
                self.policy.eviction_check(self)
                if payload is None and self._recurring():
                    self.push(t + tick, EVICTION_CHECK)
            elif kind == BUFFER_REFILL:
                self._on_buffer_refill(payload)
            elif kind == SAMPLE:
                self.sample()
                if self._recurring():
                    self.push(t + period, SAMPLE)
            if not self.remaining:
                # the run ends with its last completion; pending housekeeping is dropped
                break
        if self.remaining:
            raise RuntimeError(f"simulation stalled with {self.remaining} unfinished request(s)")
        self.sample()
        return self._metrics()

    @staticmethod
    def _describe(t: int, kind: int, payload) -> tuple:
        if kind == ARRIVAL:
            detail = payload.req_id
        elif kind in (ITERATION_DONE, ACTIVATION_DONE):
            detail = f"{payload[0]}:{payload[1].engine_id}"
        else:
            detail = payload
        return (t, KIND_NAMES[kind], detail)

    def _metrics(self) -> SimMetrics:
        reqs = []
        per_model_iv: dict = {m: [] for m in self.specs}
        tokens: dict = {m: 0 for m in self.specs}
        for r in self.requests:
            ttft = r.first_token - r.arrival
            tpot = (r.completion - r.first_token) / (r.output - 1) if r.output >= 2 else None
            reqs.append({"req_id": r.req_id, "model": r.model_id, "arrival": r.arrival,
                         "ttft": ttft, "tpot": tpot, "preemptions": r.preemptions,
                         "prompt": r.prompt, "output": r.output, "gpu": r.gpu,
                         "completion": r.completion})
            per_model_iv[r.model_id].append((r.arrival, r.completion))
            tokens[r.model_id] += r.output
        end = self.now_s
        per_model = {}
        for m, iv in per_model_iv.items():
            busy = _union_length(iv)
            per_model[m] = tokens[m] / busy if busy > 0 else 0.0
        all_iv = [x for iv in per_model_iv.values() for x in iv]
        busy_all = _union_length(all_iv)
        total = sum(tokens.values())
        span = end - self.requests[0].arrival
        throughput = {
            "per_model": per_model,
            "idle_excluded": total / busy_all if busy_all > 0 else 0.0,
            "wall_clock": total / span if span > 0 else 0.0,
            "busy_seconds": busy_all,
            "output_tokens": total,
        }
        series = {gr.gpu_id: gr.series for gr in self.gpus}
        integral = {gr.gpu_id: gr.node.ledger.mapped_page_seconds(end) * gr.node.ledger.page_bytes
                    for gr in self.gpus}
        alloc = []
        if self.cfg.alloc_log:
            for gr in self.gpus:
                alloc.extend(gr.node.ledger.log)
        return SimMetrics(
            policy=self.cfg.policy.kind,
            seed=self.seed,
            models={m: {"ttft_slo": s.ttft_slo, "tpot_slo": s.tpot_slo} for m, s in self.specs.items()},
            requests=reqs,
            counts=dict(self.counts),
            throughput=throughput,
            series=series,
            kv_byte_seconds=integral,
            makespan=end,
            slo_scale=self.cfg.slo_scale,
            tpot_slo_scale=self.cfg.tpot_slo_scale,
            queue_log=self.queue_log,
            plan_log=self.plan_log,
            iteration_log=self.iteration_log,
            alloc_log=alloc,
        )


# -- entry points -----------------------------------------------------------------------------


def load_trace_for(cfg: RunConfig, seed: int) -> list[TraceEvent]:
    """Trace named by the config: a file, or a synthetic spec drawn with ``seed``."""
    if cfg.trace_path:
        trace = parse_trace(cfg.trace_path)
    elif cfg.synth is not None:
        trace = synth_trace(cfg.synth.profiles, seed=seed, rate_scale=cfg.synth.rate_scale)
    else:
        raise ConfigError("trace: neither a path nor a synthesis spec was given")
    if cfg.trace_scale > 1:
        trace = scale_trace(trace, cfg.trace_scale, seed=seed)
    return trace


def run(cfg: RunConfig, trace: Sequence[TraceEvent], policy: Optional[str] = None,
        seed: Optional[int] = None) -> SimMetrics:
    if policy is not None and policy != cfg.policy.kind:
        cfg = cfg.with_policy(policy)
    return Simulator(cfg, trace, seed).run()


class ReplayMismatch(RuntimeError):
    """A rerun diverged from a persisted event log."""


def save_event_log(events: Sequence[tuple], path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(list(ev)) + "\n")


def load_event_log(path) -> list:
    with open(path) as fh:
        return [tuple(json.loads(line)) for line in fh if line.strip()]


def replay(cfg: RunConfig, trace: Sequence[TraceEvent], log: Sequence[tuple],
           seed: Optional[int] = None) -> SimMetrics:
    """Rerun a simulation and check it processes exactly the events in ``log``."""
    sim = Simulator(cfg, trace, seed, keep_event_log=True)
    metrics = sim.run()
    got = sim.event_log
    for i, (a, b) in enumerate(zip(got, log)):
        if list(a) != list(b):
            raise ReplayMismatch(f"event {i}: expected {list(b)}, got {list(a)}")
    if len(got) != len(log):
        raise ReplayMismatch(f"expected {len(log)} events, got {len(got)}")
    return metrics
