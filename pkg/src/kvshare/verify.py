"""Fuzzed checks of the schedulers and the allocator against reference solvers.

Every instance is drawn from its own seeded stream, so a failure is reported
as ``(seed, index)`` plus the instance as JSON and can be replayed alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from .admission import moore_hodgson
from .oracle import brute_force_deadline_schedule, brute_force_placement
from .pagealloc import (LOWEST_INDEX, PAGE_BYTES, AllocFailure, PhysicalLedger, UsageError,
                        alloc_kv, alloc_kvcache, free_kv)
from .placement import PlacementItem, kvpr_bound, place_models
from .workload import rng_stream

SUITES = ("placement", "deadline", "allocator")


@dataclass
class CheckResult:
    name: str
    instances: int = 0
    failures: list = field(default_factory=list)   # dicts: seed, index, detail, instance

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, seed: int, index: int, detail: str, instance) -> None:
        self.failures.append({"seed": seed, "index": index, "detail": detail, "instance": instance})

    def report(self, limit: int = 3) -> str:
        lines = [f"{self.name}: {self.instances - len(self.failures)}/{self.instances} passed"]
        for f in self.failures[:limit]:
            lines.append("  FAIL " + json.dumps(f, sort_keys=True))
        return "\n".join(lines)


# -- deadline admission ----------------------------------------------------------------


def deadline_instance(seed: int, index: int, max_n: int = 8) -> tuple:
    """``(now, [(exec, deadline), ...])`` with exec in [0.1, 5] s and random slack."""
    rng = rng_stream(seed, "fuzz-deadline", index)
    n = int(rng.integers(0, max_n + 1))
    now = float(rng.uniform(0, 10))
    execs = rng.uniform(0.1, 5.0, size=n)
    horizon = float(execs.sum())
    slack = rng.uniform(0, horizon, size=n) if n else []
    return now, [(float(e), now + float(e) + float(s)) for e, s in zip(execs, slack)]


class Job(NamedTuple):
    req_id: int
    arrival: float
    deadline: float
    exec_estimate: float


def mh_schedule(jobs, now: float):
    """Deadline selection over ``(exec, deadline)`` pairs."""
    return moore_hodgson([Job(i, 0.0, d, e) for i, (e, d) in enumerate(jobs)], now)


def check_deadline(seed: int = 0, n: int = 1000, max_n: int = 8) -> CheckResult:
    res = CheckResult("deadline")
    for i in range(n):
        now, jobs = deadline_instance(seed, i, max_n)
        decision = mh_schedule(jobs, now)
        res.instances += 1
        admitted = [(r.exec_estimate, r.deadline) for r in decision.admit]
        t = now
        feasible = True
        for e, d in sorted(admitted, key=lambda j: j[1]):
            t += e
            feasible &= t <= d
        best = brute_force_deadline_schedule(jobs, now)
        if not feasible or len(admitted) != best:
            res.fail(seed, i, f"scheduler kept {len(admitted)} (feasible={feasible}), optimum {best}",
                     {"now": now, "jobs": jobs})
    return res


# -- placement ------------------------------------------------------------------------------


def placement_instance(seed: int, index: int, max_models: int = 6, max_gpus: int = 3,
                       capacity: float = 80.0) -> tuple:
    """``(models, n_gpus, capacity)``; weights are small enough that any assignment fits."""
    rng = rng_stream(seed, "fuzz-placement", index)
    m = int(rng.integers(1, max_models + 1))
    g = int(rng.integers(1, max_gpus + 1))
    models = []
    for k in range(m):
        models.append(PlacementItem(
            model_id=f"m{k}",
            rate=float(rng.uniform(0.0, 20.0)),
            slo=float(rng.uniform(0.1, 2.0)),
            weight=float(rng.uniform(1.0, 0.9 * capacity / m)),
        ))
    return models, g, capacity


def check_placement(seed: int = 0, n: int = 1000, max_models: int = 6, max_gpus: int = 3) -> CheckResult:
    res = CheckResult("placement")
    for i in range(n):
        models, g, cap = placement_instance(seed, i, max_models, max_gpus)
        plan = place_models(models, g, cap, tau=0.0)
        alg = plan.max_kvpr()
        opt, _ = brute_force_placement(models, g, cap)
        bound = kvpr_bound(plan, cap, opt)
        res.instances += 1
        tol = 1e-9 * max(1.0, abs(opt))
        if not (alg >= opt - tol and alg <= bound + tol):
            res.fail(seed, i, f"alg={alg} opt={opt} bound={bound}", {
                "gpus": g, "capacity": cap,
                "models": [[x.model_id, x.rate, x.slo, x.weight] for x in models]})
    return res


# -- allocator ------------------------------------------------------------------------------


@dataclass
class AllocatorFuzzResult:
    ops: int
    conservation: CheckResult
    isolation: CheckResult
    on_demand: CheckResult
    all_or_nothing: CheckResult
    dominance: CheckResult          # packed mapped pages <= lowest-index mapped pages, every instant
    packed_page_ops: int = 0        # time integral (in operations) of mapped pages, packed policy
    naive_page_ops: int = 0         # same for lowest-index placement

    @property
    def checks(self) -> list:
        return [self.conservation, self.isolation, self.on_demand, self.all_or_nothing, self.dominance]


def fuzz_allocator(seed: int = 0, ops: int = 100_000, capacity_pages: int = 192) -> AllocatorFuzzResult:
    """Random alloc/free traffic over three pools sharing one ledger.

    A fourth pool with a large virtual range never allocates. The first pool's
    traffic is replayed on two private ledgers, one per placement policy, to
    compare how many pages each keeps mapped.
    """
    rng = rng_stream(seed, "fuzz-allocator")
    res = AllocatorFuzzResult(ops, CheckResult("conservation"), CheckResult("isolation"),
                              CheckResult("on_demand"), CheckResult("all_or_nothing"),
                              CheckResult("packing_dominance"))
    ledger = PhysicalLedger(capacity_pages, buffer_target=8)
    ledger.refill_buffer()
    token_sizes = (PAGE_BYTES // 4, PAGE_BYTES // 16, PAGE_BYTES // 64)
    pools = [alloc_kvcache(ledger, f"p{k}", tb, 4 * capacity_pages) for k, tb in enumerate(token_sizes)]
    idle = alloc_kvcache(ledger, "idle", PAGE_BYTES // 16, 10**6)
    shadow_led = [PhysicalLedger(10**6, buffer_target=0), PhysicalLedger(10**6, buffer_target=0)]
    shadow = [alloc_kvcache(shadow_led[0], "s", token_sizes[0], 10**6),
              alloc_kvcache(shadow_led[1], "s", token_sizes[0], 10**6, policy=LOWEST_INDEX)]
    live: list = []          # (pool index, handles, shadow handles or None)
    owner: dict = {}         # (pool_id, page, slot) -> allocation serial
    serial = 0
    for i in range(ops):
        roll = rng.random()
        k = None                 # pool touched by this op; only its pages can change
        if live and roll < 0.45:
            j = int(rng.integers(len(live)))
            k, handles, sh = live[j]
            if rng.random() < 0.3 and len(handles) > 1 and sh is None:
                cut = int(rng.integers(1, len(handles)))
                part, rest = handles[:cut], handles[cut:]
                free_kv(pools[k], ledger, part)
                live[j] = (k, rest, None)
            else:
                part = handles
                free_kv(pools[k], ledger, part)
                live.pop(j)
                if sh is not None:
                    free_kv(shadow[0], shadow_led[0], sh[0])
                    free_kv(shadow[1], shadow_led[1], sh[1])
            for h in part:
                del owner[h]
        elif roll < 0.5:
            ledger.refill_buffer()
        else:
            k = int(rng.integers(len(pools)))
            pool = pools[k]
            n = int(rng.integers(1, 4 * pool.tokens_per_page + 1))
            before = (ledger.mapped_pages, ledger.buffer_pages, pool.mapped_count, pool.free_slots_in_mapped())
            try:
                handles = alloc_kv(pool, ledger, n)
            except AllocFailure:
                after = (ledger.mapped_pages, ledger.buffer_pages, pool.mapped_count, pool.free_slots_in_mapped())
                res.all_or_nothing.instances += 1
                if before != after:
                    res.all_or_nothing.fail(seed, i, f"failed alloc changed state {before} -> {after}", n)
                continue
            res.all_or_nothing.instances += 1
            res.isolation.instances += 1
            if len(handles) != n or any(h.pool_id != pool.pool_id or h in owner for h in handles):
                res.isolation.fail(seed, i, "handle reused or foreign", [list(h) for h in handles[:4]])
            for h in handles:
                owner[h] = serial
            serial += 1
            sh = None
            if k == 0:
                sh = (alloc_kv(shadow[0], shadow_led[0], n), alloc_kv(shadow[1], shadow_led[1], n))
            live.append((k, handles, sh))
        res.conservation.instances += 1
        try:
            ledger.check()
            if k is not None:
                pools[k].check()
            if ledger.mapped_pages + ledger.buffer_pages > ledger.capacity_pages:
                raise AssertionError("mapped + buffer exceeds capacity")
        except AssertionError as exc:
            res.conservation.fail(seed, i, str(exc) or "ledger check failed", None)
        res.on_demand.instances += 1
        if idle.mapped_count or ledger.per_pool.get(idle.pool_id):
            res.on_demand.fail(seed, i, "untouched pool holds pages", idle.mapped_count)
        a, b = shadow[0].mapped_count, shadow[1].mapped_count
        res.dominance.instances += 1
        res.packed_page_ops += a
        res.naive_page_ops += b
        if a > b:
            res.dominance.fail(seed, i, f"packed maps {a} pages, lowest-index {b}", None)
    # stale and foreign handles must be rejected
    res.isolation.instances += 1
    if live:
        k, handles, _ = live[0]
        other = pools[(k + 1) % len(pools)]
        try:
            free_kv(other, ledger, handles[:1])
            res.isolation.fail(seed, ops, "foreign handle accepted", None)
        except UsageError:
            pass
    return res


def check_allocator(seed: int = 0, ops: int = 100_000) -> list:
    """Allocator checks that gate ``verify``: conservation, isolation, on-demand
    mapping and all-or-nothing failure. Packing is compared on aggregate mapped
    page-time; the per-instant comparison is reported by :func:`fuzz_allocator`."""
    fz = fuzz_allocator(seed, ops)
    packing = CheckResult("packing_aggregate", instances=1)
    if fz.packed_page_ops > fz.naive_page_ops:
        packing.fail(seed, 0, f"packed page-time {fz.packed_page_ops} > lowest-index {fz.naive_page_ops}", None)
    return [fz.conservation, fz.isolation, fz.on_demand, fz.all_or_nothing, packing], fz


def run_suites(names, seed: int = 0, out: Optional[Callable[[str], None]] = print) -> bool:
    ok = True
    for name in names:
        if name == "deadline":
            results = [check_deadline(seed)]
        elif name == "placement":
            results = [check_placement(seed)]
        elif name == "allocator":
            results, fz = check_allocator(seed)
            if out:
                out(f"allocator: {fz.ops} operations; packed page-time {fz.packed_page_ops}, "
                    f"lowest-index {fz.naive_page_ops}; instants with more pages packed: "
                    f"{len(fz.dominance.failures)}")
        else:
            raise ValueError(f"unknown suite {name!r}")
        for r in results:
            ok &= r.ok
            if out:
                out(r.report())
    return ok
