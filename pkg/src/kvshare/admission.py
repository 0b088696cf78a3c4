"""GPU-local request scheduling: deadline-aware selection and admission."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence


@dataclass
class QueuedRequest:
    req_id: int
    model_id: str
    arrival: float
    prompt: int
    ttft_slo: float
    prefill_speed: float

    def __post_init__(self):
        if self.prompt <= 0 or self.prefill_speed <= 0:
            raise ValueError("prompt and prefill speed must be positive")
        if self.ttft_slo <= 0:
            raise ValueError("TTFT SLO must be positive")

    @property
    def deadline(self) -> float:
        return self.arrival + self.ttft_slo

    @property
    def exec_estimate(self) -> float:
        return self.prompt / self.prefill_speed


@dataclass
class ScheduleDecision:
    admit: list = field(default_factory=list)
    deferred: list = field(default_factory=list)
    timestamp: float = 0.0


def _deadline_key(r):
    return (r.deadline, r.arrival, r.req_id)


def _add_exact(partials: list, x: float) -> None:
    """Shewchuk running sum: ``math.fsum(partials)`` stays the exactly rounded total."""
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


def moore_hodgson(queue: Iterable, now: float) -> ScheduleDecision:
    """Select the largest set of requests whose prefills can all meet their deadlines.

    Requests need ``deadline``, ``exec_estimate``, ``arrival`` and ``req_id``.
    They are taken in deadline order; whenever the running completion time
    overshoots the newest request's deadline, the admitted request with the
    longest execution estimate is moved to the deferred list. The running
    completion time is kept as an exact sum so the result does not depend on
    the order of additions and removals.
    """
    ordered = sorted(queue, key=_deadline_key)
    heap: list = []
    partials: list = []
    removed: set = set()
    deferred: list = []
    for i, r in enumerate(ordered):
        e = r.exec_estimate
        if e <= 0:
            raise ValueError(f"request {r.req_id} has non-positive execution estimate")
        _add_exact(partials, e)
        # max-heap on (e, deadline, req_id)
        heapq.heappush(heap, (-e, -r.deadline, -r.req_id, i))
        if now + math.fsum(partials) > r.deadline:
            _, _, _, j = heapq.heappop(heap)
            removed.add(j)
            deferred.append(ordered[j])
            _add_exact(partials, -ordered[j].exec_estimate)
    admitted = [r for i, r in enumerate(ordered) if i not in removed]
    return ScheduleDecision(admit=admitted, deferred=deferred, timestamp=now)


def requeue_deferred(deferred: Sequence, queue: list) -> list:
    """Merge deferred requests back into the queue; nothing is ever dropped."""
    present = {id(r) for r in queue}
    merged = list(queue)
    merged.extend(r for r in deferred if id(r) not in present)
    merged.sort(key=lambda r: (r.arrival, r.req_id))
    return merged


def dispatch(
    decision: ScheduleDecision,
    engines: Mapping[str, object],
    on_missing: Optional[Callable[[object], None]] = None,
    backfill: bool = True,
    headroom: Optional[object] = None,
) -> list:
    """Hand admitted requests to engines in schedule order.

    An engine is offered requests only while ``engine.can_accept(req)`` holds;
    after the first refusal it receives nothing more this round, so no queue
    builds up inside engines. ``headroom``, when given, is shared GPU memory:
    ``headroom.claim(engine, req)`` must also succeed, so memory promised to
    an earlier request in the schedule is not handed to a later one. With
    ``backfill`` the deferred requests are then offered the same way, in
    deadline order, to keep the GPU work-conserving. Returns the dispatched
    requests.
    """
    closed: set = set()
    sent = []
    rounds = [decision.admit]
    if backfill:
        rounds.append(sorted(decision.deferred, key=_deadline_key))
    for batch in rounds:
        for r in batch:
            eng = engines.get(r.model_id)
            if eng is None:
                if on_missing is not None:
                    on_missing(r)
                continue
            if r.model_id in closed:
                continue
            if eng.can_accept(r) and (headroom is None or headroom.claim(eng, r)):
                eng.submit(r)
                sent.append(r)
            else:
                closed.add(r.model_id)
    return sent
