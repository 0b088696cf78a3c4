"""Demand-paged KV memory shared by many models on one GPU.

Each model owns a :class:`KvPool`: a virtual range of fixed-size pages whose
token slots are sized for that model. A physical page is charged to the GPU's
:class:`PhysicalLedger` only while at least one of its slots is live. The
ledger also keeps a small buffer of pre-mapped pages so most allocations avoid
the mapping cost, and tracks page-rounded model weights.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

PAGE_BYTES = 2 * 1024 * 1024
DEFAULT_BUFFER_PAGES = 8
DEFAULT_MAP_LATENCY_S = 0.0002

PACKED = "packed"
LOWEST_INDEX = "lowest_index"


class AllocFailure(Exception):
    """Not enough physical pages; nothing was allocated."""

    def __init__(self, shortfall_pages: int):
        self.shortfall_pages = shortfall_pages
        super().__init__(f"allocation short by {shortfall_pages} page(s)")


class UsageError(RuntimeError):
    pass


class TokenSlotHandle(NamedTuple):
    pool_id: int
    page: int
    slot: int


@dataclass
class AllocEvent:
    time: float
    gpu: int
    model: str
    event: str
    pages: int


class PhysicalLedger:
    """Capacity accounting for one GPU.

    ``capacity_pages = mapped + buffer + weights + free`` at all times, where
    ``mapped`` is the sum over pools of their mapped KV pages.
    """

    def __init__(self, capacity_pages: int, gpu_id: int = 0, buffer_target: int = DEFAULT_BUFFER_PAGES,
                 map_latency: float = DEFAULT_MAP_LATENCY_S, page_bytes: int = PAGE_BYTES):
        if capacity_pages < 0:
            raise ValueError("capacity must be non-negative")
        self.gpu_id = gpu_id
        self.capacity_pages = int(capacity_pages)
        self.page_bytes = page_bytes
        self.buffer_target = buffer_target
        self.map_latency = map_latency
        self.mapped_pages = 0
        self.buffer_pages = 0
        self.per_pool: dict[int, int] = {}
        self.weight_pages: dict[str, int] = {}
        self.weights_total = 0
        self.pools: dict[str, "KvPool"] = {}
        self.log: Optional[list] = None
        self.now = 0.0
        # time integral of mapped KV pages, for utilisation curves
        self._area = 0.0
        self._area_t = 0.0
        self._next_pool_id = 0

    # -- accounting ---------------------------------------------------------
    @property
    def free_pages(self) -> int:
        return self.capacity_pages - self.mapped_pages - self.buffer_pages - self.weights_total

    @property
    def available_pages(self) -> int:
        """Pages a pool could obtain right now (free plus pre-mapped buffer)."""
        return self.free_pages + self.buffer_pages

    def kv_bytes(self) -> int:
        return self.mapped_pages * self.page_bytes

    def advance(self, now: float) -> None:
        if now > self._area_t:
            self._area += self.mapped_pages * (now - self._area_t)
            self._area_t = now
        self.now = max(self.now, now)

    def mapped_page_seconds(self, until: Optional[float] = None) -> float:
        if until is not None:
            self.advance(until)
        return self._area

    def _emit(self, model: str, event: str, pages: int) -> None:
        if self.log is not None and pages:
            self.log.append(AllocEvent(self.now, self.gpu_id, model, event, pages))

    def _take_pages(self, pool: "KvPool", n: int) -> int:
        """Charge ``n`` new KV pages to ``pool``; return how many missed the buffer."""
        if n > self.available_pages:
            raise AllocFailure(n - self.available_pages)
        self.advance(self.now)
        hit = min(n, self.buffer_pages)
        self.buffer_pages -= hit
        self.mapped_pages += n
        self.per_pool[pool.pool_id] = self.per_pool.get(pool.pool_id, 0) + n
        self._emit(pool.model_id, "buffer_hit", hit)
        self._emit(pool.model_id, "map", n - hit)
        return n - hit

    def _return_pages(self, pool: "KvPool", n: int) -> None:
        self.advance(self.now)
        self.mapped_pages -= n
        self.per_pool[pool.pool_id] -= n
        # emptied pages stay mapped in the buffer while it is below target
        keep = min(n, max(0, self.buffer_target - self.buffer_pages))
        self.buffer_pages += keep
        self._emit(pool.model_id, "unmap", n - keep)

    def refill_buffer(self, target_pages: Optional[int] = None) -> int:
        """Top the pre-mapped buffer up to ``min(target, free)``; returns pages added."""
        target = self.buffer_target if target_pages is None else target_pages
        if target < 0:
            raise ValueError("target must be non-negative")
        add = max(0, min(target - self.buffer_pages, self.free_pages))
        self.buffer_pages += add
        return add

    def refill_latency(self, pages: int) -> float:
        return pages * self.map_latency

    # -- weights ------------------------------------------------------------
    def pages_for_bytes(self, nbytes: float) -> int:
        return int(math.ceil(nbytes / self.page_bytes))

    def reserve_weights(self, model_id: str, nbytes: float) -> int:
        pages = self.pages_for_bytes(nbytes)
        if model_id in self.weight_pages:
            raise UsageError(f"weights for {model_id} already resident on GPU {self.gpu_id}")
        if pages > self.available_pages:
            raise AllocFailure(pages - self.available_pages)
        from_free = min(pages, self.free_pages)
        self.buffer_pages -= pages - from_free
        self.weight_pages[model_id] = pages
        self.weights_total += pages
        return pages

    def release_weights(self, model_id: str) -> int:
        if model_id not in self.weight_pages:
            raise UsageError(f"no weights for {model_id} on GPU {self.gpu_id}")
        pages = self.weight_pages.pop(model_id)
        self.weights_total -= pages
        return pages

    def check(self) -> None:
        """Assert the conservation invariants (used by tests and fuzzing)."""
        assert 0 <= self.mapped_pages
        assert self.buffer_pages >= 0
        assert self.mapped_pages + self.buffer_pages + self.weights_total <= self.capacity_pages
        assert self.mapped_pages == sum(self.per_pool.values())
        assert self.weights_total == sum(self.weight_pages.values())


@dataclass
class _Page:
    free: list  # free slot indices, used as a stack
    occupied: int = 0


class KvPool:
    """One model's virtual KV space on one GPU.

    Slots are handed out most-occupied-page first (``policy="packed"``) so
    partially filled pages are topped up before any new page is mapped.
    ``policy="lowest_index"`` fills the lowest virtual index with room,
    mapped or not; it is the naive placement kept for comparison.
    """

    def __init__(self, ledger: PhysicalLedger, model_id: str, token_bytes: int,
                 virtual_capacity_pages: int, max_pages: Optional[int] = None, policy: str = PACKED):
        if token_bytes <= 0 or token_bytes > ledger.page_bytes:
            raise ValueError(f"token size {token_bytes} does not fit a {ledger.page_bytes}-byte page")
        if virtual_capacity_pages < 1:
            raise ValueError("virtual capacity must be at least one page")
        self.ledger = ledger
        self.model_id = model_id
        self.token_bytes = token_bytes
        self.tokens_per_page = ledger.page_bytes // token_bytes
        self.virtual_capacity_pages = virtual_capacity_pages
        self.max_pages = max_pages
        self.policy = policy
        self.pool_id = ledger._next_pool_id
        ledger._next_pool_id += 1
        self.pages: dict[int, _Page] = {}
        # occupancy -> set of partially filled page indices
        self._partial: dict[int, set] = {}
        self._unmapped_next = 0  # lowest never-used virtual page
        self._recycled: list[int] = []  # heap of unmapped indices below _unmapped_next
        self._spare = 0  # free slots across mapped pages
        self.freed = False
        self.pending_map_cost = 0.0

    # -- introspection --------------------------------------------------------
    @property
    def mapped_count(self) -> int:
        return len(self.pages)

    @property
    def live_tokens(self) -> int:
        return sum(p.occupied for p in self.pages.values())

    def free_slots_in_mapped(self) -> int:
        return self._spare

    def page_state(self, index: int):
        """``None`` if unmapped, else the page's occupied slot count."""
        p = self.pages.get(index)
        return None if p is None else p.occupied

    def capacity_left(self) -> int:
        """Token slots obtainable without exceeding caps (ignores other pools)."""
        pages = self.ledger.available_pages
        if self.max_pages is not None:
            pages = min(pages, self.max_pages - self.mapped_count)
        pages = min(pages, self.virtual_capacity_pages - self.mapped_count)
        return self.free_slots_in_mapped() + max(0, pages) * self.tokens_per_page

    # -- internals ---------------------------------------------------------
    def _check_live(self):
        if self.freed:
            raise UsageError(f"pool for {self.model_id} has been freed")

    def _bucket_remove(self, idx: int, occ: int) -> None:
        b = self._partial.get(occ)
        if b is not None:
            b.discard(idx)
            if not b:
                del self._partial[occ]

    def _bucket_add(self, idx: int, occ: int) -> None:
        if 0 < occ < self.tokens_per_page:
            self._partial.setdefault(occ, set()).add(idx)

    def _virtual_order(self, n: int) -> list:
        """First-fit over the whole virtual range, mapped or not."""
        partial = sorted(i for b in self._partial.values() for i in b)
        unmapped = sorted(self._recycled)
        order, fresh, left = [], self._unmapped_next, n
        pi = ui = 0
        while left > 0:
            cands = []
            if pi < len(partial):
                cands.append(partial[pi])
            cands.append(unmapped[ui] if ui < len(unmapped) else fresh)
            idx = min(cands)
            if pi < len(partial) and idx == partial[pi]:
                pi += 1
                room = len(self.pages[idx].free)
            else:
                if ui < len(unmapped) and idx == unmapped[ui]:
                    ui += 1
                else:
                    fresh += 1
                room = self.tokens_per_page
            order.append((idx, min(room, left)))
            left -= room
        return order

    def _packed_order(self, n: int) -> list:
        """Most-occupied partial pages first (ties by index), then fresh pages."""
        order, left = [], n
        for occ in sorted(self._partial, reverse=True):
            room = self.tokens_per_page - occ
            bucket = self._partial[occ]
            take = -(-left // room)
            for idx in (sorted(bucket) if take >= len(bucket) else heapq.nsmallest(take, bucket)):
                order.append((idx, min(room, left)))
                left -= room
                if left <= 0:
                    return order
        # new pages: lowest recycled indices first, then never-used ones (claimed here)
        while left > 0:
            if self._recycled:
                idx = heapq.heappop(self._recycled)
            else:
                idx = self._unmapped_next
                self._unmapped_next += 1
            order.append((idx, min(self.tokens_per_page, left)))
            left -= self.tokens_per_page
        return order

    def _claim_index(self, idx: int) -> None:
        if idx >= self._unmapped_next:
            self._unmapped_next = idx + 1
        elif self._recycled and self._recycled[0] == idx:
            heapq.heappop(self._recycled)
        else:
            self._recycled.remove(idx)
            heapq.heapify(self._recycled)

    def _pages_needed(self, n: int) -> int:
        spare = self.free_slots_in_mapped()
        if n <= spare:
            return 0
        return -(-(n - spare) // self.tokens_per_page)

    def alloc_extents(self, n: int) -> list:
        """Allocate ``n`` slots; returns ``[(page, [slots...]), ...]``.

        All-or-nothing: on :class:`AllocFailure` the pool is unchanged.
        """
        self._check_live()
        if n < 0:
            raise ValueError("num_tokens must be non-negative")
        if n == 0:
            return []
        if self.policy == PACKED:
            need = self._pages_needed(n)
            order = None
        else:
            order = self._virtual_order(n)
            need = sum(1 for idx, _ in order if idx not in self.pages)
        if need:
            limit = self.virtual_capacity_pages - self.mapped_count
            if self.max_pages is not None:
                limit = min(limit, self.max_pages - self.mapped_count)
            try:
                if need > limit:
                    raise AllocFailure(need - max(0, limit))
                misses = self.ledger._take_pages(self, need)
            except AllocFailure as exc:
                self.ledger._emit(self.model_id, "alloc_fail", exc.shortfall_pages)
                raise
            self.pending_map_cost += misses * self.ledger.map_latency
        if order is None:
            order = self._packed_order(n)
        out = []
        tpp = self.tokens_per_page
        for idx, k in order:
            page = self.pages.get(idx)
            if page is None:
                if self.policy != PACKED:
                    self._claim_index(idx)
                page = _Page(free=list(range(tpp - 1, -1, -1)))
                self.pages[idx] = page
                self._spare += tpp
            else:
                self._bucket_remove(idx, page.occupied)
            slots = page.free[-k:]
            del page.free[-k:]
            page.occupied += k
            self._spare -= k
            self._bucket_add(idx, page.occupied)
            out.append((idx, slots))
        return out

    def free_extents(self, extents) -> None:
        """Return slots from ``alloc_extents``; validated before anything changes."""
        self._check_live()
        pages = self.pages
        counts: dict[int, int] = {}
        for idx, slots in extents:
            counts[idx] = counts.get(idx, 0) + len(slots)
        for idx, k in counts.items():
            page = pages.get(idx)
            if page is None or k > page.occupied:
                raise UsageError(f"stale slots on page {idx} of {self.model_id}")
        for idx, slots in extents:
            pages[idx].free.extend(slots)
        released = 0
        tpp = self.tokens_per_page
        partial = self._partial
        for idx, k in counts.items():
            page = pages[idx]
            old = page.occupied
            if 0 < old < tpp:
                self._bucket_remove(idx, old)
            page.occupied = new = old - k
            if new == 0:
                del pages[idx]
                self._spare -= tpp - k
                heapq.heappush(self._recycled, idx)
                released += 1
            else:
                self._spare += k
                b = partial.get(new)
                if b is None:
                    partial[new] = {idx}
                else:
                    b.add(idx)
        if released:
            self.ledger._return_pages(self, released)

    def take_map_cost(self) -> float:
        c, self.pending_map_cost = self.pending_map_cost, 0.0
        return c

    def check(self) -> None:
        tpp = self.tokens_per_page
        for idx, p in self.pages.items():
            assert 0 < p.occupied <= tpp
            assert p.occupied + len(p.free) == tpp
            assert len(set(p.free)) == len(p.free)
        assert self._spare == sum(len(p.free) for p in self.pages.values())
        assert self.ledger.per_pool.get(self.pool_id, 0) == len(self.pages)


# -- the four engine-facing calls ---------------------------------------------

def alloc_kvcache(ledger: PhysicalLedger, model_id: str, token_bytes: int,
                  virtual_capacity_pages: int, max_pages: Optional[int] = None,
                  policy: str = PACKED) -> KvPool:
    """Reserve a virtual KV range for ``model_id``; maps nothing."""
    if model_id in ledger.pools:
        raise UsageError(f"{model_id} already has a KV pool on GPU {ledger.gpu_id}")
    pool = KvPool(ledger, model_id, token_bytes, virtual_capacity_pages, max_pages, policy)
    ledger.pools[model_id] = pool
    ledger.per_pool[pool.pool_id] = 0
    return pool


def free_kvcache(ledger: PhysicalLedger, pool: KvPool) -> None:
    """Drop the pool, unmapping every page it still holds."""
    if pool.freed or ledger.pools.get(pool.model_id) is not pool:
        raise UsageError(f"pool for {pool.model_id} is not live on GPU {ledger.gpu_id}")
    n = len(pool.pages)
    if n:
        ledger._return_pages(pool, n)
    pool.pages.clear()
    pool._partial.clear()
    pool._spare = 0
    del ledger.per_pool[pool.pool_id]
    del ledger.pools[pool.model_id]
    pool.freed = True


def alloc_kv(pool: KvPool, ledger: PhysicalLedger, num_tokens: int) -> list[TokenSlotHandle]:
    if pool.ledger is not ledger:
        raise UsageError("pool belongs to a different ledger")
    ext = pool.alloc_extents(num_tokens)
    return [TokenSlotHandle(pool.pool_id, idx, s) for idx, slots in ext for s in slots]


def free_kv(pool: KvPool, ledger: PhysicalLedger, handles) -> None:
    if pool.ledger is not ledger:
        raise UsageError("pool belongs to a different ledger")
    pool._check_live()
    grouped: dict[int, list] = {}
    seen = set()
    for h in handles:
        if h.pool_id != pool.pool_id:
            raise UsageError(f"handle {h} does not belong to pool {pool.pool_id}")
        if (h.page, h.slot) in seen:
            raise UsageError(f"handle {h} freed twice")
        seen.add((h.page, h.slot))
        page = pool.pages.get(h.page)
        if page is None or h.slot in page.free or not 0 <= h.slot < pool.tokens_per_page:
            raise UsageError(f"stale handle {h}")
        grouped.setdefault(h.page, []).append(h.slot)
    pool.free_extents(sorted(grouped.items()))


def refill_buffer(ledger: PhysicalLedger, target_pages: int) -> int:
    return ledger.refill_buffer(target_pages)


def write_alloc_log(events, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "gpu", "model", "event", "pages"])
        for e in events:
            w.writerow([f"{e.time:.6f}", e.gpu, e.model, e.event, e.pages])
