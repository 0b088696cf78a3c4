"""Sharing policies run by the simulator.

A policy decides where models live and where requests go; the simulator
owns the mechanisms (activation, draining, dispatch, execution). All policies
see the same trace and the same engine cost model.

``prism``
    Demand-aware placement with migration, idle-model eviction under memory
    pressure and activation on arrival; deadline-aware GPU admission.
``dedicated``
    One GPU per model, never moved.
``static_partition``
    Fixed colocation with a hard per-model memory cap.
``mux_flexible``
    Fixed colocation sharing all KV memory on demand; nothing is evicted.
``qlm_timeshare``
    One resident model per GPU; request groups go to the first available
    GPU and a model change pays a full engine restart.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .config import ConfigError, RunConfig, StartupError
from .engine import DRAINING, GB, SERVING
from .placement import (GpuView, InfeasiblePlacement, PlacementItem, ResidentModel,
                        activate_on_arrival, eviction_tick, place_models)


def _weight_gb(cfg: RunConfig, spec) -> float:
    pages = math.ceil(spec.weight_bytes / cfg.page_bytes)
    return pages * cfg.page_bytes / GB


def first_window_map(sim, models=None) -> dict:
    """Greedy placement of ``models`` from rates measured over the first window."""
    cfg = sim.cfg
    rates = sim.first_window_rates()
    ids = cfg.model_ids if models is None else models
    items = [PlacementItem(m, rates[m], cfg.model(m).ttft_slo, _weight_gb(cfg, cfg.model(m))) for m in ids]
    plan = place_models(items, cfg.n_gpus, cfg.gpu_capacity_bytes / GB, tau=0.0)
    return dict(plan.assignment)


class Policy:
    name = "base"
    uses_ticks = False

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def setup(self, sim) -> None:
        raise NotImplementedError

    def route(self, sim, r) -> None:
        g = sim.loc.get(r.model_id)
        if g is None:
            raise RuntimeError(f"{self.name}: no GPU serves {r.model_id}")
        sim.enqueue(g, r)

    def on_progress(self, sim, g: int) -> None:
        pass

    def tick(self, sim) -> None:
        pass

    def eviction_check(self, sim) -> None:
        pass

    def _warm(self, sim, mapping: dict, caps: dict | None = None) -> None:
        for m in self.cfg.model_ids:
            if m not in mapping:
                continue
            cap = (caps or {}).get(m)
            if not sim.start_activation(mapping[m], m, self.cfg.sched.activation_method,
                                        kv_cap_pages=cap, warm=True):
                raise StartupError(f"{self.name}: {m} does not fit on GPU {mapping[m]}")


class FixedPlacement(Policy):
    """Shared behaviour of the frozen-map policies."""

    def colocation(self, sim) -> dict:
        if self.cfg.policy.colocation:
            mapping = {m: int(g) for m, g in self.cfg.policy.colocation.items()}
            missing = set(self.cfg.model_ids) - set(mapping)
            if missing:
                raise ConfigError(f"policy.colocation: no GPU given for {sorted(missing)}")
            bad = [m for m, g in mapping.items() if not 0 <= g < self.cfg.n_gpus]
            if bad:
                raise ConfigError(f"policy.colocation: GPU index out of range for {bad}")
            return mapping
        try:
            return first_window_map(sim)
        except InfeasiblePlacement as exc:
            raise StartupError(f"{self.name}: cannot colocate {exc.model_ids}") from None

    def setup(self, sim) -> None:
        self._warm(sim, self.colocation(sim))


class Dedicated(FixedPlacement):
    name = "dedicated"

    def colocation(self, sim) -> dict:
        return {m: i for i, m in enumerate(self.cfg.model_ids)}


class MuxFlexible(FixedPlacement):
    name = "mux_flexible"


class StaticPartition(FixedPlacement):
    name = "static_partition"

    def fractions(self, mapping: dict) -> dict:
        cfg = self.cfg
        cap = cfg.gpu_capacity_bytes
        given = cfg.policy.fractions or {}
        out = {}
        for g in range(cfg.n_gpus):
            models = [m for m in cfg.model_ids if mapping[m] == g]
            if not models:
                continue
            left = [m for m in models if m not in given]
            used = sum(float(given[m]) for m in models if m in given)
            if left:
                # unspecified models: their weights plus an equal share of what remains
                w = sum(_weight_gb(cfg, cfg.model(m)) * GB for m in left)
                spare = cap * (1.0 - used) - w
                for m in left:
                    out[m] = (_weight_gb(cfg, cfg.model(m)) * GB + spare / len(left)) / cap
            for m in models:
                if m in given:
                    out[m] = float(given[m])
            total = sum(out[m] for m in models)
            if total > 1.0 + 1e-9:
                raise ConfigError(f"policy.fractions: GPU {g} fractions sum to {total:.3f} > 1")
        return out

    def setup(self, sim) -> None:
        cfg = self.cfg
        mapping = self.colocation(sim)
        caps = {}
        for m, frac in self.fractions(mapping).items():
            spec = cfg.model(m)
            wpages = math.ceil(spec.weight_bytes / cfg.page_bytes)
            kv = int(frac * cfg.gpu_capacity_bytes // cfg.page_bytes) - wpages
            if kv < 1:
                raise ConfigError(f"policy.fractions.{m}: fraction {frac:.3f} leaves no room beyond the weights")
            caps[m] = kv
        self._warm(sim, mapping, caps)


class Prism(Policy):
    name = "prism"
    uses_ticks = True

    def setup(self, sim) -> None:
        cfg = self.cfg
        rates = sim.first_window_rates()
        # start with as many models as the greedy placement accepts, busiest first
        order = sorted(cfg.model_ids, key=lambda m: (-rates[m] / cfg.model(m).ttft_slo, m))
        while order:
            try:
                mapping = first_window_map(sim, order)
                break
            except InfeasiblePlacement:
                order = order[:-1]
        else:
            mapping = {}
        self._warm(sim, mapping)

    # -- views for the placement helpers -------------------------------------------------
    def _views(self, sim) -> list:
        views = []
        for gr in sim.gpus:
            node = gr.node
            led = node.ledger
            residents = []
            w = 0.0
            for m in sorted(node.engines):
                eng = node.engines[m]
                if eng.status == DRAINING:
                    continue
                spec = sim.specs[m]
                w += sim.rate[m] / spec.ttft_slo
                residents.append(ResidentModel(
                    m, spec.ttft_slo, led.weight_pages[m] * led.page_bytes,
                    idle_for=sim.now_s - sim.last_active[m], busy=sim.model_busy(m)))
            views.append(GpuView(gr.gpu_id, node.capacity_bytes, residents, w,
                                 free_bytes=led.available_pages * led.page_bytes))
        return views

    def _freed_pages(self, sim, g: int, chosen) -> int:
        node = sim.gpus[g].node
        n = 0
        for c in chosen:
            n += node.ledger.weight_pages[c.model_id]
            n += node.engines[c.model_id].pool.mapped_count
        return n

    def _pressure(self, sim, extra_need: int = 0):
        frac = self.cfg.sched.pressure_free_fraction

        def under_pressure(view, chosen) -> bool:
            led = sim.gpus[view.gpu_id].node.ledger
            avail = led.available_pages + self._freed_pages(sim, view.gpu_id, chosen)
            return avail < max(extra_need, frac * led.capacity_pages)
        return under_pressure

    # -- activation ------------------------------------------------------------------------
    def try_activate(self, sim, model_id: str) -> bool:
        spec = sim.specs[model_id]
        page = self.cfg.page_bytes
        need = math.ceil(spec.weight_bytes / page)
        views = self._views(sim)
        g = activate_on_arrival(need * page, views)
        if g is None and self.cfg.sched.enable_eviction:
            for view in sorted(views, key=lambda v: (v.kvpr, v.gpu_id)):
                picks = eviction_tick([view], self.cfg.sched.idle_threshold, self._pressure(sim, need))
                if not picks:
                    continue
                chosen = [r for r in view.residents if (view.gpu_id, r.model_id) in set(picks)]
                led = sim.gpus[view.gpu_id].node.ledger
                if led.available_pages + self._freed_pages(sim, view.gpu_id, chosen) < need:
                    continue
                for gid, m in picks:
                    sim.evict(gid, m)
                g = view.gpu_id
                break
        if g is None:
            return False
        return sim.start_activation(g, model_id, self.cfg.sched.activation_method)

    def route(self, sim, r) -> None:
        if r.model_id in sim.loc:
            sim.enqueue(sim.loc[r.model_id], r)
            return
        sim.hold_unplaced(r)
        if self.try_activate(sim, r.model_id):
            sim.release_unplaced(r.model_id)

    def _retry_unplaced(self, sim) -> None:
        for m in sorted(sim.unplaced):
            if m in sim.loc or self.try_activate(sim, m):
                sim.release_unplaced(m)

    def on_progress(self, sim, g: int) -> None:
        if sim.unplaced:
            self._retry_unplaced(sim)

    def eviction_check(self, sim) -> None:
        if not self.cfg.sched.enable_eviction:
            return
        picks = eviction_tick(self._views(sim), self.cfg.sched.idle_threshold, self._pressure(sim))
        for g, m in picks:
            sim.evict(g, m)
        if picks:
            sim.plan_log.append({"t": sim.now_s, "kind": "eviction",
                                 "evictions": [[m, g] for g, m in picks]})

    def tick(self, sim) -> None:
        cfg = self.cfg
        before = [sim.gpu_kvpr(g) for g in range(cfg.n_gpus)]
        applied = []
        assignment = {}
        if cfg.sched.enable_placement and sim.loc:
            items = [PlacementItem(m, sim.rate[m], sim.specs[m].ttft_slo,
                                   _weight_gb(cfg, sim.specs[m]), current_gpu=g)
                     for m, g in sorted(sim.loc.items())]
            try:
                plan = place_models(items, cfg.n_gpus, cfg.gpu_capacity_bytes / GB, cfg.sched.tau)
            except InfeasiblePlacement:
                plan = None
            if plan is not None:
                assignment = dict(plan.assignment)
                for m, _, src, dst in plan.migrations:
                    if sim.migrate(m, src, dst):
                        applied.append([m, src, dst])
        self._retry_unplaced(sim)
        sim.plan_log.append({"t": sim.now_s, "kind": "placement", "assignment": assignment,
                             "migrations": applied, "kvpr_before": before,
                             "kvpr_after": [sim.gpu_kvpr(g) for g in range(cfg.n_gpus)]})


@dataclass
class _Group:
    model_id: str
    start: float
    requests: list = field(default_factory=list)


class QlmTimeshare(Policy):
    name = "qlm_timeshare"

    def __init__(self, cfg: RunConfig):
        super().__init__(cfg)
        self.groups: deque[_Group] = deque()

    def setup(self, sim) -> None:
        rates = sim.first_window_rates()
        order = sorted(self.cfg.model_ids, key=lambda m: (-rates[m], m))
        for gr, m in zip(sim.gpus, order):
            if not sim.start_activation(gr.gpu_id, m, "naive", warm=True):
                raise StartupError(f"{self.name}: {m} does not fit on GPU {gr.gpu_id}")
            gr.resident = m

    def route(self, sim, r) -> None:
        last = self.groups[-1] if self.groups else None
        if last is not None and last.model_id == r.model_id and r.arrival - last.start <= self.cfg.policy.group_window:
            last.requests.append(r)
        else:
            self.groups.append(_Group(r.model_id, r.arrival, [r]))
        self._assign(sim)

    def on_progress(self, sim, g: int) -> None:
        if self.groups:
            self._assign(sim)

    def _pick(self, sim, model_id: str):
        for gr in sim.gpus:
            if gr.swapping:
                continue
            eng = gr.node.engines.get(gr.resident) if gr.resident else None
            if eng is not None and gr.resident == model_id and eng.status == SERVING:
                return gr
            if eng is None or not (eng.has_work or gr.hold):
                return gr
        return None

    def _assign(self, sim) -> None:
        while self.groups:
            group = self.groups[0]
            gr = self._pick(sim, group.model_id)
            if gr is None:
                return
            self.groups.popleft()
            g = gr.gpu_id
            if gr.resident != group.model_id:
                old = gr.node.engines.get(gr.resident) if gr.resident else None
                if old is not None:
                    sim.stop_engine(g, old)
                sim.sample(g)
                if not sim.start_activation(g, group.model_id, "naive", with_engine_init=True):
                    raise RuntimeError(f"{self.name}: {group.model_id} does not fit on GPU {g}")
                sim.counts["swaps"] += 1
                sim.plan_log.append({"t": sim.now_s, "kind": "swap", "gpu": g,
                                     "from": gr.resident, "to": group.model_id})
                gr.resident = group.model_id
                gr.swapping = True
            for r in group.requests:
                sim.enqueue(g, r)


_POLICIES = {
    "prism": Prism,
    "dedicated": Dedicated,
    "static_partition": StaticPartition,
    "mux_flexible": MuxFlexible,
    "qlm_timeshare": QlmTimeshare,
}


def make_policy(cfg: RunConfig) -> Policy:
    return _POLICIES[cfg.policy.kind](cfg)
