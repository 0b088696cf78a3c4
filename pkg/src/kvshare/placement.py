"""Global model placement: KV-pressure balancing, TP decomposition, eviction
and arrival-triggered activation.

All quantities are plain floats. Memory is in bytes unless a caller chooses
another unit consistently (the KVPR only needs demand and memory in the same
units across GPUs).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence


class InfeasiblePlacement(ValueError):
    """Raised when some model (or TP part) fits on no GPU."""

    def __init__(self, model_ids):
        self.model_ids = list(model_ids)
        super().__init__(f"no GPU can hold model(s): {', '.join(self.model_ids)}")


def kvpr(w_req_rate: float, shared_kv: float) -> float:
    """KV pressure ratio: SLO-weighted request rate per unit of KV memory."""
    if shared_kv <= 0:
        raise ValueError(f"KV pressure undefined for shared_kv={shared_kv!r}")
    return w_req_rate / shared_kv


@dataclass(frozen=True)
class PlacementItem:
    """One placeable unit: a whole model, or one tensor-parallel part of it."""

    model_id: str
    rate: float
    slo: float
    weight: float
    current_gpu: Optional[int] = None
    part: int = 0
    tp_degree: int = 1

    @property
    def demand(self) -> float:
        return self.rate / self.slo

    @property
    def key(self) -> tuple:
        return (self.model_id, self.part)


def tp_decompose(item: PlacementItem) -> list[PlacementItem]:
    """Split a TP model into ``tp_degree`` parts with 1/tp of weight and rate."""
    tp = item.tp_degree
    if tp < 1:
        raise ValueError("tp_degree must be >= 1")
    if tp == 1:
        return [item]
    return [
        PlacementItem(
            model_id=item.model_id,
            rate=item.rate / tp,
            slo=item.slo,
            weight=item.weight / tp,
            current_gpu=item.current_gpu,
            part=i,
            tp_degree=tp,
        )
        for i in range(tp)
    ]


@dataclass
class AssignmentStep:
    item: PlacementItem
    gpu: int
    w_before: float
    s_before: float


@dataclass
class PlacementPlan:
    assignment: dict = field(default_factory=dict)  # model_id -> gpu, or tuple of gpus for TP
    migrations: list = field(default_factory=list)  # (model_id, part, from, to)
    w_req_rate: list = field(default_factory=list)
    shared_kv: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def kvpr_vector(self) -> list[float]:
        return [kvpr(w, s) for w, s in zip(self.w_req_rate, self.shared_kv)]

    def max_kvpr(self) -> float:
        return max(self.kvpr_vector()) if self.shared_kv else 0.0

    def critical(self) -> tuple[int, Optional[AssignmentStep]]:
        """The GPU with the highest final KVPR and the last step that landed on it."""
        vec = self.kvpr_vector()
        g = max(range(len(vec)), key=lambda i: (vec[i], -i))
        last = None
        for st in self.steps:
            if st.gpu == g:
                last = st
        return g, last


def place_models(
    models: Iterable[PlacementItem],
    n_gpus: int,
    capacity: float,
    tau: float = 0.0,
) -> PlacementPlan:
    """Greedy KVPR-minimizing placement with migration gating.

    Models are visited in descending ``rate/slo`` order (ties by model id,
    then part). Each goes to the GPU whose *current* plan-state KVPR is lowest
    among GPUs that can still hold its weight; it stays on its current GPU
    unless the improvement exceeds ``tau``. TP models are expanded into parts
    and no two parts of one model share a GPU.
    """
    if n_gpus < 1:
        raise ValueError("need at least one GPU")
    items: list[PlacementItem] = []
    for m in models:
        parts = tp_decompose(m)
        if len(parts) > n_gpus:
            raise InfeasiblePlacement([m.model_id])
        items.extend(parts)
    items.sort(key=lambda it: (-it.demand, it.model_id, it.part))

    w = [0.0] * n_gpus
    s = [float(capacity)] * n_gpus
    plan = PlacementPlan()
    siblings: dict[str, set[int]] = {}
    tp_slots: dict[str, list] = {}

    for it in items:
        taken = siblings.setdefault(it.model_id, set())
        eligible = [i for i in range(n_gpus) if s[i] - it.weight > 0 and i not in taken]
        if not eligible:
            raise InfeasiblePlacement([it.model_id])
        best_idx = min(eligible, key=lambda i: (w[i] / s[i], i))
        best_r = w[best_idx] / s[best_idx]
        g = it.current_gpu
        if g is None or g not in eligible:
            target = best_idx
        else:
            current_r = w[g] / s[g]
            target = best_idx if current_r - best_r > tau else g

        plan.steps.append(AssignmentStep(it, target, w[target], s[target]))
        w[target] += it.demand
        s[target] -= it.weight
        taken.add(target)
        if it.current_gpu is not None and target != it.current_gpu:
            plan.migrations.append((it.model_id, it.part, it.current_gpu, target))
        if it.tp_degree == 1:
            plan.assignment[it.model_id] = target
        else:
            slots = tp_slots.setdefault(it.model_id, [None] * it.tp_degree)
            slots[it.part] = target
            plan.assignment[it.model_id] = tuple(slots)

    plan.w_req_rate = w
    plan.shared_kv = s
    return plan


def kvpr_bound(plan: PlacementPlan, capacity: float, opt_kvpr: float) -> float:
    """Upper bound ``OPT * (1 + C / (S_gmax - w_k))`` for a finished plan.

    ``S_gmax`` is the shared KV on the critical GPU just before its last model
    ``m_k`` was assigned, so ``S_gmax - w_k`` is that GPU's final shared KV.
    """
    g, last = plan.critical()
    if last is None:
        return opt_kvpr
    return opt_kvpr * (1.0 + capacity / (last.s_before - last.item.weight))


# -- eviction and activation ------------------------------------------------


@dataclass
class ResidentModel:
    model_id: str
    slo: float
    weight: float
    idle_for: float
    busy: bool = False


@dataclass
class GpuView:
    gpu_id: int
    capacity: float
    residents: list = field(default_factory=list)
    w_req_rate: float = 0.0
    free_bytes: float = 0.0

    @property
    def shared_kv(self) -> float:
        return self.capacity - sum(r.weight for r in self.residents)

    @property
    def kvpr(self) -> float:
        sk = self.shared_kv
        return self.w_req_rate / sk if sk > 0 else math.inf


def eviction_candidates(gpu: GpuView, idle_threshold: float) -> list[ResidentModel]:
    """Idle-beyond-threshold residents, largest SLO first (ties by model id)."""
    cands = [r for r in gpu.residents if not r.busy and r.idle_for > idle_threshold]
    cands.sort(key=lambda r: (-r.slo, r.model_id))
    return cands


def eviction_tick(
    gpus: Sequence[GpuView],
    idle_threshold: float,
    under_pressure: Callable[[GpuView, list], bool],
) -> list[tuple[int, str]]:
    """Evict idle models only from GPUs where ``under_pressure`` holds.

    The predicate receives the GPU and the models already chosen for eviction
    on it, and is re-evaluated after each pick.
    """
    out = []
    for gpu in gpus:
        chosen: list[ResidentModel] = []
        for cand in eviction_candidates(gpu, idle_threshold):
            if not under_pressure(gpu, chosen):
                break
            chosen.append(cand)
            out.append((gpu.gpu_id, cand.model_id))
    return out


def activate_on_arrival(weight: float, gpus: Sequence[GpuView]) -> Optional[int]:
    """Lowest-KVPR GPU with physical room for ``weight``; None if none has room."""
    fits = [g for g in gpus if g.free_bytes >= weight]
    if not fits:
        return None
    return min(fits, key=lambda g: (g.kvpr, g.gpu_id)).gpu_id
