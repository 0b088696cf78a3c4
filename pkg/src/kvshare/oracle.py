"""Exhaustive reference solvers used to check the schedulers.

Nothing in the simulator imports this module; it backs the test-suite and the
``verify`` subcommand only.
"""
from __future__ import annotations

import itertools
import math
from typing import Sequence

PLACEMENT_GUARD = 10**6
DEADLINE_GUARD = 12


class OracleSizeError(ValueError):
    pass


def brute_force_placement(models: Sequence, n_gpus: int, capacity: float):
    """Minimum achievable max-KVPR over all ``n_gpus ** len(models)`` assignments.

    ``models`` are objects with ``demand`` (rate/slo) and ``weight``.
    Returns ``(opt, assignment)``; assignments whose weights leave no shared
    KV on some GPU are skipped. ``(inf, None)`` when nothing is feasible.
    """
    m = len(models)
    if n_gpus**m > PLACEMENT_GUARD:
        raise OracleSizeError(f"{n_gpus}^{m} assignments exceeds guard {PLACEMENT_GUARD}")
    best, best_assign = math.inf, None
    for assign in itertools.product(range(n_gpus), repeat=m):
        w = [0.0] * n_gpus
        s = [float(capacity)] * n_gpus
        for mod, g in zip(models, assign):
            w[g] += mod.demand
            s[g] -= mod.weight
        if min(s) <= 0:
            continue
        worst = max(wi / si for wi, si in zip(w, s))
        if worst < best:
            best, best_assign = worst, assign
    return best, best_assign


def _edd_on_time(jobs, now) -> bool:
    t = now
    for e, d in sorted(jobs, key=lambda j: j[1]):
        t += e
        if t > d:
            return False
    return True


def brute_force_deadline_schedule(requests: Sequence[tuple], now: float = 0.0) -> int:
    """Largest number of ``(exec_time, deadline)`` jobs that can all finish on time.

    Every subset is tried in earliest-deadline order, which is optimal for a
    fixed subset on one machine.
    """
    n = len(requests)
    if n > DEADLINE_GUARD:
        raise OracleSizeError(f"n={n} exceeds guard {DEADLINE_GUARD}")
    jobs = [(float(e), float(d)) for e, d in requests]
    for k in range(n, 0, -1):
        for subset in itertools.combinations(jobs, k):
            if _edd_on_time(subset, now):
                return k
    return 0


def permutation_on_time(requests: Sequence[tuple], now: float = 0.0) -> int:
    """Max on-time count over every ordering of the full set (n <= 6).

    Jobs run back to back in the given order; late jobs still occupy the
    machine, so the count is of jobs whose completion meets their deadline.
    Dropping late jobs is equivalent to moving them to the end, which some
    permutation already covers.
    """
    n = len(requests)
    if n > 6:
        raise OracleSizeError("permutation check limited to n <= 6")
    best = 0
    for perm in itertools.permutations(requests):
        t, ok = now, 0
        for e, d in perm:
            t += e
            if t <= d:
                ok += 1
        best = max(best, ok)
    return best
