"""End-to-end acceptance checks; a PASS/FAIL line per criterion is printed by conftest."""
import functools
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import pytest

from kvshare.cli import cmd_stats, sweep_rows
from kvshare.config import load_config
from kvshare.engine import GB, ActivationParams, ModelSpec, throughput_of
from kvshare.scenarios import long_tail_mix, strict_and_loose, two_phase
from kvshare.sim import run
from kvshare.verify import check_allocator, check_deadline, check_placement
from kvshare.workload import TraceEvent, synth_trace, write_trace

SMALL = str(Path(__file__).parent / "data" / "small.yaml")
BASELINES = ("static_partition", "mux_flexible", "qlm_timeshare")


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def test_criterion_1_deadline_optimality(criterion):
    res, secs = timed(check_deadline, seed=0, n=1000)
    ok = criterion(1, res.ok and res.instances == 1000 and secs < 10,
                   f"{res.instances - len(res.failures)}/{res.instances} optimal in {secs:.1f}s")
    assert ok, res.report()


def test_criterion_2_placement_bound(criterion):
    res, secs = timed(check_placement, seed=0, n=1000)
    ok = criterion(2, res.ok and res.instances == 1000 and secs < 30,
                   f"{res.instances - len(res.failures)}/{res.instances} within bounds in {secs:.1f}s")
    assert ok, res.report()


@functools.lru_cache(maxsize=None)
def allocator_fuzz():
    return timed(check_allocator, seed=0, ops=100_000)


def test_criterion_3_allocator_invariants(criterion):
    (checks, fz), secs = allocator_fuzz()
    bad = [c.name for c in checks if not c.ok]
    ok = criterion(3, not bad and secs < 20,
                   f"{fz.ops} ops: conservation/isolation/on-demand/all-or-nothing "
                   f"{'clean' if not bad else 'violated: ' + ','.join(bad)}; packed page-time "
                   f"{fz.packed_page_ops} <= lowest-index {fz.naive_page_ops}; {secs:.1f}s")
    assert ok, "\n".join(c.report() for c in checks)


@pytest.mark.xfail(strict=True, reason="most-occupied-first packing is not pointwise dominant; "
                                       "see test_pagealloc.py for a five-operation counterexample")
def test_criterion_3_packing_dominates_at_every_instant(criterion):
    (_, fz), _ = allocator_fuzz()
    n = len(fz.dominance.failures)
    criterion(3, n == 0, f"pointwise packing dominance violated at {n}/{fz.ops} instants")
    assert n == 0


def test_criterion_4_activation_constants(criterion):
    p = ActivationParams()
    got = {
        "8B parallel": p.load_latency(16 * GB, 1, "parallel"),
        "14B parallel": p.load_latency(28 * GB, 1, "parallel"),
        "14B naive": p.load_latency(28 * GB, 1, "naive"),
        "70B tp8 parallel": p.load_latency(140 * GB, 8, "parallel"),
    }
    want = {"8B parallel": 0.7, "14B parallel": 1.3, "14B naive": 7.1, "70B tp8 parallel": 1.5}
    ratio = got["14B naive"] / got["14B parallel"]
    ok = all(math.isclose(got[k], want[k], rel_tol=1e-12) for k in want) and abs(ratio / 5.5 - 1) <= 0.01
    criterion(4, ok, ", ".join(f"{k}={v:g}s" for k, v in got.items()) + f", naive/parallel={ratio:.3f}")
    assert ok


def test_criterion_5_throughput_grows_with_memory(criterion):
    s = ModelSpec("m8b", 16 * GB, 128 * 1024, 1.0, 0.1)
    grid = [5, 7, 9, 11, 13, 15]
    tps = [throughput_of(g * GB, s) for g in grid]
    monotone = all(b >= a for a, b in zip(tps, tps[1:]))
    ratio = tps[-1] / tps[0]
    ok = criterion(5, monotone and ratio >= 2.0,
                   f"{tps[0]:.0f} tok/s at 5 GB -> {tps[-1]:.0f} tok/s at 15 GB ({ratio:.2f}x), "
                   f"monotone={monotone}")
    assert ok, tps


def test_criterion_6_long_tail_attainment(criterion):
    cfg, profiles = long_tail_mix()
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in range(5):
        trace = synth_trace(profiles, seed=seed)
        att = {p: run(cfg, trace, p, seed).attainment()["_all"]["ttft"] for p in ("prism",) + BASELINES}
        seed_ok = att["prism"] >= 0.90 and all(att[b] <= att["prism"] - 0.15 for b in BASELINES)
        ok &= seed_ok
        rows.append(" ".join(f"{p[:4]}={v:.3f}" for p, v in att.items()))
    secs = time.perf_counter() - t0
    ok &= secs < 120
    criterion(6, ok, f"{secs:.0f}s; " + " | ".join(rows))
    assert ok, rows


def _cum_at(series, t):
    before = [s for s in series if s[0] <= t + 1e-9]
    return before[-1][3] if before else 0.0


def test_criterion_7_two_phase_memory_use(criterion):
    cfg, profiles = two_phase()
    lo, hi = 20.0, 40.0
    trace = synth_trace(profiles, seed=0)
    prism = run(cfg, trace, "prism", 0)
    static = run(cfg, trace, "static_partition", 0)
    qlm = run(cfg, trace, "qlm_timeshare", 0)
    whole = (prism.kv_byte_seconds[0], static.kv_byte_seconds[0])
    surge = tuple(_cum_at(m.series[0], hi) - _cum_at(m.series[0], lo) for m in (prism, static))
    swaps = [p["t"] for p in qlm.plan_log if p["kind"] == "swap"]
    zero_at = {round(t, 6) for t, kv, *_ in qlm.series[0] if kv == 0}
    drops = all(round(t, 6) in zero_at for t in swaps)
    ok = whole[0] >= whole[1] and surge[0] > surge[1] and swaps and drops
    criterion(7, ok, f"KV GB*s whole prism {whole[0] / GB:.0f} vs static {whole[1] / GB:.0f}, surge "
                     f"{surge[0] / GB:.0f} vs {surge[1] / GB:.0f}; qlm {len(swaps)} swaps, "
                     f"zero at each: {drops}")
    assert ok


def test_criterion_8_determinism(criterion):
    cfg = replace(load_config(SMALL), n_gpus=2)
    trace = synth_trace(cfg.synth.profiles, seed=4)
    same = all(run(cfg, trace, p, 4).to_json() == run(cfg, trace, p, 4).to_json()
               for p in ("prism", "dedicated", "static_partition", "mux_flexible", "qlm_timeshare"))
    a = sweep_rows(cfg, "gpu_count", [1, 2], ["prism", "qlm_timeshare"], jobs=1)
    b = sweep_rows(cfg, "gpu_count", [1, 2], ["prism", "qlm_timeshare"], jobs=2)
    c = sweep_rows(cfg, "gpu_count", [1, 2], ["prism", "qlm_timeshare"], jobs=1)
    ok = criterion(8, same and a == b == c,
                   f"identical metrics JSON for 5 policies: {same}; sweep rows stable across repeats and jobs: {a == b == c}")
    assert ok


def _stats(tmp_path, name, events):
    trace = tmp_path / f"{name}.jsonl"
    write_trace(sorted(events, key=lambda e: e.arrival_time), trace)
    out = tmp_path / name
    assert cmd_stats(str(trace), str(out), idle_threshold=10) == 0
    return json.loads((out / "stats.json").read_text())


def test_criterion_9_workload_stats_fixtures(tmp_path, criterion):
    ev = lambda t, m="a": TraceEvent(t, m, 16, 4)
    two = _stats(tmp_path, "cv2", [ev(0.5 + i) for i in range(2)] + [ev(60.5 + i) for i in range(8)])
    three = _stats(tmp_path, "cv3", [ev(0.0, "b")] + [ev(60.0 + 15 * i, "b") for i in range(2)]
                   + [ev(120.0 + 15 * i, "b") for i in range(3)])
    cv_a, cv_b = two["models"]["a"]["cv"], three["models"]["b"]["cv"]
    # b sees 1, 2 and 3 requests per minute: sigma = sqrt(2/3), mu = 2
    cv_ok = abs(cv_a - 0.6) <= 1e-9 and abs(cv_b - math.sqrt(2 / 3) / 2) <= 1e-9
    idle = _stats(tmp_path, "idle", [ev(t) for t in (0.0, 60.0, 120.0)] + [ev(t, "b") for t in (0.0, 5.0, 20.0, 50.0)])
    a, b = idle["models"]["a"], idle["models"]["b"]
    idle_ok = (a["idle_intervals"], a["idle_over_threshold"], a["median_idle"]) == (2, 2, 60.0) \
        and (b["idle_intervals"], b["idle_over_threshold"], b["median_idle"]) == (3, 2, 15.0)
    counts = [5] * 6 + [22, 23, 22, 23]
    tail = _stats(tmp_path, "tail", [ev(float(i), f"m{k}") for k, n in enumerate(counts) for i in range(n)])
    share = {round(p["model_fraction"], 6): p["request_share"] for p in tail["popularity"]}
    split_ok = share[0.6] == 0.25
    ok = criterion(9, cv_ok and idle_ok and split_ok,
                   f"CV {cv_a:.12f} and {cv_b:.12f}; idle counts ok: {idle_ok}; "
                   f"least popular 60% of models carry {share[0.6]:.2%} of requests")
    assert ok


def test_criterion_10_deadline_admission_helps_strict_model(criterion):
    cfg, profiles = strict_and_loose()
    rows, ok = [], True
    for seed in range(5):
        trace = synth_trace(profiles, seed=seed)
        mh = run(cfg.with_policy("prism", admission="mh"), trace, None, seed).attainment()
        fifo = run(cfg.with_policy("prism", admission="fifo"), trace, None, seed).attainment()
        gain = mh["strict"]["ttft"] - fifo["strict"]["ttft"]
        loose_ok = mh["loose"]["ttft"] >= fifo["loose"]["ttft"] - 0.05
        ok &= gain >= 0.20 and loose_ok
        rows.append(f"strict {fifo['strict']['ttft']:.3f}->{mh['strict']['ttft']:.3f}, "
                    f"loose {fifo['loose']['ttft']:.3f}->{mh['loose']['ttft']:.3f}")
    criterion(10, ok, "fifo->mh: " + " | ".join(rows))
    assert ok, rows
