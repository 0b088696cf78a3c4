"""Command-line interface: ``run``, ``sweep``, ``verify`` and ``stats``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a configuration
or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import POLICY_KINDS, SCHEMA_VERSION, ConfigError, RunConfig, load_config
from .sim import SimMetrics, Simulator, attainment, load_trace_for
from .verify import SUITES, run_suites
from .workload import (TraceError, compute_stats, empirical_cdf, parse_trace, popularity_split)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SWEEP_AXES = ("rate_scale", "slo_scale", "gpu_count")
SWEEP_COLUMNS = ["policy", "axis_value", "model", "ttft_attainment", "tpot_attainment", "throughput", "errors"]


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "inf" if math.isinf(x) else f"{x:.6f}"
    return str(x)


def _prepare(config_path, trace_path: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = load_config(config_path)
    if trace_path:
        cfg = replace(cfg, trace_path=str(trace_path), synth=None)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def simulate(cfg: RunConfig) -> SimMetrics:
    trace = load_trace_for(cfg, cfg.seed)
    return Simulator(cfg, trace, cfg.seed).run()


# -- run ----------------------------------------------------------------------------------


def write_outputs(metrics: SimMetrics, out_dir) -> list:
    """Write the report files for one run; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out / "metrics.json"
    p.write_text(metrics.to_json() + "\n")
    paths.append(p)

    p = out / "requests.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["req_id", "model", "arrival", "ttft", "tpot", "preemptions"])
        for r in metrics.requests:
            w.writerow([r["req_id"], r["model"], _fmt(r["arrival"]), _fmt(r["ttft"]), _fmt(r["tpot"]),
                        r["preemptions"]])
    paths.append(p)

    p = out / "timeseries.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "gpu", "mapped_kv_bytes", "kvpr", "kv_byte_seconds"])
        for g in sorted(metrics.series):
            for t, kv, pr, cum in metrics.series[g]:
                w.writerow([_fmt(t), g, kv, _fmt(pr), _fmt(cum)])
    paths.append(p)

    p = out / "queues.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "gpu", "model", "queue_len"])
        for t, g, m, n in metrics.queue_log:
            w.writerow([_fmt(t), g, m, n])
    paths.append(p)

    p = out / "plan.jsonl"
    with open(p, "w") as fh:
        for entry in metrics.plan_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    paths.append(p)

    if metrics.iteration_log:
        p = out / "iterations.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "gpu", "model", "batch", "chunk_tokens", "duration_ms", "preemptions"])
            for t, g, m, b, c, d, n in metrics.iteration_log:
                w.writerow([_fmt(t), g, m, b, c, _fmt(d), n])
        paths.append(p)

    if metrics.alloc_log:
        p = out / "alloc.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "gpu", "model", "event", "pages"])
            for e in metrics.alloc_log:
                w.writerow([_fmt(e.time), e.gpu, e.model, e.event, e.pages])
        paths.append(p)
    return paths


def format_summary(metrics: SimMetrics) -> str:
    att = metrics.attainment()
    tp = metrics.throughput
    lines = [f"policy {metrics.policy}  seed {metrics.seed}  requests {len(metrics.requests)}  "
             f"makespan {metrics.makespan:.1f}s",
             f"{'model':<16}{'requests':>9}{'ttft':>8}{'tpot':>8}{'tok/s':>11}"]
    for m in sorted(metrics.models):
        a = att[m]
        lines.append(f"{m:<16}{a['requests']:>9}{a['ttft']:>8.3f}{a['tpot']:>8.3f}{tp['per_model'][m]:>11.1f}")
    a = att["_all"]
    lines.append(f"{'all':<16}{a['requests']:>9}{a['ttft']:>8.3f}{a['tpot']:>8.3f}{tp['idle_excluded']:>11.1f}")
    lines.append("counts " + " ".join(f"{k}={v}" for k, v in sorted(metrics.counts.items())))
    return "\n".join(lines)


def cmd_run(config_path, trace_path=None, out_dir="out", seed=None) -> int:
    try:
        cfg = _prepare(config_path, trace_path, seed)
        trace = load_trace_for(cfg, cfg.seed)
        sim = Simulator(cfg, trace, cfg.seed)
    except (ConfigError, TraceError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        metrics = sim.run()
    except RuntimeError as exc:
        _err(f"simulation failed: {exc}")
        return EXIT_RUNTIME
    write_outputs(metrics, out_dir)
    print(format_summary(metrics))
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------------------


def _parse_values(axis: str, text: str) -> list:
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ".." in tok and axis == "gpu_count":
            a, b = tok.split("..")
            vals.extend(range(int(a), int(b) + 1))
        else:
            vals.append(int(tok) if axis == "gpu_count" else float(tok))
    if not vals:
        raise ConfigError("--values: no values given")
    for v in vals:
        if v <= 0:
            raise ConfigError(f"--values: {v} is not positive")
    return vals


def _cell_config(cfg: RunConfig, policy: str, axis: str, value) -> RunConfig:
    cfg = cfg.with_policy(policy)
    if axis == "gpu_count":
        cfg = replace(cfg, n_gpus=int(value))
    elif axis == "rate_scale":
        if cfg.synth is not None:
            cfg = replace(cfg, synth=replace(cfg.synth, rate_scale=cfg.synth.rate_scale * value))
        else:
            if float(value) != int(value):
                raise ConfigError(f"rate_scale {value}: a recorded trace can only be scaled by an integer")
            cfg = replace(cfg, trace_scale=cfg.trace_scale * int(value))
    return cfg


def _sweep_cell(cfg: RunConfig, policy: str, axis: str, value):
    """Run one cell; returns ``(metrics, error)``."""
    try:
        return simulate(_cell_config(cfg, policy, axis, value)), None
    except (ConfigError, TraceError, RuntimeError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def sweep_rows(cfg: RunConfig, axis: str, values: Sequence, policies: Sequence[str], jobs: int = 1) -> list:
    """Long-format rows, ordered by policy, axis value and model as given."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"--axis: expected one of {SWEEP_AXES}, got {axis!r}")
    for p in policies:
        if p not in POLICY_KINDS:
            raise ConfigError(f"--policies: unknown policy {p!r}")
    cells = [(p, v) for p in policies for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_sweep_cell, cfg, p, axis, v) for p, v in _run_cells(cfg, axis, cells)]
            results = [f.result() for f in futs]
    else:
        results = [_sweep_cell(cfg, p, axis, v) for p, v in _run_cells(cfg, axis, cells)]
    by_cell = dict(zip(_run_cells(cfg, axis, cells), results))
    models = cfg.model_ids + ["_all"]
    rows = []
    for p, v in cells:
        metrics, error = by_cell[(p, _run_value(axis, v))]
        if metrics is None:
            for m in models:
                rows.append([p, _fmt_value(v), m, "", "", "", error])
            continue
        att = attainment(metrics, slo_scale=v if axis == "slo_scale" else None)
        for m in models:
            tp = metrics.throughput["idle_excluded"] if m == "_all" else metrics.throughput["per_model"][m]
            rows.append([p, _fmt_value(v), m, _fmt(att[m]["ttft"]), _fmt(att[m]["tpot"]), _fmt(tp), ""])
    return rows


def _run_value(axis: str, v):
    # the SLO axis rescores one run per policy from its per-request latencies
    return None if axis == "slo_scale" else v


def _run_cells(cfg: RunConfig, axis: str, cells) -> list:
    seen, out = set(), []
    for p, v in cells:
        key = (p, _run_value(axis, v))
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def _fmt_value(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:g}"


def cmd_sweep(config_path, axis: str, values: str, policies: str, out_path="sweep.csv",
              jobs: int = 1, seed=None, trace_path=None) -> int:
    try:
        cfg = _prepare(config_path, trace_path, seed)
        vals = _parse_values(axis, values)
        pols = [p.strip() for p in policies.split(",") if p.strip()]
        if not pols:
            raise ConfigError("--policies: no policies given")
        rows = sweep_rows(cfg, axis, vals, pols, jobs)
    except (ConfigError, TraceError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
    failed = sum(1 for r in rows if r[-1])
    print(f"wrote {len(rows)} rows to {out_path} ({failed} from failed cells)")
    for r in rows:
        if r[-1] and r[2] == "_all":
            print(f"cell {r[0]} {r[1]}: {r[-1]}", file=sys.stderr)
    return EXIT_OK if failed < len(rows) else EXIT_RUNTIME


# -- verify ----------------------------------------------------------------------------------


def cmd_verify(suite: str = "all", seed: int = 0) -> int:
    names = SUITES if suite == "all" else (suite,)
    if any(n not in SUITES for n in names):
        _err(f"--suite: expected one of {SUITES + ('all',)}, got {suite!r}")
        return EXIT_CONFIG
    return EXIT_OK if run_suites(names, seed=seed) else EXIT_RUNTIME


# -- stats -------------------------------------------------------------------------------------


def stats_report(trace, idle_threshold: float = 10.0) -> tuple:
    """``(report dict, {csv name: [(value, cdf), ...]})`` for a trace."""
    st = compute_stats(trace, idle_threshold=idle_threshold)
    per = st.to_dict()
    counts = sorted(s.requests for s in st.models.values())
    n = len(counts)
    popularity = [{"model_fraction": k / n, "request_share": popularity_split(st, k / n)}
                  for k in range(1, n + 1)]
    report = {
        "schema": SCHEMA_VERSION,
        "duration": st.duration,
        "idle_threshold": idle_threshold,
        "models": per,
        "popularity": popularity,
    }
    cdfs = {
        "requests_cdf.csv": empirical_cdf([float(c) for c in counts]),
        "median_idle_cdf.csv": empirical_cdf([s.median_idle for s in st.models.values() if s.median_idle is not None]),
        "idle_per_hour_cdf.csv": empirical_cdf([s.idle_per_hour for s in st.models.values()
                                                if s.idle_per_hour is not None]),
        "cv_cdf.csv": empirical_cdf([s.cv for s in st.models.values() if s.cv is not None]),
    }
    return report, cdfs


def cmd_stats(trace_path, out_dir="stats", idle_threshold: float = 10.0) -> int:
    try:
        trace = parse_trace(trace_path)
        report, cdfs = stats_report(trace, idle_threshold)
    except (TraceError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    for name, rows in cdfs.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "cdf"])
            for v, c in rows:
                w.writerow([repr(float(v)), repr(c)])
    print(f"{len(report['models'])} models, {len(trace)} requests over {report['duration']:.1f}s; "
          f"report in {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvshare", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", help="JSONL trace; overrides the config's trace section")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", help="run policies over one axis and write a long-format CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--trace")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma list; gpu_count also accepts a..b")
    p.add_argument("--policies", default="prism", help="comma list")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="sweep.csv", help="CSV path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("verify", help="fuzz the schedulers and allocator against reference solvers")
    p.add_argument("--suite", default="all", choices=SUITES + ("all",))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stats", help="workload statistics of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default="stats", help="output directory")
    p.add_argument("--idle-threshold", type=float, default=10.0)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.trace, args.out, args.seed)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.axis, args.values, args.policies, args.out,
                         max(1, args.jobs), args.seed, args.trace)
    if args.command == "verify":
        return cmd_verify(args.suite, args.seed)
    return cmd_stats(args.trace, args.out, args.idle_threshold)


if __name__ == "__main__":
    sys.exit(main())
