import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from kvshare.workload import (LengthDist, ModelProfile, TraceError, TraceEvent, compute_stats, empirical_cdf,
                              parse_trace, popularity_split, profile_from_dict, rng_stream, scale_trace,
                              synth_trace, write_trace)


def ev(t, m="a", p=10, o=5):
    return TraceEvent(t, m, p, o)


def write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))


def test_empty_file_parses_to_nothing(tmp_path):
    f = tmp_path / "t.jsonl"
    f.write_text("")
    assert parse_trace(f) == []


def test_round_trip_three_events(tmp_path):
    f = tmp_path / "t.jsonl"
    events = [ev(0.0), ev(1.5, "b"), ev(1.5, "a", 7, 3)]
    write_trace(events, f)
    assert parse_trace(f) == events


def test_zero_prompt_rejected_with_line_number(tmp_path):
    f = tmp_path / "t.jsonl"
    write_lines(f, [{"t": 0, "model": "a", "prompt": 3, "output": 1},
                    {"t": 1, "model": "a", "prompt": 0, "output": 1}])
    with pytest.raises(TraceError, match=":2:"):
        parse_trace(f)


def test_malformed_and_out_of_order_lines_rejected(tmp_path):
    f = tmp_path / "t.jsonl"
    f.write_text('{"t": 0, "model": "a"\n')
    with pytest.raises(TraceError, match=":1:"):
        parse_trace(f)
    write_lines(f, [{"t": 5, "model": "a", "prompt": 3, "output": 1},
                    {"t": 1, "model": "a", "prompt": 3, "output": 1}])
    with pytest.raises(TraceError, match="backwards"):
        parse_trace(f)


def test_negative_arrival_rejected():
    with pytest.raises(TraceError):
        ev(-1.0)


def ten_events():
    return [ev(5.0 + 30 * i, "ab"[i % 2]) for i in range(10)]


def test_scale_by_one_is_identity():
    t = ten_events()
    assert scale_trace(t, 1) == t


def test_scale_by_three_triples_minute_counts():
    t = ten_events()
    s = scale_trace(t, 3, seed=4)
    assert len(s) == 30
    minute = lambda tr: Counter(int(e.arrival_time // 60) for e in tr)
    assert minute(s) == Counter({k: 3 * v for k, v in minute(t).items()})
    assert all(e.arrival_time >= 0 for e in s)


def test_scale_is_deterministic_and_keeps_lengths():
    t = [ev(1.0, "a", 100, 9), ev(2.0, "b", 50, 4)]
    assert scale_trace(t, 3, seed=1) == scale_trace(t, 3, seed=1)
    assert scale_trace(t, 3, seed=1) != scale_trace(t, 3, seed=2)
    assert {(e.prompt_tokens, e.output_tokens) for e in scale_trace(t, 3) if e.model_id == "a"} == {(100, 9)}


@pytest.mark.parametrize("bad", [0, -1, 2.5])
def test_scale_rejects_bad_factor(bad):
    with pytest.raises(ValueError):
        scale_trace(ten_events(), bad)


def test_idle_intervals_of_minute_spaced_arrivals():
    st_ = compute_stats([ev(0.0), ev(60.0), ev(120.0)], idle_threshold=10).models["a"]
    assert st_.idle_intervals == [60.0, 60.0]
    assert st_.median_idle == 60.0
    assert st_.idle_per_hour == pytest.approx(2 / (120 / 3600))


def test_constant_minute_rate_has_zero_cv():
    trace = [ev(m * 60 + k * 10.0) for m in range(10) for k in range(5)]
    assert compute_stats(trace).models["a"].cv == pytest.approx(0.0)


def test_cv_of_two_and_eight_per_minute():
    trace = [ev(1.0 + i) for i in range(2)] + [ev(61.0 + i) for i in range(8)]
    assert compute_stats(trace).models["a"].cv == pytest.approx(0.6)


def test_single_arrival_flags_idle_stats_unavailable():
    d = compute_stats([ev(0.0, "a"), ev(5.0, "b"), ev(9.0, "b")]).to_dict()
    assert d["a"]["idle_available"] is False and d["a"]["median_idle"] is None
    assert d["b"]["idle_available"] is True


def test_empty_trace_stats_rejected():
    with pytest.raises(TraceError):
        compute_stats([])


def test_popularity_split_and_cdf():
    trace = [ev(float(i), f"m{k}") for k, n in enumerate([1, 1, 2, 6]) for i in range(n)]
    trace.sort(key=lambda e: e.arrival_time)
    stats = compute_stats(trace)
    assert popularity_split(stats, 0.5) == pytest.approx(0.2)
    assert empirical_cdf([3, 1, 2]) == [(1, 1 / 3), (2, 2 / 3), (3, 1.0)]


def test_zero_rate_gives_empty_trace():
    assert synth_trace([ModelProfile("a", [(100.0, 0.0)])], seed=0) == []


def test_poisson_count_and_reproducibility():
    prof = [ModelProfile("a", [(100.0, 10.0)])]
    t = synth_trace(prof, seed=3)
    assert abs(len(t) - 1000) <= 4 * 1000 ** 0.5
    assert t == synth_trace(prof, seed=3)
    assert all(a.arrival_time <= b.arrival_time for a, b in zip(t, t[1:]))


def test_two_phase_rates_match_profile():
    profs = [ModelProfile("A", [(50.0, 8.0), (50.0, 0.0)]), ModelProfile("B", [(50.0, 1.0), (50.0, 12.0)])]
    per = Counter()
    for seed in range(20):
        for e in synth_trace(profs, seed=seed):
            per[(e.model_id, e.arrival_time >= 50.0)] += 1
    want = {("A", False): 8, ("A", True): 0, ("B", False): 1, ("B", True): 12}
    for key, rate in want.items():
        assert per[key] / (20 * 50.0) == pytest.approx(rate, rel=0.1, abs=1e-9)


def test_adding_a_model_leaves_earlier_streams_alone():
    a = ModelProfile("a", [(30.0, 3.0)])
    only_a = synth_trace([a], seed=5)
    both = [e for e in synth_trace([a, ModelProfile("b", [(30.0, 5.0)])], seed=5) if e.model_id == "a"]
    assert both == only_a


def test_named_streams_are_independent():
    assert rng_stream(1, "trace").random() != rng_stream(1, "jitter").random()
    assert rng_stream(1, "trace").random() == rng_stream(1, "trace").random()


def test_length_distribution_bounds_and_profile_parsing():
    d = LengthDist(100, 1.0, 20, 300)
    vals = d.sample(rng_stream(0, "x"), 2000)
    assert vals.min() >= 20 and vals.max() <= 300
    p = profile_from_dict({"model": "m", "segments": [[10, 2]], "prompt": 64,
                           "output": {"median": 8, "sigma": 0.2}})
    assert p.segments == [(10.0, 2.0)] and p.prompt.median == 64 and p.output.sigma == 0.2


# eighths of a second keep translated times exact
arrivals = st.lists(st.tuples(st.integers(0, 40000).map(lambda k: k / 8), st.sampled_from("abc")),
                    min_size=1, max_size=40)


@settings(max_examples=100, deadline=None)
@given(arrivals, st.integers(1, 4), st.integers(0, 100))
def test_scaling_multiplies_counts_per_model(raw, n, seed):
    trace = sorted((ev(t, m) for t, m in raw), key=lambda e: e.arrival_time)
    s = scale_trace(trace, n, seed=seed)
    assert len(s) == n * len(trace)
    assert Counter(e.model_id for e in s) == Counter({k: n * v for k, v in Counter(e.model_id for e in trace).items()})


@settings(max_examples=100, deadline=None)
@given(arrivals, st.sampled_from([0.0, 17.0, 600.0, 3600.0]))
def test_stats_invariant_under_time_shift(raw, shift):
    trace = sorted((ev(t, m) for t, m in raw), key=lambda e: e.arrival_time)
    moved = [ev(e.arrival_time + shift, e.model_id) for e in trace]
    a, b = compute_stats(trace).to_dict(), compute_stats(moved).to_dict()
    assert a.keys() == b.keys()
    for k in a:
        for field in ("requests", "idle_intervals", "idle_over_threshold", "idle_available"):
            assert a[k][field] == b[k][field]
        for field in ("cv", "median_idle"):
            assert (a[k][field] is None) == (b[k][field] is None)
            if a[k][field] is not None:
                assert a[k][field] == pytest.approx(b[k][field], abs=1e-6)
