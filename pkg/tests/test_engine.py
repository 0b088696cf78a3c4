import pytest
from hypothesis import given, settings, strategies as st

from kvshare.engine import (GB, POOLED, SERVING, ActivationParams, Engine, GpuNode, ModelSpec, Request,
                            activate, deactivate, throughput_of)
from kvshare.pagealloc import PAGE_BYTES, AllocFailure, PhysicalLedger, UsageError, alloc_kvcache


def spec(**kw):
    base = dict(model_id="m", weight_bytes=16 * GB, token_kv_bytes=128 * 1024, ttft_slo=1.0, tpot_slo=0.1)
    base.update(kw)
    return ModelSpec(**base)


def serving_engine(s, pages=1000, reserve_fraction=0.0):
    led = PhysicalLedger(pages, buffer_target=0, map_latency=0.0)
    eng = Engine(0, reserve_fraction=reserve_fraction)
    eng.spec, eng.ledger, eng.status = s, led, SERVING
    eng.pool = alloc_kvcache(led, s.model_id, s.token_kv_bytes, pages)
    return eng


def req(i, prompt, output, s, arrival=0.0):
    return Request(i, s.model_id, arrival, prompt, output, s.ttft_slo, s.c)


def live_slots(r):
    return sum(len(sl) for _, sl in r.extents)


def test_single_chunk_prefill_emits_first_token():
    s = spec()
    eng = serving_engine(s)
    r = req(0, 512, 4, s)
    eng.submit(r)
    out = eng.step(0.0)
    assert out.first_tokens == [r]
    assert out.chunk_tokens == 512
    assert out.duration == pytest.approx(s.alpha + s.beta * 512)
    assert r.first_token == pytest.approx(out.duration)


def test_prefill_estimate_is_prompt_over_speed():
    s = spec(prefill_speed=16384.0)
    assert s.prefill_time(4096) == pytest.approx(0.25)
    assert req(0, 4096, 1, s).exec_estimate == pytest.approx(0.25)


def test_decode_shortage_preempts_newest_request():
    # one token per page; three requests each hold 2 pages after prefill
    s = spec(token_kv_bytes=PAGE_BYTES)
    eng = serving_engine(s, pages=8)
    rs = [req(i, 1, 5, s) for i in range(3)]
    for r in rs:
        eng.submit(r)
    eng.finish(eng.step(0.0))
    assert eng.ledger.mapped_pages == 6
    # next decode needs 3 pages, only 2 are free
    out = eng.step(1.0)
    assert out.preemptions == [rs[2]]
    assert out.decode_tokens == 2
    assert rs[2].preemptions == 1 and rs[2].generated == 1
    assert out.duration > 0
    for r in eng.running:
        assert live_slots(r) == r.kv_tokens


def test_prefill_pauses_when_memory_is_short():
    s = spec(token_kv_bytes=PAGE_BYTES)
    eng = serving_engine(s, pages=2)
    eng.submit(req(0, 10, 2, s))
    out = eng.step(0.0)
    assert out.chunk_tokens == 0 and out.duration == 0
    assert len(eng.waiting) == 1


def test_kv_slots_track_processed_tokens_until_completion():
    s = spec(chunk_size=64)
    eng = serving_engine(s)
    r = req(0, 150, 6, s)
    eng.submit(r)
    t = 0.0
    while r.completion is None:
        out = eng.step(t)
        if r in eng.running:
            assert live_slots(r) == r.kv_tokens == r.prefilled + max(0, r.generated - 1) + (1 if r.generated else 0)
        eng.finish(out)
        t += out.duration
    assert r.kv_tokens == 0 and not r.extents
    assert eng.ledger.mapped_pages == 0


def test_ttft_not_below_chunked_prefill_bound():
    s = spec(chunk_size=256)
    eng = serving_engine(s)
    r = req(0, 1000, 2, s)
    eng.submit(r)
    t = 0.0
    while r.first_token is None:
        out = eng.step(t)
        eng.finish(out)
        t += out.duration
    assert r.first_token >= r.prompt / s.c - 1e-12


def test_throughput_monotone_and_doubles_from_5_to_15_gb():
    s = spec()
    grid = [5, 7, 9, 11, 13, 15]
    tps = [throughput_of(g * GB, s, horizon=8.0, warmup=2.0) for g in grid]
    assert all(b >= a for a, b in zip(tps, tps[1:]))
    assert tps[-1] >= 2.0 * tps[0]


def test_throughput_rejects_budget_below_one_request():
    with pytest.raises(ValueError):
        throughput_of(PAGE_BYTES, spec())


def test_throughput_with_one_request_budget_runs_batch_of_one():
    s = spec(token_kv_bytes=PAGE_BYTES // 16)
    budget = -(-(512 + 256 + 1) // 16) * PAGE_BYTES
    one = throughput_of(budget, s)
    assert one > 0
    assert throughput_of(3 * budget, s) >= one


def test_activation_anchor_values():
    p = ActivationParams()
    assert p.load_latency(16 * GB, 1, "parallel") == pytest.approx(0.7)
    assert p.load_latency(28 * GB, 1, "parallel") == pytest.approx(1.3)
    assert p.load_latency(28 * GB, 1, "naive") == pytest.approx(7.1)
    assert p.load_latency(140 * GB, 8, "parallel") == pytest.approx(1.5)
    assert 7.1 / 1.3 == pytest.approx(5.5, rel=0.01)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 200 * GB), st.sampled_from([1, 2, 4, 8]))
def test_parallel_never_slower_than_naive(w, tp):
    p = ActivationParams()
    assert p.load_latency(w, tp, "parallel") <= p.load_latency(w, tp, "naive")


def test_second_activation_saves_exactly_the_realign_cost():
    gpu = GpuNode(0, 80 * GB, pool_size=1)
    s = spec()
    first = activate(gpu, s)
    first.engine.status = SERVING
    deactivate(gpu, first.engine)
    second = activate(gpu, s)
    assert second.engine is first.engine
    assert first.realigned and not second.realigned
    assert first.latency - second.latency == pytest.approx(ActivationParams().realign_s)
    assert second.latency == pytest.approx(0.7)


def test_activation_without_pooled_engine_pays_engine_init():
    gpu = GpuNode(0, 80 * GB, pool_size=0)
    out = activate(gpu, spec())
    assert out.cold_engine
    assert out.latency == pytest.approx(0.7 + ActivationParams().realign_s + ActivationParams().engine_init_s)


def test_activation_rejected_when_weights_do_not_fit():
    gpu = GpuNode(0, 20 * GB)
    activate(gpu, spec(model_id="a"))
    with pytest.raises(AllocFailure):
        activate(gpu, spec(model_id="b"))


def test_deactivate_returns_kv_and_weights():
    gpu = GpuNode(0, 80 * GB)
    out = activate(gpu, spec())
    eng = out.engine
    eng.status = SERVING
    r = req(0, 300, 1, eng.spec)
    eng.submit(r)
    eng.finish(eng.step(0.0))
    assert gpu.ledger.mapped_pages == 0 and gpu.ledger.weights_total > 0
    deactivate(gpu, eng)
    assert eng.status == POOLED
    assert gpu.ledger.weights_total == 0 and gpu.ledger.mapped_pages == 0


def test_deactivate_with_live_requests_or_pooled_engine_fails():
    gpu = GpuNode(0, 80 * GB)
    eng = activate(gpu, spec()).engine
    eng.status = SERVING
    eng.submit(req(0, 10, 5, eng.spec))
    with pytest.raises(UsageError):
        deactivate(gpu, eng)
    with pytest.raises(UsageError):
        deactivate(gpu, gpu.pooled[0])
