import pytest

import scalesim as ss
from scalesim.traces import TraceError, dump_trace, load_trace


def test_poisson_rate_and_reproducibility():
    a = ss.generate_trace("poisson", {"rate_per_s": 10, "duration_s": 60}, seed=7)
    b = ss.generate_trace("poisson", {"rate_per_s": 10, "duration_s": 60}, seed=7)
    assert a == b
    assert 480 <= len(a) <= 720  # ~600 expected
    arrivals = [r.arrival_ms for r in a]
    assert arrivals == sorted(arrivals)


def test_different_seed_different_trace():
    a = ss.generate_trace("poisson", {"rate_per_s": 10, "duration_s": 10}, seed=1)
    b = ss.generate_trace("poisson", {"rate_per_s": 10, "duration_s": 10}, seed=2)
    assert a != b


def test_burst_multiplies_rate():
    params = {
        "rate_per_s": 20,
        "duration_s": 30,
        "bursts": [{"start_s": 10, "duration_s": 2, "multiplier": 5}],
    }
    trace = ss.generate_trace("burst", params, seed=3)
    burst = [r for r in trace if 10_000 <= r.arrival_ms < 12_000]
    before = [r for r in trace if 8_000 <= r.arrival_ms < 10_000]
    ratio = len(burst) / max(len(before), 1)
    assert 3.0 <= ratio <= 7.0  # qualitative 5x shape


def test_token_ranges_sampled():
    trace = ss.generate_trace(
        "poisson",
        {"rate_per_s": 50, "duration_s": 5, "prompt_tokens": [100, 200],
         "output_tokens": 32},
        seed=9,
    )
    assert all(100 <= r.prompt_tokens <= 200 for r in trace)
    assert all(r.output_tokens == 32 for r in trace)


def test_replay_file_round_trip(tmp_path):
    trace = ss.generate_trace("poisson", {"rate_per_s": 5, "duration_s": 5}, seed=4)
    path = tmp_path / "trace.jsonl"
    dump_trace(trace, path)
    replayed = ss.generate_trace("replay-file", {"path": str(path)}, seed=0)
    assert replayed == trace


def test_bad_inputs(tmp_path):
    with pytest.raises(TraceError):
        ss.generate_trace("weibull", {}, seed=0)
    with pytest.raises(TraceError):
        ss.generate_trace("poisson", {"rate_per_s": 0, "duration_s": 5}, seed=0)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"arrival_ms": 1}\n')
    with pytest.raises(TraceError):
        load_trace(bad)
