import math
from collections import deque
from dataclasses import dataclass, field

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scalesim as ss
from scalesim.livescale import (
    LayerLoaded,
    LoadCompleted,
    LoadStarted,
    Phase,
    PipelineError,
    ProtocolError,
    RequestArrival,
    SolverDeadlineExceeded,
    mutate_decode_to_prefill,
)
from scalesim.planner import PlanEdge, PlanEstimate


# ---- pipeline configuration ---------------------------------------------


def test_single_batch_offset_zero_stays_on_source():
    cfg = ss.configure_pipeline(1, 12, 2.0, first_layer_offset=0)
    assert cfg.splits == [(0, 12)]


def test_fig11_scenario_beats_best_effort():
    cfg = ss.configure_pipeline(6, 7, 6.0)
    be = ss.best_effort_pipeline(6, 7, 6.0)
    assert be.splits == [(1, 6)] * 6
    assert cfg.objective() < be.objective()
    assert cfg.is_feasible()


def test_small_case_equals_enumeration():
    cfg = ss.configure_pipeline(3, 4, 1.0)
    assert cfg.objective() == pytest.approx(ss.enumerate_pipeline_optimum(3, 4, 1.0))


@pytest.mark.parametrize("time_l", [0.5, 1, 2, 6])
@pytest.mark.parametrize("batches,layers", [(1, 3), (2, 5), (3, 8), (4, 6), (5, 7)])
def test_solver_exactness_grid(batches, layers, time_l):
    cfg = ss.configure_pipeline(batches, layers, time_l)
    assert cfg.is_feasible(), cfg.constraint_violations()
    assert cfg.objective() == pytest.approx(
        ss.enumerate_pipeline_optimum(batches, layers, time_l))


@pytest.mark.parametrize("offset", [0, 1])
@pytest.mark.parametrize("c3_form", ["source-prefix", "target-prefix"])
def test_solver_exactness_other_conventions(offset, c3_form):
    cfg = ss.configure_pipeline(4, 6, 2.0, first_layer_offset=offset, c3_form=c3_form)
    assert cfg.is_feasible()
    assert cfg.objective() == pytest.approx(ss.enumerate_pipeline_optimum(
        4, 6, 2.0, first_layer_offset=offset, c3_form=c3_form))


def test_weighted_solver_matches_enumeration():
    weights = [2.0, 0.5, 1.0, 1.5]
    cfg = ss.configure_pipeline(4, 5, 1.0, weights=weights)
    assert cfg.objective() == pytest.approx(
        ss.enumerate_pipeline_optimum(4, 5, 1.0, weights=weights))


def test_dominance_over_feasible_best_effort():
    for time_l in (0.5, 1, 2, 6):
        for n in range(1, 6):
            for layers in range(3, 9):
                be = ss.best_effort_pipeline(n, layers, time_l)
                if not be.is_feasible():
                    continue  # greedy can violate C2; no objective claim then
                cfg = ss.configure_pipeline(n, layers, time_l)
                assert cfg.objective() <= be.objective() + 1e-9


def test_solver_deadline():
    with pytest.raises(SolverDeadlineExceeded):
        ss.configure_pipeline(16, 80, 1.0, deadline_s=0.0)


def test_invalid_inputs():
    with pytest.raises(PipelineError):
        ss.configure_pipeline(0, 4, 1.0)
    with pytest.raises(PipelineError):
        ss.configure_pipeline(2, 0, 1.0)
    with pytest.raises(PipelineError):
        ss.configure_pipeline(2, 4, 1.0, weights=[1.0, -1.0])


@settings(max_examples=40, deadline=None)
@given(
    batches=st.integers(1, 4),
    layers=st.integers(1, 6),
    time_l=st.sampled_from([0.5, 1.0, 2.0]),
)
def test_constraints_always_hold(batches, layers, time_l):
    cfg = ss.configure_pipeline(batches, layers, time_l)
    assert cfg.constraint_violations() == []
    total = sum(t + s for t, s in cfg.splits)
    assert total == batches * layers


# ---- best effort ----------------------------------------------------------


def test_best_effort_fig11_all_one_six():
    be = ss.best_effort_pipeline(6, 7, 6.0)
    assert be.splits == [(1, 6)] * 6


def test_best_effort_instant_load_half_split():
    be = ss.best_effort_pipeline(4, 7, 0.0)
    assert be.splits == [(3, 4)] * 4


def test_best_effort_greedy_replay():
    # layers available at start times 0,2,4: offset 1 + floor(t/2)
    be = ss.best_effort_pipeline(2, 4, 2.0)
    assert be.splits[0] == (1, 3)
    # batch 2 starts on the target at t=1: still only one layer loaded
    assert be.splits[1] == (1, 3)


# ---- zigzag rehearsal -------------------------------------------------------


def test_zigzag_fig11_structure():
    cfg = ss.configure_pipeline(6, 7, 6.0)
    tl = ss.zigzag_schedule(cfg)
    be_tl = ss.zigzag_schedule(ss.best_effort_pipeline(6, 7, 6.0))
    assert tl.average_latency < be_tl.average_latency
    # delayed batches execute layer 2 while batch 1's suffix runs on the source
    spans = tl.target_layer2_spans()
    src1 = tl.source_span_of(0)
    assert spans and src1 is not None
    assert any(s < src1[1] and e > src1[0] for s, e in spans)


def test_zigzag_never_runs_layer_before_load():
    cfg = ss.configure_pipeline(5, 6, 2.0)
    tl = ss.zigzag_schedule(cfg)
    for batch, layer, start, _ in tl.target_intervals:
        assert start + 1e-9 >= tl.layer_load_times[layer - 1]


def test_zigzag_degenerates_with_infinite_time_l():
    cfg = ss.configure_pipeline(3, 5, math.inf)
    assert all(t <= 1 for t, _ in cfg.splits)
    tl = ss.zigzag_schedule(cfg)
    assert all(layer == 1 for _, layer, _, _ in tl.target_intervals)


def test_zigzag_matches_prefix_sum_form_when_undelayed():
    # T1 = 0 keeps the analytic objective exact: latency_i = sum_{j<=i} S_j
    cfg = ss.PipelineConfig([(0, 4), (1, 3), (1, 3)], 4, 1.0, [1.0] * 3)
    assert cfg.is_feasible()
    tl = ss.zigzag_schedule(cfg)
    prefix = 0.0
    for i, (_, s) in enumerate(cfg.splits):
        prefix += s
        assert tl.finish[i] == pytest.approx(prefix)
    assert tl.average_latency == pytest.approx(cfg.objective())


def test_zigzag_rejects_layer_that_never_loads():
    cfg = ss.PipelineConfig([(2, 2)], 4, 1.0, [1.0])
    with pytest.raises(PipelineError):
        ss.zigzag_schedule(cfg, layer_load_times=[0.0, math.inf, math.inf, math.inf])


# ---- throughput ramp ---------------------------------------------------------


@pytest.mark.parametrize("layers", [8, 14, 32])
def test_throughput_ramp(layers):
    base = ss.steady_state_throughput(layers, 0)
    assert base == pytest.approx(1.0 / layers, rel=0.02)
    prev = 0.0
    for k in range(1, layers // 2 + 1):
        thr = ss.steady_state_throughput(layers, k)
        assert thr == pytest.approx(1.0 / (layers - k), rel=0.05)
        assert thr >= prev
        prev = thr
    assert ss.steady_state_throughput(layers, layers // 2) == pytest.approx(
        2.0 / layers, rel=0.05)


# ---- live pair selection -------------------------------------------------------


def make_plan_estimate(chains, completions):
    edges = []
    for chain in chains:
        for a, b in zip(chain, chain[1:]):
            edges.append(PlanEdge(a, b, 100.0, "rdma"))
    plan = ss.ScalePlan(edges=edges)
    plan.chains = [list(c) for c in chains]
    return plan, PlanEstimate(per_target_completion=completions, bottleneck_gbps={})


def test_pairs_tail_instance():
    plan, est = make_plan_estimate(
        [["src", "t1", "t2", "t3"]],
        {"t1": 1.0, "t2": 1.1, "t3": 1.2},
    )
    pairs = ss.select_live_pairs(plan, est, ["inst0"], ss.SloProfile(max_stop_s=0.5))
    assert pairs == [("inst0", "t3")]


def test_no_pairs_when_load_fits_headroom():
    plan, est = make_plan_estimate([["src", "t1"]], {"t1": 0.2})
    assert ss.select_live_pairs(plan, est, ["inst0"], ss.SloProfile(0.5)) == []


def test_two_overloaded_two_chains():
    plan, est = make_plan_estimate(
        [["s0", "a1", "a2"], ["s1", "b1", "b2"]],
        {"a1": 1.0, "a2": 2.0, "b1": 1.0, "b2": 1.9},
    )
    pairs = ss.select_live_pairs(plan, est, ["i0", "i1"], ss.SloProfile(0.5))
    assert pairs == [("i0", "a2"), ("i1", "b2")]


# ---- transition protocol --------------------------------------------------------


def new_session(queued=0):
    return ss.LiveScaleSession(source_queue=deque(range(queued)), total_layers=4)


def test_protocol_redirects_queue_on_load_start():
    s = new_session(queued=10)
    ss.run_transition_protocol(s, LoadStarted())
    assert s.phase is Phase.LOADING
    assert len(s.fifo_queue) == 10 and not s.source_queue


def test_protocol_partial_serve_on_first_layer():
    s = new_session()
    ss.run_transition_protocol(s, LoadStarted())
    ss.run_transition_protocol(s, LayerLoaded(1))
    assert s.phase is Phase.PARTIAL_SERVE and s.loaded_layers == 1


def test_protocol_even_split_on_completion():
    s = new_session(queued=8)
    ss.run_transition_protocol(s, LoadStarted())
    ss.run_transition_protocol(s, LayerLoaded(1))
    ss.run_transition_protocol(s, LoadCompleted())
    assert s.phase is Phase.FULL_SERVE
    assert len(s.target_queue) == 4 and len(s.source_queue) == 4


def test_protocol_arrivals_follow_phase():
    s = new_session()
    ss.run_transition_protocol(s, RequestArrival("a"))
    assert list(s.source_queue) == ["a"]
    ss.run_transition_protocol(s, LoadStarted())
    ss.run_transition_protocol(s, RequestArrival("b"))
    assert "b" in s.target_queue


def test_protocol_out_of_order_events():
    s = new_session()
    with pytest.raises(ProtocolError):
        ss.run_transition_protocol(s, LayerLoaded(1))
    ss.run_transition_protocol(s, LoadStarted())
    with pytest.raises(ProtocolError):
        ss.run_transition_protocol(s, LayerLoaded(2))
    with pytest.raises(ProtocolError):
        ss.run_transition_protocol(s, LoadCompleted())
    with pytest.raises(ProtocolError):
        ss.run_transition_protocol(s, LoadStarted())


# ---- prefill -> decode mutation ----------------------------------------------


@dataclass
class FakeInstance:
    role: str
    model_name: str = "llama2-7b"
    loaded_layers: int = 32
    total_layers: int = 32
    live_session: object = None
    queue: deque = field(default_factory=deque)


def test_mutation_flips_role_and_compensates():
    inst = FakeInstance(role="prefill")
    result = ss.mutate_prefill_to_decode(inst)
    assert inst.role == "decode"
    assert result.compensation.count >= 1
    assert result.compensation.model == "llama2-7b"


def test_mutation_involution():
    inst = FakeInstance(role="prefill")
    ss.mutate_prefill_to_decode(inst)
    mutate_decode_to_prefill(inst)
    assert inst.role == "prefill"


def test_mutation_rejects_bad_states():
    with pytest.raises(ProtocolError):
        ss.mutate_prefill_to_decode(FakeInstance(role="decode"))
    with pytest.raises(ProtocolError):
        ss.mutate_prefill_to_decode(FakeInstance(role="colocated"))
    with pytest.raises(ProtocolError):
        ss.mutate_prefill_to_decode(FakeInstance(role="prefill", loaded_layers=4))
    with pytest.raises(ProtocolError):
        ss.mutate_prefill_to_decode(FakeInstance(role="prefill", live_session=object()))
