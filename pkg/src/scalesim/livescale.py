"""Live autoscaling: pipeline-split solving, zigzag rehearsal and the
instance transition protocol.

A live scale pairs an overloaded (source) instance with a new (target)
instance that is still loading layers. Each request batch i gets a split
(T_i, S_i): the target executes the first T_i layers, the source the
remaining S_i. The solver minimizes the weighted average latency

    sum_req sum_{i<=req} w_i * S_i / N

subject to
    C1  T_i + S_i = L
    C2  sum_{j<=i} T_j <= sum_{j<i} S_j          (pipeline dependency)
    C3  time_l * (T_i - offset) <= sum_{j<i} S_j (load limit)

C3 bounds batch i's deepest layer by what has been loaded when the source
would need the suffix. The published form of the load limit bounds it by
the target-side prefix sum instead (sum_{j<i} T_j); that variant is kept
behind ``c3_form="target-prefix"`` but cannot reproduce the worked zigzag
example, so the source-prefix form is the default. ``offset`` controls
whether the clock starts when the first layer has loaded (1, default) or
when loading begins (0).
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .planner import PlanEstimate, ScalePlan

C3_FORMS = ("source-prefix", "target-prefix")


class PipelineError(ValueError):
    pass


class SolverDeadlineExceeded(TimeoutError):
    pass


class ProtocolError(RuntimeError):
    """Live-scale transition event arrived out of order or is unsupported."""


@dataclass
class PipelineConfig:
    """Per-batch (target layers, source layers) splits plus solve context."""

    splits: list[tuple[int, int]]
    layers: int
    time_l: float
    weights: list[float]
    first_layer_offset: int = 1
    c3_form: str = "source-prefix"

    @property
    def batches(self) -> int:
        return len(self.splits)

    def objective(self) -> float:
        n = self.batches
        return sum(
            self.weights[i] * (n - i) * s for i, (_, s) in enumerate(self.splits)
        ) / n

    def constraint_violations(self) -> list[str]:
        bad = []
        sum_t = sum_s = 0
        for i, (t, s) in enumerate(self.splits):
            if t + s != self.layers or t < 0 or s < 0:
                bad.append(f"C1 batch {i + 1}")
            if i > 0 and sum_t + t > sum_s:
                bad.append(f"C2 batch {i + 1}")
            cap = sum_s if self.c3_form == "source-prefix" else sum_t
            if self.time_l > 0 and not _c3_ok(self.time_l, t, self.first_layer_offset, cap):
                bad.append(f"C3 batch {i + 1}")
            sum_t += t
            sum_s += s
        return bad

    def is_feasible(self) -> bool:
        return not self.constraint_violations()


def _c3_ok(time_l: float, t: int, offset: int, cap: int) -> bool:
    if t <= offset:
        return True
    if math.isinf(time_l):
        return False
    return time_l * (t - offset) <= cap + 1e-9


def _c3_tmax(time_l: float, offset: int, cap: int, layers: int) -> int:
    """Largest T with time_l * (T - offset) <= cap."""
    if time_l <= 0:
        return layers
    if math.isinf(time_l):
        return min(offset, layers)
    t = int(math.floor(cap / time_l + offset + 1e-12))
    while t > offset and time_l * (t - offset) > cap + 1e-9:
        t -= 1
    return max(min(t, layers), 0)


def configure_pipeline(batches: int, layers: int, time_l: float,
                       weights: Optional[Sequence[float]] = None,
                       first_layer_offset: int = 1,
                       c3_form: str = "source-prefix",
                       deadline_s: Optional[float] = None) -> PipelineConfig:
    """Exact minimizer of the weighted average-latency objective.

    Dynamic program over prefix sums: after batch i the only live state is
    A = sum of T so far (the source prefix sum is i*L - A), so each stage
    is a pass over at most i*L + 1 states with a contiguous range of
    feasible T values per state.
    """
    if batches < 1 or layers < 1:
        raise PipelineError("batches and layers must be >= 1")
    if time_l < 0:
        raise PipelineError("time_l must be >= 0")
    if c3_form not in C3_FORMS:
        raise PipelineError(f"c3_form must be one of {C3_FORMS}")
    if weights is None:
        w = [1.0] * batches
    else:
        w = [float(x) for x in weights]
        if len(w) != batches or any(x <= 0 for x in w):
            raise PipelineError("weights must be positive, one per batch")

    n, big_l = batches, layers
    coeff = [w[j] * (n - j) for j in range(n)]
    started = time.monotonic()

    value = np.zeros(1)
    parents: list[np.ndarray] = []
    for j in range(n):
        if deadline_s is not None and time.monotonic() - started > deadline_s:
            raise SolverDeadlineExceeded(f"pipeline solve exceeded {deadline_s}s")
        new = np.full((j + 1) * big_l + 1, -np.inf)
        par = np.full((j + 1) * big_l + 1, -1, dtype=np.int64)
        ramp = coeff[j] * np.arange(big_l + 1)
        for a in np.nonzero(value > -np.inf)[0]:
            a = int(a)
            tmax = big_l
            if j >= 1:
                tmax = min(tmax, j * big_l - 2 * a)
            if time_l > 0:
                cap = (j * big_l - a) if c3_form == "source-prefix" else a
                tmax = min(tmax, _c3_tmax(time_l, first_layer_offset, cap, big_l))
            if tmax < 0:
                continue
            idx = np.arange(a, a + tmax + 1)
            seg = value[a] + ramp[: tmax + 1]
            better = seg > new[idx]
            if better.any():
                upd = idx[better]
                new[upd] = seg[better]
                par[upd] = a
        parents.append(par)
        value = new

    end = int(np.argmax(value))
    if not np.isfinite(value[end]):
        raise PipelineError("no feasible pipeline configuration")
    t_vals: list[int] = []
    a = end
    for j in range(n - 1, -1, -1):
        prev = int(parents[j][a])
        t_vals.append(a - prev)
        a = prev
    t_vals.reverse()
    splits = [(t, big_l - t) for t in t_vals]
    return PipelineConfig(splits, big_l, time_l, w, first_layer_offset, c3_form)


def enumerate_pipeline_optimum(batches: int, layers: int, time_l: float,
                               weights: Optional[Sequence[float]] = None,
                               first_layer_offset: int = 1,
                               c3_form: str = "source-prefix") -> float:
    """Brute-force objective minimum over every feasible split vector."""
    w = list(weights) if weights is not None else [1.0] * batches

    best = math.inf

    def recurse(i: int, sum_t: int, sum_s: int, acc: float):
        nonlocal best
        if i == batches:
            best = min(best, acc / batches)
            return
        for t in range(layers + 1):
            s = layers - t
            if i > 0 and sum_t + t > sum_s:
                continue
            cap = sum_s if c3_form == "source-prefix" else sum_t
            if time_l > 0 and not _c3_ok(time_l, t, first_layer_offset, cap):
                continue
            recurse(i + 1, sum_t + t, sum_s + s, acc + w[i] * (batches - i) * s)

    recurse(0, 0, 0, 0.0)
    return best


def best_effort_pipeline(batches: int, layers: int, time_l: float,
                         weights: Optional[Sequence[float]] = None,
                         first_layer_offset: int = 1) -> PipelineConfig:
    """Greedy policy: run as many loaded layers as possible, at most half.

    May violate C2 (the rehearsal absorbs that as source idle time); it is
    the baseline the solver is compared against.
    """
    if batches < 1 or layers < 1:
        raise PipelineError("batches and layers must be >= 1")
    w = list(weights) if weights is not None else [1.0] * batches
    half = layers // 2
    splits = []
    start = 0.0  # target-side busy time when this batch begins its prefix
    for i in range(batches):
        if time_l <= 0:
            available = layers
        elif math.isinf(time_l):
            available = first_layer_offset
        else:
            available = first_layer_offset + int((start + 1e-9) // time_l)
        t = min(available, half)
        splits.append((t, layers - t))
        start += t * w[i]
    return PipelineConfig(splits, layers, time_l, w, first_layer_offset)


# ---- zigzag rehearsal ----------------------------------------------------


@dataclass
class ZigzagTimeline:
    """Rehearsed execution of a pipeline config, in layer-execution units."""

    #: (batch, layer, start, end) on the target instance
    target_intervals: list[tuple[int, int, float, float]]
    #: (batch, start, end) suffix execution on the source instance
    source_intervals: list[tuple[int, float, float]]
    prefix_done: list[float]
    finish: list[float]
    layer_load_times: list[float]
    average_latency: float

    def target_layer2_spans(self) -> list[tuple[float, float]]:
        return [(s, e) for b, layer, s, e in self.target_intervals if layer == 2]

    def source_span_of(self, batch: int) -> Optional[tuple[float, float]]:
        for b, s, e in self.source_intervals:
            if b == batch:
                return (s, e)
        return None


def default_layer_load_times(layers: int, time_l: float, offset: int = 1) -> list[float]:
    """Layer k becomes available at (k - offset) * time_l, floored at 0."""
    return [max(0.0, (k - offset)) * time_l for k in range(1, layers + 1)]


def zigzag_schedule(config: PipelineConfig,
                    layer_load_times: Optional[Sequence[float]] = None) -> ZigzagTimeline:
    """Event-driven rehearsal with a FIFO ready queue and a pending queue.

    A batch whose next target layer has not loaded parks in the pending
    queue; every layer-load event releases all batches waiting on it. The
    source executes suffixes strictly FCFS, waiting for each batch's prefix.
    """
    loads = (list(layer_load_times) if layer_load_times is not None
             else default_layer_load_times(config.layers, config.time_l,
                                           config.first_layer_offset))
    if len(loads) < config.layers:
        raise PipelineError("need a load time for every layer")
    w = config.weights
    n = config.batches

    needed_layers = {i: t for i, (t, _) in enumerate(config.splits)}
    for i, t in needed_layers.items():
        if t > 0 and math.isinf(loads[t - 1]):
            raise PipelineError(f"batch {i + 1} needs layer {t}, which never loads")

    import heapq

    ready: list[int] = [i for i in range(n) if needed_layers[i] > 0]
    heapq.heapify(ready)
    pending: dict[int, list[int]] = {}
    progress = {i: 0 for i in range(n)}
    prefix_done = [0.0] * n
    target_intervals: list[tuple[int, int, float, float]] = []
    clock = 0.0
    remaining = len(ready)

    while remaining:
        # preemption: layers loaded by now release their pending batches,
        # restoring FIFO priority before anything else runs
        for lay in sorted(pending):
            if loads[lay - 1] <= clock + 1e-12:
                for b in pending.pop(lay):
                    heapq.heappush(ready, b)
        if not ready:
            next_layer = min(pending, key=lambda k: (loads[k - 1], k))
            clock = max(clock, loads[next_layer - 1])
            continue
        i = heapq.heappop(ready)
        k = progress[i] + 1
        if loads[k - 1] > clock + 1e-12:
            pending.setdefault(k, []).append(i)
            continue
        start = clock
        clock += w[i]
        target_intervals.append((i, k, start, clock))
        progress[i] = k
        if k == needed_layers[i]:
            prefix_done[i] = clock
            remaining -= 1
        else:
            heapq.heappush(ready, i)

    source_intervals: list[tuple[int, float, float]] = []
    finish = [0.0] * n
    free = 0.0
    for i in range(n):
        s = config.splits[i][1]
        start = max(free, prefix_done[i])
        end = start + s * w[i]
        if s > 0:
            source_intervals.append((i, start, end))
        finish[i] = end if s > 0 else prefix_done[i]
        free = max(free, end)

    return ZigzagTimeline(
        target_intervals=target_intervals,
        source_intervals=source_intervals,
        prefix_done=prefix_done,
        finish=finish,
        layer_load_times=loads,
        average_latency=sum(finish) / n,
    )


def steady_state_throughput(layers: int, loaded: int, batches: int = 48) -> float:
    """Measured pair throughput (batches per layer-time) with a fixed number
    of loaded layers, from the tail of a saturated rehearsal."""
    if not 0 <= loaded <= layers:
        raise PipelineError("loaded layer count out of range")
    splits = [(loaded, layers - loaded)] * batches
    config = PipelineConfig(splits, layers, 0.0, [1.0] * batches)
    loads = [0.0] * layers  # the first `loaded` layers are resident; the
    # rest are never requested because every split stops at `loaded`
    tl = zigzag_schedule(config, loads)
    half = batches // 2
    span = tl.finish[-1] - tl.finish[half - 1]
    if span <= 0:
        raise PipelineError("degenerate rehearsal window")
    return (batches - half) / span


# ---- instance selection and transition protocol ---------------------------


@dataclass
class SloProfile:
    """Profiled relationship between stop duration and SLO violation."""

    max_stop_s: float

    def stop_would_violate(self, load_s: float) -> bool:
        return load_s > self.max_stop_s


def select_live_pairs(plan: ScalePlan, estimate: PlanEstimate,
                      overloaded: Sequence, slo_profile: SloProfile) -> list[tuple]:
    """Pair each overloaded instance with the deepest unpaired chain member
    whose stop-the-world load time would violate the SLO.

    Chain tails come first: they sit behind the most pipeline hops, so they
    have the slowest effective link and profit most from serving early.
    """
    seen = set()
    tails = []
    for chain in plan.chains:
        for node in chain[1:]:
            if node not in seen:
                seen.add(node)
                tails.append((estimate.per_target_completion.get(node, 0.0), node))
    tails.sort(key=lambda x: (-x[0], x[1]))
    pairs = []
    idx = 0
    for inst in overloaded:
        if idx >= len(tails):
            break
        load_s, node = tails[idx]
        if not slo_profile.stop_would_violate(load_s):
            break  # the slowest remaining tail is already fast enough
        pairs.append((inst, node))
        idx += 1
    return pairs


class Phase(str, Enum):
    INIT = "init"
    LOADING = "loading"
    PARTIAL_SERVE = "partial-serve"
    FULL_SERVE = "full-serve"


@dataclass
class LoadStarted:
    pass


@dataclass
class LayerLoaded:
    layer: int


@dataclass
class LoadCompleted:
    pass


@dataclass
class RequestArrival:
    request: object


@dataclass
class LiveScaleSession:
    source_queue: deque
    target_queue: deque = field(default_factory=deque)
    pending_queue: deque = field(default_factory=deque)
    total_layers: int = 1
    phase: Phase = Phase.INIT
    loaded_layers: int = 0

    @property
    def fifo_queue(self) -> deque:
        return self.target_queue


def run_transition_protocol(session: LiveScaleSession, event) -> LiveScaleSession:
    """Advance the three-step protocol; raises ProtocolError on bad order."""
    if isinstance(event, LoadStarted):
        if session.phase is not Phase.INIT:
            raise ProtocolError(f"LoadStarted after {session.phase.value}")
        # step 1: redirect every queued request to the target
        session.target_queue.extend(session.source_queue)
        session.source_queue.clear()
        session.phase = Phase.LOADING
    elif isinstance(event, LayerLoaded):
        if session.phase not in (Phase.LOADING, Phase.PARTIAL_SERVE):
            raise ProtocolError(f"LayerLoaded in {session.phase.value}")
        if event.layer != session.loaded_layers + 1:
            raise ProtocolError(
                f"layer {event.layer} loaded after {session.loaded_layers}"
            )
        session.loaded_layers = event.layer
        if session.phase is Phase.LOADING:
            # step 2: the target starts executing first-layer prefixes
            session.phase = Phase.PARTIAL_SERVE
    elif isinstance(event, LoadCompleted):
        if session.phase is not Phase.PARTIAL_SERVE:
            raise ProtocolError(f"LoadCompleted in {session.phase.value}")
        session.loaded_layers = session.total_layers
        session.phase = Phase.FULL_SERVE
        # step 3: split the backlog evenly, FIFO order preserved per half
        queued = list(session.target_queue)
        keep = (len(queued) + 1) // 2
        session.target_queue = deque(queued[:keep])
        session.source_queue.extend(queued[keep:])
    elif isinstance(event, RequestArrival):
        if session.phase in (Phase.INIT,):
            session.source_queue.append(event.request)
        elif session.phase in (Phase.LOADING, Phase.PARTIAL_SERVE):
            session.target_queue.append(event.request)
        else:
            # post-split: alternate to the shorter queue, source first on ties
            if len(session.source_queue) <= len(session.target_queue):
                session.source_queue.append(event.request)
            else:
                session.target_queue.append(event.request)
    else:
        raise ProtocolError(f"unsupported event {type(event).__name__}")
    return session


# ---- prefill -> decode mutation -------------------------------------------


@dataclass
class CompensationRequest:
    """Prefill capacity to restore after flipping an instance to decode."""

    model: str
    count: int


@dataclass
class MutationResult:
    instance: object
    compensation: CompensationRequest


def mutate_prefill_to_decode(instance, compensation_count: int = 1) -> MutationResult:
    """Flip a fully loaded prefill instance to decode at zero transfer cost.

    Prefill and decode instances share parameters, so the flip is free; a
    compensating prefill scale request is emitted alongside.
    """
    role = getattr(instance, "role")
    if role == "colocated":
        raise ProtocolError("live mutation of prefill-decode colocated instances is unsupported")
    if role != "prefill":
        raise ProtocolError(f"mutation source must be a prefill instance, got {role}")
    if getattr(instance, "live_session", None) is not None:
        raise ProtocolError("instance is mid-scale")
    loaded = getattr(instance, "loaded_layers", None)
    total = getattr(instance, "total_layers", None)
    if loaded is not None and total is not None and loaded < total:
        raise ProtocolError("parameters not fully resident")
    instance.role = "decode"
    model = getattr(instance, "model_name", getattr(instance, "model", ""))
    return MutationResult(
        instance=instance,
        compensation=CompensationRequest(model=str(model), count=max(1, compensation_count)),
    )


def mutate_decode_to_prefill(instance) -> object:
    """Reverse flip; roles share parameters so this is also free."""
    if getattr(instance, "role") != "decode":
        raise ProtocolError("instance is not a decode instance")
    if getattr(instance, "live_session", None) is not None:
        raise ProtocolError("instance is mid-scale")
    instance.role = "prefill"
    return instance
