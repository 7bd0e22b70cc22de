"""Deterministic discrete-event simulator for autoscaled LLM serving.

Replays a request trace against a cluster topology under one autoscaling
strategy and reports TTFT/TBT/SLO metrics plus utilization timelines.

The execution model is intentionally coarse: prefill batches cost
alpha + beta * batch_tokens, decode steps cost alpha + beta * batch_size,
KVCache moves prefill -> decode as an explicit network flow, and parameter
loading is either a planned multicast (blitz strategies) or a host-local
stop-the-world load (cache baselines). A live-scaled pair serves its merged
queue at base_time * max(k, L - k) / L with k layers loaded, which is the
steady-state rate of the zigzag pipeline validated in the livescale module.

Time is integer microseconds; same-timestamp events order by a fixed kind
priority then insertion sequence, so runs are bit-reproducible.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .autoscaler import (
    LoadMetrics,
    ScaleDownTracker,
    ScalePolicy,
    baseline_load_time,
    profile_instance_capacity,
)
from .livescale import (
    LayerLoaded,
    LiveScaleSession,
    LoadCompleted,
    LoadStarted,
    Phase,
    SloProfile,
    mutate_prefill_to_decode,
    run_transition_protocol,
    select_live_pairs,
)
from .parampool import ModelSpec, ParameterPool, SourceRef
from .planner import (
    build_scale_request,
    estimate_completion,
    generate_plan,
    plan_is_interference_free,
)
from .topology import (
    BYTES_PER_GBPS,
    CapacityError,
    FlowSet,
    NetworkTopology,
    gpu_node,
)
from .traces import TraceRecord

US_PER_MS = 1000
US_PER_S = 1_000_000

# same-time events resolve in this order
PRIO = {
    "layer": 0,
    "transfer": 1,
    "kv_done": 2,
    "prefill_done": 3,
    "decode_step": 4,
    "arrival": 5,
    "control": 6,
    "sample": 7,
}


class SimulationError(RuntimeError):
    pass


@dataclass
class SimPolicy:
    """Strategy plus per-group scale bounds (None: profiled defaults)."""

    strategy: str = "blitz-live"
    prefill_upper: Optional[float] = None
    prefill_lower: Optional[float] = None
    decode_upper: Optional[float] = None
    decode_lower: Optional[float] = None
    scale_down_timeout_s: float = 2.0


@dataclass
class SimConfig:
    eta: float = 0.8
    control_interval_ms: float = 100.0
    sample_interval_ms: float = 100.0
    load_window_s: float = 1.0
    token_budget: int = 2000
    kv_bytes_per_token: float = 160_000.0
    kv_flow_gbps: float = 10.0
    scale_cmd_latency_ms: float = 5.0
    keep_alive_s: float = 300.0
    cache_capacity_per_host: int = 8
    initial_prefill: int = 2
    initial_decode: int = 1
    live_headroom_s: float = 0.25
    capacity_headroom: float = 0.7  # fraction of profiled throughput used as upper bound
    lower_bound_fraction: float = 0.25
    kv_capacity_tokens: float = 400_000.0


@dataclass
class SimRequest:
    rid: int
    arrival_us: int
    prompt_tokens: int
    output_tokens: int
    model: str
    first_token_us: Optional[int] = None
    token_times_us: list = field(default_factory=list)
    remaining_decode: int = 0
    done: bool = False


@dataclass
class InstanceState:
    iid: int
    role: str  # prefill | decode
    model_name: str
    host_id: int
    gpus: list[int]
    total_layers: int
    loaded_layers: int = 0
    status: str = "loading"  # loading | active | retired
    queue: deque = field(default_factory=deque)
    active_decode: list = field(default_factory=list)
    busy: bool = False
    stepping: bool = False
    live_session: Optional[LiveScaleSession] = None
    cooperating_with: Optional[int] = None

    @property
    def node(self) -> str:
        return gpu_node(self.gpus[0])

    def queued_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.queue)


@dataclass
class MetricSeries:
    ttft_ms: list[float]
    tbt_ms: list[list[float]]
    slo_attainment: float
    #: rows of (time_ms, throughput_tokens, gpus_active, cache_copies)
    series: list[tuple[float, int, int, int]]
    scale_events: list[dict]
    arrived: int
    completed: int
    counters: dict
    max_cache_copies: int

    def percentile(self, values, q):
        if not values:
            return 0.0
        data = sorted(values)
        pos = (len(data) - 1) * q
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(data) - 1)
        return data[lo] + (data[hi] - data[lo]) * (pos - lo)

    def summary(self) -> dict:
        flat_tbt = [g for gaps in self.tbt_ms for g in gaps]
        return {
            "arrived": self.arrived,
            "completed": self.completed,
            "slo_attainment": round(self.slo_attainment, 6),
            "ttft_ms": {
                "mean": round(sum(self.ttft_ms) / len(self.ttft_ms), 3) if self.ttft_ms else 0.0,
                "p50": round(self.percentile(self.ttft_ms, 0.50), 3),
                "p99": round(self.percentile(self.ttft_ms, 0.99), 3),
            },
            "tbt_ms": {
                "mean": round(sum(flat_tbt) / len(flat_tbt), 3) if flat_tbt else 0.0,
                "p99": round(self.percentile(flat_tbt, 0.99), 3),
            },
            "max_cache_copies": self.max_cache_copies,
            "counters": dict(sorted(self.counters.items())),
            "scale_events": self.scale_events,
        }


def compute_ttft(request: SimRequest) -> float:
    """First-token time minus arrival, ms (queueing included)."""
    if request.first_token_us is None:
        raise SimulationError(f"request {request.rid} has no first token")
    return (request.first_token_us - request.arrival_us) / US_PER_MS


def compute_tbt(request: SimRequest) -> list[float]:
    times = request.token_times_us
    return [(b - a) / US_PER_MS for a, b in zip(times, times[1:])]


def slo_attainment(ttfts, tbts, slo_ttft_ms: float, slo_tbt_ms: float) -> float:
    """Fraction of requests meeting both latency targets; 1.0 when empty."""
    if not ttfts:
        return 1.0
    ok = 0
    for ttft, gaps in zip(ttfts, tbts):
        if ttft <= slo_ttft_ms and all(g <= slo_tbt_ms for g in gaps):
            ok += 1
    return ok / len(ttfts)


class Simulation:
    def __init__(self, topo: NetworkTopology, models: list[ModelSpec],
                 trace: list[TraceRecord], policy: SimPolicy, seed: int = 0,
                 config: Optional[SimConfig] = None):
        self.topo = topo
        self.models = {m.name: m for m in models}
        self.default_model = models[0].name
        self.policy = policy
        self.seed = seed
        self.cfg = config or SimConfig()
        self.flows = FlowSet(topo)

        pool_policy = "keep-alive" if policy.strategy == "sllm" else "one-copy"
        self.pool = ParameterPool.init_pool(
            models, topo, policy=pool_policy,
            cache_capacity_per_host=self.cfg.cache_capacity_per_host,
            keep_alive_s=self.cfg.keep_alive_s,
        )

        self.requests = [
            SimRequest(
                rid=i,
                arrival_us=int(round(r.arrival_ms * US_PER_MS)),
                prompt_tokens=r.prompt_tokens,
                output_tokens=r.output_tokens,
                model=r.model or self.default_model,
            )
            for i, r in enumerate(trace)
        ]
        for r in self.requests:
            if r.model not in self.models:
                raise SimulationError(f"trace references unknown model {r.model!r}")

        self.now_us = 0
        self._heap: list = []
        self._seq = 0
        self.instances: dict[int, InstanceState] = {}
        self._next_iid = 0
        self.free_gpus: dict[int, list[int]] = {
            h.host_id: list(h.gpu_ids) for h in topo.hosts
        }
        self.completed = 0
        self.counters: dict = {
            "cache_hits": 0, "cache_misses": 0, "mutations": 0,
            "scale_ups": 0, "retired": 0, "interference_free_plans": 0,
            "plans": 0,
        }
        self.scale_events: list[dict] = []
        self.series: list[tuple[float, int, int, int]] = []
        self.max_cache_copies = 0
        self._tokens_since_sample = 0
        self._arrival_log: deque = deque()  # (t_us, prompt_tokens)
        self._decode_log: deque = deque()  # (t_us, tokens generated)
        self._pending_transfers: deque = deque()
        self._down_prefill: Optional[ScaleDownTracker] = None
        self._down_decode: Optional[ScaleDownTracker] = None
        self.trace_end_us = self.requests[-1].arrival_us if self.requests else 0

        self._policies = self._build_group_policies()
        self._bootstrap_instances()

    # ---- setup ---------------------------------------------------------

    def _build_group_policies(self) -> dict[str, ScalePolicy]:
        model = self.models[self.default_model]
        p_upper = self.policy.prefill_upper or (
            self.cfg.capacity_headroom * profile_instance_capacity(model, self.cfg.token_budget)
        )
        p_lower = self.policy.prefill_lower or self.cfg.lower_bound_fraction * p_upper
        # decode capacity: largest batch whose step still meets the TBT SLO
        batch_cap = max(1.0, (model.tbt_slo_ms - model.decode_alpha_ms) / model.decode_beta_ms)
        d_upper = self.policy.decode_upper or (
            self.cfg.capacity_headroom * batch_cap / (model.tbt_slo_ms / 1000.0)
        )
        d_lower = self.policy.decode_lower or self.cfg.lower_bound_fraction * d_upper
        mk = lambda up, lo: ScalePolicy(
            upper_bound=up, lower_bound=lo,
            scale_down_timeout_s=self.policy.scale_down_timeout_s,
            strategy=self.policy.strategy,
        )
        pol = {"prefill": mk(p_upper, p_lower), "decode": mk(d_upper, d_lower)}
        self._down_prefill = ScaleDownTracker(pol["prefill"])
        self._down_decode = ScaleDownTracker(pol["decode"])
        return pol

    def _bootstrap_instances(self):
        model = self.models[self.default_model]
        for role, count in (("prefill", self.cfg.initial_prefill),
                            ("decode", self.cfg.initial_decode)):
            for _ in range(count):
                inst = self._allocate_instance(model, role)
                if inst is None:
                    raise SimulationError("not enough GPUs for initial instances")
                inst.status = "active"
                inst.loaded_layers = inst.total_layers
                self.pool.on_deploy(model.name, SourceRef(inst.host_id, inst.gpus[0]),
                                    now_s=0.0)

    def _allocate_instance(self, model: ModelSpec, role: str) -> Optional[InstanceState]:
        # pack placement: partially used hosts fill up first, so bursts spill
        # onto cold hosts (ties: lowest id)
        hosts = sorted(
            (h for h in self.free_gpus if self.free_gpus[h]),
            key=lambda h: (len(self.free_gpus[h]), str(h)),
        )
        for h in hosts:
            if len(self.free_gpus[h]) >= model.tp_degree:
                gpus = [self.free_gpus[h].pop(0) for _ in range(model.tp_degree)]
                inst = InstanceState(
                    iid=self._next_iid, role=role, model_name=model.name,
                    host_id=h, gpus=gpus, total_layers=model.num_layers,
                )
                self._next_iid += 1
                self.instances[inst.iid] = inst
                return inst
        return None

    # ---- event machinery --------------------------------------------------

    def _push(self, t_us: int, kind: str, payload=None):
        heapq.heappush(self._heap, (t_us, PRIO[kind], self._seq, kind, payload))
        self._seq += 1

    def run(self) -> MetricSeries:
        for r in self.requests:
            self._push(r.arrival_us, "arrival", r.rid)
        self._push(0, "control", None)
        self._push(0, "sample", None)

        handlers = {
            "arrival": self._on_arrival,
            "prefill_done": self._on_prefill_done,
            "kv_done": self._on_kv_done,
            "decode_step": self._on_decode_step,
            "transfer": self._on_transfer_done,
            "layer": self._on_layer_loaded,
            "control": self._on_control_tick,
            "sample": self._on_sample_tick,
        }
        while self._heap:
            t, _, _, kind, payload = heapq.heappop(self._heap)
            if t < self.now_us:
                raise SimulationError("time went backwards")
            self.now_us = t
            handlers[kind](payload)

        if self.completed != len(self.requests):
            raise SimulationError(
                f"conservation violated: {self.completed}/{len(self.requests)} completed"
            )
        return self._finalize()

    @property
    def now_s(self) -> float:
        return self.now_us / US_PER_S

    def _work_remaining(self) -> bool:
        return self.completed < len(self.requests)

    # ---- serving: prefill ----------------------------------------------------

    def _serving_prefill_entries(self) -> list[InstanceState]:
        """Instances whose queue accepts new prefill work right now."""
        out = []
        for inst in self.instances.values():
            if inst.role != "prefill" or inst.status == "retired":
                continue
            if inst.cooperating_with is not None:
                continue  # its queue is redirected to the live target
            if inst.status == "active":
                out.append(inst)
            elif inst.live_session is not None:
                out.append(inst)  # live target: queue is open from LoadStarted
        return out

    def _on_arrival(self, rid: int):
        req = self.requests[rid]
        self._arrival_log.append((self.now_us, req.prompt_tokens))
        entries = self._serving_prefill_entries()
        if not entries:
            # nothing serving yet (all loading): park on a non-cooperating
            # instance that will open later, lowest id for determinism
            candidates = [i for i in self.instances.values()
                          if i.role == "prefill" and i.status != "retired"
                          and i.cooperating_with is None]
            if not candidates:
                raise SimulationError("no prefill instance for arrival")
            entries = candidates
        inst = min(entries, key=lambda i: (i.queued_tokens(), i.iid))
        inst.queue.append(req)
        self._maybe_dispatch_prefill(inst)

    def _prefill_rate_factor(self, inst: InstanceState) -> Optional[float]:
        """Relative batch cost for a (possibly partially loaded) server."""
        if inst.status == "active" and inst.live_session is None:
            return 1.0
        sess = inst.live_session
        if sess is None or sess.phase not in (Phase.PARTIAL_SERVE,):
            return None  # cannot serve yet
        k = sess.loaded_layers
        total = inst.total_layers
        return max(k, total - k) / total

    def _maybe_dispatch_prefill(self, inst: InstanceState):
        if inst.busy or not inst.queue or inst.status == "retired":
            return
        factor = self._prefill_rate_factor(inst)
        if factor is None:
            return
        model = self.models[inst.model_name]
        batch, tokens = [], 0
        while inst.queue and (not batch or tokens + inst.queue[0].prompt_tokens
                              <= self.cfg.token_budget):
            r = inst.queue.popleft()
            batch.append(r)
            tokens += r.prompt_tokens
        ms = model.prefill_ms(tokens) * factor
        inst.busy = True
        self._push(self.now_us + int(round(ms * US_PER_MS)), "prefill_done",
                   (inst.iid, [r.rid for r in batch]))

    def _on_prefill_done(self, payload):
        iid, rids = payload
        inst = self.instances[iid]
        inst.busy = False
        for rid in rids:
            req = self.requests[rid]
            req.first_token_us = self.now_us
            req.token_times_us.append(self.now_us)
            self._tokens_since_sample += 1
            if req.output_tokens <= 1:
                self._complete(req)
            else:
                req.remaining_decode = req.output_tokens - 1
                self._start_kv_transfer(inst, req)
        self._maybe_dispatch_prefill(inst)

    # ---- KVCache movement -------------------------------------------------------

    def _pick_decode(self) -> Optional[InstanceState]:
        decodes = [i for i in self.instances.values()
                   if i.role == "decode" and i.status == "active"]
        if not decodes:
            return None
        return min(decodes, key=lambda i: (len(i.active_decode), i.iid))

    def _start_kv_transfer(self, src: InstanceState, req: SimRequest):
        dst = self._pick_decode()
        if dst is None:
            # no decode capacity provisioned: degenerate setup, finish locally
            self._run_decode_locally(req)
            return
        nbytes = req.prompt_tokens * self.cfg.kv_bytes_per_token
        if dst.iid == src.iid or dst.host_id == src.host_id and self.topo.intra_kind != "none":
            # intra-host KVCache move rides NVLink/PCIe, modeled as instant
            self._push(self.now_us, "kv_done", (req.rid, dst.iid, None))
            return
        self._begin_kv_flow(src.node, dst.node, nbytes, req.rid, dst.iid)

    def _begin_kv_flow(self, src_node: str, dst_node: str, nbytes: float,
                       rid: int, dst_iid: int):
        link = self.topo.link(src_node, dst_node)
        if link is None:
            self._push(self.now_us, "kv_done", (rid, dst_iid, None))
            return
        avail = min(
            self.topo.outcast_bandwidth(src_node, self.flows),
            self.topo.incast_bandwidth(dst_node, self.flows),
            link.gbps - self.flows.on_link(src_node, dst_node),
        )
        rate = min(self.cfg.kv_flow_gbps, avail)
        if rate < 0.5:
            # parked until some flow releases capacity
            self._pending_transfers.append((src_node, dst_node, nbytes, rid, dst_iid))
            return
        self.flows.register(src_node, dst_node, rate, "kvcache")
        dur_us = int(round(nbytes / (rate * BYTES_PER_GBPS) * US_PER_S))
        self._push(self.now_us + dur_us, "kv_done",
                   (rid, dst_iid, (src_node, dst_node, rate)))

    def _retry_pending_transfers(self):
        pending, self._pending_transfers = self._pending_transfers, deque()
        for item in pending:
            self._begin_kv_flow(*item)

    def _on_kv_done(self, payload):
        rid, dst_iid, flow = payload
        if flow is not None:
            self.flows.release(flow[0], flow[1], flow[2], "kvcache")
            self._retry_pending_transfers()
        dst = self.instances[dst_iid]
        if dst.status == "retired":
            dst = self._pick_decode()
            if dst is None:
                self._run_decode_locally(self.requests[rid])
                return
        req = self.requests[rid]
        dst.active_decode.append(req)
        self._maybe_step_decode(dst)

    def _run_decode_locally(self, req: SimRequest):
        """Degenerate path when no decode group exists: sequential steps."""
        model = self.models[req.model]
        t = self.now_us
        for _ in range(req.remaining_decode):
            t += int(round(model.decode_step_ms(1) * US_PER_MS))
            req.token_times_us.append(t)
            self._tokens_since_sample += 1
        req.remaining_decode = 0
        self._complete(req)

    # ---- decode ---------------------------------------------------------------

    def _maybe_step_decode(self, inst: InstanceState):
        if inst.stepping or not inst.active_decode or inst.status != "active":
            return
        model = self.models[inst.model_name]
        ms = model.decode_step_ms(len(inst.active_decode))
        inst.stepping = True
        self._push(self.now_us + int(round(ms * US_PER_MS)), "decode_step", inst.iid)

    def _on_decode_step(self, iid: int):
        inst = self.instances[iid]
        inst.stepping = False
        finished = []
        for req in inst.active_decode:
            req.token_times_us.append(self.now_us)
            req.remaining_decode -= 1
            self._tokens_since_sample += 1
            if req.remaining_decode <= 0:
                finished.append(req)
        self._decode_log.append((self.now_us, len(inst.active_decode)))
        for req in finished:
            inst.active_decode.remove(req)
            self._complete(req)
        self._maybe_step_decode(inst)

    def _complete(self, req: SimRequest):
        if not req.done:
            req.done = True
            self.completed += 1

    # ---- scaling --------------------------------------------------------------

    def _group_instances(self, role: str) -> list[InstanceState]:
        return [i for i in self.instances.values()
                if i.role == role and i.status != "retired"]

    def _window_rate(self, log: deque) -> float:
        horizon = self.now_us - int(self.cfg.load_window_s * US_PER_S)
        while log and log[0][0] < horizon:
            log.popleft()
        return sum(n for _, n in log) / self.cfg.load_window_s

    def _on_control_tick(self, _):
        strategy = self.policy.strategy
        if strategy != "static":
            self._scale_group("prefill", self._window_rate(self._arrival_log))
            self._scale_group("decode", self._window_rate(self._decode_log))
        if self._work_remaining() or self.now_us <= self.trace_end_us:
            self._push(self.now_us + int(self.cfg.control_interval_ms * US_PER_MS),
                       "control", None)

    def _scale_group(self, role: str, load: float):
        pol = self._policies[role]
        group = self._group_instances(role)
        metrics = LoadMetrics(window_s=self.cfg.load_window_s, tokens_per_s=load,
                              kvcache_usage=self._kv_usage())
        from .autoscaler import should_scale_up

        add = should_scale_up(metrics, pol, len(group))
        if add > 0:
            self._execute_scale_up(role, add)
        tracker = self._down_prefill if role == "prefill" else self._down_decode
        queued = sum(len(i.queue) + len(i.active_decode) for i in group)
        retire = tracker.observe(self.now_s, metrics, len(group), queued)
        if retire > 0:
            self._execute_scale_down(role, retire)

    def _kv_usage(self) -> float:
        toks = sum(
            sum(r.prompt_tokens for r in i.active_decode)
            for i in self.instances.values() if i.role == "decode"
        )
        cap = max(1.0, self.cfg.kv_capacity_tokens * max(
            1, len(self._group_instances("decode"))))
        return min(1.0, toks / cap)

    def _execute_scale_up(self, role: str, count: int):
        model = self.models[self.default_model]
        strategy = self.policy.strategy
        self.counters["scale_ups"] += 1

        if role == "decode" and strategy in ("blitz-live", "blitz-stop"):
            count = self._mutate_for_decode(count)
            if count <= 0:
                return

        new: list[InstanceState] = []
        for _ in range(count):
            inst = self._allocate_instance(model, role)
            if inst is None:
                break  # cluster is full
            new.append(inst)
        if not new:
            return

        if strategy in ("sllm", "allcache"):
            self._scale_stop_the_world(new, strategy)
        else:
            self._scale_via_network(new, live=(strategy == "blitz-live" and role == "prefill"))

    def _mutate_for_decode(self, count: int) -> int:
        """Flip spare prefill instances to decode; returns the remainder."""
        flipped = 0
        while flipped < count:
            spares = [i for i in self._group_instances("prefill")
                      if i.status == "active" and not i.busy and not i.queue
                      and i.live_session is None and i.cooperating_with is None]
            if len(spares) <= 1:
                break  # keep at least one prefill instance intact
            inst = min(spares, key=lambda i: i.iid)
            result = mutate_prefill_to_decode(inst)
            self.counters["mutations"] += 1
            self.scale_events.append({
                "t_ms": self.now_us / US_PER_MS, "kind": "mutate",
                "instance": inst.iid, "compensation": result.compensation.count,
            })
            flipped += 1
            # compensate the lost prefill capacity right away
            comp = []
            for _ in range(result.compensation.count):
                c = self._allocate_instance(self.models[inst.model_name], "prefill")
                if c is not None:
                    comp.append(c)
            if comp:
                self._scale_via_network(comp, live=(self.policy.strategy == "blitz-live"))
        return count - flipped

    def _scale_stop_the_world(self, new: list[InstanceState], strategy: str):
        model = self.models[self.default_model]
        cmd_us = int(self.cfg.scale_cmd_latency_ms * US_PER_MS)
        for inst in new:
            secs = baseline_load_time(strategy, model, self.topo, self.pool,
                                      inst.host_id, self.now_s, eta=self.cfg.eta)
            if strategy == "sllm":
                if self.pool.cache_hit(model.name, inst.host_id, self.now_s):
                    self.counters["cache_hits"] += 1
                else:
                    self.counters["cache_misses"] += 1
            self._push(self.now_us + cmd_us + int(round(secs * US_PER_S)),
                       "transfer", (inst.iid, None))
        self.scale_events.append({
            "t_ms": self.now_us / US_PER_MS, "kind": strategy,
            "targets": [i.iid for i in new],
            "load_s": [round(baseline_load_time(strategy, model, self.topo, self.pool,
                                                i.host_id, self.now_s, eta=self.cfg.eta), 3)
                       for i in new],
        })

    def _scale_via_network(self, new: list[InstanceState], live: bool):
        model = self.models[self.default_model]
        src_nodes = [ref.node for ref in self.pool.sources_for(model.name, self.now_s)]
        request = build_scale_request(model, src_nodes, [i.node for i in new],
                                      self.topo, self.flows)
        plan = generate_plan(request, self.topo, self.flows)
        est = estimate_completion(plan, model, self.topo, eta=self.cfg.eta)
        self.counters["plans"] += 1
        if plan_is_interference_free(plan, self.flows, self.topo):
            self.counters["interference_free_plans"] += 1

        cmd_us = int(self.cfg.scale_cmd_latency_ms * US_PER_MS)
        by_node = {i.node: i for i in new}

        # hold each edge's flow until its receiver finishes
        flow_by_target: dict[str, tuple] = {}
        for e in plan.edges:
            avail = min(
                self.topo.outcast_bandwidth(e.src, self.flows),
                self.topo.incast_bandwidth(e.dst, self.flows),
                e.gbps,
            )
            if avail > 0:
                try:
                    self.flows.register(e.src, e.dst, avail, "scale")
                    flow_by_target[e.dst] = (e.src, e.dst, avail)
                except CapacityError:
                    pass

        live_targets = set()
        if live:
            overloaded = sorted(
                (i for i in self._group_instances("prefill")
                 if i.status == "active" and i.live_session is None
                 and i.cooperating_with is None),
                key=lambda i: (-i.queued_tokens(), i.iid),
            )
            pairs = select_live_pairs(plan, est, overloaded,
                                      SloProfile(self.cfg.live_headroom_s))
            for src_inst, node in pairs:
                tgt = by_node.get(node)
                if tgt is None:
                    continue
                session = LiveScaleSession(
                    source_queue=src_inst.queue, target_queue=tgt.queue,
                    total_layers=model.num_layers,
                )
                run_transition_protocol(session, LoadStarted())
                tgt.live_session = session
                src_inst.cooperating_with = tgt.iid
                live_targets.add(node)
                # per-layer arrival events for the live target
                bw = plan.path_bottleneck(node) * self.cfg.eta * BYTES_PER_GBPS
                d = plan.depth_of(node)
                for k in range(1, model.num_layers + 1):
                    t_k = (d - 1 + k) * model.layer_shard_bytes / bw
                    self._push(self.now_us + cmd_us + int(round(t_k * US_PER_S)),
                               "layer", (tgt.iid, k))

        for node, inst in by_node.items():
            secs = est.per_target_completion[node]
            self._push(self.now_us + cmd_us + int(round(secs * US_PER_S)),
                       "transfer", (inst.iid, flow_by_target.get(node)))

        self.scale_events.append({
            "t_ms": self.now_us / US_PER_MS, "kind": "plan",
            "strategy": self.policy.strategy,
            "edges": [(e.src, e.dst, round(e.gbps, 3)) for e in plan.edges],
            "chains": plan.chains,
            "fanout": plan.nvlink_fanout,
            "completion_s": {n: round(s, 4) for n, s in
                             sorted(est.per_target_completion.items())},
            "live_targets": sorted(live_targets),
            "interference_free": plan_is_interference_free(plan, self.flows, self.topo),
        })

    def _on_layer_loaded(self, payload):
        iid, k = payload
        inst = self.instances[iid]
        sess = inst.live_session
        if sess is None or inst.status == "retired":
            return
        if sess.phase is Phase.FULL_SERVE or k <= sess.loaded_layers:
            return
        run_transition_protocol(sess, LayerLoaded(k))
        inst.loaded_layers = k
        if sess.phase is Phase.PARTIAL_SERVE:
            self._maybe_dispatch_prefill(inst)

    def _on_transfer_done(self, payload):
        iid, flow = payload
        inst = self.instances[iid]
        if flow is not None:
            try:
                self.flows.release(*flow, "scale")
            except KeyError:
                pass
            self._retry_pending_transfers()
        if inst.status == "retired":
            return
        inst.status = "active"
        inst.loaded_layers = inst.total_layers
        sess = inst.live_session
        if sess is not None:
            if sess.phase is Phase.LOADING:
                run_transition_protocol(sess, LayerLoaded(1))
            run_transition_protocol(sess, LoadCompleted())
            inst.live_session = None
            for other in self.instances.values():
                if other.cooperating_with == inst.iid:
                    other.cooperating_with = None
                    self._maybe_dispatch_prefill(other)
        self.pool.on_deploy(inst.model_name, SourceRef(inst.host_id, inst.gpus[0]),
                            now_s=self.now_s)
        if self.policy.strategy == "sllm":
            self.pool.touch(inst.model_name, inst.host_id, self.now_s)
        if inst.role == "prefill":
            self._maybe_dispatch_prefill(inst)
        else:
            self._maybe_step_decode(inst)

    def _execute_scale_down(self, role: str, count: int):
        group = self._group_instances(role)
        idle = [i for i in group
                if i.status == "active" and not i.busy and not i.stepping
                and not i.queue and not i.active_decode
                and i.live_session is None and i.cooperating_with is None]
        idle.sort(key=lambda i: -i.iid)  # newest first
        for inst in idle[:count]:
            inst.status = "retired"
            self.counters["retired"] += 1
            self.free_gpus[inst.host_id].extend(inst.gpus)
            self.free_gpus[inst.host_id].sort()
            self.pool.on_reclaim(inst.model_name, SourceRef(inst.host_id, inst.gpus[0]),
                                 now_s=self.now_s)
            self.scale_events.append({
                "t_ms": self.now_us / US_PER_MS, "kind": "retire",
                "instance": inst.iid, "role": role,
            })

    # ---- metrics ------------------------------------------------------------

    def _on_sample_tick(self, _):
        gpus_active = sum(len(i.gpus) for i in self.instances.values()
                          if i.status != "retired")
        copies = sum(self.pool.cache_copies(m, self.now_s) for m in self.models)
        self.max_cache_copies = max(self.max_cache_copies, copies)
        self.series.append((self.now_us / US_PER_MS, self._tokens_since_sample,
                            gpus_active, copies))
        self._tokens_since_sample = 0
        if self.pool.policy == "one-copy":
            self.pool.check_invariants(self.now_s)
        if self._work_remaining() or self.now_us <= self.trace_end_us:
            self._push(self.now_us + int(self.cfg.sample_interval_ms * US_PER_MS),
                       "sample", None)

    def _finalize(self) -> MetricSeries:
        model = self.models[self.default_model]
        done = [r for r in self.requests if r.first_token_us is not None]
        done.sort(key=lambda r: r.rid)
        ttfts = [compute_ttft(r) for r in done]
        tbts = [compute_tbt(r) for r in done]
        return MetricSeries(
            ttft_ms=ttfts,
            tbt_ms=tbts,
            slo_attainment=slo_attainment(ttfts, tbts, model.prefill_slo_ms,
                                          model.tbt_slo_ms),
            series=self.series,
            scale_events=self.scale_events,
            arrived=len(self.requests),
            completed=self.completed,
            counters=self.counters,
            max_cache_copies=self.max_cache_copies,
        )


def run_simulation(topo: NetworkTopology, models: list[ModelSpec],
                   trace: list[TraceRecord], policy: SimPolicy, seed: int = 0,
                   config: Optional[SimConfig] = None) -> MetricSeries:
    """One deterministic replay; identical inputs give identical outputs."""
    if any(a.arrival_ms > b.arrival_ms for a, b in zip(trace, trace[1:])):
        raise SimulationError("trace must be sorted by arrival time")
    return Simulation(topo, models, trace, policy, seed, config).run()
