"""Greedy multicast scale-plan generation over serial-forwarding chains.

The planner turns "load model M onto targets T from sources S" into a
forest of chains: each chain member forwards layers downstream as soon as
it has received them, so a chain's total time is nearly independent of its
length. Construction is greedy: targets are served in descending incast
bandwidth; each takes the source with the most residual outcast bandwidth
and then becomes a source itself. Ties in the source queue are broken by
insertion order, which keeps chains short when fresh targets tie with
original sources.

Before construction, targets reachable over NVLink are collapsed to one
representative per domain (the rest are served by intra-host broadcast),
and sources currently sending serving traffic are pruned so the plan
cannot interfere with the serving workload.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .parampool import ModelSpec
from .topology import (
    BYTES_PER_GBPS,
    DEFAULT_ETA,
    FlowSet,
    NetworkTopology,
    node_sort_key,
)


class PlanError(ValueError):
    pass


class UnreachableTargetError(PlanError):
    pass


@dataclass(frozen=True)
class PlanSource:
    node: str
    outcast_gbps: float


@dataclass(frozen=True)
class PlanTarget:
    node: str
    incast_gbps: float
    outcast_gbps: Optional[float] = None  # None: assume symmetric with incast

    @property
    def forward_gbps(self) -> float:
        return self.incast_gbps if self.outcast_gbps is None else self.outcast_gbps


@dataclass
class ScaleRequest:
    model: ModelSpec
    sources: list[PlanSource]
    targets: list[PlanTarget]

    def __post_init__(self):
        if not self.sources or not self.targets:
            raise PlanError("scale request needs at least one source and one target")


@dataclass(frozen=True)
class PlanEdge:
    src: str
    dst: str
    gbps: float
    kind: str


@dataclass
class ScalePlan:
    edges: list[PlanEdge]
    #: root-to-leaf node paths; the first edge appended at a node continues
    #: that node's chain, later edges open new chains
    chains: list[list[str]] = field(default_factory=list)
    #: chain member -> NVLink siblings it serves by intra-host broadcast
    nvlink_fanout: dict[str, list[str]] = field(default_factory=dict)

    def targets(self) -> list[str]:
        out = [e.dst for e in self.edges]
        for sibs in self.nvlink_fanout.values():
            out.extend(sibs)
        return out

    def depth_of(self, node: str) -> int:
        parent = {e.dst: e.src for e in self.edges}
        d = 0
        while node in parent:
            node = parent[node]
            d += 1
        return d

    def path_bottleneck(self, node: str) -> float:
        parent = {e.dst: (e.src, e.gbps) for e in self.edges}
        bw = math.inf
        while node in parent:
            node, gbps = parent[node]
            bw = min(bw, gbps)
        return bw


@dataclass
class PlanEstimate:
    per_target_completion: dict[str, float]
    bottleneck_gbps: dict[int, float]  # chain index -> slowest edge


# ---- algorithm steps ---------------------------------------------------


def group_targets(targets: Sequence[PlanTarget], topo: NetworkTopology
                  ) -> tuple[list[PlanTarget], dict[str, list[str]]]:
    """Collapse NVLink-domain siblings onto one representative each.

    The representative is the member with the highest incast bandwidth
    (ties: lexicographic node id), the rest go to the fanout map.
    """
    by_domain: dict[int, list[PlanTarget]] = {}
    loose: list[PlanTarget] = []
    for t in targets:
        dom = topo.nvlink_domain_of.get(t.node)
        if dom is None:
            loose.append(t)
        else:
            by_domain.setdefault(dom, []).append(t)
    kept = list(loose)
    fanout: dict[str, list[str]] = {}
    for dom in sorted(by_domain):
        members = sorted(by_domain[dom], key=lambda t: (-t.incast_gbps, node_sort_key(t.node)))
        rep, rest = members[0], members[1:]
        kept.append(rep)
        if rest:
            fanout[rep.node] = [t.node for t in rest]
    return kept, fanout


def prune_sources(sources: Sequence[PlanSource], flows: FlowSet) -> list[PlanSource]:
    """Drop sources that are currently sending serving traffic.

    Falls back to cache sources (which never serve) when every GPU source
    is busy; as a last resort the original set is returned so a non-empty
    request never produces an empty source set.
    """
    busy = flows.outbound_serving_nodes()
    kept = [s for s in sources if s.node not in busy]
    if kept:
        return kept
    caches = [s for s in sources if not s.node.startswith("gpu")]
    return caches if caches else list(sources)


def generate_plan(request: ScaleRequest, topo: NetworkTopology, flows: FlowSet,
                  group: bool = True, prune: bool = True) -> ScalePlan:
    """Greedy chain construction (max source-bandwidth heap, fast targets first)."""
    targets, fanout = (group_targets(request.targets, topo) if group
                       else (list(request.targets), {}))
    sources = prune_sources(request.sources, flows) if prune else list(request.sources)
    if not sources:
        raise PlanError("no usable sources")

    # (-bandwidth, insertion sequence) min-heap == max-bandwidth queue with
    # earlier insertion winning ties
    seq = itertools.count()
    heap: list[tuple[float, int, str]] = []
    for s in sources:
        if s.outcast_gbps > 0:
            heapq.heappush(heap, (-s.outcast_gbps, next(seq), s.node))

    ordered = sorted(targets, key=lambda t: (-t.incast_gbps, node_sort_key(t.node)))
    edges: list[PlanEdge] = []
    for tgt in ordered:
        skipped = []
        chosen = None
        while heap:
            neg_bw, order, node = heapq.heappop(heap)
            if topo.link(node, tgt.node) is not None:
                chosen = (-neg_bw, order, node)
                break
            skipped.append((neg_bw, order, node))
        for item in skipped:
            heapq.heappush(heap, item)
        if chosen is None:
            raise UnreachableTargetError(f"no source can reach target {tgt.node}")
        src_bw, _, src = chosen
        link = topo.link(src, tgt.node)
        edge_bw = min(src_bw, tgt.incast_gbps, link.gbps)
        if edge_bw <= 0:
            raise UnreachableTargetError(f"zero bandwidth toward {tgt.node}")
        edges.append(PlanEdge(src, tgt.node, edge_bw, link.kind))
        residual = src_bw - edge_bw
        if residual > 0:
            heapq.heappush(heap, (-residual, next(seq), src))
        # the new member can forward at most what it receives, capped by
        # its own outcast port
        heapq.heappush(heap, (-min(edge_bw, tgt.forward_gbps), next(seq), tgt.node))

    plan = ScalePlan(edges=edges, nvlink_fanout=fanout)
    plan.chains = _derive_chains(edges)
    return plan


def _derive_chains(edges: list[PlanEdge]) -> list[list[str]]:
    chains: list[list[str]] = []
    tail_of: dict[str, int] = {}
    for e in edges:
        idx = tail_of.get(e.src)
        if idx is not None:
            chains[idx].append(e.dst)
            del tail_of[e.src]
        else:
            idx = len(chains)
            chains.append([e.src, e.dst])
        tail_of[e.dst] = idx
    return chains


def estimate_completion(plan: ScalePlan, model: ModelSpec,
                        topo: Optional[NetworkTopology] = None,
                        eta: float = DEFAULT_ETA) -> PlanEstimate:
    """Store-and-forward completion per target.

    A target at depth d behind path bottleneck B finishes after
    shard/B + (d-1) * layer/B: the first term streams the whole shard, each
    extra hop adds one layer of pipeline fill. NVLink siblings add one
    intra-host broadcast of the shard on top of their representative.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    completion: dict[str, float] = {}
    for e in plan.edges:
        t = e.dst
        bw = plan.path_bottleneck(t) * eta * BYTES_PER_GBPS
        d = plan.depth_of(t)
        completion[t] = (model.shard_bytes + (d - 1) * model.layer_shard_bytes) / bw
    for rep, sibs in plan.nvlink_fanout.items():
        base = completion.get(rep, 0.0)
        if topo is not None and topo.intra_kind == "nvlink":
            nvlink_bw = topo.intra_gbps
        else:
            nvlink_bw = 1600.0
        bcast = model.shard_bytes / (nvlink_bw * eta * BYTES_PER_GBPS)
        for s in sibs:
            completion[s] = base + bcast
    bottleneck = {
        i: min(
            (e.gbps for e in plan.edges
             if any(e.src == a and e.dst == b for a, b in zip(chain, chain[1:]))),
            default=math.inf,
        )
        for i, chain in enumerate(plan.chains)
    }
    return PlanEstimate(per_target_completion=completion, bottleneck_gbps=bottleneck)


def plan_is_interference_free(plan: ScalePlan, flows: FlowSet,
                              topo: Optional[NetworkTopology] = None) -> bool:
    """True iff no edge shares a (node, direction) with serving traffic and
    shared-NIC throttles are respected."""
    topo = topo or flows.topo
    for e in plan.edges:
        if flows.has_serving_flow(e.src, outbound=True):
            return False
        if flows.has_serving_flow(e.dst, outbound=False):
            return False
        link = topo.link(e.src, e.dst)
        if link is not None and topo.fabric_of(link) == "net":
            for node, outbound in ((e.src, True), (e.dst, False)):
                nic = topo.nic_of.get(node)
                if nic is None:
                    continue
                siblings = [m for m in topo.nic_members[nic] if m != node]
                if any(flows.has_serving_flow(m, outbound) for m in siblings):
                    if e.gbps > topo.shared_nic_cap * topo.port_capacity(node, "net"):
                        return False
    return True


def build_scale_request(model: ModelSpec, source_nodes: Sequence[str],
                        target_nodes: Sequence[str], topo: NetworkTopology,
                        flows: FlowSet) -> ScaleRequest:
    """Flow-adjusted bandwidths for a plain node-id request."""
    sources = [PlanSource(n, topo.outcast_bandwidth(n, flows)) for n in source_nodes]
    targets = [
        PlanTarget(n, topo.incast_bandwidth(n, flows), topo.outcast_bandwidth(n, flows))
        for n in target_nodes
    ]
    return ScaleRequest(model=model, sources=sources, targets=targets)


# ---- brute-force oracle -------------------------------------------------


def _forest_completions(parents: dict[str, str], order_bw: dict[str, float],
                        model: ModelSpec, eta: float) -> Optional[float]:
    """Max completion for a parent assignment with per-edge bandwidths."""
    worst = 0.0
    for t in parents:
        bw = math.inf
        node, depth = t, 0
        while node in parents:
            bw = min(bw, order_bw[node])
            node = parents[node]
            depth += 1
        if bw <= 0 or not math.isfinite(bw):
            return None
        secs = (model.shard_bytes + (depth - 1) * model.layer_shard_bytes) / (
            bw * eta * BYTES_PER_GBPS
        )
        worst = max(worst, secs)
    return worst


def optimal_plan_completion(request: ScaleRequest, model: Optional[ModelSpec] = None,
                            eta: float = 1.0) -> float:
    """Exhaustive optimum over all forests and per-node child service orders.

    Exponential; intended for instances with <= 3 sources and <= 5 targets.
    Parent capacity is consumed child by child exactly like the greedy
    construction, so the two sides share one time model.
    """
    model = model or request.model
    src_bw = {s.node: s.outcast_gbps for s in request.sources}
    tgt_in = {t.node: t.incast_gbps for t in request.targets}
    tgt_fwd = {t.node: t.forward_gbps for t in request.targets}
    targets = [t.node for t in request.targets]
    parents_options = list(src_bw) + targets

    best = math.inf
    for combo in itertools.product(parents_options, repeat=len(targets)):
        parents = {t: p for t, p in zip(targets, combo)}
        if any(t == p for t, p in parents.items()):
            continue
        # reject cycles
        ok = True
        for t in targets:
            seen = set()
            node = t
            while node in parents:
                if node in seen:
                    ok = False
                    break
                seen.add(node)
                node = parents[node]
            if not ok:
                break
        if not ok:
            continue
        children: dict[str, list[str]] = {}
        for t, p in parents.items():
            children.setdefault(p, []).append(t)

        def depth(node: str) -> int:
            d = 0
            while node in parents:
                node = parents[node]
                d += 1
            return d

        # parents processed sources-first so a relaying target already knows
        # the bandwidth it receives before its own children are assigned
        parent_keys = sorted(children, key=lambda p: (depth(p), p))
        per_parent_orders = [list(itertools.permutations(children[p])) for p in parent_keys]
        for orders in itertools.product(*per_parent_orders):
            edge_bw: dict[str, float] = {}
            feasible = True
            for p, order in zip(parent_keys, orders):
                if p in src_bw:
                    residual = src_bw[p]
                else:
                    residual = min(edge_bw[p], tgt_fwd[p])
                for c in order:
                    bw = min(residual, tgt_in[c])
                    if bw <= 0:
                        feasible = False
                        break
                    edge_bw[c] = bw
                    residual -= bw
                if not feasible:
                    break
            if not feasible:
                continue
            worst = _forest_completions(parents, edge_bw, model, eta)
            if worst is not None:
                best = min(best, worst)
    if not math.isfinite(best):
        raise PlanError("oracle found no feasible forest")
    return best


def plan_max_completion(plan: ScalePlan, model: ModelSpec, eta: float = 1.0) -> float:
    est = estimate_completion(plan, model, eta=eta)
    chained = [v for k, v in est.per_target_completion.items()
               if k not in _fanout_nodes(plan)]
    return max(chained) if chained else 0.0


def _fanout_nodes(plan: ScalePlan) -> set[str]:
    return {s for sibs in plan.nvlink_fanout.values() for s in sibs}
