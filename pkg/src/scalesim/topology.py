"""Cluster compute/network fabric model with directed-flow accounting.

Nodes are GPUs ("gpu<i>"), per-host memory caches ("mem<h>") and per-host
SSDs ("ssd<h>"). Links are directed and carry one of four kinds:

    nvlink  intra-host GPU-GPU (full mesh inside an NVLink domain)
    pcie    intra-host GPU-GPU without NVLink, and host-memory <-> GPU
    rdma    inter-host (GPU or host-memory NIC)
    ssd     local SSD -> GPU

Capacities are tracked per (port, direction) where a port is one of the
independent fabrics a node is attached to: the RDMA NIC (possibly shared
between sibling GPUs), the intra-host fabric, the host-memory PCIe port
and the SSD channel. Incast and outcast directions are independent, so
registering inbound flows never reduces outbound headroom.

Bandwidths are Gbps throughout; sizes are bytes; 1 Gbps == 0.125 GB/s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

#: bytes per second carried by 1 Gbps
BYTES_PER_GBPS = 0.125e9

#: flow labels that count as serving traffic (scale traffic must yield to these)
SERVING_LABELS = ("kvcache", "activation")

FLOW_LABELS = ("kvcache", "scale", "activation")

LINK_KINDS = ("nvlink", "rdma", "pcie", "ssd")

#: fraction of NIC capacity usable for scaling when a sibling GPU on the
#: same NIC carries serving traffic in the same direction
DEFAULT_SHARED_NIC_CAP = 0.5

#: bandwidth efficiency factor applied when estimating transfer times
DEFAULT_ETA = 0.8


class TopologyError(ValueError):
    """Malformed topology document or invalid node reference."""


class UnknownNodeError(TopologyError):
    """Node id does not exist in the topology."""


class CapacityError(ValueError):
    """Registering a flow would exceed a link or port capacity."""


def transfer_seconds(nbytes: float, gbps: float, eta: float = 1.0) -> float:
    """Time to move `nbytes` over a `gbps` link derated by `eta`."""
    if gbps <= 0 or eta <= 0:
        raise ValueError("bandwidth and eta must be positive")
    return nbytes / (gbps * eta * BYTES_PER_GBPS)


def gpu_node(gpu_id: int) -> str:
    return f"gpu{gpu_id}"


def node_sort_key(node: str) -> tuple:
    """Stable ordering with numeric suffixes compared as numbers."""
    for prefix in ("gpu", "mem", "ssd"):
        if node.startswith(prefix) and node[len(prefix):].isdigit():
            return (prefix, int(node[len(prefix):]))
    return (node, -1)


def mem_node(host_id) -> str:
    return f"mem{host_id}"


def ssd_node(host_id) -> str:
    return f"ssd{host_id}"


@dataclass(frozen=True)
class DirectedLink:
    src: str
    dst: str
    gbps: float
    kind: str


@dataclass
class HostSpec:
    host_id: int
    gpu_ids: list[int]
    host_gpu_gbps: float
    ssd_gpu_gbps: float
    #: groups of GPU ids sharing one NIC; defaults to one NIC per GPU
    nic_groups: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.nic_groups:
            self.nic_groups = [[g] for g in self.gpu_ids]
        covered = [g for grp in self.nic_groups for g in grp]
        if sorted(covered) != sorted(self.gpu_ids):
            raise TopologyError(
                f"host {self.host_id}: nic_groups must cover every GPU exactly once"
            )
        if self.ssd_gpu_gbps > self.host_gpu_gbps:
            raise TopologyError(
                f"host {self.host_id}: ssd_gpu_gbps exceeds host_gpu_gbps"
            )
        if self.host_gpu_gbps <= 0 or self.ssd_gpu_gbps <= 0:
            raise TopologyError(f"host {self.host_id}: bandwidths must be positive")


class NetworkTopology:
    """Hosts, directed links, NVLink domains and port capacities."""

    def __init__(self, hosts: list[HostSpec], intra_kind: str, intra_gbps: float,
                 inter_gbps: float, shared_nic_cap: float = DEFAULT_SHARED_NIC_CAP):
        if intra_kind not in ("nvlink", "pcie", "none"):
            raise TopologyError(f"unknown intra link kind {intra_kind!r}")
        if inter_gbps <= 0 or (intra_kind != "none" and intra_gbps <= 0):
            raise TopologyError("link bandwidths must be positive")
        self.hosts = hosts
        self.intra_kind = intra_kind
        self.intra_gbps = intra_gbps
        self.inter_gbps = inter_gbps
        self.shared_nic_cap = shared_nic_cap

        self.host_of_gpu: dict[int, HostSpec] = {}
        for h in hosts:
            for g in h.gpu_ids:
                if g in self.host_of_gpu:
                    raise TopologyError(f"gpu {g} assigned to more than one host")
                self.host_of_gpu[g] = h
        if len({h.host_id for h in hosts}) != len(hosts):
            raise TopologyError("duplicate host ids")

        # NIC membership: nic key -> gpu node ids sharing it
        self.nic_of: dict[str, tuple] = {}
        self.nic_members: dict[tuple, list[str]] = {}
        for h in hosts:
            for i, grp in enumerate(h.nic_groups):
                key = (h.host_id, i)
                members = [gpu_node(g) for g in grp]
                self.nic_members[key] = members
                for n in members:
                    self.nic_of[n] = key

        self.links: dict[tuple[str, str], DirectedLink] = {}
        self._build_links()

        # NVLink domains: one per host when the intra fabric is NVLink
        self.nvlink_domains: list[frozenset[str]] = []
        self.nvlink_domain_of: dict[str, int] = {}
        if intra_kind == "nvlink":
            for h in hosts:
                dom = frozenset(gpu_node(g) for g in h.gpu_ids)
                if len(dom) > 1:
                    idx = len(self.nvlink_domains)
                    self.nvlink_domains.append(dom)
                    for n in dom:
                        self.nvlink_domain_of[n] = idx

    def _add_link(self, src: str, dst: str, gbps: float, kind: str):
        self.links[(src, dst)] = DirectedLink(src, dst, gbps, kind)

    def _build_links(self):
        for h in self.hosts:
            gpus = [gpu_node(g) for g in h.gpu_ids]
            mem, ssd = mem_node(h.host_id), ssd_node(h.host_id)
            for n in gpus:
                self._add_link(mem, n, h.host_gpu_gbps, "pcie")
                self._add_link(n, mem, h.host_gpu_gbps, "pcie")
                self._add_link(ssd, n, h.ssd_gpu_gbps, "ssd")
            if self.intra_kind != "none":
                for a in gpus:
                    for b in gpus:
                        if a != b:
                            self._add_link(a, b, self.intra_gbps, self.intra_kind)
        for ha in self.hosts:
            for hb in self.hosts:
                if ha.host_id == hb.host_id:
                    continue
                for a in ha.gpu_ids:
                    for b in hb.gpu_ids:
                        self._add_link(gpu_node(a), gpu_node(b), self.inter_gbps, "rdma")
                # host memory reaches remote GPUs through the host NIC
                for b in hb.gpu_ids:
                    self._add_link(mem_node(ha.host_id), gpu_node(b), self.inter_gbps, "rdma")
                    self._add_link(gpu_node(b), mem_node(ha.host_id), self.inter_gbps, "rdma")

    # ---- node helpers -------------------------------------------------

    @property
    def gpu_nodes(self) -> list[str]:
        return [gpu_node(g) for h in self.hosts for g in h.gpu_ids]

    @property
    def mem_nodes(self) -> list[str]:
        return [mem_node(h.host_id) for h in self.hosts]

    def has_node(self, node: str) -> bool:
        if node in self.nic_of:
            return True
        return any(node in (mem_node(h.host_id), ssd_node(h.host_id)) for h in self.hosts)

    def require_node(self, node: str):
        if not self.has_node(node):
            raise UnknownNodeError(node)

    def host_of(self, node: str) -> HostSpec:
        self.require_node(node)
        if node.startswith("gpu"):
            return self.host_of_gpu[int(node[3:])]
        hid = node[3:]
        for h in self.hosts:
            if str(h.host_id) == hid:
                return h
        raise UnknownNodeError(node)

    def link(self, src: str, dst: str) -> Optional[DirectedLink]:
        return self.links.get((src, dst))

    def fabric_of(self, link: DirectedLink) -> str:
        """Port group a link draws capacity from at both endpoints."""
        if link.kind == "rdma":
            return "net"
        if link.kind == "nvlink":
            return "intra"
        if link.kind == "ssd":
            return "ssd"
        # pcie: intra fabric between GPUs, host port to/from memory
        both_gpu = link.src.startswith("gpu") and link.dst.startswith("gpu")
        return "intra" if both_gpu else "host"

    def port_capacity(self, node: str, fabric: str) -> float:
        """Nominal per-direction capacity of `node` on `fabric`, 0 if absent."""
        self.require_node(node)
        host = self.host_of(node)
        if node.startswith("gpu"):
            return {
                "net": self.inter_gbps if len(self.hosts) > 1 else 0.0,
                "intra": self.intra_gbps if self.intra_kind != "none" else 0.0,
                "host": host.host_gpu_gbps,
                "ssd": host.ssd_gpu_gbps,
            }.get(fabric, 0.0)
        if node.startswith("mem"):
            return {
                "net": self.inter_gbps if len(self.hosts) > 1 else 0.0,
                "host": host.host_gpu_gbps,
            }.get(fabric, 0.0)
        return host.ssd_gpu_gbps if fabric == "ssd" else 0.0

    def default_fabric(self, node: str) -> str:
        """Fabric queried when callers do not name one: NIC for GPUs, the
        host-GPU port for memory nodes, the SSD channel for SSD nodes."""
        if node.startswith("gpu"):
            return "net" if len(self.hosts) > 1 else "intra"
        return "host" if node.startswith("mem") else "ssd"

    # ---- contended bandwidth ------------------------------------------

    def outcast_bandwidth(self, node: str, flows: "FlowSet",
                          fabric: Optional[str] = None) -> float:
        return self._directional_bw(node, flows, fabric, outbound=True)

    def incast_bandwidth(self, node: str, flows: "FlowSet",
                         fabric: Optional[str] = None) -> float:
        return self._directional_bw(node, flows, fabric, outbound=False)

    def _directional_bw(self, node: str, flows: "FlowSet", fabric: Optional[str],
                        outbound: bool) -> float:
        self.require_node(node)
        fabric = fabric or self.default_fabric(node)
        cap = self.port_capacity(node, fabric)
        if cap <= 0:
            return 0.0
        used = flows.port_usage(node, fabric, outbound)
        avail = max(0.0, cap - used)
        if fabric == "net" and node in self.nic_of:
            # shared-NIC throttle: when a sibling GPU on the same NIC has a
            # serving flow in this direction, scale traffic is capped
            key = self.nic_of[node]
            if len(self.nic_members[key]) > 1:
                for sib in self.nic_members[key]:
                    if sib != node and flows.has_serving_flow(sib, outbound):
                        avail = min(avail, self.shared_nic_cap * cap)
                        break
        return avail

    # ---- document round-trip -------------------------------------------

    def to_document(self) -> dict:
        doc = {
            "hosts": [
                {
                    "id": h.host_id,
                    "gpus": list(h.gpu_ids),
                    "host_gpu_gbps": h.host_gpu_gbps,
                    "ssd_gpu_gbps": h.ssd_gpu_gbps,
                    "nic_groups": [list(g) for g in h.nic_groups],
                }
                for h in self.hosts
            ],
            "intra": {"kind": self.intra_kind, "gbps": self.intra_gbps},
            "inter": {"gbps": self.inter_gbps},
        }
        return doc

    def __eq__(self, other):
        return isinstance(other, NetworkTopology) and self.to_document() == other.to_document()


@dataclass(frozen=True)
class Flow:
    src: str
    dst: str
    gbps: float
    label: str


class FlowSet:
    """Directed serving/scale flows with per-link and per-port accounting."""

    def __init__(self, topo: NetworkTopology):
        self.topo = topo
        self.flows: list[Flow] = []
        self._link_used: dict[tuple[str, str], float] = {}
        # (port key, outbound) -> Gbps; NIC-shared GPUs share one port key
        self._port_used: dict[tuple, float] = {}
        self._serving: dict[tuple[str, bool], int] = {}

    def _port_key(self, node: str, fabric: str):
        if fabric == "net" and node in self.topo.nic_of:
            return ("nic", self.topo.nic_of[node])
        return (node, fabric)

    def port_usage(self, node: str, fabric: str, outbound: bool) -> float:
        return self._port_used.get((self._port_key(node, fabric), outbound), 0.0)

    def has_serving_flow(self, node: str, outbound: bool) -> bool:
        return self._serving.get((node, outbound), 0) > 0

    def register(self, src: str, dst: str, gbps: float, label: str) -> "FlowSet":
        if label not in FLOW_LABELS:
            raise ValueError(f"unknown flow label {label!r}")
        if gbps <= 0:
            raise ValueError("flow rate must be positive")
        link = self.topo.link(src, dst)
        if link is None:
            self.topo.require_node(src)
            self.topo.require_node(dst)
            raise TopologyError(f"no link {src} -> {dst}")
        eps = 1e-9
        if self._link_used.get((src, dst), 0.0) + gbps > link.gbps + eps:
            raise CapacityError(f"link {src}->{dst} over capacity")
        fabric = self.topo.fabric_of(link)
        for node, outbound in ((src, True), (dst, False)):
            cap = self.topo.port_capacity(node, fabric)
            if self.port_usage(node, fabric, outbound) + gbps > cap + eps:
                raise CapacityError(
                    f"{'outbound' if outbound else 'inbound'} {fabric} port of {node} over capacity"
                )
        flow = Flow(src, dst, gbps, label)
        self.flows.append(flow)
        self._link_used[(src, dst)] = self._link_used.get((src, dst), 0.0) + gbps
        for node, outbound in ((src, True), (dst, False)):
            key = (self._port_key(node, fabric), outbound)
            self._port_used[key] = self._port_used.get(key, 0.0) + gbps
            if label in SERVING_LABELS:
                skey = (node, outbound)
                self._serving[skey] = self._serving.get(skey, 0) + 1
        return self

    def release(self, src: str, dst: str, gbps: float, label: str) -> "FlowSet":
        flow = Flow(src, dst, gbps, label)
        try:
            self.flows.remove(flow)
        except ValueError:
            raise KeyError(f"flow not registered: {flow}")
        link = self.topo.link(src, dst)
        fabric = self.topo.fabric_of(link)
        self._link_used[(src, dst)] -= gbps
        for node, outbound in ((src, True), (dst, False)):
            key = (self._port_key(node, fabric), outbound)
            self._port_used[key] -= gbps
            if label in SERVING_LABELS:
                self._serving[(node, outbound)] -= 1
        return self

    def outbound_serving_nodes(self) -> set[str]:
        return {f.src for f in self.flows if f.label in SERVING_LABELS}

    def on_link(self, src: str, dst: str) -> float:
        return self._link_used.get((src, dst), 0.0)

    def __eq__(self, other):
        return isinstance(other, FlowSet) and sorted(
            (f.src, f.dst, f.gbps, f.label) for f in self.flows
        ) == sorted((f.src, f.dst, f.gbps, f.label) for f in other.flows)

    def __len__(self):
        return len(self.flows)


# ---- document loading -------------------------------------------------


def _host_from_doc(doc: dict, next_gpu_id: int) -> tuple[HostSpec, int]:
    gpus = doc["gpus"]
    if isinstance(gpus, int):
        gpu_ids = list(range(next_gpu_id, next_gpu_id + gpus))
        next_gpu_id += gpus
    else:
        gpu_ids = [int(g) for g in gpus]
        next_gpu_id = max(next_gpu_id, max(gpu_ids) + 1) if gpu_ids else next_gpu_id
    host = HostSpec(
        host_id=doc["id"],
        gpu_ids=gpu_ids,
        host_gpu_gbps=float(doc["host_gpu_gbps"]),
        ssd_gpu_gbps=float(doc["ssd_gpu_gbps"]),
        nic_groups=[list(g) for g in doc.get("nic_groups") or []],
    )
    return host, next_gpu_id


def topology_from_document(doc: dict) -> NetworkTopology:
    try:
        hosts = []
        next_gpu = 0
        for hdoc in doc["hosts"]:
            host, next_gpu = _host_from_doc(hdoc, next_gpu)
            hosts.append(host)
        intra = doc.get("intra") or {"kind": "none", "gbps": 0.0}
        kind = intra.get("kind", "none")
        return NetworkTopology(
            hosts=hosts,
            intra_kind=kind,
            intra_gbps=float(intra.get("gbps", 0.0)),
            inter_gbps=float(doc["inter"]["gbps"]),
            shared_nic_cap=float(doc.get("shared_nic_cap", DEFAULT_SHARED_NIC_CAP)),
        )
    except (KeyError, TypeError) as exc:
        raise TopologyError(f"malformed topology document: {exc}") from exc


def load_topology(source) -> NetworkTopology:
    """Build a topology from a preset name, a document dict or a JSON path."""
    from .presets import PRESETS

    if isinstance(source, NetworkTopology):
        return source
    if isinstance(source, str) and source in PRESETS:
        return topology_from_document(PRESETS[source])
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise TopologyError(f"unknown preset or missing file: {source}")
        return topology_from_document(json.loads(path.read_text()))
    if isinstance(source, dict):
        return topology_from_document(source)
    raise TopologyError(f"cannot load topology from {type(source).__name__}")
