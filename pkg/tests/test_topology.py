import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scalesim as ss
from scalesim.topology import CapacityError, TopologyError, UnknownNodeError


@pytest.fixture
def cluster_a():
    return ss.load_topology("cluster-A")


def test_cluster_a_preset(cluster_a):
    assert len(cluster_a.hosts) == 4
    assert all(len(h.gpu_ids) == 8 for h in cluster_a.hosts)
    assert cluster_a.intra_kind == "nvlink" and cluster_a.intra_gbps == 1600.0
    assert cluster_a.inter_gbps == 100.0
    assert cluster_a.hosts[0].host_gpu_gbps == 128.0
    assert cluster_a.hosts[0].ssd_gpu_gbps == 10.0
    assert len(cluster_a.nvlink_domains) == 4


def test_degenerate_single_host_single_gpu():
    topo = ss.load_topology({
        "hosts": [{"id": 0, "gpus": 1, "host_gpu_gbps": 128, "ssd_gpu_gbps": 10}],
        "intra": {"kind": "none", "gbps": 0},
        "inter": {"gbps": 100},
    })
    assert not any(l.kind == "rdma" for l in topo.links.values())
    assert topo.nvlink_domains == []


def test_a2_ultragpu_preset():
    topo = ss.load_topology("a2-ultragpu-8g")
    assert topo.inter_gbps == 12.5
    assert topo.hosts[0].ssd_gpu_gbps == 2.58
    assert topo.intra_kind == "nvlink"


def test_every_inter_host_pair_has_forward_and_reverse(cluster_a):
    a, b = "gpu0", "gpu8"
    assert cluster_a.link(a, b) is not None
    assert cluster_a.link(b, a) is not None
    assert cluster_a.link(a, b).kind == "rdma"


def test_load_rejects_bad_documents():
    with pytest.raises(TopologyError):
        ss.load_topology({"hosts": []})
    with pytest.raises(TopologyError):
        ss.load_topology({
            "hosts": [{"id": 0, "gpus": 1, "host_gpu_gbps": 0, "ssd_gpu_gbps": 0}],
            "inter": {"gbps": 100},
        })
    with pytest.raises(TopologyError):
        ss.load_topology({
            "hosts": [
                {"id": 0, "gpus": [0], "host_gpu_gbps": 128, "ssd_gpu_gbps": 10},
                {"id": 0, "gpus": [1], "host_gpu_gbps": 128, "ssd_gpu_gbps": 10},
            ],
            "inter": {"gbps": 100},
        })
    with pytest.raises(TopologyError):
        ss.load_topology("no-such-preset")


def test_document_round_trip(cluster_a):
    doc = cluster_a.to_document()
    assert ss.load_topology(doc) == cluster_a


@pytest.mark.parametrize("preset", sorted(ss.PRESETS))
def test_all_presets_load_and_round_trip(preset):
    topo = ss.load_topology(preset)
    assert ss.load_topology(topo.to_document()) == topo
    for h in topo.hosts:
        assert h.ssd_gpu_gbps <= h.host_gpu_gbps


def test_outcast_no_contention(cluster_a):
    flows = ss.FlowSet(cluster_a)
    assert cluster_a.outcast_bandwidth("gpu0", flows) == 100.0


def test_outcast_minus_registered_flow(cluster_a):
    flows = ss.FlowSet(cluster_a)
    flows.register("gpu0", "gpu8", 15.0, "kvcache")
    assert cluster_a.outcast_bandwidth("gpu0", flows) == pytest.approx(85.0)
    # inbound direction of the sender is untouched (bi-directional NIC)
    assert cluster_a.incast_bandwidth("gpu0", flows) == pytest.approx(100.0)


def test_incast_examples(cluster_a):
    flows = ss.FlowSet(cluster_a)
    flows.register("gpu0", "gpu8", 10.0, "kvcache")
    assert cluster_a.incast_bandwidth("gpu8", flows) == pytest.approx(90.0)
    assert cluster_a.incast_bandwidth("gpu16", flows) == pytest.approx(100.0)
    assert cluster_a.incast_bandwidth("mem0", flows) == pytest.approx(128.0)


def test_shared_nic_half_policy():
    doc = {
        "hosts": [
            {"id": 0, "gpus": [0, 1], "host_gpu_gbps": 128, "ssd_gpu_gbps": 10,
             "nic_groups": [[0, 1]]},
            {"id": 1, "gpus": [2, 3], "host_gpu_gbps": 128, "ssd_gpu_gbps": 10},
        ],
        "intra": {"kind": "pcie", "gbps": 256},
        "inter": {"gbps": 100},
    }
    topo = ss.load_topology(doc)
    flows = ss.FlowSet(topo)
    # sibling gpu1 runs prefill: sends kvcache out of the shared NIC
    flows.register("gpu1", "gpu2", 15.0, "kvcache")
    assert topo.outcast_bandwidth("gpu0", flows) == pytest.approx(50.0)
    # inbound direction of the same NIC is unaffected
    assert topo.incast_bandwidth("gpu0", flows) == pytest.approx(100.0)


def test_register_release_inverse(cluster_a):
    flows = ss.FlowSet(cluster_a)
    baseline = ss.FlowSet(cluster_a)
    flows.register("gpu0", "gpu8", 15.0, "kvcache")
    flows.release("gpu0", "gpu8", 15.0, "kvcache")
    assert flows == baseline


def test_directions_independent(cluster_a):
    flows = ss.FlowSet(cluster_a)
    flows.register("gpu0", "gpu8", 90.0, "kvcache")
    # outbound scale flow from the receiving node is fine: directions independent
    flows.register("gpu8", "gpu16", 90.0, "scale")
    assert cluster_a.outcast_bandwidth("gpu8", flows) == pytest.approx(10.0)


def test_capacity_exceeded(cluster_a):
    flows = ss.FlowSet(cluster_a)
    flows.register("gpu0", "gpu8", 60.0, "scale")
    with pytest.raises(CapacityError):
        flows.register("gpu0", "gpu8", 60.0, "scale")


def test_unknown_node(cluster_a):
    flows = ss.FlowSet(cluster_a)
    with pytest.raises(UnknownNodeError):
        cluster_a.outcast_bandwidth("gpu99", flows)


def test_transfer_seconds_reference_values():
    assert ss.transfer_seconds(14e9, 10.0) == pytest.approx(11.2)
    assert ss.transfer_seconds(14e9, 128.0) == pytest.approx(0.875)


@settings(max_examples=60, deadline=None)
@given(
    rates=st.lists(st.floats(min_value=0.5, max_value=30.0), min_size=1, max_size=8),
)
def test_flow_accounting_never_exceeds_capacity(rates):
    topo = ss.load_topology("cluster-B")
    flows = ss.FlowSet(topo)
    registered = []
    for i, r in enumerate(rates):
        src, dst = f"gpu{i % 8}", f"gpu{8 + (i % 8)}"
        try:
            flows.register(src, dst, r, "scale")
            registered.append((src, dst, r))
        except CapacityError:
            pass
        # invariant after every mutation
        for node in topo.gpu_nodes:
            assert topo.outcast_bandwidth(node, flows) >= 0
            assert topo.incast_bandwidth(node, flows) >= 0
    for src, dst, r in registered:
        flows.release(src, dst, r, "scale")
    assert flows == ss.FlowSet(topo)
