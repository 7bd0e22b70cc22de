import pytest

import scalesim as ss
from scalesim.parampool import ParameterPool, PoolError, SourceRef


def spec(name):
    return ss.ModelSpec(name=name, num_layers=32, bytes_per_layer=437_500_000.0)


@pytest.fixture
def topo():
    return ss.load_topology("cluster-A")


def test_init_even_split(topo):
    models = [spec(f"m{i}") for i in range(4)]
    pool = ParameterPool.init_pool(models, topo)
    hosts = [pool.cache_refs[m.name][0].host_id for m in models]
    assert sorted(hosts) == [0, 1, 2, 3]


def test_init_round_robin_wraps(topo):
    models = [spec(f"m{i}") for i in range(5)]
    pool = ParameterPool.init_pool(models, topo)
    per_host = {}
    for m in models:
        h = pool.cache_refs[m.name][0].host_id
        per_host[h] = per_host.get(h, 0) + 1
    assert per_host[0] == 2
    assert sum(per_host.values()) == 5


def test_one_copy_policy_single_cache(topo):
    pool = ParameterPool.init_pool([spec("m")], topo)
    refs = pool.sources_for("m")
    assert len(refs) == 1 and refs[0].is_cache
    pool.check_invariants()


def test_capacity_exceeded(topo):
    models = [spec(f"m{i}") for i in range(5)]
    with pytest.raises(PoolError):
        ParameterPool.init_pool(models, topo, cache_capacity_per_host=1)


def test_sources_gpu_first(topo):
    pool = ParameterPool.init_pool([spec("m")], topo)
    pool.on_deploy("m", SourceRef(host_id=1, gpu_id=8))
    pool.on_deploy("m", SourceRef(host_id=2, gpu_id=16))
    refs = pool.sources_for("m")
    assert [r.is_cache for r in refs] == [False, False, True]
    assert refs[0].node == "gpu8"


def test_zero_instance_model_keeps_cache_ref(topo):
    pool = ParameterPool.init_pool([spec("m")], topo)
    assert [r.is_cache for r in pool.sources_for("m")] == [True]


def test_deploy_reclaim_inverse(topo):
    pool = ParameterPool.init_pool([spec("m")], topo)
    snapshot = ParameterPool.init_pool([spec("m")], topo)
    pool.on_deploy("m", SourceRef(host_id=1, gpu_id=8))
    assert pool.on_reclaim("m", SourceRef(host_id=1, gpu_id=8)) is None
    assert pool == snapshot


def test_reclaim_last_gpu_keeps_cache(topo):
    pool = ParameterPool.init_pool([spec("m")], topo)
    pool.on_deploy("m", SourceRef(host_id=1, gpu_id=8))
    reload = pool.on_reclaim("m", SourceRef(host_id=1, gpu_id=8))
    assert reload is None  # cache copy still present, no reload needed
    assert pool.cache_copies("m") == 1


def test_reclaim_after_cache_eviction_triggers_reload(topo):
    pool = ParameterPool.init_pool([spec("m")], topo, policy="keep-alive",
                                   keep_alive_s=10.0)
    pool.on_deploy("m", SourceRef(host_id=1, gpu_id=8), now_s=0.0)
    # long past the keep-alive window: every cache entry is stale
    reload = pool.on_reclaim("m", SourceRef(host_id=1, gpu_id=8), now_s=1000.0)
    assert reload is not None
    assert pool.cache_copies("m", now_s=1000.0) == 1
    pool.check_invariants(now_s=1000.0)


def test_keep_alive_hit_and_miss(topo):
    pool = ParameterPool.init_pool([spec("m")], topo, policy="keep-alive",
                                   keep_alive_s=300.0)
    host = pool.cache_refs["m"][0].host_id
    assert pool.cache_hit("m", host, now_s=299.0)
    assert not pool.cache_hit("m", host, now_s=301.0)
    other = next(h.host_id for h in topo.hosts if h.host_id != host)
    assert not pool.cache_hit("m", other, now_s=0.0)
    pool.touch("m", other, now_s=50.0)
    assert pool.cache_hit("m", other, now_s=200.0)
    assert pool.cache_copies("m", now_s=200.0) == 2


def test_invariants_hold_through_deploy_cycles(topo):
    pool = ParameterPool.init_pool([spec("a"), spec("b")], topo)
    for i in range(6):
        pool.on_deploy("a", SourceRef(host_id=i % 4, gpu_id=8 * (i % 4) + i % 8))
        pool.check_invariants()
    for i in range(6):
        pool.on_reclaim("a", SourceRef(host_id=i % 4, gpu_id=8 * (i % 4) + i % 8))
        pool.check_invariants()
    assert len(pool.sources_for("a")) == 1


def test_unknown_model(topo):
    pool = ParameterPool.init_pool([spec("m")], topo)
    with pytest.raises(PoolError):
        pool.sources_for("nope")
