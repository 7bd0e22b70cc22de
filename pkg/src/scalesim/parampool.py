"""Global parameter pool: tracks where each model's parameters live.

Two cache policies:

* ``one-copy`` (default): exactly one host-memory copy per model at all
  times, placed round-robin at init and reloaded on demand when the last
  GPU copy is reclaimed.
* ``keep-alive``: ServerlessLLM-style cache. A host keeps a copy for a
  fixed window after the model was last used there; lookups past the
  window miss and fall back to the local SSD.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .topology import NetworkTopology, gpu_node, mem_node


class PoolError(ValueError):
    pass


@dataclass
class ModelSpec:
    name: str
    num_layers: int
    bytes_per_layer: float
    tp_degree: int = 1
    prefill_slo_ms: float = 450.0
    tbt_slo_ms: float = 150.0
    # token-linear cost model, milliseconds (calibration values, see README)
    prefill_alpha_ms: float = 5.0
    prefill_beta_ms: float = 0.047
    decode_alpha_ms: float = 3.0
    decode_beta_ms: float = 0.35

    def __post_init__(self):
        if self.num_layers < 1 or self.tp_degree < 1:
            raise ValueError("num_layers and tp_degree must be >= 1")
        if self.bytes_per_layer <= 0:
            raise ValueError("bytes_per_layer must be positive")

    @property
    def total_bytes(self) -> float:
        return self.num_layers * self.bytes_per_layer

    @property
    def shard_bytes(self) -> float:
        """Bytes each GPU of an instance holds (tensor-parallel shard)."""
        return self.total_bytes / self.tp_degree

    @property
    def layer_shard_bytes(self) -> float:
        return self.bytes_per_layer / self.tp_degree

    def prefill_ms(self, batch_tokens: int) -> float:
        return self.prefill_alpha_ms + self.prefill_beta_ms * batch_tokens

    def decode_step_ms(self, batch_tokens: int) -> float:
        return self.decode_alpha_ms + self.decode_beta_ms * batch_tokens


#: reference 7B-class model: 14 GB over 32 layers, single GPU
LLAMA2_7B = ModelSpec(name="llama2-7b", num_layers=32, bytes_per_layer=437_500_000.0)

#: reference 70B-class model: 140 GB over 80 layers, 4-GPU instances
LLAMA2_70B = ModelSpec(
    name="llama2-70b",
    num_layers=80,
    bytes_per_layer=1_750_000_000.0,
    tp_degree=4,
    prefill_slo_ms=1250.0,
    tbt_slo_ms=200.0,
    prefill_alpha_ms=20.0,
    prefill_beta_ms=0.30,
    decode_alpha_ms=10.0,
    decode_beta_ms=1.2,
)

MODEL_PRESETS = {m.name: m for m in (LLAMA2_7B, LLAMA2_70B)}


@dataclass(frozen=True)
class SourceRef:
    """A live parameter copy: a GPU instance anchor or a host-memory cache."""
    host_id: int
    gpu_id: Optional[int] = None  # None marks a host-memory copy

    @property
    def is_cache(self) -> bool:
        return self.gpu_id is None

    @property
    def node(self) -> str:
        return mem_node(self.host_id) if self.is_cache else gpu_node(self.gpu_id)


@dataclass
class ReloadRecord:
    """Emitted when a cache copy must be restored before a reclaim."""
    model: str
    host_id: int


class ParameterPool:
    """Model name -> parameter sources, with cache policy bookkeeping."""

    def __init__(self, topo: NetworkTopology, policy: str = "one-copy",
                 cache_capacity_per_host: int = 8, keep_alive_s: float = 300.0):
        if policy not in ("one-copy", "keep-alive"):
            raise PoolError(f"unknown pool policy {policy!r}")
        self.topo = topo
        self.policy = policy
        self.cache_capacity_per_host = cache_capacity_per_host
        self.keep_alive_s = keep_alive_s
        self.models: dict[str, ModelSpec] = {}
        self.gpu_refs: dict[str, list[SourceRef]] = {}
        self.cache_refs: dict[str, list[SourceRef]] = {}
        # keep-alive policy: (model, host) -> last-use timestamp (seconds)
        self.last_use: dict[tuple[str, int], float] = {}

    # ---- init ----------------------------------------------------------

    @classmethod
    def init_pool(cls, models: list[ModelSpec], topo: NetworkTopology,
                  policy: str = "one-copy", cache_capacity_per_host: int = 8,
                  keep_alive_s: float = 300.0) -> "ParameterPool":
        """Distribute one host-memory copy of each model, round-robin."""
        pool = cls(topo, policy, cache_capacity_per_host, keep_alive_s)
        hosts = [h.host_id for h in topo.hosts]
        per_host: dict[int, int] = {h: 0 for h in hosts}
        for i, model in enumerate(models):
            if model.name in pool.models:
                raise PoolError(f"duplicate model {model.name}")
            host = hosts[i % len(hosts)]
            if per_host[host] >= cache_capacity_per_host:
                candidates = [h for h in hosts if per_host[h] < cache_capacity_per_host]
                if not candidates:
                    raise PoolError("aggregate host-cache capacity exceeded")
                host = min(candidates, key=lambda h: (per_host[h], hosts.index(h)))
            pool.models[model.name] = model
            pool.gpu_refs[model.name] = []
            pool.cache_refs[model.name] = [SourceRef(host_id=host)]
            per_host[host] += 1
            if policy == "keep-alive":
                pool.last_use[(model.name, host)] = 0.0
        return pool

    def _require(self, model: str) -> ModelSpec:
        if model not in self.models:
            raise PoolError(f"unknown model {model!r}")
        return self.models[model]

    # ---- queries ---------------------------------------------------------

    def sources_for(self, model: str, now_s: float = 0.0) -> list[SourceRef]:
        """Current sources, GPU instances first, then valid host caches."""
        self._require(model)
        refs = list(self.gpu_refs[model])
        for ref in self.cache_refs[model]:
            if self.policy == "keep-alive" and not self._cache_valid(model, ref.host_id, now_s):
                continue
            refs.append(ref)
        return refs

    def _cache_valid(self, model: str, host_id: int, now_s: float) -> bool:
        last = self.last_use.get((model, host_id))
        return last is not None and now_s - last <= self.keep_alive_s

    def cache_copies(self, model: str, now_s: float = 0.0) -> int:
        return sum(1 for r in self.cache_refs[model]
                   if self.policy != "keep-alive" or self._cache_valid(model, r.host_id, now_s))

    def cache_hit(self, model: str, host_id: int, now_s: float = 0.0) -> bool:
        """Keep-alive lookup; under one-copy, a hit is an exact host match."""
        self._require(model)
        if self.policy == "keep-alive":
            return self._cache_valid(model, host_id, now_s)
        return any(r.host_id == host_id for r in self.cache_refs[model])

    # ---- mutation ----------------------------------------------------------

    def on_deploy(self, model: str, ref: SourceRef, now_s: float = 0.0):
        """Record a completed deployment onto a GPU."""
        self._require(model)
        if ref.is_cache:
            raise PoolError("deploy target must be a GPU ref")
        if ref in self.gpu_refs[model]:
            raise PoolError(f"{model} already deployed at {ref}")
        self.gpu_refs[model].append(ref)
        if self.policy == "keep-alive":
            self.touch(model, ref.host_id, now_s)

    def on_reclaim(self, model: str, ref: SourceRef, now_s: float = 0.0) -> Optional[ReloadRecord]:
        """Remove a GPU copy; reloads a cache copy first if it was the last one."""
        self._require(model)
        if ref not in self.gpu_refs[model]:
            raise PoolError(f"{model} not deployed at {ref}")
        reload = None
        last_copy = len(self.gpu_refs[model]) == 1 and self.cache_copies(model, now_s) == 0
        if last_copy:
            host = self._reload_host()
            if host is None:
                raise PoolError("reclaim would leave zero copies and no cache capacity")
            self.cache_refs[model] = [SourceRef(host_id=host)]
            if self.policy == "keep-alive":
                self.touch(model, host, now_s)
            reload = ReloadRecord(model=model, host_id=host)
        self.gpu_refs[model].remove(ref)
        return reload

    def _reload_host(self) -> Optional[int]:
        """Least-loaded host with spare cache capacity (policy knob)."""
        loads: dict[int, int] = {h.host_id: 0 for h in self.topo.hosts}
        for refs in self.cache_refs.values():
            for r in refs:
                loads[r.host_id] += 1
        candidates = [h for h, n in loads.items() if n < self.cache_capacity_per_host]
        if not candidates:
            return None
        return min(candidates, key=lambda h: (loads[h], h))

    def touch(self, model: str, host_id: int, now_s: float):
        """Keep-alive bookkeeping: the model was just used on this host."""
        if self.policy != "keep-alive":
            return
        self.last_use[(model, host_id)] = now_s
        if not any(r.host_id == host_id for r in self.cache_refs[model]):
            self.cache_refs[model].append(SourceRef(host_id=host_id))

    # ---- introspection ---------------------------------------------------

    def locations(self) -> dict[str, list[tuple]]:
        return {
            m: [(r.host_id, r.gpu_id) for r in self.gpu_refs[m] + self.cache_refs[m]]
            for m in self.models
        }

    def check_invariants(self, now_s: float = 0.0):
        """Every model keeps >= 1 source; one-copy keeps <= 1 cache copy."""
        for m in self.models:
            if not self.sources_for(m, now_s):
                raise AssertionError(f"model {m} has no parameter source")
            if self.policy == "one-copy" and len(self.cache_refs[m]) > 1:
                raise AssertionError(f"model {m} has {len(self.cache_refs[m])} cache copies")

    def __eq__(self, other):
        return (
            isinstance(other, ParameterPool)
            and self.locations() == other.locations()
            and self.policy == other.policy
        )
