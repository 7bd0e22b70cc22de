"""Load monitoring and scale decisions, plus baseline load-time models.

Scale-up fires when the trailing-window average load exceeds the profiled
per-instance upper bound; scale-down requires the load to sit below the
lower bound continuously for the (short) timeout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .parampool import ModelSpec, ParameterPool
from .topology import NetworkTopology, transfer_seconds

STRATEGIES = ("blitz-live", "blitz-stop", "sllm", "allcache", "static")


class PolicyError(ValueError):
    pass


@dataclass
class LoadMetrics:
    window_s: float
    tokens_per_s: float
    kvcache_usage: float = 0.0

    def __post_init__(self):
        if self.window_s <= 0:
            raise PolicyError("window must be positive")
        if self.tokens_per_s < 0 or self.kvcache_usage < 0:
            raise PolicyError("loads must be non-negative")


@dataclass
class ScalePolicy:
    upper_bound: float  # tokens/s one instance sustains (profiled)
    lower_bound: float
    scale_down_timeout_s: float = 2.0
    strategy: str = "blitz-live"

    def __post_init__(self):
        if not self.lower_bound < self.upper_bound:
            raise PolicyError("lower_bound must be < upper_bound")
        if self.scale_down_timeout_s <= 0:
            raise PolicyError("timeout must be positive")
        if self.strategy not in STRATEGIES:
            raise PolicyError(f"unknown strategy {self.strategy!r}")


def should_scale_up(metrics: LoadMetrics, policy: ScalePolicy,
                    current_instances: int) -> int:
    """Instances to add so capacity covers the windowed average load."""
    capacity = current_instances * policy.upper_bound
    if metrics.tokens_per_s <= capacity:
        return 0
    return math.ceil((metrics.tokens_per_s - capacity) / policy.upper_bound)


@dataclass
class ScaleDownTracker:
    """Timer over load samples: retire only after a full quiet window."""

    policy: ScalePolicy
    below_since_s: Optional[float] = None

    def observe(self, now_s: float, metrics: LoadMetrics, current_instances: int,
                queued_requests: int = 0) -> int:
        """Instances to retire given this sample; resets on any busy sample."""
        per_instance = metrics.tokens_per_s / max(current_instances, 1)
        if per_instance >= self.policy.lower_bound:
            self.below_since_s = None
            return 0
        if self.below_since_s is None:
            self.below_since_s = now_s
        if now_s - self.below_since_s < self.policy.scale_down_timeout_s:
            return 0
        needed = math.ceil(metrics.tokens_per_s / self.policy.upper_bound)
        if queued_requests > 0 or metrics.tokens_per_s > 0:
            needed = max(needed, 1)
        return max(0, current_instances - needed)


def should_scale_down(history: Sequence[tuple[float, LoadMetrics]],
                      policy: ScalePolicy, current_instances: int,
                      queued_requests: int = 0) -> int:
    """Replay a (time, metrics) history through the timeout tracker."""
    if not history:
        return 0
    span = history[-1][0] - history[0][0]
    if span < policy.scale_down_timeout_s:
        return 0
    tracker = ScaleDownTracker(policy)
    decision = 0
    for now_s, metrics in history:
        decision = tracker.observe(now_s, metrics, current_instances, queued_requests)
    return decision


def baseline_load_time(strategy: str, model: ModelSpec, topo: NetworkTopology,
                       pool: Optional[ParameterPool] = None, host_id=None,
                       now_s: float = 0.0, eta: float = 1.0) -> float:
    """Stop-the-world per-instance load seconds for the cache baselines."""
    if strategy not in ("sllm", "allcache"):
        raise PolicyError(f"no baseline load model for strategy {strategy!r}")
    host = topo.hosts[0] if host_id is None else next(
        h for h in topo.hosts if h.host_id == host_id
    )
    if strategy == "allcache":
        return transfer_seconds(model.shard_bytes, host.host_gpu_gbps, eta)
    hit = pool is not None and host_id is not None and pool.cache_hit(
        model.name, host_id, now_s
    )
    bw = host.host_gpu_gbps if hit else host.ssd_gpu_gbps
    return transfer_seconds(model.shard_bytes, bw, eta)


def profile_instance_capacity(model: ModelSpec, token_budget: int = 2000) -> float:
    """Steady prefill tokens/s one instance sustains at the batch budget.

    Offline profiling pass over the simulator's own cost model: one batch
    of `token_budget` tokens every prefill_ms(token_budget).
    """
    return token_budget / (model.prefill_ms(token_budget) / 1000.0)
