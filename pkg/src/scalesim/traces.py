"""Request trace generation and replay.

Trace files are line-delimited JSON records:
    {"arrival_ms": 12.5, "prompt_tokens": 512, "output_tokens": 64}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: float
    prompt_tokens: int
    output_tokens: int
    model: Optional[str] = None

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise TraceError("token counts must be >= 1")
        if self.arrival_ms < 0:
            raise TraceError("arrival must be >= 0")


def _sample_tokens(rng: np.random.Generator, spec) -> int:
    if isinstance(spec, int):
        return spec
    lo, hi = spec
    return int(rng.integers(lo, hi + 1))


@dataclass
class BurstWindow:
    start_s: float
    duration_s: float
    multiplier: float


def generate_trace(kind: str, params: dict, seed: int) -> list[TraceRecord]:
    """Deterministic trace for a given (kind, params, seed).

    kinds:
      poisson      rate_per_s, duration_s, prompt_tokens, output_tokens
      burst        poisson params plus bursts=[{start_s, duration_s, multiplier}]
      replay-file  path
    """
    if kind == "replay-file":
        return load_trace(params["path"])
    if kind not in ("poisson", "burst"):
        raise TraceError(f"unknown trace kind {kind!r}")

    rate = float(params["rate_per_s"])
    duration = float(params["duration_s"])
    prompt = params.get("prompt_tokens", 512)
    output = params.get("output_tokens", 64)
    if rate <= 0 or duration <= 0:
        raise TraceError("rate and duration must be positive")

    bursts: list[BurstWindow] = []
    if kind == "burst":
        raw = params.get("bursts") or [
            {"start_s": duration / 3.0, "duration_s": 2.0, "multiplier": 5.0}
        ]
        bursts = [BurstWindow(float(b["start_s"]), float(b["duration_s"]),
                              float(b["multiplier"])) for b in raw]

    def rate_at(t: float) -> float:
        r = rate
        for b in bursts:
            if b.start_s <= t < b.start_s + b.duration_s:
                r = rate * b.multiplier
        return r

    rng = np.random.default_rng(seed)
    records: list[TraceRecord] = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate_at(t))
        if t >= duration:
            break
        records.append(TraceRecord(
            arrival_ms=round(t * 1000.0, 3),
            prompt_tokens=_sample_tokens(rng, prompt),
            output_tokens=_sample_tokens(rng, output),
        ))
    return records


def load_trace(path) -> list[TraceRecord]:
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            records.append(TraceRecord(
                arrival_ms=float(obj["arrival_ms"]),
                prompt_tokens=int(obj["prompt_tokens"]),
                output_tokens=int(obj["output_tokens"]),
                model=obj.get("model"),
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TraceError(f"bad trace record at line {i + 1}: {exc}") from exc
    records.sort(key=lambda r: r.arrival_ms)
    return records


def dump_trace(records: Sequence[TraceRecord], path) -> None:
    lines = []
    for r in records:
        obj = {"arrival_ms": r.arrival_ms, "prompt_tokens": r.prompt_tokens,
               "output_tokens": r.output_tokens}
        if r.model:
            obj["model"] = r.model
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
