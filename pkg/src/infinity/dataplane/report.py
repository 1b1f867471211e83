"""Simulation report and its canonical serialization."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field


def percentile(values: list[float], p: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty list."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100 * len(ordered)))
    return ordered[rank - 1]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


@dataclass
class SimReport:
    seed: int
    horizon_us: float
    mode: str
    packets: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    unresolved: list[dict] = field(default_factory=list)
    deployment: list[dict] = field(default_factory=list)
    trace: list[str] = field(default_factory=list, compare=False)
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = summarize(self.packets, self.audit, self.unresolved)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "horizon_us": self.horizon_us,
            "mode": self.mode,
            "packets": self.packets,
            "snapshots": self.snapshots,
            "audit": self.audit,
            "unresolved": self.unresolved,
            "deployment": self.deployment,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> SimReport:
        d = json.loads(text)
        return cls(
            seed=d["seed"],
            horizon_us=d["horizon_us"],
            mode=d["mode"],
            packets=d["packets"],
            snapshots=d["snapshots"],
            audit=d["audit"],
            unresolved=d["unresolved"],
            deployment=d["deployment"],
            summary=d["summary"],
        )

    def drops(self, reason: str | None = None, after_us: float | None = None) -> int:
        return sum(
            1
            for p in self.packets
            if p["status"] == "dropped"
            and (reason is None or p["reason"] == reason)
            and (after_us is None or p["completion_us"] >= after_us)
        )

    def actions(self, kind: str | None = None) -> list[dict]:
        return [a for a in self.audit if kind is None or a["kind"] == kind]


def summarize(packets: list[dict], audit: list[dict], unresolved: list[dict]) -> dict:
    drops = Counter(p["reason"] for p in packets if p["status"] == "dropped")
    verdicts = Counter(p["verdict"]["kind"] for p in packets if p["status"] == "delivered")
    latency: dict[str, list[float]] = {}
    for p in packets:
        if p["status"] == "delivered":
            latency.setdefault(p["app"], []).append(p["completion_us"] - p["ingress_us"])
    return {
        "packets": len(packets),
        "delivered": sum(1 for p in packets if p["status"] == "delivered"),
        "drops_by_reason": dict(sorted(drops.items())),
        "verdicts": dict(sorted(verdicts.items())),
        "latency_us": {
            app: {"p50": percentile(v, 50), "p99": percentile(v, 99)}
            for app, v in sorted(latency.items())
        },
        "scaling_actions": dict(sorted(Counter(a["kind"] for a in audit).items())),
        "unresolved": len(unresolved),
    }
