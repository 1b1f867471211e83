"""Flow keys, packets, hashing and the workload model."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Any, Sequence

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def _ip(value: str | int) -> int:
    if isinstance(value, int):
        return value
    return int(ipaddress.IPv4Address(value))


@dataclass(frozen=True, order=True)
class FlowKey:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int

    def __post_init__(self):
        if not 0 <= self.src_ip < 2**32 or not 0 <= self.dst_ip < 2**32:
            raise ValueError("IPv4 address out of range")
        if not 0 <= self.src_port < 2**16 or not 0 <= self.dst_port < 2**16:
            raise ValueError("port out of range")
        if not 0 <= self.proto < 2**8:
            raise ValueError("proto out of range")

    @classmethod
    def of(cls, src_ip, dst_ip, src_port: int, dst_port: int, proto: int) -> FlowKey:
        return cls(_ip(src_ip), _ip(dst_ip), src_port, dst_port, proto)

    @classmethod
    def from_dict(cls, d: dict) -> FlowKey:
        return cls.of(d["src_ip"], d["dst_ip"], d["src_port"], d["dst_port"], d["proto"])

    def encode(self) -> bytes:
        """Canonical 13-byte big-endian encoding."""
        return (
            self.src_ip.to_bytes(4, "big")
            + self.dst_ip.to_bytes(4, "big")
            + self.src_port.to_bytes(2, "big")
            + self.dst_port.to_bytes(2, "big")
            + self.proto.to_bytes(1, "big")
        )

    def to_dict(self) -> dict:
        return {
            "src_ip": str(ipaddress.IPv4Address(self.src_ip)),
            "dst_ip": str(ipaddress.IPv4Address(self.dst_ip)),
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "proto": self.proto,
        }

    def __str__(self) -> str:
        d = self.to_dict()
        return f"{d['src_ip']}:{self.src_port}>{d['dst_ip']}:{self.dst_port}/{self.proto}"


# byte slices of the canonical encoding selected by each key kind
_KEY_SLICES = {"five_tuple": (0, 13), "src_ip": (0, 4), "dst_ip": (4, 8)}


def key_slice(key_kind: str) -> tuple[int, int]:
    if key_kind in _KEY_SLICES:
        return _KEY_SLICES[key_kind]
    if key_kind.startswith("custom(") and key_kind.endswith(")"):
        return (0, int(key_kind[7:-1]))
    raise ValueError(f"unknown key kind {key_kind!r}")


def project(data: bytes, key_kind: str) -> bytes:
    lo, hi = key_slice(key_kind)
    return data[lo:hi]


def lb_select(partition_key_bytes: bytes, replicas: Sequence[Any]) -> Any:
    if not replicas:
        raise ValueError("lb_select needs at least one replica")
    return replicas[fnv1a_64(partition_key_bytes) % len(replicas)]


@dataclass
class Packet:
    seq: int
    flow: FlowKey
    app: str
    size_bytes: int
    ingress_time_us: float
    completion_time_us: float | None = None
    tag: str | None = None
    deferred: bool = False
    deferrals: int = 0
    status: str = "in_flight"  # delivered | dropped
    reason: str | None = None
    verdict_kind: str | None = None
    verdict_value: str | None = None
    serviced_by: list[tuple[str, int]] = field(default_factory=list)
    # position = index of next stage to execute
    pos: int = 0
    at: str | None = None
    assigned: int | None = None
    backend: str | None = None
    stage_us: float = 0.0
    link_us: float = 0.0
    remote_us: float = 0.0
    queue_us: float = 0.0
    hops: int = 0
    paused_at: float | None = None

    @property
    def latency_us(self) -> float | None:
        if self.completion_time_us is None:
            return None
        return self.completion_time_us - self.ingress_time_us

    def record(self) -> dict:
        return {
            "seq": self.seq,
            "app": self.app,
            "flow": str(self.flow),
            "ingress_us": self.ingress_time_us,
            "completion_us": self.completion_time_us,
            "status": self.status,
            "reason": self.reason,
            "verdict": None
            if self.verdict_kind is None
            else {"kind": self.verdict_kind, "value": self.verdict_value},
            "serviced_by": [list(x) for x in self.serviced_by],
            "stage_us": self.stage_us,
            "link_us": self.link_us,
            "remote_us": self.remote_us,
            "queue_us": self.queue_us,
            "deferrals": self.deferrals,
            "hops": self.hops,
        }


@dataclass(frozen=True)
class FlowSpec:
    start_us: float
    duration_us: float
    pps: float
    flow: FlowKey
    app: str | None = None
    size_bytes: int = 64

    def packet_times(self) -> list[float]:
        """Evenly spaced departures; a flow always emits at least one packet."""
        gap = 1e6 / self.pps
        n = max(1, int(self.duration_us * self.pps // 1e6))
        return [self.start_us + i * gap for i in range(n)]


@dataclass(frozen=True)
class RuleSpec:
    """Control-plane table entry installed at ``time_us``.

    ``match`` maps 5-tuple field names to a value; IP fields accept CIDR
    prefixes, absent or null fields are wildcards.
    """

    time_us: float
    table: str
    match: tuple[tuple[str, Any], ...]
    priority: int = 0
    action: Any = "permit"
    app: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> RuleSpec:
        match = d.get("match", {})
        action = d.get("action", "permit")
        if "backends" in d:
            action = {"backends": list(d["backends"])}
        return cls(
            time_us=float(d.get("time_us", 0)),
            table=d["table"],
            match=tuple(sorted((k, v) for k, v in match.items() if v is not None)),
            priority=int(d.get("priority", 0)),
            action=action,
            app=d.get("app"),
        )

    def to_dict(self) -> dict:
        out = {
            "time_us": self.time_us,
            "table": self.table,
            "match": dict(self.match),
            "priority": self.priority,
        }
        if isinstance(self.action, dict):
            out["backends"] = list(self.action["backends"])
        else:
            out["action"] = self.action
        if self.app is not None:
            out["app"] = self.app
        return out

    def value_mask(self) -> tuple[bytes, bytes]:
        """(value, mask) over the canonical 13-byte encoding."""
        value = bytearray(13)
        mask = bytearray(13)
        fields = dict(self.match)
        for name, (lo, width) in (("src_ip", (0, 4)), ("dst_ip", (4, 4))):
            if name not in fields:
                continue
            net = ipaddress.IPv4Network(str(fields[name]), strict=False)
            value[lo : lo + width] = int(net.network_address).to_bytes(4, "big")
            mask[lo : lo + width] = int(net.netmask).to_bytes(4, "big")
        for name, (lo, width) in (("src_port", (8, 2)), ("dst_port", (10, 2)), ("proto", (12, 1))):
            if name not in fields:
                continue
            value[lo : lo + width] = int(fields[name]).to_bytes(width, "big")
            mask[lo : lo + width] = b"\xff" * width
        unknown = set(fields) - {"src_ip", "dst_ip", "src_port", "dst_port", "proto"}
        if unknown:
            raise ValueError(f"unknown match fields {sorted(unknown)}")
        return bytes(value), bytes(mask)


@dataclass
class Workload:
    flows: list[FlowSpec] = field(default_factory=list)
    rules: list[RuleSpec] = field(default_factory=list)
    idle_timeout_us: float | None = None

    def packets(self, default_app: str | None = None) -> list[Packet]:
        """Expand flows into packets ordered by (time, flow index, packet index)."""
        raw = []
        for fi, spec in enumerate(self.flows):
            app = spec.app or default_app
            if app is None:
                raise ValueError("flow has no app and no default app given")
            for pi, t in enumerate(spec.packet_times()):
                raw.append((t, fi, pi, spec, app))
        raw.sort(key=lambda r: (r[0], r[1], r[2]))
        return [
            Packet(seq=i, flow=spec.flow, app=app, size_bytes=spec.size_bytes, ingress_time_us=t)
            for i, (t, _, _, spec, app) in enumerate(raw)
        ]
