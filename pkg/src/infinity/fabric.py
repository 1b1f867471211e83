"""Physical substrate: switches, links, remote stores and the overlay.

A :class:`Topology` owns every mutable resource counter in the fabric.
Usage on a switch only moves through :meth:`Topology.allocate` and
:meth:`Topology.free`, so the outstanding receipts are always an exact
ledger of what is in use.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable

DIMENSIONS = ("sram_bytes", "stages", "alu_slots_per_stage")


class FabricError(Exception):
    pass


class TopologyError(FabricError):
    """Malformed or invalid topology document."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(field)
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line


class CapacityExceeded(FabricError):
    def __init__(self, switch_id: str, dimension: str, needed: int = 0, available: int = 0):
        super().__init__(
            f"switch {switch_id}: {dimension} exceeded (need {needed}, free {available})"
        )
        self.switch_id = switch_id
        self.dimension = dimension


class ReceiptError(FabricError):
    pass


class RoutingError(FabricError):
    pass


@dataclass(frozen=True)
class ResourceVector:
    sram_bytes: int = 0
    stages: int = 0
    alu_slots_per_stage: int = 0

    def __post_init__(self):
        for name in DIMENSIONS:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise TypeError(f"{name} must be an int, got {value!r}")
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def __sub__(self, other: ResourceVector) -> ResourceVector:
        # raises ValueError if any component would go negative
        return ResourceVector(*(a - b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.sram_bytes, self.stages, self.alu_slots_per_stage)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(DIMENSIONS, self.as_tuple()))

    def fits_within(self, other: ResourceVector) -> bool:
        return all(a <= b for a, b in zip(self.as_tuple(), other.as_tuple()))

    def binding_dimension(self, available: ResourceVector) -> str | None:
        """First dimension (in DIMENSIONS order) where self exceeds available."""
        for name, need, have in zip(DIMENSIONS, self.as_tuple(), available.as_tuple()):
            if need > have:
                return name
        return None

    @classmethod
    def total(cls, vectors: Iterable[ResourceVector]) -> ResourceVector:
        out = cls()
        for v in vectors:
            out = out + v
        return out


ZERO = ResourceVector()

# Cost of the light-weight overlay forwarding logic every switch carries:
# one stage plus a 64-entry x 8 B tag table.
DEFAULT_OVERLAY_RESERVATION = ResourceVector(sram_bytes=64 * 8, stages=1, alu_slots_per_stage=0)


@dataclass(frozen=True)
class Receipt:
    receipt_id: int
    switch_id: str
    demand: ResourceVector


@dataclass(frozen=True)
class Link:
    endpoint_a: str
    endpoint_b: str
    latency_us: int
    bandwidth_bps: int

    @property
    def link_id(self) -> str:
        return f"{self.endpoint_a}-{self.endpoint_b}"

    def other(self, node: str) -> str:
        if node == self.endpoint_a:
            return self.endpoint_b
        if node == self.endpoint_b:
            return self.endpoint_a
        raise KeyError(node)


@dataclass
class RemoteStore:
    id: str
    attached_switch: str
    rtt_us: int
    capacity_bytes: int
    used_bytes: int = 0

    def has_room(self, nbytes: int) -> bool:
        return self.used_bytes + nbytes <= self.capacity_bytes


@dataclass
class SwitchNode:
    id: str
    capacity: ResourceVector
    usage: ResourceVector = ZERO
    ports: list[int] = field(default_factory=list)
    overlay_table: dict[str, int] = field(default_factory=dict)
    reconfig_latency_us: int = 500
    port_peers: dict[int, str] = field(default_factory=dict)
    port_links: dict[int, Link] = field(default_factory=dict)

    @property
    def free(self) -> ResourceVector:
        return self.capacity - self.usage


class Topology:
    """Switches, links and remote stores plus the resource ledger."""

    def __init__(
        self,
        switches: list[SwitchNode],
        links: list[Link],
        remote_stores: list[RemoteStore],
    ):
        self.switches = {s.id: s for s in switches}
        self.links = list(links)
        self.remote_stores = {r.id: r for r in remote_stores}
        self._receipts: dict[int, Receipt] = {}
        self._receipt_ids = itertools.count(1)
        self.base_receipts: dict[str, Receipt] = {}
        self._dist: dict[str, dict[str, int]] = {}
        self._validate()
        self._wire_ports()
        self._compute_overlay()

    # -- construction -----------------------------------------------------

    def _validate(self):
        if len(self.switches) == 0:
            raise TopologyError("topology has no switches", field="switches")
        seen = set()
        for link in self.links:
            for end in (link.endpoint_a, link.endpoint_b):
                if end not in self.switches:
                    raise TopologyError(f"unknown link endpoint {end!r}", field="links")
            if link.endpoint_a == link.endpoint_b:
                raise TopologyError(f"self-loop on {link.endpoint_a}", field="links")
            pair = frozenset((link.endpoint_a, link.endpoint_b))
            if pair in seen:
                raise TopologyError(f"duplicate link {link.link_id}", field="links")
            seen.add(pair)
            if link.latency_us < 1:
                raise TopologyError("latency_us must be >= 1", field="links")
            if link.bandwidth_bps < 1:
                raise TopologyError("bandwidth_bps must be >= 1", field="links")
        for store in self.remote_stores.values():
            if store.attached_switch not in self.switches:
                raise TopologyError(
                    f"remote store {store.id} attached to unknown switch", field="remote_stores"
                )
        # connectivity
        adj = self._adjacency()
        start = min(self.switches)
        reached = {start}
        stack = [start]
        while stack:
            node = stack.pop()
            for peer, _ in adj[node]:
                if peer not in reached:
                    reached.add(peer)
                    stack.append(peer)
        if len(reached) != len(self.switches):
            missing = sorted(set(self.switches) - reached)
            raise TopologyError(f"disconnected topology, unreachable: {missing}")

    def _adjacency(self) -> dict[str, list[tuple[str, int]]]:
        adj: dict[str, list[tuple[str, int]]] = {s: [] for s in self.switches}
        for link in self.links:
            adj[link.endpoint_a].append((link.endpoint_b, link.latency_us))
            adj[link.endpoint_b].append((link.endpoint_a, link.latency_us))
        return adj

    def _wire_ports(self):
        for link in self.links:
            for end in (link.endpoint_a, link.endpoint_b):
                node = self.switches[end]
                port = len(node.ports) + 1
                node.ports.append(port)
                node.port_peers[port] = link.other(end)
                node.port_links[port] = link

    def _compute_overlay(self):
        adj = self._adjacency()
        # distance *to* every target (graph is undirected)
        for target in self.switches:
            dist = {target: 0}
            heap = [(0, target)]
            while heap:
                d, node = heapq.heappop(heap)
                if d > dist[node]:
                    continue
                for peer, w in adj[node]:
                    nd = d + w
                    if nd < dist.get(peer, nd + 1):
                        dist[peer] = nd
                        heapq.heappush(heap, (nd, peer))
            self._dist[target] = dist
        for node in self.switches.values():
            port_of = {peer: port for port, peer in node.port_peers.items()}
            table = {}
            for target in self.switches:
                if target == node.id:
                    continue
                best = self._dist[target][node.id]
                # tie-break on lowest next-hop switch id
                hops = sorted(
                    peer
                    for peer, w in adj[node.id]
                    if w + self._dist[target][peer] == best
                )
                table[target] = port_of[hops[0]]
            node.overlay_table = table

    # -- queries ----------------------------------------------------------

    def switch(self, switch_id: str) -> SwitchNode:
        try:
            return self.switches[switch_id]
        except KeyError:
            raise FabricError(f"unknown switch {switch_id!r}") from None

    def distance(self, a: str, b: str) -> int:
        """Latency-weighted shortest-path cost between two switches."""
        return self._dist[b][a]

    def overlay_next_hop(self, switch_id: str, target_switch_id: str) -> int:
        node = self.switch(switch_id)
        if target_switch_id == switch_id:
            raise RoutingError(f"{switch_id} targets itself; decapsulate instead of forwarding")
        try:
            return node.overlay_table[target_switch_id]
        except KeyError:
            raise RoutingError(f"unknown overlay target {target_switch_id!r}") from None

    def peer(self, switch_id: str, port: int) -> str:
        return self.switch(switch_id).port_peers[port]

    def port_link(self, switch_id: str, port: int) -> Link:
        return self.switch(switch_id).port_links[port]

    def overlay_path(self, a: str, b: str) -> list[str]:
        """Switches visited following overlay tables from a to b (inclusive)."""
        path = [a]
        node = a
        while node != b:
            node = self.peer(node, self.overlay_next_hop(node, b))
            path.append(node)
            if len(path) > len(self.switches):
                raise RoutingError(f"overlay loop between {a} and {b}")
        return path

    def free_capacity(self, switch_id: str) -> ResourceVector:
        return self.switch(switch_id).free

    def best_fit(self, demand: ResourceVector, exclude: Iterable[str] = ()) -> str | None:
        """Switch leaving the least free SRAM after placing demand; ties to lowest id."""
        excluded = set(exclude)
        best = None
        for sid in sorted(self.switches):
            if sid in excluded:
                continue
            free = self.switches[sid].free
            if not demand.fits_within(free):
                continue
            remainder = free.sram_bytes - demand.sram_bytes
            if best is None or remainder < best[0]:
                best = (remainder, sid)
        return None if best is None else best[1]

    def target_model(self) -> list[ResourceVector]:
        """Capacities available to applications (after the base reservation)."""
        return [self.switches[s].capacity - self._base(s) for s in sorted(self.switches)]

    def _base(self, switch_id: str) -> ResourceVector:
        receipt = self.base_receipts.get(switch_id)
        return receipt.demand if receipt else ZERO

    # -- resource ledger --------------------------------------------------

    def allocate(self, switch_id: str, demand: ResourceVector) -> Receipt:
        node = self.switch(switch_id)
        free = node.free
        dim = demand.binding_dimension(free)
        if dim is not None:
            raise CapacityExceeded(
                switch_id, dim, getattr(demand, dim), getattr(free, dim)
            )
        node.usage = node.usage + demand
        receipt = Receipt(next(self._receipt_ids), switch_id, demand)
        self._receipts[receipt.receipt_id] = receipt
        return receipt

    def free(self, receipt: Receipt) -> None:
        held = self._receipts.pop(receipt.receipt_id, None)
        if held is None or held != receipt:
            raise ReceiptError(f"receipt {receipt.receipt_id} is not outstanding")
        node = self.switch(receipt.switch_id)
        node.usage = node.usage - receipt.demand

    def outstanding(self, switch_id: str | None = None) -> list[Receipt]:
        return [
            r
            for _, r in sorted(self._receipts.items())
            if switch_id is None or r.switch_id == switch_id
        ]

    def is_outstanding(self, receipt: Receipt) -> bool:
        return self._receipts.get(receipt.receipt_id) == receipt

    def reserve_overlay(self, reservation: ResourceVector) -> None:
        for sid in sorted(self.switches):
            self.base_receipts[sid] = self.allocate(sid, reservation)


def _require(obj: dict, key: str, where: str, kind=int, positive=False, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise TopologyError(f"missing required field {key!r}", field=f"{where}.{key}")
    value = obj[key]
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise TopologyError(f"expected integer, got {value!r}", field=f"{where}.{key}")
        if value < (1 if positive else 0):
            raise TopologyError(
                f"must be {'positive' if positive else 'non-negative'}, got {value}",
                field=f"{where}.{key}",
            )
    elif kind is str:
        if not isinstance(value, str) or not value:
            raise TopologyError(f"expected non-empty string, got {value!r}", field=f"{where}.{key}")
    return value


def topology_from_dict(
    doc: dict, base_reservation: ResourceVector | None = DEFAULT_OVERLAY_RESERVATION
) -> Topology:
    if not isinstance(doc, dict):
        raise TopologyError("topology document must be a JSON object")
    unknown = set(doc) - {"switches", "links", "remote_stores"}
    if unknown:
        raise TopologyError(f"unknown top-level keys {sorted(unknown)}")
    switches = []
    ids = set()
    for i, s in enumerate(doc.get("switches", [])):
        where = f"switches[{i}]"
        sid = _require(s, "id", where, kind=str)
        if sid in ids:
            raise TopologyError(f"duplicate switch id {sid!r}", field=f"{where}.id")
        ids.add(sid)
        cap = ResourceVector(
            _require(s, "sram_bytes", where),
            _require(s, "stages", where),
            _require(s, "alus_per_stage", where),
        )
        switches.append(
            SwitchNode(
                id=sid,
                capacity=cap,
                reconfig_latency_us=_require(s, "reconfig_latency_us", where, default=500),
            )
        )
    links = []
    for i, l in enumerate(doc.get("links", [])):
        where = f"links[{i}]"
        links.append(
            Link(
                _require(l, "a", where, kind=str),
                _require(l, "b", where, kind=str),
                _require(l, "latency_us", where, positive=True),
                _require(l, "bandwidth_bps", where, positive=True),
            )
        )
    stores = []
    for i, r in enumerate(doc.get("remote_stores", [])):
        where = f"remote_stores[{i}]"
        rid = _require(r, "id", where, kind=str)
        if rid in ids:
            raise TopologyError(f"duplicate id {rid!r}", field=f"{where}.id")
        ids.add(rid)
        stores.append(
            RemoteStore(
                rid,
                _require(r, "attached_switch", where, kind=str),
                _require(r, "rtt_us", where, positive=True),
                _require(r, "capacity_bytes", where, positive=True),
            )
        )
    topo = Topology(switches, links, stores)
    if base_reservation is not None and base_reservation != ZERO:
        try:
            topo.reserve_overlay(base_reservation)
        except CapacityExceeded as exc:
            raise TopologyError(f"switch too small for overlay reservation: {exc}") from exc
    return topo


def load_topology(
    text: str, base_reservation: ResourceVector | None = DEFAULT_OVERLAY_RESERVATION
) -> Topology:
    """Parse a JSON topology document and compute the overlay tables."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(exc.msg, line=exc.lineno) from exc
    return topology_from_dict(doc, base_reservation)
