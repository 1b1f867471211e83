"""Deployments and the scaling primitives that transform them.

An app's pipeline is a chain of *positions*: contiguous stage ranges
``[lo, hi)`` that partition ``[0, n)``. Each position is served by one or
more replica segments on distinct switches. A position with several
replicas is fronted by a load-balancing rule at the end of the previous
position (or at the ingress switch for position 0).

Primitives mutate the deployment and the topology's resource ledger in
place and return the :class:`ScalingAction` describing what happened,
including when the affected app may resume (``ready_at_us``).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from infinity.appir import AppManifest, MinimalDesign, footprint, horizontal_blockers
from infinity.dataplane.packets import lb_select, project
from infinity.dataplane.tables import TableState, install_pending
from infinity.fabric import (
    CapacityExceeded,
    Receipt,
    RemoteStore,
    ResourceVector,
    Topology,
)

PER_ENTRY_COPY_US = 0.1
DEFAULT_GROWTH = 1.25


class PrimitiveError(Exception):
    pass


class DeploymentFailed(PrimitiveError):
    pass


class InvalidCut(PrimitiveError):
    pass


class IneligibleForHorizontalScaling(PrimitiveError):
    pass


class RemoteCapacityExceeded(PrimitiveError):
    pass


class InvalidDeployment(PrimitiveError):
    pass


@dataclass
class Segment:
    seg_id: int
    app_name: str
    lo: int
    hi: int
    host: str
    tables: dict[str, TableState]
    receipt: Receipt

    @property
    def stage_range(self) -> tuple[int, int]:
        return (self.lo, self.hi)


@dataclass(frozen=True)
class LBRule:
    app_name: str
    attached_segment: str  # "ingress" or the predecessor segment ids, e.g. "seg3,seg5"
    partition_key: str
    replicas: tuple[tuple[str, int], ...]  # (switch id, segment id), by switch id


@dataclass
class ScalingAction:
    time_us: float
    kind: str  # seq_decompose | horiz_scale | vert_disaggregate | vert_migrate
    app: str
    subject: str
    details: dict = field(default_factory=dict)
    trigger: dict | None = None

    def to_dict(self) -> dict:
        return {
            "time_us": self.time_us,
            "kind": self.kind,
            "app": self.app,
            "subject": self.subject,
            "details": self.details,
            "trigger": self.trigger,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class Position:
    lo: int
    hi: int
    replicas: list[Segment]  # sorted by host


class Deployment:
    def __init__(self):
        self.manifests: dict[str, AppManifest] = {}
        self.segments: list[Segment] = []
        self.ingress_map: dict[str, str] = {}
        self.version = 0
        self._next_id = 1
        self._chain_cache: dict[str, list[Position]] = {}
        self._chain_version = -1

    # -- bookkeeping ------------------------------------------------------

    def new_segment(self, app, lo, hi, host, tables, receipt) -> Segment:
        seg = Segment(self._next_id, app, lo, hi, host, tables, receipt)
        self._next_id += 1
        self.segments.append(seg)
        self.touch()
        return seg

    def remove_segment(self, seg: Segment) -> None:
        self.segments.remove(seg)
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def segment(self, seg_id: int) -> Segment:
        for seg in self.segments:
            if seg.seg_id == seg_id:
                return seg
        raise KeyError(f"no segment {seg_id}")

    def app_segments(self, app: str) -> list[Segment]:
        return [s for s in self.segments if s.app_name == app]

    def chain(self, app: str) -> list[Position]:
        if self._chain_version != self.version:
            self._chain_cache = {}
            self._chain_version = self.version
        if app not in self._chain_cache:
            groups: dict[tuple[int, int], list[Segment]] = {}
            for seg in self.app_segments(app):
                groups.setdefault(seg.stage_range, []).append(seg)
            self._chain_cache[app] = [
                Position(lo, hi, sorted(segs, key=lambda s: s.host))
                for (lo, hi), segs in sorted(groups.items())
            ]
        return self._chain_cache[app]

    def position_index(self, app: str, stage: int) -> int:
        for i, pos in enumerate(self.chain(app)):
            if pos.lo <= stage < pos.hi:
                return i
        raise KeyError(f"{app}: no position covers stage {stage}")

    def position_of(self, seg: Segment) -> Position:
        return self.chain(seg.app_name)[self.position_index(seg.app_name, seg.lo)]

    def select(self, app: str, stage: int, flow_bytes: bytes) -> Segment:
        """Replica serving ``stage`` for a flow (load-balancing rule applied)."""
        pos = self.chain(app)[self.position_index(app, stage)]
        if len(pos.replicas) == 1:
            return pos.replicas[0]
        key = self.manifests[app].partition_key
        return lb_select(project(flow_bytes, key), pos.replicas)

    def segment_on(self, app: str, stage: int, switch: str) -> Segment | None:
        pos = self.chain(app)[self.position_index(app, stage)]
        for seg in pos.replicas:
            if seg.host == switch:
                return seg
        return None

    @property
    def lb_rules(self) -> list[LBRule]:
        rules = []
        for app in sorted(self.manifests):
            chain = self.chain(app)
            for i, pos in enumerate(chain):
                if len(pos.replicas) < 2:
                    continue
                attached = (
                    "ingress"
                    if i == 0
                    else ",".join(f"seg{s.seg_id}" for s in chain[i - 1].replicas)
                )
                rules.append(
                    LBRule(
                        app,
                        attached,
                        self.manifests[app].partition_key,
                        tuple((s.host, s.seg_id) for s in pos.replicas),
                    )
                )
        return rules

    @property
    def remote_bindings(self) -> list[tuple[int, str, str]]:
        """(segment id, table name, store id) for every bound table."""
        out = []
        for seg in self.segments:
            for name, ts in sorted(seg.tables.items()):
                if ts.remote is not None:
                    out.append((seg.seg_id, name, ts.remote.id))
        return out

    def table_instances(self, app: str, table: str) -> list[tuple[Segment, TableState]]:
        return [
            (seg, seg.tables[table])
            for seg in sorted(self.app_segments(app), key=lambda s: (s.lo, s.host))
            if table in seg.tables
        ]

    def footprint(self, seg: Segment) -> ResourceVector:
        return segment_footprint(self.manifests[seg.app_name], seg.lo, seg.hi, seg.tables)

    def describe(self) -> list[dict]:
        return [
            {
                "segment": s.seg_id,
                "app": s.app_name,
                "stages": [s.lo, s.hi],
                "host": s.host,
                "tables": {n: t.capacity for n, t in sorted(s.tables.items())},
            }
            for s in sorted(self.segments, key=lambda s: (s.app_name, s.lo, s.host))
        ]


def segment_footprint(
    manifest: AppManifest, lo: int, hi: int, tables: dict[str, TableState] | None = None
) -> ResourceVector:
    caps = {name: ts.capacity for name, ts in (tables or {}).items()}
    return ResourceVector.total(footprint(s, caps) for s in manifest.stages[lo:hi])


def _fresh_tables(manifest: AppManifest, lo: int, hi: int) -> dict[str, TableState]:
    return {t.name: TableState.fresh(t) for s in manifest.stages[lo:hi] for t in s.tables}


def validate(deployment: Deployment, topology: Topology) -> None:
    """Re-check every deployment invariant; raises InvalidDeployment."""
    seen_tables: dict[int, str] = {}
    for app, manifest in deployment.manifests.items():
        chain = deployment.chain(app)
        if not chain:
            raise InvalidDeployment(f"{app}: no segments")
        edge = 0
        for pos in chain:
            if pos.lo != edge or pos.hi <= pos.lo:
                raise InvalidDeployment(f"{app}: positions do not partition the pipeline")
            edge = pos.hi
            hosts = [s.host for s in pos.replicas]
            if len(set(hosts)) != len(hosts):
                raise InvalidDeployment(f"{app}: two replicas of [{pos.lo},{pos.hi}) share a switch")
        if edge != len(manifest.stages):
            raise InvalidDeployment(f"{app}: pipeline not fully covered")
        if deployment.ingress_map.get(app) not in topology.switches:
            raise InvalidDeployment(f"{app}: ingress switch missing")
    for seg in deployment.segments:
        if seg.app_name not in deployment.manifests:
            raise InvalidDeployment(f"segment {seg.seg_id} of unknown app")
        if seg.host not in topology.switches:
            raise InvalidDeployment(f"segment {seg.seg_id} on unknown switch")
        if not topology.is_outstanding(seg.receipt) or seg.receipt.switch_id != seg.host:
            raise InvalidDeployment(f"segment {seg.seg_id} receipt not held on its host")
        if not deployment.footprint(seg).fits_within(seg.receipt.demand):
            raise InvalidDeployment(f"segment {seg.seg_id} footprint exceeds its allocation")
        manifest = deployment.manifests[seg.app_name]
        expected = {t.name for s in manifest.stages[seg.lo : seg.hi] for t in s.tables}
        if set(seg.tables) != expected:
            raise InvalidDeployment(f"segment {seg.seg_id} table set mismatch")
        for ts in seg.tables.values():
            owner = seen_tables.setdefault(id(ts), seg.app_name)
            if owner != seg.app_name or ts.used_count() > ts.capacity:
                raise InvalidDeployment(f"segment {seg.seg_id} table state invalid")


def _ready_at(topology: Topology, now_us: float, switches, copied: int) -> float:
    latency = max(topology.switch(s).reconfig_latency_us for s in switches)
    return now_us + latency + copied * PER_ENTRY_COPY_US


def _segment_for(deployment: Deployment, segment) -> Segment:
    return deployment.segment(segment) if isinstance(segment, int) else segment


# -- deploy ----------------------------------------------------------------


def deploy_minimal(
    design: MinimalDesign, topology: Topology, deployment: Deployment | None = None
) -> Deployment:
    """Place a minimal design: whole on the best-fit switch, else greedy contiguous cuts."""
    deployment = deployment or Deployment()
    manifest = design.manifest
    if manifest.app_name in deployment.manifests:
        raise DeploymentFailed(f"app {manifest.app_name!r} already deployed")
    n = len(manifest.stages)
    plan: list[tuple[int, int, str]] = []
    lo = 0
    while lo < n:
        for hi in range(n, lo, -1):
            fp = segment_footprint(manifest, lo, hi)
            # reserve what earlier cuts already claimed on each switch
            claimed = {}
            for plo, phi, host in plan:
                claimed[host] = claimed.get(host, ResourceVector()) + segment_footprint(
                    manifest, plo, phi
                )
            host = _best_fit_with_claims(topology, fp, claimed)
            if host is not None:
                plan.append((lo, hi, host))
                lo = hi
                break
        else:
            raise DeploymentFailed(
                f"{manifest.app_name}: stage {manifest.stages[lo].name!r} fits no switch"
            )
    receipts = []
    try:
        for plo, phi, host in plan:
            receipts.append(topology.allocate(host, segment_footprint(manifest, plo, phi)))
    except CapacityExceeded as exc:  # pragma: no cover - plan already checked
        for r in receipts:
            topology.free(r)
        raise DeploymentFailed(str(exc)) from exc
    deployment.manifests[manifest.app_name] = manifest
    for (plo, phi, host), receipt in zip(plan, receipts):
        deployment.new_segment(
            manifest.app_name, plo, phi, host, _fresh_tables(manifest, plo, phi), receipt
        )
    deployment.ingress_map[manifest.app_name] = plan[0][2]
    return deployment


def _best_fit_with_claims(topology, demand, claimed) -> str | None:
    best = None
    for sid in sorted(topology.switches):
        free = topology.switches[sid].free
        if sid in claimed:
            free = free - claimed[sid] if claimed[sid].fits_within(free) else None
            if free is None:
                continue
        if not demand.fits_within(free):
            continue
        remainder = free.sram_bytes - demand.sram_bytes
        if best is None or remainder < best[0]:
            best = (remainder, sid)
    return None if best is None else best[1]


# -- primitive 1: sequential decomposition -----------------------------------


def sequential_decompose(
    deployment: Deployment,
    segment,
    cut: int,
    target_switch: str,
    topology: Topology,
    now_us: float = 0.0,
) -> ScalingAction:
    seg = _segment_for(deployment, segment)
    if not seg.lo < cut < seg.hi:
        raise InvalidCut(f"cut {cut} outside ({seg.lo}, {seg.hi}) for segment {seg.seg_id}")
    pos = deployment.position_of(seg)
    if len(pos.replicas) > 1:
        raise PrimitiveError("cannot decompose a horizontally scaled segment")
    if target_switch == seg.host:
        raise PrimitiveError("decomposition target must be a different switch")
    manifest = deployment.manifests[seg.app_name]
    suffix_names = {t.name for s in manifest.stages[cut : seg.hi] for t in s.tables}
    suffix_tables = {n: ts for n, ts in seg.tables.items() if n in suffix_names}
    prefix_tables = {n: ts for n, ts in seg.tables.items() if n not in suffix_names}
    suffix_fp = segment_footprint(manifest, cut, seg.hi, suffix_tables)
    prefix_fp = segment_footprint(manifest, seg.lo, cut, prefix_tables)
    suffix_receipt = topology.allocate(target_switch, suffix_fp)
    topology.free(seg.receipt)
    prefix_receipt = topology.allocate(seg.host, prefix_fp)
    moved = {n: ts.copy() for n, ts in suffix_tables.items()}
    copied = sum(len(ts.entries) for ts in moved.values())
    old_hi = seg.hi
    seg.hi = cut
    seg.tables = prefix_tables
    seg.receipt = prefix_receipt
    new = deployment.new_segment(seg.app_name, cut, old_hi, target_switch, moved, suffix_receipt)
    return ScalingAction(
        time_us=now_us,
        kind="seq_decompose",
        app=seg.app_name,
        subject=f"{seg.app_name}@seg{seg.seg_id}",
        details={
            "segment": seg.seg_id,
            "new_segment": new.seg_id,
            "cut": cut,
            "from_switch": seg.host,
            "to_switch": target_switch,
            "copied_entries": copied,
            "ready_at_us": _ready_at(topology, now_us, [seg.host, target_switch], copied),
        },
    )


# -- primitive 2: horizontal scaling ----------------------------------------


def _repartition(deployment: Deployment, pos: Position, key_kind: str) -> int:
    """Re-home learned entries to the replica lb_select picks; returns entries moved."""
    moved = 0
    hosts = pos.replicas  # sorted by host
    table_names = sorted(hosts[0].tables)
    for name in table_names:
        learned = []
        statics = None
        for seg in hosts:
            ts = seg.tables[name]
            if statics is None or len(ts.static_entries()) > len(statics):
                statics = ts.static_entries()
            learned.extend((seg, e) for e in ts.learned())
        for seg in hosts:
            ts = seg.tables[name]
            have = {e.key for e in ts.static_entries()}
            for e in statics or []:
                if e.key not in have:
                    ts.place(dataclasses.replace(e))
                    moved += 1
        for src, entry in learned:
            partition = project(entry.origin if entry.origin is not None else entry.key, key_kind)
            owner = lb_select(partition, hosts)
            if owner is src:
                continue
            src_ts = src.tables[name]
            if entry.used_bit:
                src_ts.mark_unused(entry.key)
            del src_ts.entries[entry.key]
            dst_ts = owner.tables[name]
            if entry.used_bit and dst_ts.used_count() >= dst_ts.capacity:
                continue  # no room on the owner: entry is lost, flow re-learns it
            dst_ts.place(entry)
            moved += 1
    return moved


def horizontal_scale(
    deployment: Deployment,
    segment,
    replica_switches: list[str],
    topology: Topology,
    now_us: float = 0.0,
) -> ScalingAction:
    seg = _segment_for(deployment, segment)
    manifest = deployment.manifests[seg.app_name]
    blockers = horizontal_blockers(manifest)
    if blockers:
        raise IneligibleForHorizontalScaling(f"{manifest.app_name}: {'; '.join(blockers)}")
    pos = deployment.position_of(seg)
    existing = {s.host for s in pos.replicas}
    if not replica_switches:
        raise PrimitiveError("no replica switches given")
    for sw in replica_switches:
        if sw in existing:
            raise PrimitiveError(f"switch {sw} already hosts a replica")
    if len(set(replica_switches)) != len(replica_switches):
        raise PrimitiveError("duplicate replica switches")
    fp = deployment.footprint(seg)
    receipts = []
    try:
        for sw in replica_switches:
            receipts.append(topology.allocate(sw, fp))
    except CapacityExceeded:
        for r in receipts:
            topology.free(r)
        raise
    new_ids = []
    for sw, receipt in zip(replica_switches, receipts):
        tables = {n: TableState.fresh(ts.table, ts.capacity) for n, ts in seg.tables.items()}
        for n, ts in tables.items():
            ts.pending = [dataclasses.replace(e) for e in seg.tables[n].pending]
            ts.pending_reason = seg.tables[n].pending_reason
        new_ids.append(
            deployment.new_segment(seg.app_name, seg.lo, seg.hi, sw, tables, receipt).seg_id
        )
    pos = deployment.position_of(seg)
    copied = _repartition(deployment, pos, manifest.partition_key)
    for replica in pos.replicas:
        for ts in replica.tables.values():
            install_pending(ts)
    replicas = [s.host for s in pos.replicas]
    return ScalingAction(
        time_us=now_us,
        kind="horiz_scale",
        app=seg.app_name,
        subject=f"{seg.app_name}@seg{seg.seg_id}",
        details={
            "segment": seg.seg_id,
            "new_segments": new_ids,
            "replicas": replicas,
            "copied_entries": copied,
            "ready_at_us": _ready_at(topology, now_us, replicas, copied),
        },
    )


# -- primitive 3: vertical scaling --------------------------------------------


def vertical_scale_disaggregate(
    deployment: Deployment,
    segment,
    table: str,
    store: RemoteStore,
    topology: Topology,
    now_us: float = 0.0,
) -> ScalingAction:
    seg = _segment_for(deployment, segment)
    ts = seg.tables.get(table)
    if ts is None:
        raise PrimitiveError(f"segment {seg.seg_id} has no table {table!r}")
    if ts.remote is not None:
        raise PrimitiveError(f"table {table!r} already bound to {ts.remote.id}")
    if not store.has_room(ts.table.entry_bytes):
        raise RemoteCapacityExceeded(f"store {store.id} has no room")
    ts.remote = store
    landed = install_pending(ts)
    deployment.touch()
    return ScalingAction(
        time_us=now_us,
        kind="vert_disaggregate",
        app=seg.app_name,
        subject=f"{seg.app_name}/{table}",
        details={
            "segment": seg.seg_id,
            "table": table,
            "store": store.id,
            "rtt_us": store.rtt_us,
            "pending_installed": landed,
            "ready_at_us": _ready_at(topology, now_us, [seg.host], 0),
        },
    )


def grow(capacity: int, growth_factor) -> int:
    return math.ceil(Fraction(str(growth_factor)) * capacity)


def grown_tables(seg: Segment, growth_factor) -> dict[str, int]:
    return {
        n: grow(ts.capacity, growth_factor) if ts.table.expandable else ts.capacity
        for n, ts in seg.tables.items()
    }


def vertical_scale_migrate(
    deployment: Deployment,
    segment,
    new_switch: str | None,
    topology: Topology,
    growth_factor: float = DEFAULT_GROWTH,
    now_us: float = 0.0,
) -> ScalingAction:
    """Grow expandable tables by ``growth_factor``; re-host unless growing in place.

    ``new_switch=None`` (or the current host) means in place.
    """
    seg = _segment_for(deployment, segment)
    if not Fraction(str(growth_factor)) > 1:
        raise PrimitiveError(f"growth_factor must be > 1, got {growth_factor}")
    if not any(ts.table.expandable for ts in seg.tables.values()):
        raise PrimitiveError(f"segment {seg.seg_id} has no expandable table")
    manifest = deployment.manifests[seg.app_name]
    caps = grown_tables(seg, growth_factor)
    before = {n: ts.capacity for n, ts in seg.tables.items()}
    new_tables = {n: ts.copy(capacity=caps[n]) for n, ts in seg.tables.items()}
    new_fp = segment_footprint(manifest, seg.lo, seg.hi, new_tables)
    target = seg.host if new_switch is None else new_switch
    in_place = target == seg.host
    if in_place:
        old = seg.receipt
        topology.free(old)
        try:
            receipt = topology.allocate(target, new_fp)
        except CapacityExceeded:
            seg.receipt = topology.allocate(target, old.demand)
            raise
    else:
        pos = deployment.position_of(seg)
        if any(s.host == target for s in pos.replicas):
            raise PrimitiveError(f"switch {target} already hosts a replica")
        receipt = topology.allocate(target, new_fp)
        topology.free(seg.receipt)
    old_host = seg.host
    copied = sum(len(ts.entries) for ts in new_tables.values())
    seg.tables = new_tables
    seg.receipt = receipt
    seg.host = target
    deployment.touch()
    landed = sum(install_pending(ts) for ts in seg.tables.values())
    pos = deployment.position_of(seg)
    if len(pos.replicas) > 1 and not in_place:
        copied += _repartition(deployment, pos, manifest.partition_key)
    return ScalingAction(
        time_us=now_us,
        kind="vert_migrate",
        app=seg.app_name,
        subject=f"{seg.app_name}@seg{seg.seg_id}",
        details={
            "segment": seg.seg_id,
            "from_switch": old_host,
            "to_switch": target,
            "in_place": in_place,
            "growth_factor": growth_factor,
            "capacity_before": before,
            "capacity_after": caps,
            "copied_entries": copied,
            "pending_installed": landed,
            "ready_at_us": _ready_at(topology, now_us, sorted({old_host, target}), copied),
        },
    )


def free_deployment(deployment: Deployment, topology: Topology) -> None:
    for seg in list(deployment.segments):
        topology.free(seg.receipt)
        deployment.remove_segment(seg)


def action_lines(actions: list[ScalingAction]) -> str:
    return "".join(a.to_json() + "\n" for a in actions)


def parse_action_lines(text: str) -> list[dict[str, Any]]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
