"""Monitoring controller: telemetry snapshots, hot-spot detection, scaling policy.

The controller is a deterministic state machine driven by the simulation's
``controller_epoch`` events. It reads snapshots and changes the deployment
only through the primitives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from infinity.appir import horizontal_blockers
from infinity.fabric import CapacityExceeded, ResourceVector, Topology
from infinity.primitives import (
    DEFAULT_GROWTH,
    Deployment,
    PrimitiveError,
    ScalingAction,
    grown_tables,
    horizontal_scale,
    segment_footprint,
    sequential_decompose,
    vertical_scale_disaggregate,
    vertical_scale_migrate,
)

PRIMITIVES = ("horizontal", "sequential", "disaggregate", "migrate")


@dataclass
class Policy:
    occupancy_threshold: float = 0.85
    link_threshold: float = 0.8
    sustain_epochs: int = 3
    cooldown_epochs: int = 10
    epoch_us: int = 1000
    primitive_preference: tuple[str, ...] = PRIMITIVES
    enabled_primitives: frozenset[str] = frozenset(PRIMITIVES)
    growth_factor: float = DEFAULT_GROWTH
    replica_step: int = 1
    app_overrides: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("occupancy_threshold", "link_threshold"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        if not self.primitive_preference:
            raise ValueError("primitive_preference must not be empty")
        unknown = (set(self.primitive_preference) | set(self.enabled_primitives)) - set(PRIMITIVES)
        if unknown:
            raise ValueError(f"unknown primitives {sorted(unknown)}")
        if self.sustain_epochs < 1 or self.cooldown_epochs < 0 or self.epoch_us < 1:
            raise ValueError("sustain_epochs >= 1, cooldown_epochs >= 0, epoch_us >= 1 required")
        self.primitive_preference = tuple(self.primitive_preference)
        self.enabled_primitives = frozenset(self.enabled_primitives)

    @classmethod
    def from_dict(cls, doc: dict) -> Policy:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown policy fields {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> Policy:
        return cls.from_dict(json.loads(text))

    def with_primitives(self, spec: str) -> Policy:
        """Apply a ``--primitives`` value: all, none, or a comma list."""
        if spec == "all":
            enabled = frozenset(PRIMITIVES)
        elif spec == "none":
            enabled = frozenset()
        else:
            enabled = frozenset(p.strip() for p in spec.split(",") if p.strip())
        doc = self.to_dict()
        doc["enabled_primitives"] = enabled
        return Policy.from_dict(doc)

    def preference_for(self, app: str) -> tuple[str, ...]:
        override = self.app_overrides.get(app, {})
        return tuple(override.get("primitive_preference", self.primitive_preference))

    def to_dict(self) -> dict:
        return {
            "occupancy_threshold": self.occupancy_threshold,
            "link_threshold": self.link_threshold,
            "sustain_epochs": self.sustain_epochs,
            "cooldown_epochs": self.cooldown_epochs,
            "epoch_us": self.epoch_us,
            "primitive_preference": list(self.primitive_preference),
            "enabled_primitives": sorted(self.enabled_primitives),
            "growth_factor": self.growth_factor,
            "replica_step": self.replica_step,
            "app_overrides": self.app_overrides,
        }


@dataclass
class UtilizationSnapshot:
    time_us: float
    # "<app>/<table>@<switch>" -> occupancy of that table instance
    table_occupancy: dict[str, float] = field(default_factory=dict)
    switch_usage: dict[str, ResourceVector] = field(default_factory=dict)
    switch_capacity: dict[str, ResourceVector] = field(default_factory=dict)
    # "<from>-><to>" -> offered load over the epoch / bandwidth
    link_load: dict[str, float] = field(default_factory=dict)
    app_latency: dict[str, tuple[float, float]] = field(default_factory=dict)
    drops: dict[str, int] = field(default_factory=dict)
    app_drops: dict[str, dict[str, int]] = field(default_factory=dict)

    def subject_occupancy(self) -> dict[str, float]:
        """Per ``<app>/<table>`` subject: the fullest replica."""
        out: dict[str, float] = {}
        for inst, occ in self.table_occupancy.items():
            subject = inst.split("@", 1)[0]
            out[subject] = max(out.get(subject, 0.0), occ)
        return out

    def to_dict(self) -> dict:
        return {
            "time_us": self.time_us,
            "table_occupancy": self.table_occupancy,
            "switch_usage": {k: v.as_dict() for k, v in self.switch_usage.items()},
            "switch_capacity": {k: v.as_dict() for k, v in self.switch_capacity.items()},
            "link_load": self.link_load,
            "app_latency": {k: list(v) for k, v in self.app_latency.items()},
            "drops": self.drops,
            "app_drops": self.app_drops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> UtilizationSnapshot:
        return cls(
            time_us=d["time_us"],
            table_occupancy=dict(d["table_occupancy"]),
            switch_usage={k: ResourceVector(**v) for k, v in d["switch_usage"].items()},
            switch_capacity={k: ResourceVector(**v) for k, v in d["switch_capacity"].items()},
            link_load=dict(d["link_load"]),
            app_latency={k: tuple(v) for k, v in d["app_latency"].items()},
            drops=dict(d["drops"]),
            app_drops={k: dict(v) for k, v in d["app_drops"].items()},
        )


@dataclass(frozen=True)
class HotSpot:
    kind: str  # table_occupancy | link_load | slo_violation
    subject: str
    value: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "subject": self.subject,
            "value": self.value,
            "threshold": self.threshold,
        }


def _observations(snapshot: UtilizationSnapshot, slos: dict[str, int], policy: Policy):
    """(kind, subject) -> (value, threshold, crossed)."""
    out = {}
    for subject, occ in snapshot.subject_occupancy().items():
        out[("table_occupancy", subject)] = (
            occ,
            policy.occupancy_threshold,
            occ >= policy.occupancy_threshold,
        )
    for link, load in snapshot.link_load.items():
        out[("link_load", f"link:{link}")] = (load, policy.link_threshold, load >= policy.link_threshold)
    for app, (_, p99) in snapshot.app_latency.items():
        slo = slos.get(app)
        if slo is not None:
            out[("slo_violation", f"slo:{app}")] = (p99, float(slo), p99 > slo)
    return out


def detect(
    snapshot: UtilizationSnapshot,
    history: list[UtilizationSnapshot],
    policy: Policy,
    slos: dict[str, int] | None = None,
    suppressed: frozenset[str] | set[str] = frozenset(),
) -> list[HotSpot]:
    """Hot spots whose threshold held for ``sustain_epochs`` consecutive epochs.

    ``history`` holds earlier snapshots, oldest first; ``snapshot`` is the
    current epoch. Subjects in ``suppressed`` (cooling down) are skipped.
    """
    slos = slos or {}
    window = (list(history) + [snapshot])[-policy.sustain_epochs :]
    if len(window) < policy.sustain_epochs:
        return []
    per_epoch = [_observations(s, slos, policy) for s in window]
    current = per_epoch[-1]
    found = []
    for (kind, subject), (value, threshold, crossed) in sorted(current.items(), key=lambda kv: kv[0][1]):
        if not crossed or subject in suppressed:
            continue
        if all(obs.get((kind, subject), (0, 0, False))[2] for obs in per_epoch):
            found.append(HotSpot(kind, subject, value, threshold))
    return found


@dataclass(frozen=True)
class PlannedAction:
    primitive: str
    app: str
    subject: str
    segment: int
    params: tuple[tuple[str, Any], ...]
    hotspot: HotSpot

    def param(self, name):
        return dict(self.params)[name]


@dataclass(frozen=True)
class Unresolvable:
    hotspot: HotSpot
    reason: str


def placement_search(
    footprint: ResourceVector, topology: Topology, exclude=()
) -> str | None:
    """Best fit: least free SRAM left after placement, ties to the lowest id."""
    return topology.best_fit(footprint, exclude)


def _hot_target(hotspot: HotSpot, deployment: Deployment, topology: Topology):
    """(app, segment, table name or None) a hot spot points at."""
    if hotspot.kind == "table_occupancy":
        app, table = hotspot.subject.split("/", 1)
        if app not in deployment.manifests:
            return None
        instances = deployment.table_instances(app, table)
        if not instances:
            return None
        seg, _ = max(instances, key=lambda it: (it[1].occupancy(), -it[0].seg_id))
        return app, seg, table
    if hotspot.kind == "slo_violation":
        app = hotspot.subject.split(":", 1)[1]
        if app not in deployment.manifests:
            return None
        # the segment doing the most work
        segs = sorted(deployment.app_segments(app), key=lambda s: (-(s.hi - s.lo), s.seg_id))
        return (app, segs[0], None) if segs else None
    if hotspot.kind == "link_load":
        a, b = hotspot.subject.split(":", 1)[1].split("->")
        for app in sorted(deployment.manifests):
            for seg in sorted(deployment.app_segments(app), key=lambda s: s.seg_id):
                if seg.host in (a, b):
                    return app, seg, None
    return None


def _plan(primitive, app, seg, hotspot, **params) -> PlannedAction:
    return PlannedAction(primitive, app, hotspot.subject, seg.seg_id, tuple(sorted(params.items())), hotspot)


def select_primitive(
    hotspot: HotSpot, deployment: Deployment, topology: Topology, policy: Policy
) -> PlannedAction | Unresolvable:
    target = _hot_target(hotspot, deployment, topology)
    if target is None:
        return Unresolvable(hotspot, "no deployed segment behind hot spot")
    app, seg, table = target
    manifest = deployment.manifests[app]
    pos = deployment.position_of(seg)
    tried = []
    for primitive in policy.preference_for(app):
        if primitive not in policy.enabled_primitives:
            continue
        tried.append(primitive)
        if primitive == "horizontal":
            if horizontal_blockers(manifest):
                continue
            fp = deployment.footprint(seg)
            hosts = {s.host for s in pos.replicas}
            chosen = []
            for _ in range(policy.replica_step):
                sw = placement_search(fp, topology, hosts | set(chosen))
                if sw is None:
                    break
                chosen.append(sw)
            if len(chosen) == policy.replica_step:
                return _plan(primitive, app, seg, hotspot, replicas=tuple(chosen))
        elif primitive == "sequential":
            if len(pos.replicas) > 1 or seg.hi - seg.lo < 2:
                continue
            latest = seg.hi - 1
            if table is not None:
                # the suffix must carry the hot table
                latest = min(latest, manifest.table_stage(table))
            for cut in range(latest, seg.lo, -1):
                names = {t.name for s in manifest.stages[cut : seg.hi] for t in s.tables}
                fp = segment_footprint(
                    manifest, cut, seg.hi, {n: ts for n, ts in seg.tables.items() if n in names}
                )
                sw = placement_search(fp, topology, {seg.host})
                if sw is not None:
                    return _plan(primitive, app, seg, hotspot, cut=cut, target=sw)
        elif primitive == "disaggregate":
            if hotspot.kind != "table_occupancy":
                continue
            ts = seg.tables[table]
            if ts.remote is not None:
                continue
            stores = sorted(
                (s for s in topology.remote_stores.values() if s.has_room(ts.table.entry_bytes)),
                key=lambda s: (s.rtt_us + 2 * topology.distance(seg.host, s.attached_switch), s.id),
            )
            if stores:
                return _plan(primitive, app, seg, hotspot, table=table, store=stores[0].id)
        elif primitive == "migrate":
            if not any(ts.table.expandable for ts in seg.tables.values()):
                continue
            caps = grown_tables(seg, policy.growth_factor)
            grown = segment_footprint(
                manifest, seg.lo, seg.hi, {n: _Cap(c) for n, c in caps.items()}
            )
            headroom = topology.free_capacity(seg.host) + seg.receipt.demand
            if grown.fits_within(headroom):
                return _plan(primitive, app, seg, hotspot, target=seg.host, growth=policy.growth_factor)
            hosts = {s.host for s in pos.replicas}
            sw = placement_search(grown, topology, hosts)
            if sw is not None:
                return _plan(primitive, app, seg, hotspot, target=sw, growth=policy.growth_factor)
    return Unresolvable(hotspot, f"no eligible primitive among {tried}")


@dataclass(frozen=True)
class _Cap:
    capacity: int


class PlanInfeasible(Exception):
    pass


def apply(
    plan: PlannedAction, deployment: Deployment, topology: Topology, now_us: float = 0.0
) -> ScalingAction:
    """Execute a plan through the primitives; raises PlanInfeasible if it went stale."""
    try:
        seg = deployment.segment(plan.segment)
    except KeyError as exc:
        raise PlanInfeasible(str(exc)) from exc
    try:
        if plan.primitive == "horizontal":
            action = horizontal_scale(deployment, seg, list(plan.param("replicas")), topology, now_us)
        elif plan.primitive == "sequential":
            action = sequential_decompose(
                deployment, seg, plan.param("cut"), plan.param("target"), topology, now_us
            )
        elif plan.primitive == "disaggregate":
            store = topology.remote_stores[plan.param("store")]
            action = vertical_scale_disaggregate(
                deployment, seg, plan.param("table"), store, topology, now_us
            )
        elif plan.primitive == "migrate":
            target = plan.param("target")
            action = vertical_scale_migrate(
                deployment,
                seg,
                None if target == seg.host else target,
                topology,
                plan.param("growth"),
                now_us,
            )
        else:
            raise PlanInfeasible(f"unknown primitive {plan.primitive}")
    except (PrimitiveError, CapacityExceeded) as exc:
        raise PlanInfeasible(str(exc)) from exc
    action.subject = plan.subject
    action.trigger = plan.hotspot.to_dict()
    return action


class Controller:
    """Per-simulation controller state: history, cooldowns, audit log."""

    def __init__(self, policy: Policy, slos: dict[str, int] | None = None):
        self.policy = policy
        self.slos = slos or {}
        self.history: list[UtilizationSnapshot] = []
        self.epoch = 0
        self.cooldown_until: dict[str, int] = {}
        self.audit: list[ScalingAction] = []
        self.unresolved: list[dict] = []
        self.discarded: list[dict] = []

    def suppressed(self) -> set[str]:
        return {s for s, until in self.cooldown_until.items() if self.epoch <= until}

    def on_epoch(
        self,
        snapshot: UtilizationSnapshot,
        deployment: Deployment,
        topology: Topology,
        act: bool = True,
    ) -> list[ScalingAction]:
        self.epoch += 1
        hotspots = detect(snapshot, self.history, self.policy, self.slos, self.suppressed())
        self.history.append(snapshot)
        del self.history[: -max(self.policy.sustain_epochs, 1)]
        applied = []
        if not act:
            return applied
        for hotspot in hotspots:  # already in subject-id order
            plan = select_primitive(hotspot, deployment, topology, self.policy)
            if isinstance(plan, Unresolvable):
                self.unresolved.append(
                    {"time_us": snapshot.time_us, "hotspot": hotspot.to_dict(), "reason": plan.reason}
                )
                # avoid re-logging the same unresolvable subject every epoch
                self.cooldown_until[hotspot.subject] = self.epoch + self.policy.cooldown_epochs
                continue
            try:
                action = apply(plan, deployment, topology, snapshot.time_us)
            except PlanInfeasible as exc:
                self.discarded.append(
                    {"time_us": snapshot.time_us, "subject": hotspot.subject, "reason": str(exc)}
                )
                continue
            self.cooldown_until[hotspot.subject] = self.epoch + self.policy.cooldown_epochs
            self.audit.append(action)
            applied.append(action)
        return applied
