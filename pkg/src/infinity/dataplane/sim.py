"""Deterministic discrete-event simulation of a deployed fabric.

Latency model: each pipeline stage costs ``stage_us``; each overlay hop
costs the link's one-way latency plus any wait for the egress port, which
is busy for ``size * 8 / bandwidth`` after each departure; each deferral to
a remote store costs exactly the store's RTT. Encapsulation and decapsulation are free. A
delivered packet's latency is therefore exactly
``stage_us + link_us + remote_us + queue_us`` as recorded on it.

Events are ordered by (time, kind priority, insertion sequence).
"""

from __future__ import annotations

import heapq
import itertools
from collections import Counter
from dataclasses import dataclass

from infinity.appir import AppManifest, StageDef
from infinity.controller import Controller, Policy, UtilizationSnapshot
from infinity.dataplane.packets import Packet, Workload, fnv1a_64, project
from infinity.dataplane.report import SimReport, percentile
from infinity.dataplane.tables import (
    UNBOUNDED,
    Entry,
    InsertResult,
    TableState,
    blocks_version,
    expire_key,
    insert_entry,
    needs_remote,
    remote_lookup,
    table_insert,
    table_lookup,
)
from infinity.fabric import ResourceVector, SwitchNode, Topology
from infinity.primitives import Deployment, ScalingAction

KIND_PRIORITY = {
    "remote_reply": 0,
    "rule_install": 1,
    "packet_arrival": 2,
    "entry_timeout": 3,
    "reconfig_done": 4,
    "controller_epoch": 5,
}

DEFAULT_BACKENDS = 4
_PARKED = None


@dataclass
class SimConfig:
    stage_us: float = 1.0
    idle_timeout_us: float = 10_000_000.0
    pause_buffer: int = 1024
    trace: bool = False


def assign_value(app: str, stage: str, key: bytes) -> int:
    """Value an insert_state stage stores for a new key; placement independent."""
    return fnv1a_64(f"{app}/{stage}/".encode() + key)


def _fmt(t: float) -> str:
    return f"{t:.3f}"


class Simulator:
    def __init__(
        self,
        topology: Topology,
        deployment: Deployment,
        workload: Workload,
        seed: int,
        horizon_us: float,
        policy: Policy | None = None,
        control: bool = True,
        config: SimConfig | None = None,
        mode: str = "normal",
    ):
        self.topology = topology
        self.deployment = deployment
        self.workload = workload
        self.seed = seed
        self.horizon_us = horizon_us
        self.config = config or SimConfig()
        if workload.idle_timeout_us is not None:
            self.config.idle_timeout_us = workload.idle_timeout_us
        self.mode = mode
        self.policy = policy or Policy()
        slos = {
            a: m.slo_max_latency_us
            for a, m in deployment.manifests.items()
            if m.slo_max_latency_us is not None
        }
        self.controller = Controller(self.policy, slos)
        self.control = control
        apps = sorted(deployment.manifests)
        self.packets = workload.packets(apps[0] if len(apps) == 1 else None)
        for pkt in self.packets:
            if pkt.app not in deployment.manifests:
                raise ValueError(f"workload references undeployed app {pkt.app!r}")
        self._events: list = []
        self._seq = itertools.count()
        self._flow_bytes: dict = {}
        self.port_free: dict[tuple[str, int], float] = {}
        self.paused_until: dict[str, float] = {}
        self.pause_queue: dict[str, list[Packet]] = {}
        self._timers: set = set()
        self.snapshots: list[UtilizationSnapshot] = []
        self.trace: list[str] = []
        self.now = 0.0
        self._reset_epoch()

    # -- event plumbing -----------------------------------------------------

    def _push(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._events, (t, KIND_PRIORITY[kind], next(self._seq), kind, payload))

    def _log(self, t: float, kind: str, **fields) -> None:
        if self.config.trace:
            parts = " ".join(f"{k}={v}" for k, v in fields.items())
            self.trace.append(f"{_fmt(t)} {kind} {parts}".rstrip())

    def _reset_epoch(self) -> None:
        self.epoch_bytes: Counter = Counter()
        self.epoch_latency: dict[str, list[float]] = {}
        self.epoch_drops: Counter = Counter()
        self.epoch_app_drops: dict[str, Counter] = {}

    def flow_bytes(self, pkt: Packet) -> bytes:
        fb = self._flow_bytes.get(pkt.flow)
        if fb is None:
            fb = self._flow_bytes[pkt.flow] = pkt.flow.encode()
        return fb

    # -- main loop ------------------------------------------------------------

    def run(self) -> SimReport:
        for pkt in self.packets:
            if pkt.ingress_time_us < self.horizon_us:
                self._push(pkt.ingress_time_us, "packet_arrival", (pkt, self.deployment.ingress_map[pkt.app]))
        for rule in self.workload.rules:
            if rule.time_us < self.horizon_us:
                self._push(rule.time_us, "rule_install", rule)
        epoch = self.policy.epoch_us
        t = float(epoch)
        while t <= self.horizon_us:
            self._push(t, "controller_epoch", None)
            t += epoch
        while self._events:
            t, _, _, kind, payload = heapq.heappop(self._events)
            self.now = t
            if t > self.horizon_us and kind in ("rule_install", "entry_timeout", "controller_epoch"):
                continue
            getattr(self, f"_on_{kind}")(t, payload)
        admitted = [p for p in self.packets if p.ingress_time_us < self.horizon_us]
        return SimReport(
            seed=self.seed,
            horizon_us=self.horizon_us,
            mode=self.mode,
            packets=[p.record() for p in admitted],
            snapshots=[s.to_dict() for s in self.snapshots],
            audit=[a.to_dict() for a in self.controller.audit],
            unresolved=list(self.controller.unresolved),
            deployment=self.deployment.describe(),
            trace=self.trace,
        )

    # -- handlers -------------------------------------------------------------

    def _on_packet_arrival(self, t: float, payload) -> None:
        pkt, switch = payload
        pkt.at = switch
        self._log(t, "packet_arrival", seq=pkt.seq, sw=switch, tag=pkt.tag or "-")
        self.process_at_switch(pkt, switch, t)

    def _on_remote_reply(self, t: float, payload) -> None:
        pkt, seg_id, table_name, key = payload
        self._log(t, "remote_reply", seq=pkt.seq, sw=pkt.at, table=table_name)
        if self._paused(pkt, t):
            return
        try:
            seg = self.deployment.segment(seg_id)
        except KeyError:
            seg = None
        if seg is None or seg.host != pkt.at or not seg.lo <= pkt.pos < seg.hi or table_name not in seg.tables:
            # layout changed while the lookup was out: redo the stage where it now lives
            self.process_at_switch(pkt, pkt.at, t)
            return
        ts = seg.tables[table_name]
        entry = remote_lookup(ts, key, t, pkt.ingress_time_us)
        t_next = self._execute(pkt, seg, t, fetched=(entry,))
        if t_next is not None:
            self.process_at_switch(pkt, pkt.at, t_next)

    def _on_rule_install(self, t: float, rule) -> None:
        app = rule.app or (sorted(self.deployment.manifests)[0] if len(self.deployment.manifests) == 1 else None)
        if app is None:
            raise ValueError(f"rule for table {rule.table!r} names no app")
        instances = self.deployment.table_instances(app, rule.table)
        if not instances:
            raise ValueError(f"app {app!r} has no table {rule.table!r}")
        for seg, ts in instances:
            entry = Entry(
                key=rule_key(rule, ts),
                action=rule.action,
                last_hit_us=t,
                static=True,
                installed_us=t,
                priority=rule.priority,
            )
            if ts.pending:
                # keep control-plane order: queue behind earlier rejects
                entry.order = ts.next_order()
                ts.pending.append(entry)
                self._log(t, "rule_install", table=rule.table, sw=seg.host, result="queued")
                continue
            result = insert_entry(ts, entry)
            if not result.ok:
                ts.pending.append(entry)
                ts.pending_reason = (
                    "remote_capacity" if result is InsertResult.REMOTE_FULL else "capacity"
                )
            self._log(t, "rule_install", table=rule.table, sw=seg.host, result=result.value)

    def _on_entry_timeout(self, t: float, payload) -> None:
        app, table, key = payload
        self._timers.discard(payload)
        due = None
        for seg, ts in self.deployment.table_instances(app, table):
            nxt = expire_key(ts, key, t, self.config.idle_timeout_us)
            if nxt is not None:
                due = nxt if due is None else min(due, nxt)
        if due is not None:
            self._arm_timer(app, table, key, due)
        else:
            self._log(t, "entry_timeout", app=app, table=table)

    def _on_reconfig_done(self, t: float, app: str) -> None:
        if t < self.paused_until.get(app, 0.0):
            return
        queue = self.pause_queue.pop(app, [])
        self._log(t, "reconfig_done", app=app, released=len(queue))
        for pkt in queue:
            pkt.queue_us += t - pkt.paused_at
            pkt.paused_at = None
            self.process_at_switch(pkt, pkt.at, t)

    def _on_controller_epoch(self, t: float, _payload) -> None:
        snapshot = self.collect(t)
        self.snapshots.append(snapshot)
        actions = self.controller.on_epoch(snapshot, self.deployment, self.topology, act=self.control)
        for action in actions:
            self._begin_reconfig(action)
        self._log(t, "controller_epoch", actions=len(actions))
        self._reset_epoch()

    def _begin_reconfig(self, action: ScalingAction) -> None:
        ready = action.details["ready_at_us"]
        self.paused_until[action.app] = max(self.paused_until.get(action.app, 0.0), ready)
        self._push(ready, "reconfig_done", action.app)
        self._log(action.time_us, "scaling_action", action=action.kind, subject=action.subject, ready=_fmt(ready))

    def apply_action(self, action: ScalingAction) -> None:
        """Register an externally applied primitive (pause + reconfig_done)."""
        self.controller.audit.append(action)
        self._begin_reconfig(action)

    # -- telemetry -------------------------------------------------------------

    def collect(self, t: float) -> UtilizationSnapshot:
        dep = self.deployment
        occupancy = {}
        for seg in sorted(dep.segments, key=lambda s: (s.app_name, s.lo, s.host)):
            for name, ts in sorted(seg.tables.items()):
                occupancy[f"{seg.app_name}/{name}@{seg.host}"] = ts.occupancy()
        seconds = self.policy.epoch_us / 1e6
        load = {}
        for link in self.topology.links:
            for a, b in ((link.endpoint_a, link.endpoint_b), (link.endpoint_b, link.endpoint_a)):
                sent = self.epoch_bytes.get(f"{a}->{b}", 0)
                load[f"{a}->{b}"] = sent * 8 / (link.bandwidth_bps * seconds)
        latency = {
            app: (percentile(self.epoch_latency.get(app, []), 50), percentile(self.epoch_latency.get(app, []), 99))
            for app in sorted(dep.manifests)
        }
        return UtilizationSnapshot(
            time_us=t,
            table_occupancy=occupancy,
            switch_usage={s: self.topology.switches[s].usage for s in sorted(self.topology.switches)},
            switch_capacity={s: self.topology.switches[s].capacity for s in sorted(self.topology.switches)},
            link_load=load,
            app_latency=latency,
            drops=dict(sorted(self.epoch_drops.items())),
            app_drops={a: dict(sorted(c.items())) for a, c in sorted(self.epoch_app_drops.items())},
        )

    # -- packet processing ------------------------------------------------------

    def _paused(self, pkt: Packet, t: float) -> bool:
        if t >= self.paused_until.get(pkt.app, 0.0):
            return False
        queue = self.pause_queue.setdefault(pkt.app, [])
        if len(queue) >= self.config.pause_buffer:
            self._drop(pkt, t, "migration")
        else:
            pkt.paused_at = t
            queue.append(pkt)
            self._log(t, "paused", seq=pkt.seq, sw=pkt.at)
        return True

    def process_at_switch(self, pkt: Packet, switch: str, t: float) -> None:
        """Handle a packet present at ``switch``: transit, decap, execute, encap."""
        pkt.at = switch
        while True:
            if pkt.tag is not None and pkt.tag != switch:
                if pkt.tag not in self.topology.switches:
                    self._drop(pkt, t, "overlay_misroute")
                    return
                self._forward(pkt, switch, t)
                return
            if pkt.tag is not None:
                self._log(t, "decap", seq=pkt.seq, sw=switch)
                pkt.tag = None
            if self._paused(pkt, t):
                return
            seg = self.deployment.select(pkt.app, pkt.pos, self.flow_bytes(pkt))
            if seg.host != switch:
                pkt.tag = seg.host
                self._log(t, "encap", seq=pkt.seq, sw=switch, target=seg.host)
                self._forward(pkt, switch, t)
                return
            t_next = self._execute(pkt, seg, t)
            if t_next is None:
                return
            t = t_next

    def _forward(self, pkt: Packet, switch: str, t: float) -> None:
        port = self.topology.overlay_next_hop(switch, pkt.tag)
        link = self.topology.port_link(switch, port)
        peer = link.other(switch)
        depart = max(t, self.port_free.get((switch, port), 0.0))
        pkt.queue_us += depart - t
        self.port_free[(switch, port)] = depart + pkt.size_bytes * 8 * 1e6 / link.bandwidth_bps
        self.epoch_bytes[f"{switch}->{peer}"] += pkt.size_bytes
        pkt.link_us += link.latency_us
        pkt.hops += 1
        self._log(t, "forward", seq=pkt.seq, sw=switch, port=port, to=peer, target=pkt.tag)
        self._push(depart + link.latency_us, "packet_arrival", (pkt, peer))

    def _execute(self, pkt: Packet, seg, t: float, fetched=None) -> float | None:
        """Run the segment's stages from ``pkt.pos``.

        Returns the exit time if the packet leaves the segment towards a
        successor, or None if it was parked, dropped or finished.
        """
        manifest = self.deployment.manifests[seg.app_name]
        while pkt.pos < seg.hi:
            stage = manifest.stages[pkt.pos]
            t_next = self._run_stage(pkt, seg, stage, t, fetched)
            fetched = None
            if t_next is None:
                return None
            t = t_next
            pkt.pos += 1
        pkt.serviced_by.append((seg.host, self.deployment.position_index(seg.app_name, seg.lo)))
        if pkt.pos == len(manifest.stages):
            self._deliver(pkt, t)
            return None
        return t

    def _run_stage(self, pkt: Packet, seg, stage: StageDef, t: float, fetched) -> float | None:
        stage_us = self.config.stage_us
        table = stage.table
        entry = None
        key = None
        if table is not None:
            ts: TableState = seg.tables[table.name]
            if ts.pending and blocks_version(ts, pkt.ingress_time_us):
                self._drop(pkt, t, ts.pending_reason or "capacity")
                return None
            key = project(self.flow_bytes(pkt), table.key_kind)
            if fetched is not None:
                (entry,) = fetched
            else:
                entry = table_lookup(ts, key, t, pkt.ingress_time_us)
                if needs_remote(ts, entry):
                    self._defer(pkt, seg, ts, key, t)
                    return _PARKED
        kind = stage.action_kind
        if kind == "drop_or_forward":
            if entry is None or entry.action != "permit":
                pkt.stage_us += stage_us
                self._deliver(pkt, t + stage_us, deny=True)
                return None
        elif kind == "insert_state":
            if entry is None:
                value = assign_value(seg.app_name, stage.name, key)
                result = table_insert(ts, key, value, t, origin=self.flow_bytes(pkt))
                if result is InsertResult.REJECTED:
                    self._drop(pkt, t, "capacity")
                    return None
                if result is InsertResult.REMOTE_FULL:
                    self._drop(pkt, t, "remote_capacity")
                    return None
                self._arm_timer(seg.app_name, table.name, key, t + self.config.idle_timeout_us)
                pkt.assigned = value
            else:
                pkt.assigned = entry.action
        elif kind == "rewrite":
            if entry is not None and isinstance(entry.action, dict):
                pool = entry.action["backends"]
            else:
                dst = pkt.flow.to_dict()["dst_ip"]
                pool = [f"{dst}/b{i}" for i in range(DEFAULT_BACKENDS)]
            value = pkt.assigned if pkt.assigned is not None else fnv1a_64(self.flow_bytes(pkt))
            pkt.backend = pool[value % len(pool)]
        pkt.stage_us += stage_us
        self._log(t, "stage", seq=pkt.seq, sw=seg.host, stage=stage.name)
        return t + stage_us

    def _defer(self, pkt: Packet, seg, ts: TableState, key: bytes, t: float) -> None:
        store = ts.remote
        delay = store.rtt_us
        pkt.deferred = True
        pkt.deferrals += 1
        pkt.remote_us += delay
        self._log(t, "defer", seq=pkt.seq, sw=seg.host, store=store.id, delay=_fmt(delay))
        self._push(t + delay, "remote_reply", (pkt, seg.seg_id, ts.table.name, key))

    def _arm_timer(self, app: str, table: str, key: bytes, due: float) -> None:
        timer = (app, table, key)
        if timer in self._timers:
            return
        self._timers.add(timer)
        self._push(due, "entry_timeout", timer)

    def _deliver(self, pkt: Packet, t: float, deny: bool = False) -> None:
        pkt.status = "delivered"
        pkt.completion_time_us = t
        if deny:
            pkt.verdict_kind, pkt.verdict_value = "deny", None
        elif pkt.backend is not None:
            pkt.verdict_kind, pkt.verdict_value = "forward_to", pkt.backend
        elif pkt.assigned is not None:
            pkt.verdict_kind, pkt.verdict_value = "nat_map", f"{pkt.assigned:016x}"
        else:
            pkt.verdict_kind, pkt.verdict_value = "accept", None
        self.epoch_latency.setdefault(pkt.app, []).append(t - pkt.ingress_time_us)
        self._log(t, "deliver", seq=pkt.seq, sw=pkt.at, verdict=pkt.verdict_kind)

    def _drop(self, pkt: Packet, t: float, reason: str) -> None:
        pkt.status = "dropped"
        pkt.reason = reason
        pkt.completion_time_us = t
        self.epoch_drops[reason] += 1
        self.epoch_app_drops.setdefault(pkt.app, Counter())[reason] += 1
        self._log(t, "drop", seq=pkt.seq, sw=pkt.at, reason=reason)


def rule_key(rule, ts: TableState):
    value, mask = rule.value_mask()
    kind = ts.table.key_kind
    v, m = project(value, kind), project(mask, kind)
    if ts.ternary:
        return (int.from_bytes(v, "big"), int.from_bytes(m, "big"))
    if m != b"\xff" * len(m):
        raise ValueError(f"rule for exact table {ts.table.name!r} must match the full key")
    return v


def run(
    topology: Topology,
    deployment: Deployment,
    workload: Workload,
    seed: int,
    horizon_us: float,
    policy: Policy | None = None,
    control: bool = True,
    config: SimConfig | None = None,
    mode: str = "normal",
) -> SimReport:
    return Simulator(
        topology, deployment, workload, seed, horizon_us, policy, control, config, mode
    ).run()


ORACLE_SWITCH = "oracle"


def oracle_setup(manifest: AppManifest) -> tuple[Topology, Deployment]:
    """One fictional switch with unbounded resources hosting the whole pipeline."""
    huge = 1 << 100
    topo = Topology([SwitchNode(ORACLE_SWITCH, ResourceVector(huge, huge, huge), reconfig_latency_us=0)], [], [])
    dep = Deployment()
    dep.manifests[manifest.app_name] = manifest
    tables = {
        t.name: TableState.fresh(t, UNBOUNDED) for s in manifest.stages for t in s.tables
    }
    receipt = topo.allocate(ORACLE_SWITCH, ResourceVector(0, len(manifest.stages), 0))
    dep.new_segment(manifest.app_name, 0, len(manifest.stages), ORACLE_SWITCH, tables, receipt)
    dep.ingress_map[manifest.app_name] = ORACLE_SWITCH
    return topo, dep


def run_oracle(
    manifest: AppManifest,
    workload: Workload,
    seed: int,
    horizon_us: float | None = None,
    config: SimConfig | None = None,
) -> SimReport:
    if horizon_us is None:
        times = [f.start_us + f.duration_us for f in workload.flows] + [r.time_us for r in workload.rules]
        horizon_us = max(times, default=0.0) + 1.0
    topo, dep = oracle_setup(manifest)
    return Simulator(topo, dep, workload, seed, horizon_us, None, False, config, "oracle").run()
