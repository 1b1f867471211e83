import pytest

from helpers import link, switch, topo
from infinity.appir import compile_minimal, parse_app
from infinity.controller import (
    Controller,
    HotSpot,
    Policy,
    Unresolvable,
    UtilizationSnapshot,
    detect,
    select_primitive,
)
from infinity.dataplane.tables import table_insert
from infinity.primitives import deploy_minimal
from infinity.scenarios.runner import data_file

POLICY = Policy(sustain_epochs=3, cooldown_epochs=2)


def snap(t, **occ):
    return UtilizationSnapshot(time_us=t, table_occupancy={k.replace("__", "/") + "@s1": v for k, v in occ.items()})


def test_policy_validation_and_primitive_filter():
    with pytest.raises(ValueError):
        Policy(occupancy_threshold=0)
    with pytest.raises(ValueError):
        Policy.from_dict({"bogus": 1})
    p = Policy().with_primitives("migrate,horizontal")
    assert p.enabled_primitives == {"migrate", "horizontal"}
    assert Policy().with_primitives("none").enabled_primitives == frozenset()
    assert Policy.from_dict(Policy().to_dict()) == Policy()


def test_hot_spot_needs_sustained_crossing():
    history = [snap(1, a__t=0.9), snap(2, a__t=0.5)]
    assert detect(snap(3, a__t=0.95), history, POLICY) == []
    history = [snap(1, a__t=0.9), snap(2, a__t=0.86)]
    found = detect(snap(3, a__t=0.95), history, POLICY)
    assert found == [HotSpot("table_occupancy", "a/t", 0.95, 0.85)]
    assert detect(snap(3, a__t=0.95), history[1:], POLICY) == []


def test_fullest_replica_decides_subject():
    s = UtilizationSnapshot(0, {"a/t@s1": 0.2, "a/t@s2": 0.9})
    assert s.subject_occupancy() == {"a/t": 0.9}


def test_link_and_slo_hot_spots():
    p = Policy(sustain_epochs=1)
    s = UtilizationSnapshot(0, link_load={"x->y": 0.81}, app_latency={"app": (10.0, 600.0)})
    kinds = [(h.kind, h.subject) for h in detect(s, [], p, {"app": 500})]
    assert kinds == [("link_load", "link:x->y"), ("slo_violation", "slo:app")]


def fabric(n, sram=8192, store=True):
    names = [f"s{i}" for i in range(1, n + 1)]
    stores = [{"id": "mem", "attached_switch": "s1", "rtt_us": 10, "capacity_bytes": 1 << 16}] if store else []
    return topo([switch(s, sram=sram) for s in names], [link(a, b) for a, b in zip(names, names[1:])], stores)


def deployed(name, t):
    m = parse_app(data_file(name).read_text())
    return deploy_minimal(compile_minimal(m, t.target_model()), t)


def fill(dep, app, table, n):
    for seg, ts in dep.table_instances(app, table):
        for i in range(n):
            table_insert(ts, i.to_bytes(13, "big"), i, 0.0, origin=i.to_bytes(13, "big"))


def test_l4lb_prefers_horizontal_scaling():
    t = fabric(3)
    dep = deployed("l4lb.iapp", t)
    hot = HotSpot("table_occupancy", "l4lb/conn_table", 0.9, 0.85)
    plan = select_primitive(hot, dep, t, Policy())
    assert plan.primitive == "horizontal"
    assert len(plan.param("replicas")) == 1


def test_acl_falls_through_to_eligible_primitive():
    t = fabric(2)
    dep = deployed("acl.iapp", t)
    hot = HotSpot("table_occupancy", "acl/acl_rules", 1.0, 0.85)
    assert select_primitive(hot, dep, t, Policy()).primitive == "disaggregate"
    plan = select_primitive(hot, dep, t, Policy().with_primitives("horizontal,sequential,migrate"))
    assert plan.primitive == "migrate" and plan.param("target") == dep.segments[0].host


def test_unresolvable_when_everything_disabled():
    t = fabric(2)
    dep = deployed("acl.iapp", t)
    hot = HotSpot("table_occupancy", "acl/acl_rules", 1.0, 0.85)
    out = select_primitive(hot, dep, t, Policy().with_primitives("none"))
    assert isinstance(out, Unresolvable)


def test_sequential_cut_keeps_hot_table_in_suffix():
    t = fabric(2, store=False)
    text = (
        "app chain\nstage a action forward alus 1\n"
        "stage b action insert_state alus 1\n  table hot key five_tuple entry_bytes 8 capacity 16\n"
        "stage c action forward alus 1\nstage d action forward alus 1\n"
    )
    m = parse_app(text)
    dep = deploy_minimal(compile_minimal(m, t.target_model()), t)
    hot = HotSpot("table_occupancy", "chain/hot", 1.0, 0.85)
    plan = select_primitive(hot, dep, t, Policy(primitive_preference=("sequential",)))
    assert plan.primitive == "sequential" and plan.param("cut") == 1


def test_controller_applies_then_cools_down():
    t = fabric(3)
    dep = deployed("l4lb.iapp", t)
    fill(dep, "l4lb", "conn_table", 120)
    ctl = Controller(Policy(sustain_epochs=2, cooldown_epochs=3))
    actions = []
    for epoch in range(1, 9):
        occ = {f"l4lb/conn_table@{s.host}": ts.occupancy() for s, ts in dep.table_instances("l4lb", "conn_table")}
        # keep the subject hot regardless of what the controller does
        occ = {k: 0.95 for k in occ}
        actions += ctl.on_epoch(UtilizationSnapshot(epoch * 1000.0, occ), dep, t)
    times = [a.time_us for a in actions]
    # sustained at epoch 2, suppressed through epoch 2 + 3, eligible again at 6
    assert times == [2000.0, 6000.0]
    assert [a.kind for a in actions] == ["horiz_scale", "horiz_scale"]
    assert all(a.trigger["subject"] == "l4lb/conn_table" for a in actions)


def test_observe_only_controller_never_acts():
    t = fabric(3)
    dep = deployed("l4lb.iapp", t)
    ctl = Controller(Policy(sustain_epochs=1))
    out = ctl.on_epoch(UtilizationSnapshot(1000.0, {"l4lb/conn_table@s1": 1.0}), dep, t, act=False)
    assert out == [] and len(dep.segments) == 1


def test_snapshot_round_trip():
    s = UtilizationSnapshot(5.0, {"a/t@s": 0.5}, link_load={"a->b": 0.1}, app_latency={"a": (1.0, 2.0)})
    assert UtilizationSnapshot.from_dict(s.to_dict()) == s
