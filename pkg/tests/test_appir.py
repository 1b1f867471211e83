import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import rv
from infinity.appir import (
    AppManifest,
    ParseError,
    StageDef,
    TableDef,
    UnmappableStage,
    compile_minimal,
    footprint,
    parse_app,
    render,
)
from infinity.fabric import ResourceVector
from infinity.scenarios.runner import data_file

L4LB = """\
app l4lb
slo max_latency_us 500
partition_key five_tuple
stage classify action insert_state alus 4
  table conn_table key five_tuple entry_bytes 32 capacity 128 expandable match exact
stage rewrite action rewrite alus 2
  table backend_map key dst_ip entry_bytes 16 capacity 64 match exact
"""


def test_documented_l4lb_parses():
    m = parse_app(L4LB)
    assert m.app_name == "l4lb"
    assert len(m.stages) == 2
    assert m.partition_key == "five_tuple"
    assert m.slo_max_latency_us == 500
    conn = m.stages[0].table
    assert conn.name == "conn_table" and conn.expandable and conn.initial_capacity == 128
    assert m.horizontal_eligible


def test_bundled_l4lb_matches_documented_text():
    assert parse_app(data_file("l4lb.iapp").read_text()) == parse_app(L4LB)


def test_empty_document():
    with pytest.raises(ParseError, match="no app declaration"):
        parse_app("")


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("app a\nstage s action forward\nstage s action forward\n", 3, "duplicate stage"),
        ("app a\nstage s alus 1\n", 2, "action"),
        ("app a\nstage s action forward\n  table t key five_tuple\n", 3, "entry_bytes"),
        ("app a\nfrobnicate\n", 2, "unknown keyword"),
        ("app a\nstage s action teleport\n", 2, "unknown action"),
        ("app a\nstage s action forward colour blue\n", 2, "unknown keyword"),
        ("app a\nstage s action insert_state\n", 2, "requires a table"),
        (
            "app a\nstage s action forward\n  table t key src_ip entry_bytes 4\n"
            "  table u key src_ip entry_bytes 4\n",
            4,
            "one table per stage",
        ),
    ],
)
def test_parse_errors_carry_line(text, line, fragment):
    with pytest.raises(ParseError, match=fragment) as exc:
        parse_app(text)
    assert exc.value.line == line


def test_state_without_partition_key_warns_and_is_ineligible():
    m = parse_app(
        "app n\nstage t action insert_state\n  table m key five_tuple entry_bytes 8 expandable\n"
    )
    assert m.warnings and not m.horizontal_eligible
    assert m.stages[0].table.initial_capacity == 64


def test_ternary_tables_block_horizontal_scaling():
    m = parse_app(data_file("acl.iapp").read_text())
    assert not m.horizontal_eligible


def test_footprint_examples():
    t = TableDef("t", "five_tuple", 32, 128, expandable=True)
    assert footprint(StageDef("s", "insert_state", 4, (t,))) == rv(4112, 1, 4)
    assert footprint(StageDef("s", "forward", 2)) == rv(0, 1, 2)
    big = TableDef("b", "dst_ip", 16, 1000)
    assert footprint(StageDef("s", "rewrite", 3, (big,))) == rv(16000, 1, 3)


def test_compile_minimal_examples():
    m = parse_app(L4LB)
    d = compile_minimal(m, [rv(10**6, 8, 8)])
    assert d.cut_points == (1,)
    assert len(d.per_stage_footprint) == 2
    assert d.total_footprint == d.per_stage_footprint[0] + d.per_stage_footprint[1]
    four = parse_app("app q\n" + "".join(f"stage s{i} action forward\n" for i in range(4)))
    assert compile_minimal(four, [rv(1, 8, 8)]).cut_points == (1, 2, 3)


def test_unmappable_stage_names_stage_and_dimension():
    m = parse_app(L4LB)
    with pytest.raises(UnmappableStage) as exc:
        compile_minimal(m, [rv(4000, 8, 8), rv(4000, 8, 8)])
    assert exc.value.stage == "classify" and exc.value.dimension == "sram_bytes"


names = st.from_regex(r"[a-z][a-z0-9_]{0,7}", fullmatch=True)
key_kinds = st.sampled_from(["five_tuple", "dst_ip", "src_ip", "custom(2)", "custom(13)"])


@st.composite
def manifests(draw):
    n = draw(st.integers(1, 5))
    stage_names = draw(st.lists(names, min_size=n, max_size=n, unique=True))
    table_names = draw(st.lists(names, min_size=n, max_size=n, unique=True))
    stages = []
    for sname, tname in zip(stage_names, table_names):
        kind = draw(st.sampled_from(["forward", "drop_or_forward", "rewrite", "insert_state"]))
        has_table = kind in ("drop_or_forward", "insert_state") or draw(st.booleans())
        tables = ()
        if has_table:
            tables = (
                TableDef(
                    tname,
                    draw(key_kinds),
                    draw(st.integers(1, 64)),
                    draw(st.integers(1, 4096)),
                    draw(st.booleans()),
                    draw(st.sampled_from(["exact", "ternary"])),
                ),
            )
        stages.append(StageDef(sname, kind, draw(st.integers(0, 16)), tables))
    return AppManifest(
        draw(names),
        tuple(stages),
        draw(st.one_of(st.none(), key_kinds)),
        draw(st.one_of(st.none(), st.integers(1, 10**6))),
    )


@given(manifests())
def test_render_parse_round_trip(m):
    assert parse_app(render(m)) == m


@given(manifests())
def test_footprint_is_additive(m):
    total = ResourceVector.total(footprint(s) for s in m.stages)
    assert total.stages == len(m.stages)
    assert total.alu_slots_per_stage == sum(s.alu_cost for s in m.stages)
    d = compile_minimal(m, [rv(10**9, 64, 64)])
    assert d.total_footprint == total


@given(manifests(), st.lists(st.tuples(st.integers(0, 300_000), st.integers(1, 6), st.integers(0, 16)), min_size=1, max_size=4))
def test_compile_never_emits_unplaceable_stage(m, caps):
    target = [rv(*c) for c in caps]
    try:
        d = compile_minimal(m, target)
    except UnmappableStage as exc:
        stage = m.stages[m.stage_index(exc.stage)]
        assert not any(footprint(stage).fits_within(c) for c in target)
        return
    for fp in d.per_stage_footprint:
        assert any(fp.fits_within(c) for c in target)
