"""Pipeline DSL (``.iapp``), its parser and the minimal-design compiler.

The DSL is line oriented::

    app l4lb
    slo max_latency_us 500
    partition_key five_tuple
    stage classify action insert_state alus 4
      table conn_table key five_tuple entry_bytes 32 capacity 128 expandable match exact

``#`` starts a comment. Indentation is cosmetic.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from infinity.fabric import DIMENSIONS, ResourceVector

ACTION_KINDS = ("forward", "drop_or_forward", "rewrite", "insert_state")
MATCH_KINDS = ("exact", "ternary")
BASE_KEY_KINDS = ("five_tuple", "dst_ip", "src_ip")
DEFAULT_CAPACITY = 64

_CUSTOM_RE = re.compile(r"^custom\((\d+)\)$")


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class UnmappableStage(Exception):
    def __init__(self, stage: str, dimension: str):
        super().__init__(f"stage {stage!r} fits no switch ({dimension})")
        self.stage = stage
        self.dimension = dimension


def key_width(key_kind: str) -> int:
    """Width in bytes of the key projected from the 13-byte 5-tuple."""
    if key_kind == "five_tuple":
        return 13
    if key_kind in ("dst_ip", "src_ip"):
        return 4
    m = _CUSTOM_RE.match(key_kind)
    if m:
        return int(m.group(1))
    raise ValueError(f"unknown key kind {key_kind!r}")


def valid_key_kind(key_kind: str) -> bool:
    if key_kind in BASE_KEY_KINDS:
        return True
    m = _CUSTOM_RE.match(key_kind)
    return bool(m) and 1 <= int(m.group(1)) <= 13


@dataclass(frozen=True)
class TableDef:
    name: str
    key_kind: str
    entry_bytes: int
    initial_capacity: int = DEFAULT_CAPACITY
    expandable: bool = False
    match_kind: str = "exact"

    def __post_init__(self):
        if self.entry_bytes < 1:
            raise ValueError("entry_bytes must be >= 1")
        if self.initial_capacity < 1:
            raise ValueError("initial_capacity must be >= 1")
        if self.match_kind not in MATCH_KINDS:
            raise ValueError(f"unknown match kind {self.match_kind!r}")
        if not valid_key_kind(self.key_kind):
            raise ValueError(f"unknown key kind {self.key_kind!r}")


@dataclass(frozen=True)
class StageDef:
    name: str
    action_kind: str
    alu_cost: int = 0
    tables: tuple[TableDef, ...] = ()

    @property
    def table(self) -> TableDef | None:
        return self.tables[0] if self.tables else None


@dataclass(frozen=True)
class AppManifest:
    app_name: str
    stages: tuple[StageDef, ...]
    partition_key: str | None = None
    slo_max_latency_us: int | None = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def horizontal_eligible(self) -> bool:
        return not horizontal_blockers(self)

    def stage_index(self, name: str) -> int:
        for i, s in enumerate(self.stages):
            if s.name == name:
                return i
        raise KeyError(name)

    def table_stage(self, table_name: str) -> int:
        for i, s in enumerate(self.stages):
            if any(t.name == table_name for t in s.tables):
                return i
        raise KeyError(table_name)


def horizontal_blockers(manifest: AppManifest) -> list[str]:
    """Reasons the app cannot be horizontally scaled (empty when eligible)."""
    reasons = []
    if manifest.partition_key is None:
        reasons.append("no partition_key")
    for stage in manifest.stages:
        for t in stage.tables:
            if t.match_kind == "ternary":
                reasons.append(f"table {t.name} is ternary")
    return reasons


def _warnings(manifest: AppManifest) -> tuple[str, ...]:
    out = []
    if manifest.partition_key is None:
        for stage in manifest.stages:
            if stage.action_kind == "insert_state" and any(t.expandable for t in stage.tables):
                out.append(
                    f"stage {stage.name} keeps per-flow state but no partition_key is set; "
                    "horizontal scaling disabled"
                )
    return tuple(out)


# -- parser ----------------------------------------------------------------


def _pairs(tokens: list[str], lineno: int, flags: set[str], keys: set[str]) -> dict:
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in flags:
            out[tok] = True
            i += 1
            continue
        if tok not in keys:
            raise ParseError(f"unknown keyword {tok!r}", lineno)
        if i + 1 >= len(tokens):
            raise ParseError(f"{tok!r} needs a value", lineno)
        if tok in out:
            raise ParseError(f"duplicate {tok!r}", lineno)
        out[tok] = tokens[i + 1]
        i += 2
    return out


def _int(value: str, what: str, lineno: int, minimum: int = 0) -> int:
    try:
        n = int(value)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {value!r}", lineno) from None
    if n < minimum:
        raise ParseError(f"{what} must be >= {minimum}", lineno)
    return n


def parse_app(text: str) -> AppManifest:
    app_name = None
    slo = None
    partition_key = None
    stages: list[dict] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head, rest = tokens[0], tokens[1:]
        if head == "app":
            if app_name is not None:
                raise ParseError("duplicate app declaration", lineno)
            if len(rest) != 1:
                raise ParseError("usage: app <name>", lineno)
            app_name = rest[0]
        elif app_name is None:
            raise ParseError("no app declaration", lineno)
        elif head == "slo":
            if len(rest) != 2 or rest[0] != "max_latency_us":
                raise ParseError("usage: slo max_latency_us <n>", lineno)
            slo = _int(rest[1], "max_latency_us", lineno, minimum=1)
        elif head == "partition_key":
            if len(rest) != 1 or not valid_key_kind(rest[0]):
                raise ParseError(f"bad partition_key {' '.join(rest)!r}", lineno)
            partition_key = rest[0]
        elif head == "stage":
            if not rest:
                raise ParseError("stage needs a name", lineno)
            name = rest[0]
            if any(s["name"] == name for s in stages):
                raise ParseError(f"duplicate stage {name!r}", lineno)
            kv = _pairs(rest[1:], lineno, set(), {"action", "alus"})
            if "action" not in kv:
                raise ParseError(f"stage {name!r} missing required field 'action'", lineno)
            if kv["action"] not in ACTION_KINDS:
                raise ParseError(f"unknown action {kv['action']!r}", lineno)
            stages.append(
                {
                    "name": name,
                    "action_kind": kv["action"],
                    "alu_cost": _int(kv.get("alus", "0"), "alus", lineno),
                    "tables": [],
                    "line": lineno,
                }
            )
        elif head == "table":
            if not stages:
                raise ParseError("table outside a stage", lineno)
            if stages[-1]["tables"]:
                raise ParseError("at most one table per stage", lineno)
            if not rest:
                raise ParseError("table needs a name", lineno)
            kv = _pairs(
                rest[1:],
                lineno,
                {"expandable"},
                {"key", "entry_bytes", "capacity", "match"},
            )
            for req in ("key", "entry_bytes"):
                if req not in kv:
                    raise ParseError(f"table {rest[0]!r} missing required field {req!r}", lineno)
            if not valid_key_kind(kv["key"]):
                raise ParseError(f"unknown key kind {kv['key']!r}", lineno)
            match = kv.get("match", "exact")
            if match not in MATCH_KINDS:
                raise ParseError(f"unknown match kind {match!r}", lineno)
            stages[-1]["tables"].append(
                TableDef(
                    name=rest[0],
                    key_kind=kv["key"],
                    entry_bytes=_int(kv["entry_bytes"], "entry_bytes", lineno, minimum=1),
                    initial_capacity=_int(
                        kv.get("capacity", str(DEFAULT_CAPACITY)), "capacity", lineno, minimum=1
                    ),
                    expandable=kv.get("expandable", False),
                    match_kind=match,
                )
            )
        else:
            raise ParseError(f"unknown keyword {head!r}", lineno)
    if app_name is None:
        raise ParseError("no app declaration")
    if not stages:
        raise ParseError(f"app {app_name!r} declares no stages")
    table_names = set()
    for s in stages:
        if s["action_kind"] in ("drop_or_forward", "insert_state") and not s["tables"]:
            raise ParseError(
                f"stage {s['name']!r} with action {s['action_kind']} requires a table", s["line"]
            )
        for t in s["tables"]:
            if t.name in table_names:
                raise ParseError(f"duplicate table {t.name!r}", s["line"])
            table_names.add(t.name)
    manifest = AppManifest(
        app_name=app_name,
        stages=tuple(
            StageDef(s["name"], s["action_kind"], s["alu_cost"], tuple(s["tables"])) for s in stages
        ),
        partition_key=partition_key,
        slo_max_latency_us=slo,
    )
    return AppManifest(
        manifest.app_name,
        manifest.stages,
        manifest.partition_key,
        manifest.slo_max_latency_us,
        _warnings(manifest),
    )


def render(manifest: AppManifest) -> str:
    """Canonical DSL text; ``parse_app(render(m)) == m``."""
    lines = [f"app {manifest.app_name}"]
    if manifest.slo_max_latency_us is not None:
        lines.append(f"slo max_latency_us {manifest.slo_max_latency_us}")
    if manifest.partition_key is not None:
        lines.append(f"partition_key {manifest.partition_key}")
    for stage in manifest.stages:
        lines.append(f"stage {stage.name} action {stage.action_kind} alus {stage.alu_cost}")
        for t in stage.tables:
            parts = [
                f"  table {t.name} key {t.key_kind} entry_bytes {t.entry_bytes}",
                f"capacity {t.initial_capacity}",
            ]
            if t.expandable:
                parts.append("expandable")
            parts.append(f"match {t.match_kind}")
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


# -- resource model --------------------------------------------------------


def table_sram(table: TableDef, capacity: int | None = None) -> int:
    """Entry storage plus one occupancy bit per entry for expandable tables."""
    cap = table.initial_capacity if capacity is None else capacity
    sram = table.entry_bytes * cap
    if table.expandable:
        sram += math.ceil(cap / 8)
    return sram


def footprint(stage: StageDef, capacities: dict[str, int] | None = None) -> ResourceVector:
    capacities = capacities or {}
    sram = sum(table_sram(t, capacities.get(t.name)) for t in stage.tables)
    return ResourceVector(sram_bytes=sram, stages=1, alu_slots_per_stage=stage.alu_cost)


@dataclass(frozen=True)
class MinimalDesign:
    app_name: str
    per_stage_footprint: tuple[ResourceVector, ...]
    total_footprint: ResourceVector
    cut_points: tuple[int, ...]
    manifest: AppManifest


def compile_minimal(manifest: AppManifest, target: list[ResourceVector]) -> MinimalDesign:
    """Check every stage fits some switch in ``target`` and emit the minimal design."""
    if not target:
        raise ValueError("empty target model")
    per_stage = tuple(footprint(s) for s in manifest.stages)
    for stage, fp in zip(manifest.stages, per_stage):
        if any(fp.fits_within(cap) for cap in target):
            continue
        binding = [fp.binding_dimension(cap) for cap in target]
        # name the dimension that no switch can satisfy, if there is one
        dim = next(
            (d for d in DIMENSIONS if all(getattr(fp, d) > getattr(c, d) for c in target)),
            binding[0],
        )
        raise UnmappableStage(stage.name, dim)
    return MinimalDesign(
        app_name=manifest.app_name,
        per_stage_footprint=per_stage,
        total_footprint=ResourceVector.total(per_stage),
        cut_points=tuple(range(1, len(per_stage))),
        manifest=manifest,
    )
