"""Packet-level simulation of deployed pipelines."""

from infinity.dataplane.packets import (
    FlowKey,
    FlowSpec,
    Packet,
    RuleSpec,
    Workload,
    fnv1a_64,
    lb_select,
    project,
)
from infinity.dataplane.report import SimReport, canonical_json, percentile
from infinity.dataplane.tables import (
    InsertResult,
    TableState,
    entry_timeout,
    remote_lookup,
    table_insert,
    table_lookup,
)

__all__ = [
    "FlowKey",
    "FlowSpec",
    "InsertResult",
    "Packet",
    "RuleSpec",
    "SimReport",
    "TableState",
    "Workload",
    "canonical_json",
    "entry_timeout",
    "fnv1a_64",
    "lb_select",
    "percentile",
    "project",
    "remote_lookup",
    "table_insert",
    "table_lookup",
]
