"""Bundled applications, workloads, the CLI and the equivalence checker."""

from infinity.scenarios.equivalence import EquivalenceResult, check_equivalence
from infinity.scenarios.metrics import export_metrics
from infinity.scenarios.runner import Scenario, ScenarioError, bundled, run_scenario
from infinity.scenarios.workload import generate_rules, generate_workload, load_workload

__all__ = [
    "EquivalenceResult",
    "Scenario",
    "ScenarioError",
    "bundled",
    "check_equivalence",
    "export_metrics",
    "generate_rules",
    "generate_workload",
    "load_workload",
    "run_scenario",
]
