"""End-to-end scenario runs: parse, compile, deploy minimal, simulate."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from infinity.appir import AppManifest, compile_minimal, parse_app
from infinity.controller import Policy
from infinity.dataplane.packets import Workload
from infinity.dataplane.report import SimReport
from infinity.dataplane.sim import SimConfig, run, run_oracle
from infinity.fabric import Topology, load_topology
from infinity.primitives import Deployment, deploy_minimal
from infinity.scenarios.workload import load_workload

MODES = ("normal", "oracle", "no_scaling")


class ScenarioError(Exception):
    """A scenario stage failed; the message names the stage and the file."""


def data_file(name: str):
    return resources.files("infinity.scenarios") / "data" / name


def _read(source) -> str:
    if hasattr(source, "read_text"):
        return source.read_text()
    return Path(source).read_text()


@dataclass
class Scenario:
    app: object
    topology: object
    workload: object
    policy: object | None
    seed: int
    horizon_us: float
    mode: str = "normal"
    primitives: str | None = None  # all | none | comma list; None keeps the policy's
    trace: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed is None:
            raise ScenarioError("seed is required")

    def replace(self, **changes) -> Scenario:
        return dataclasses.replace(self, **changes)


BUNDLED = {
    "l4lb": dict(
        app="l4lb.iapp", topology="fabric5.json", workload="l4lb_flows.json",
        policy="policy.json", seed=7, horizon_us=130_000,
    ),
    "l4lb_ramp": dict(
        app="l4lb.iapp", topology="fabric8.json", workload="l4lb_ramp.json",
        policy="policy.json", seed=3, horizon_us=400_000,
    ),
    "acl": dict(
        app="acl.iapp", topology="fabric5.json", workload="acl_rules.json",
        policy="acl_policy.json", seed=11, horizon_us=160_000,
    ),
    "nat": dict(
        app="nat.iapp", topology="fabric5.json", workload="nat_flows.json",
        policy="policy.json", seed=5, horizon_us=100_000,
    ),
}


def bundled(name: str, **overrides) -> Scenario:
    try:
        spec = dict(BUNDLED[name])
    except KeyError:
        raise ScenarioError(f"no bundled scenario {name!r}; have {sorted(BUNDLED)}") from None
    for key in ("app", "topology", "workload", "policy"):
        spec[key] = data_file(spec[key])
    spec.update(overrides)
    return Scenario(**spec)


@dataclass
class Prepared:
    manifest: AppManifest
    topology: Topology
    deployment: Deployment
    workload: Workload
    policy: Policy


def _stage(what: str, source, fn):
    try:
        return fn()
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(f"{what} ({source}): {exc}") from exc


def prepare(scenario: Scenario) -> Prepared:
    s = scenario
    manifest = _stage("app", s.app, lambda: parse_app(_read(s.app)))
    topology = _stage("topology", s.topology, lambda: load_topology(_read(s.topology)))
    workload = _stage("workload", s.workload, lambda: load_workload(_read(s.workload), s.seed))
    policy = Policy() if s.policy is None else _stage(
        "policy", s.policy, lambda: Policy.from_json(_read(s.policy))
    )
    if s.primitives is not None:
        policy = _stage("primitives", s.primitives, lambda: policy.with_primitives(s.primitives))
    design = _stage("compile", s.app, lambda: compile_minimal(manifest, topology.target_model()))
    deployment = _stage("deploy", s.topology, lambda: deploy_minimal(design, topology))
    return Prepared(manifest, topology, deployment, workload, policy)


def run_scenario(scenario: Scenario) -> SimReport:
    p = prepare(scenario)
    config = SimConfig(trace=scenario.trace)
    if scenario.mode == "oracle":
        return run_oracle(p.manifest, p.workload, scenario.seed, scenario.horizon_us, config)
    return run(
        p.topology,
        p.deployment,
        p.workload,
        scenario.seed,
        scenario.horizon_us,
        p.policy,
        control=scenario.mode == "normal",
        config=config,
        mode=scenario.mode,
    )
