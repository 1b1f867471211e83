"""Workload files and seeded generators for flows and control-plane rules."""

from __future__ import annotations

import ipaddress
import json
import math
import random

from infinity.dataplane.packets import FlowKey, FlowSpec, RuleSpec, Workload


class WorkloadError(ValueError):
    pass


def _ramp_positions(rng: random.Random, count: int, rate_from: float, rate_to: float) -> list[float]:
    """Sorted points in [0, 1) drawn from a density rising linearly from rate_from to rate_to."""
    uniforms = sorted(rng.random() for _ in range(count))
    a = (rate_to - rate_from) / 2
    b = rate_from
    total = (rate_from + rate_to) / 2
    out = []
    for u in uniforms:
        c = u * total
        if abs(a) < 1e-12:
            x = c / b
        else:
            x = (-b + math.sqrt(b * b + 4 * a * c)) / (2 * a)
        out.append(min(max(x, 0.0), 1.0))
    return out


def _pick_ip(rng: random.Random, net: ipaddress.IPv4Network) -> int:
    return int(net.network_address) + rng.randrange(net.num_addresses)


def generate_workload(spec: dict, seed: int) -> Workload:
    """Seeded flow list.

    Keys: count, window_us (arrival window), start_us, duration_us, pps,
    size_bytes, src_net, dst_net, dst_ports, proto, app, and an optional
    ``ramp: {"from": r0, "to": r1}`` making the arrival rate rise linearly.
    Five-tuples are distinct.
    """
    count = int(spec.get("count", 0))
    if count < 0:
        raise WorkloadError("count must be >= 0")
    rng = random.Random(seed)
    start = float(spec.get("start_us", 0))
    window = float(spec.get("window_us", 1_000_000))
    duration = float(spec.get("duration_us", 1_000_000))
    pps = float(spec.get("pps", 100))
    size = int(spec.get("size_bytes", 64))
    src_net = ipaddress.IPv4Network(spec.get("src_net", "10.0.0.0/8"), strict=False)
    dst_net = ipaddress.IPv4Network(spec.get("dst_net", "192.168.0.0/24"), strict=False)
    dst_ports = list(spec.get("dst_ports", [80, 443]))
    proto = int(spec.get("proto", 6))
    app = spec.get("app")
    if pps <= 0 or duration < 0 or window < 0:
        raise WorkloadError("pps must be > 0; duration_us and window_us >= 0")
    ramp = spec.get("ramp")
    if ramp is not None:
        r0, r1 = float(ramp["from"]), float(ramp["to"])
        if r0 < 0 or r1 < 0 or r0 + r1 <= 0:
            raise WorkloadError("ramp rates must be >= 0 and not both zero")
        positions = _ramp_positions(rng, count, r0, r1)
    else:
        positions = sorted(rng.random() for _ in range(count))
    flows = []
    seen = set()
    for x in positions:
        while True:
            key = FlowKey(
                _pick_ip(rng, src_net),
                _pick_ip(rng, dst_net),
                rng.randrange(1024, 65536),
                rng.choice(dst_ports),
                proto,
            )
            if key not in seen:
                seen.add(key)
                break
        # whole microseconds keep later time arithmetic exact in binary floats
        flows.append(FlowSpec(float(round(start + x * window)), duration, pps, key, app, size))
    return Workload(flows=flows)


def generate_rules(spec: dict, seed: int) -> list[RuleSpec]:
    """Seeded ternary rules over source prefixes with distinct priorities.

    Keys: count, table, start_us, window_us, src_net, prefix_lens,
    permit_fraction, dst_ports (optional exact dst_port match), app.
    """
    count = int(spec.get("count", 0))
    rng = random.Random(seed)
    table = spec["table"]
    start = float(spec.get("start_us", 0))
    window = float(spec.get("window_us", 0))
    src_net = ipaddress.IPv4Network(spec.get("src_net", "10.0.0.0/16"), strict=False)
    prefix_lens = list(spec.get("prefix_lens", [20, 24, 28]))
    permit = float(spec.get("permit_fraction", 0.5))
    dst_ports = spec.get("dst_ports")
    priorities = rng.sample(range(1, 10 * count + 1), count) if count else []
    times = sorted(rng.random() for _ in range(count))
    rules = []
    for i in range(count):
        plen = rng.choice(prefix_lens)
        if plen < src_net.prefixlen:
            raise WorkloadError("prefix length shorter than src_net")
        addr = _pick_ip(rng, src_net)
        net = ipaddress.IPv4Network((addr, plen), strict=False)
        match = {"src_ip": str(net)}
        if dst_ports and rng.random() < 0.5:
            match["dst_port"] = rng.choice(dst_ports)
        rules.append(
            RuleSpec(
                time_us=float(round(start + times[i] * window)),
                table=table,
                match=tuple(sorted(match.items())),
                priority=priorities[i],
                action="permit" if rng.random() < permit else "deny",
                app=spec.get("app"),
            )
        )
    return rules


def workload_from_dict(doc: dict, seed: int) -> Workload:
    """Explicit flows/rules plus optional ``random_flows``/``random_rules`` blocks.

    A generator block's own ``seed`` wins over the scenario seed.
    """
    if isinstance(doc, list):
        doc = {"flows": doc}
    unknown = set(doc) - {"flows", "rules", "random_flows", "random_rules", "idle_timeout_us"}
    if unknown:
        raise WorkloadError(f"unknown workload keys {sorted(unknown)}")
    flows = []
    try:
        for f in doc.get("flows", []):
            flows.append(
                FlowSpec(
                    float(f["start_us"]),
                    float(f["duration_us"]),
                    float(f["pps"]),
                    FlowKey.from_dict(f["flow"]),
                    f.get("app"),
                    int(f.get("size_bytes", 64)),
                )
            )
        rules = [RuleSpec.from_dict(r) for r in doc.get("rules", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise WorkloadError(f"bad flow or rule: {exc!r}") from exc
    blocks = doc.get("random_flows", [])
    for block in [blocks] if isinstance(blocks, dict) else blocks:
        flows.extend(generate_workload(block, int(block.get("seed", seed))).flows)
    blocks = doc.get("random_rules", [])
    for block in [blocks] if isinstance(blocks, dict) else blocks:
        rules.extend(generate_rules(block, int(block.get("seed", seed))))
    rules.sort(key=lambda r: r.time_us)
    timeout = doc.get("idle_timeout_us")
    return Workload(flows, rules, None if timeout is None else float(timeout))


def load_workload(text: str, seed: int) -> Workload:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"line {exc.lineno}: {exc.msg}") from exc
    return workload_from_dict(doc, seed)
