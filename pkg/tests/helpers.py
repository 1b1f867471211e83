"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import json

from infinity.fabric import ResourceVector, Topology, load_topology, topology_from_dict

GBPS = 10_000_000_000


def switch(sid, sram=8192, stages=4, alus=8, reconfig=500):
    return {
        "id": sid,
        "sram_bytes": sram,
        "stages": stages,
        "alus_per_stage": alus,
        "reconfig_latency_us": reconfig,
    }


def link(a, b, latency=1, bw=GBPS):
    return {"a": a, "b": b, "latency_us": latency, "bandwidth_bps": bw}


def topo(switches, links, stores=(), base=None) -> Topology:
    doc = {"switches": list(switches), "links": list(links), "remote_stores": list(stores)}
    return topology_from_dict(doc, base_reservation=base)


def line_xmy(latency=1, **kw) -> Topology:
    """X - M - Y line, the classic two-segment example."""
    return topo(
        [switch("M", **kw), switch("X", **kw), switch("Y", **kw)],
        [link("X", "M", latency), link("M", "Y", latency)],
    )


def load(doc: dict, **kw) -> Topology:
    return load_topology(json.dumps(doc), **kw)


def fnv1a_64_reference(data: bytes) -> int:
    """Textbook FNV-1a 64, written independently of the package."""
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


def all_simple_path_costs(nodes, edges):
    """Brute force: min cost and all cost-minimal paths for every ordered pair."""
    adj = {n: [] for n in nodes}
    for a, b, w in edges:
        adj[a].append((b, w))
        adj[b].append((a, w))
    best = {}
    for src in nodes:
        stack = [(src, [src], 0)]
        while stack:
            node, path, cost = stack.pop()
            if node != src:
                key = (src, node)
                if key not in best or cost < best[key][0]:
                    best[key] = (cost, [path])
                elif cost == best[key][0]:
                    best[key][1].append(path)
            for peer, w in adj[node]:
                if peer not in path:
                    stack.append((peer, path + [peer], cost + w))
    return best


def rv(s=0, st=0, a=0) -> ResourceVector:
    return ResourceVector(s, st, a)
