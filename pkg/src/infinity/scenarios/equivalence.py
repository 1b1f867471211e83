"""Verdict equivalence between a deployed run and the unbounded oracle.

Packets dropped for resource reasons (capacity, migration buffer overflow,
remote store full) are excluded: scaling may lose them, but must never
change the decision for a packet it does deliver. ``forward_to`` compares
backend ids directly; ``nat_map`` ids are canonicalized to their order of
first appearance, so only the per-flow mapping structure matters.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from infinity.dataplane.report import SimReport

EXCLUDED_REASONS = frozenset({"capacity", "migration", "remote_capacity"})
MAX_DIFF = 10


@dataclass
class EquivalenceResult:
    passed: bool
    compared: int
    excluded: dict[str, int] = field(default_factory=dict)
    divergences: int = 0
    diff: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "compared": self.compared,
            "excluded": self.excluded,
            "divergences": self.divergences,
            "diff": self.diff,
        }


def _outcome(p: dict) -> tuple:
    if p["status"] != "delivered":
        return (p["status"], p["reason"])
    v = p["verdict"]
    return ("delivered", v["kind"], v["value"])


def _canonical(outcomes: dict[int, tuple]) -> dict[int, tuple]:
    ids: dict = {}
    out = {}
    for seq in sorted(outcomes):
        o = outcomes[seq]
        if o[:2] == ("delivered", "nat_map"):
            o = ("delivered", "nat_map", ids.setdefault(o[2], len(ids)))
        out[seq] = o
    return out


def check_equivalence(report: SimReport, oracle: SimReport) -> EquivalenceResult:
    ours = {p["seq"]: p for p in report.packets}
    ref = {p["seq"]: p for p in oracle.packets}
    excluded = Counter()
    kept = []
    for seq in sorted(set(ours) | set(ref)):
        p = ours.get(seq)
        if p is not None and p["status"] == "dropped" and p["reason"] in EXCLUDED_REASONS:
            excluded[p["reason"]] += 1
            continue
        kept.append(seq)
    mine = _canonical({s: _outcome(ours[s]) for s in kept if s in ours})
    theirs = _canonical({s: _outcome(ref[s]) for s in kept if s in ref})
    diff = []
    divergences = 0
    for seq in kept:
        a, b = mine.get(seq), theirs.get(seq)
        if a == b:
            continue
        divergences += 1
        if len(diff) < MAX_DIFF:
            src = ours.get(seq) or ref.get(seq)
            diff.append(
                {
                    "seq": seq,
                    "flow": src["flow"],
                    "got": None if a is None else list(a),
                    "expected": None if b is None else list(b),
                }
            )
    return EquivalenceResult(
        passed=divergences == 0,
        compared=len(kept),
        excluded=dict(sorted(excluded.items())),
        divergences=divergences,
        diff=diff,
    )
