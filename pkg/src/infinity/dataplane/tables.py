"""Match-action table state.

Every entry carries a used bit. Occupancy is the number of used local
entries over the local capacity, which is what the controller watches.
Control-plane entries (``static``) never time out; entries learned by the
data plane go unused after ``idle_timeout_us`` without a hit.

Static entries are stamped with their install time and only match packets
that entered the fabric at or after it, so a packet sees one configuration
version however long it spends in flight.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from infinity.appir import TableDef
from infinity.fabric import RemoteStore

UNBOUNDED = 1 << 62


class InsertResult(Enum):
    INSERTED = "inserted"
    SPILLED = "spilled"
    REJECTED = "rejected"
    REMOTE_FULL = "remote_full"

    @property
    def ok(self) -> bool:
        return self in (InsertResult.INSERTED, InsertResult.SPILLED)


@dataclass
class Entry:
    key: Any  # bytes for exact tables, (value, mask) ints for ternary
    action: Any
    used_bit: bool = True
    last_hit_us: float = 0.0
    static: bool = False
    installed_us: float = 0.0
    priority: int = 0
    order: int = 0
    origin: bytes | None = None
    previous: Entry | None = None  # control-plane entry this one replaced

    def visible_to(self, version_us: float | None) -> bool:
        return not self.static or version_us is None or self.installed_us <= version_us

    def as_of(self, version_us: float | None) -> Entry | None:
        """The version of this entry a packet stamped ``version_us`` should see."""
        entry = self
        while entry is not None and not entry.visible_to(version_us):
            entry = entry.previous
        return entry


@dataclass
class TableState:
    table: TableDef
    capacity: int
    entries: dict = field(default_factory=dict)
    remote: RemoteStore | None = None
    remote_entries: dict = field(default_factory=dict)
    pending: list[Entry] = field(default_factory=list)
    pending_reason: str | None = None
    inserts: int = 0
    expired: int = 0
    rejected: int = 0
    spilled: int = 0
    _used: int = 0
    _order: int = 0

    @classmethod
    def fresh(cls, table: TableDef, capacity: int | None = None) -> TableState:
        return cls(table=table, capacity=table.initial_capacity if capacity is None else capacity)

    @property
    def ternary(self) -> bool:
        return self.table.match_kind == "ternary"

    def used_count(self) -> int:
        return self._used

    def occupancy(self) -> float:
        return self._used / self.capacity

    def recount(self) -> int:
        """Recompute the used counter from the entries (audit helper)."""
        return sum(1 for e in self.entries.values() if e.used_bit)

    def next_order(self) -> int:
        self._order += 1
        return self._order

    def place(self, entry: Entry) -> None:
        """Store an entry locally without capacity checks (copy/migration path)."""
        old = self.entries.get(entry.key)
        if old is not None and old.used_bit:
            self._used -= 1
        self.entries[entry.key] = entry
        if entry.used_bit:
            self._used += 1
        self._order = max(self._order, entry.order)

    def mark_unused(self, key) -> None:
        entry = self.entries[key]
        if entry.used_bit:
            entry.used_bit = False
            self._used -= 1

    def drop_remote(self, key) -> None:
        self.remote_entries.pop(key)
        if self.remote is not None:
            self.remote.used_bytes -= self.table.entry_bytes

    def snapshot(self) -> list[tuple]:
        """Sorted (key, action, used_bit) triples for fidelity comparisons."""
        return sorted(
            ((e.key, repr(e.action), e.used_bit) for e in self.entries.values()),
            key=lambda t: (repr(t[0]), t[1], t[2]),
        )

    def learned(self) -> list[Entry]:
        return [e for e in self.entries.values() if not e.static]

    def static_entries(self) -> list[Entry]:
        return [e for e in self.entries.values() if e.static]

    def copy(self, capacity: int | None = None) -> TableState:
        """Deep copy of local state; remote binding and remote entries move along."""
        clone = TableState(
            table=self.table,
            capacity=self.capacity if capacity is None else capacity,
            remote=self.remote,
            remote_entries=self.remote_entries,
            pending=[dataclasses.replace(e) for e in self.pending],
            pending_reason=self.pending_reason,
            inserts=self.inserts,
            expired=self.expired,
            rejected=self.rejected,
            spilled=self.spilled,
        )
        for e in self.entries.values():
            clone.place(dataclasses.replace(e))
        clone._order = self._order
        return clone


def _best_ternary(entries, key_int: int, version_us: float | None) -> Entry | None:
    best = None
    for e in entries:
        e = e.as_of(version_us)
        if e is None or not e.used_bit:
            continue
        value, mask = e.key
        if key_int & mask != value:
            continue
        if best is None or (e.priority, -e.order) > (best.priority, -best.order):
            best = e
    return best


def _find(store: dict, ternary: bool, key: bytes, version_us: float | None) -> Entry | None:
    if ternary:
        return _best_ternary(store.values(), int.from_bytes(key, "big"), version_us)
    entry = store.get(key)
    entry = None if entry is None else entry.as_of(version_us)
    if entry is None or not entry.used_bit:
        return None
    return entry


def table_lookup(
    ts: TableState, key: bytes, now_us: float, version_us: float | None = None
) -> Entry | None:
    """Local lookup; a hit refreshes ``last_hit_us``."""
    entry = _find(ts.entries, ts.ternary, key, version_us)
    if entry is not None:
        entry.last_hit_us = now_us
    return entry


def remote_lookup(
    ts: TableState, key: bytes, now_us: float, version_us: float | None = None
) -> Entry | None:
    """Lookup answered by the remote store, merged with local state.

    For ternary tables the winner is taken over local and remote rules
    together, since priorities interleave across the two.
    """
    remote = _find(ts.remote_entries, ts.ternary, key, version_us)
    if ts.ternary:
        local = _find(ts.entries, True, key, version_us)
        candidates = [e for e in (local, remote) if e is not None]
        entry = max(candidates, key=lambda e: (e.priority, -e.order), default=None)
    else:
        entry = remote or _find(ts.entries, False, key, version_us)
    if entry is not None:
        entry.last_hit_us = now_us
    return entry


def needs_remote(ts: TableState, local_hit: Entry | None) -> bool:
    """Whether a lookup has to consult the remote store."""
    if ts.remote is None:
        return False
    if ts.ternary:
        return bool(ts.remote_entries)
    return local_hit is None


def table_insert(
    ts: TableState,
    key,
    action: Any,
    now_us: float,
    *,
    static: bool = False,
    priority: int = 0,
    origin: bytes | None = None,
) -> InsertResult:
    """Insert with used-bit accounting; overflow spills to the remote store if bound."""
    entry = Entry(
        key=key,
        action=action,
        used_bit=True,
        last_hit_us=now_us,
        static=static,
        installed_us=now_us,
        priority=priority,
        origin=origin,
    )
    return insert_entry(ts, entry)


def _replace(old: Entry, new: Entry) -> None:
    new.order = old.order
    if old.static and new.static:
        # packets that entered before the update keep seeing the old rule
        new.previous = old


def insert_entry(ts: TableState, entry: Entry) -> InsertResult:
    existing = ts.entries.get(entry.key)
    if existing is not None and existing.used_bit:
        _replace(existing, entry)
        ts.entries[entry.key] = entry
        ts.inserts += 1
        return InsertResult.INSERTED
    if entry.key in ts.remote_entries:
        _replace(ts.remote_entries[entry.key], entry)
        ts.remote_entries[entry.key] = entry
        ts.inserts += 1
        return InsertResult.SPILLED
    entry.order = entry.order or ts.next_order()
    if ts.used_count() < ts.capacity:
        ts.place(entry)
        ts.inserts += 1
        return InsertResult.INSERTED
    if ts.remote is not None:
        if ts.remote.has_room(ts.table.entry_bytes):
            ts.remote.used_bytes += ts.table.entry_bytes
            ts.remote_entries[entry.key] = entry
            ts.inserts += 1
            ts.spilled += 1
            return InsertResult.SPILLED
        ts.rejected += 1
        return InsertResult.REMOTE_FULL
    ts.rejected += 1
    return InsertResult.REJECTED


def install_pending(ts: TableState) -> int:
    """Retry queued control-plane entries in arrival order; returns how many landed."""
    waiting, ts.pending = ts.pending, []
    landed = 0
    for entry in waiting:
        if ts.pending:
            ts.pending.append(entry)
            continue
        result = insert_entry(ts, entry)
        if result.ok:
            landed += 1
        else:
            ts.rejected -= 1  # a retry is not a new rejection
            ts.pending.append(entry)
    if not ts.pending:
        ts.pending_reason = None
    return landed


def blocks_version(ts: TableState, version_us: float) -> bool:
    """True when a control-plane entry due for this packet could not be stored."""
    return any(e.installed_us <= version_us for e in ts.pending)


def expire_key(ts: TableState, key, now_us: float, idle_timeout_us: float) -> float | None:
    """Time out one learned entry if idle long enough.

    Returns None when the entry is gone, static or now unused; otherwise the
    time at which it next becomes eligible.
    """
    for where in (ts.entries, ts.remote_entries):
        entry = where.get(key)
        if entry is None or entry.static or not entry.used_bit:
            continue
        due = entry.last_hit_us + idle_timeout_us
        if now_us >= due:
            if where is ts.entries:
                ts.mark_unused(key)
            else:
                ts.drop_remote(key)
            ts.expired += 1
            return None
        return due
    return None


def entry_timeout(ts: TableState, now_us: float, idle_timeout_us: float) -> list:
    """Sweep every learned entry; returns the keys that went unused."""
    expired = []
    for where in (ts.entries, ts.remote_entries):
        for key in sorted(where, key=repr):
            entry = where[key]
            if entry.static or not entry.used_bit:
                continue
            if now_us - entry.last_hit_us >= idle_timeout_us:
                expired.append(key)
    for key in expired:
        expire_key(ts, key, now_us, idle_timeout_us)
    return expired
