"""Shared domain types: transaction identity, totally ordered timestamps,
view records and log entries.

Everything here is a plain value type.  Nodes in the simulation exchange and
copy these freely; nothing is mutated across node boundaries.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional

INCREMENT = "increment"
READ = "read"
WRITE = "write-value"

PREVENTIVE = "preventive"
DETECTIVE = "detective"


class TxnId(NamedTuple):
    coord: int
    seq: int

    def __repr__(self):
        return f"c{self.coord}/s{self.seq}"


class Timestamp(NamedTuple):
    """Total order over transactions: clock time in microseconds first, then
    the submitting coordinator id, then its sequence number.

    The tie-break makes the order total even when two clocks produce the same
    microsecond; two distinct transactions can therefore never compare equal.
    """

    time_us: int
    coord: int
    seq: int

    @classmethod
    def of(cls, time_us: int, txn_id: TxnId) -> "Timestamp":
        return cls(time_us, txn_id.coord, txn_id.seq)

    @property
    def txn_id(self) -> TxnId:
        return TxnId(self.coord, self.seq)

    def at(self, time_us: int) -> "Timestamp":
        """Same transaction, different clock time."""
        return Timestamp(time_us, self.coord, self.seq)

    def __repr__(self):
        return f"<{self.time_us}us c{self.coord}/s{self.seq}>"


def compare(a: Timestamp, b: Timestamp) -> int:
    """-1, 0 or +1; total order (time, then coordinator, then sequence)."""
    if a < b:
        return -1
    if a > b:
        return 1
    return 0


def home_shard(key: int, n_shards: int) -> int:
    return key % n_shards


@dataclass(frozen=True)
class Transaction:
    """A one-shot stored procedure with read/write key sets known up front.

    `op` is one of INCREMENT / READ / WRITE.  `payload` carries per-key
    integer deltas (increment) or values (write-value).  `requires` is an
    optional per-key precondition for write-value transactions: if any listed
    key's current value differs, the writes do not apply.  The check depends
    only on the store at the transaction's timestamp, so every replica and
    the replay oracle reach the same decision.
    """

    id: TxnId
    read_set: frozenset
    write_set: frozenset
    op: str = INCREMENT
    payload: tuple = ()          # ((key, value), ...) sorted
    requires: tuple = ()         # ((key, expected), ...) sorted
    shards: frozenset = frozenset()
    t: Timestamp = Timestamp(0, 0, 0)   # timestamp at submission

    def keys(self) -> frozenset:
        return self.read_set | self.write_set

    def local_reads(self, shard: int, n_shards: int):
        return [k for k in sorted(self.read_set) if k % n_shards == shard]

    def local_writes(self, shard: int, n_shards: int):
        return [k for k in sorted(self.write_set) if k % n_shards == shard]

    def with_timestamp(self, t: Timestamp) -> "Transaction":
        return dataclasses.replace(self, t=t)


def make_txn(txn_id: TxnId, read_set, write_set, n_shards: int, op=INCREMENT,
             payload=None, requires=None, t=None) -> Transaction:
    """Build a transaction, deriving its participating shards from its keys."""
    rs, ws = frozenset(read_set), frozenset(write_set)
    shards = frozenset(home_shard(k, n_shards) for k in rs | ws)
    if not shards:
        raise ValueError("transaction touches no keys")
    return Transaction(
        id=txn_id,
        read_set=rs,
        write_set=ws,
        op=op,
        payload=tuple(sorted((payload or {}).items())),
        requires=tuple(sorted((requires or {}).items())),
        shards=shards,
        t=t if t is not None else Timestamp.of(0, txn_id),
    )


def conflicts(a: Transaction, b: Transaction) -> bool:
    """Read-write or write-write overlap on any key; read-read never conflicts."""
    if a.write_set & b.write_set:
        return True
    if a.write_set & b.read_set:
        return True
    if a.read_set & b.write_set:
        return True
    return False


@dataclass(frozen=True)
class ViewRecord:
    """Global view number, per-shard local views, and the agreement mode
    (preventive or detective) planned for this view."""

    g_view: int
    g_vec: tuple
    g_mode: str

    def leader_of(self, shard: int, n_replicas: int) -> int:
        return self.g_vec[shard] % n_replicas


@dataclass
class LogEntry:
    """One slot of a replica's log.

    `pre_hash` is the whole-log accumulator value just before this entry was
    folded in, and `reply_hash` the value quoted in replies about this entry
    (they differ in per-key hashing mode).  `synced` marks follower entries
    the leader has confirmed at this slot; only those count toward the sync
    point.  `result` is only populated on leaders.
    """

    txn: Transaction
    t: Timestamp
    pre_hash: int = 0
    reply_hash: int = 0
    synced: bool = False
    result: Optional[dict] = None

    @property
    def txn_id(self) -> TxnId:
        return self.txn.id
