"""Incremental XOR-aggregated log hashes for fast-path quorum checks.

A log's hash is the XOR of the 160-bit digests of its entries, so appending
and removing an entry are the same toggle operation and the value depends only
on the entry multiset, never on append order.  An optional per-key table
supports the commutativity variant: each key accumulates the digests of the
write transactions touching it, and a reply hash covers only the keys a
transaction accessed.
"""

from __future__ import annotations

import hashlib
import struct

HASH_BYTES = 20            # 160-bit accumulators
EMPTY_HASH = 0

WHOLE_LOG = "whole-log"
PER_KEY = "per-key"


def entry_digest(coord: int, seq: int, time_us: int) -> int:
    """Digest of one log entry from its fixed-width canonical serialization
    (coordinator id 32 bits, sequence 64, clock time 64, all big-endian)."""
    raw = struct.pack(">IQQ", coord, seq, time_us)
    return int.from_bytes(hashlib.sha1(raw).digest(), "big")


def digest_of(txn_id, t) -> int:
    return entry_digest(txn_id.coord, txn_id.seq, t.time_us)


def toggle(h: int, d: int) -> int:
    """Fold an entry digest in or out; XOR is self-inverse and commutative."""
    return h ^ d


class PerKeyHashTable:
    """Per-key digest accumulators for the commutativity variant.

    Only write transactions are folded in; read-only transactions leave the
    table untouched.  A transaction's reply hash is the XOR over its accessed
    keys of SHA1(key || accumulator), taken after the transaction itself has
    been folded in.
    """

    def __init__(self):
        self.acc = {}

    def fold(self, keys, digest: int):
        for k in keys:
            self.acc[k] = self.acc.get(k, EMPTY_HASH) ^ digest

    unfold = fold   # XOR self-inverse

    def reply_hash(self, keys) -> int:
        h = EMPTY_HASH
        for k in sorted(keys):
            raw = struct.pack(">q", k) + self.acc.get(k, EMPTY_HASH).to_bytes(HASH_BYTES, "big")
            h ^= int.from_bytes(hashlib.sha1(raw).digest(), "big")
        return h


def log_hash(entries) -> int:
    """Recompute an accumulator from scratch (used after log rebuilds)."""
    h = EMPTY_HASH
    for e in entries:
        h ^= digest_of(e.txn_id, e.t)
    return h
