"""Multi-version key-value store and one-shot procedure execution.

Values default to 0 for never-written keys.  Reads see the latest version
strictly below the reading transaction's timestamp, so execution results
depend only on timestamps, never on the wall-clock order the executions
happened to run in.  Revoking an optimistic execution removes exactly the
versions it created.
"""

from __future__ import annotations

import bisect
from typing import Optional

from .types import INCREMENT, READ, WRITE, Timestamp, Transaction

APPLIED_KEY = "applied"


class VersionedStore:
    def __init__(self):
        self.versions = {}      # key -> sorted list of (Timestamp, value)

    def read(self, key: int, before: Timestamp) -> int:
        chain = self.versions.get(key)
        if not chain:
            return 0
        i = bisect.bisect_left(chain, (before,)) - 1
        return chain[i][1] if i >= 0 else 0

    def write(self, key: int, t: Timestamp, value: int):
        chain = self.versions.setdefault(key, [])
        i = bisect.bisect_left(chain, (t,))
        if i < len(chain) and chain[i][0] == t:
            chain[i] = (t, value)
        else:
            chain.insert(i, (t, value))

    def remove(self, key: int, t: Timestamp):
        chain = self.versions.get(key)
        if not chain:
            return
        i = bisect.bisect_left(chain, (t,))
        if i < len(chain) and chain[i][0] == t:
            chain.pop(i)
            if not chain:
                del self.versions[key]

    def latest(self, key: int) -> int:
        chain = self.versions.get(key)
        return chain[-1][1] if chain else 0

    def snapshot_latest(self) -> dict:
        return {k: chain[-1][1] for k, chain in self.versions.items() if chain}


def execute_txn(store: VersionedStore, txn: Transaction, t: Timestamp,
                shard: Optional[int] = None, n_shards: int = 1) -> dict:
    """Run a one-shot procedure against `store` at timestamp `t`.

    When `shard` is given, only keys homed there are touched; the coordinator
    merges the per-shard result maps.  Increment returns each accessed key's
    pre-value and bumps its write keys; write-value applies its payload only
    if every `requires` entry matches the current value, and reports whether
    it applied.
    """
    def local(keys):
        if shard is None:
            return sorted(keys)
        return [k for k in sorted(keys) if k % n_shards == shard]

    result = {}
    payload = dict(txn.payload)
    if txn.op == READ:
        for k in local(txn.read_set):
            result[k] = store.read(k, t)
    elif txn.op == INCREMENT:
        for k in local(txn.read_set):
            result[k] = store.read(k, t)
        for k in local(txn.write_set):
            pre = store.read(k, t)
            result[k] = pre
            store.write(k, t, pre + payload.get(k, 1))
    elif txn.op == WRITE:
        # preconditions gate only the writes homed with them; a shard that
        # homes none of the required keys reports success vacuously
        ok = True
        for k, expected in txn.requires:
            if shard is not None and k % n_shards != shard:
                continue
            if store.read(k, t) != expected:
                ok = False
        for k in local(txn.read_set):
            result[k] = store.read(k, t)
        if ok:
            for k in local(txn.write_set):
                store.write(k, t, payload[k])
        result[APPLIED_KEY] = 1 if ok else 0
    else:
        raise ValueError(f"unknown op kind {txn.op!r}")
    return result


def revoke_txn(store: VersionedStore, txn: Transaction, t: Timestamp,
               shard: Optional[int] = None, n_shards: int = 1):
    """Erase the versions an optimistic execution created; idempotent."""
    for k in sorted(txn.write_set):
        if shard is not None and k % n_shards != shard:
            continue
        store.remove(k, t)
