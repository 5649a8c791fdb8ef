"""Executable correctness oracles over completed histories.

The serial order a run must be equivalent to is its agreed-timestamp order,
so the checks are direct:

  VALUE     replay every committed transaction serially in timestamp order on
            a fresh flat store (an implementation independent of the server's
            multi-version engine) and compare recorded results and, when
            available, each shard's final materialized state;
  CYCLE     the conflict graph induced by the per-shard leader log orders must
            be acyclic;
  REALTIME  whenever one transaction committed before another started, the
            earlier one's agreed timestamp must be smaller.

A failing verdict carries a minimal witness pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .types import INCREMENT, READ, WRITE, Timestamp, TxnId

VALUE = "value"
CYCLE = "cycle"
REALTIME = "realtime"

APPLIED_KEY = "applied"


class InvalidHistory(ValueError):
    """The history is not checkable (e.g. a committed record lacks results)."""


@dataclass(frozen=True)
class HistoryRecord:
    txn_id: TxnId
    read_set: frozenset
    write_set: frozenset
    op: str
    payload: tuple
    requires: tuple
    shards: frozenset
    start_us: int
    commit_us: int
    t: Timestamp
    results: tuple              # sorted (key, value) pairs
    path: str
    retries: int


@dataclass
class Verdict:
    ok: bool
    kind: Optional[str] = None
    witness: Optional[tuple] = None
    detail: str = ""

    def __bool__(self):
        return self.ok

    @staticmethod
    def passing():
        return Verdict(True)

    @staticmethod
    def failing(kind, witness, detail=""):
        return Verdict(False, kind, witness, detail)


def _validate(history) -> list:
    records = sorted(history, key=lambda r: r.t)
    for r in records:
        if r.results is None:
            raise InvalidHistory(f"committed record {r.txn_id} has no results")
        if r.commit_us < r.start_us:
            raise InvalidHistory(f"record {r.txn_id} commits before it starts")
    return records


def replay_serial(history, n_shards: int = 1) -> tuple:
    """Replay committed transactions in agreed-timestamp order on a flat dict.

    Returns (results per txn id, final store).  Deliberately a plain
    last-writer store, not the servers' multi-version engine.  Conditional
    writes follow the per-shard rule: a precondition gates only the writes
    homed on its own shard, and the reported flag is the conjunction.
    """
    store = {}
    results = {}
    for r in sorted(history, key=lambda rec: rec.t):
        payload = dict(r.payload)
        out = {}
        if r.op == READ:
            for k in sorted(r.read_set):
                out[k] = store.get(k, 0)
        elif r.op == INCREMENT:
            for k in sorted(r.read_set):
                out[k] = store.get(k, 0)
            for k in sorted(r.write_set):
                pre = store.get(k, 0)
                out[k] = pre
                store[k] = pre + payload.get(k, 1)
        elif r.op == WRITE:
            shard_ok = {}
            for k, expected in r.requires:
                s = k % n_shards
                shard_ok[s] = shard_ok.get(s, True) and store.get(k, 0) == expected
            for k in sorted(r.read_set):
                out[k] = store.get(k, 0)
            for k in sorted(r.write_set):
                if shard_ok.get(k % n_shards, True):
                    store[k] = payload[k]
            out[APPLIED_KEY] = 1 if all(shard_ok.values()) else 0
        else:
            raise InvalidHistory(f"unknown op kind {r.op!r}")
        results[r.txn_id] = out
    return results, store


def _stores_equal(expected: dict, actual: dict) -> Optional[tuple]:
    for k in expected.keys() | actual.keys():
        if expected.get(k, 0) != actual.get(k, 0):
            return (k, expected.get(k, 0), actual.get(k, 0))
    return None


def check_values(history, final_stores: Optional[dict] = None,
                 n_shards: int = 1, ignore_applied: bool = False) -> Verdict:
    records = _validate(history)
    replay_results, replay_store = replay_serial(records, n_shards)
    for r in records:
        got = dict(r.results)
        want = replay_results[r.txn_id]
        if ignore_applied:
            got.pop(APPLIED_KEY, None)
            want = dict(want)
            want.pop(APPLIED_KEY, None)
        if got != want:
            return Verdict.failing(VALUE, (r.txn_id, None),
                                   f"recorded {got} vs serial replay {want}")
    if final_stores is not None:
        for shard, actual in sorted(final_stores.items()):
            expected = {k: v for k, v in replay_store.items()
                        if k % n_shards == shard}
            diff = _stores_equal(expected, actual)
            if diff is not None:
                k, want, got = diff
                return Verdict.failing(
                    VALUE, (shard, k),
                    f"shard {shard} key {k}: replay {want} vs store {got}")
    return Verdict.passing()


def _conflicting(a: HistoryRecord, b: HistoryRecord) -> bool:
    return bool(a.write_set & b.write_set or a.write_set & b.read_set
                or a.read_set & b.write_set)


def check_cycles(history, shard_logs: dict) -> Verdict:
    """Conflict-graph acyclicity over the per-shard leader log orders."""
    by_id = {r.txn_id: r for r in history}
    edges = {}
    for shard, order in sorted(shard_logs.items()):
        seq = [txn_id for txn_id, _ in order if txn_id in by_id]
        for i, a in enumerate(seq):
            for b in seq[i + 1:]:
                if _conflicting(by_id[a], by_id[b]):
                    edges.setdefault(a, set()).add(b)
    color = {}
    stack_trace = []

    def dfs(u):
        color[u] = 1
        stack_trace.append(u)
        for v in sorted(edges.get(u, ())):
            if color.get(v, 0) == 1:
                return (u, v)
            if color.get(v, 0) == 0:
                hit = dfs(v)
                if hit:
                    return hit
        stack_trace.pop()
        color[u] = 2
        return None

    for u in sorted(edges):
        if color.get(u, 0) == 0:
            hit = dfs(u)
            if hit:
                return Verdict.failing(CYCLE, hit,
                                       "conflict order disagrees across shards")
    return Verdict.passing()


def check_realtime(history) -> Verdict:
    """commit_i < start_j must imply t_i < t_j.

    Linear sweep: walking transactions by start time, every already-committed
    transaction's timestamp must fall below the starter's.
    """
    records = _validate(history)
    starts = sorted(records, key=lambda r: (r.start_us, r.t))
    commits = sorted(records, key=lambda r: (r.commit_us, r.t))
    i = 0
    best = None                # committed txn with the largest timestamp so far
    for r in starts:
        while i < len(commits) and commits[i].commit_us < r.start_us:
            if best is None or commits[i].t > best.t:
                best = commits[i]
            i += 1
        if best is not None and best.t > r.t:
            return Verdict.failing(
                REALTIME, (best.txn_id, r.txn_id),
                f"{best.txn_id} committed at {best.commit_us}us before "
                f"{r.txn_id} started at {r.start_us}us, but is stamped later "
                f"({best.t} > {r.t})")
    return Verdict.passing()


def check_strict_serializability(history, shard_logs: Optional[dict] = None,
                                 final_stores: Optional[dict] = None,
                                 n_shards: int = 1) -> Verdict:
    v = check_values(history, final_stores, n_shards)
    if not v:
        return v
    if shard_logs is not None:
        v = check_cycles(history, shard_logs)
        if not v:
            return v
    return check_realtime(history)


def linearizability_per_shard(history, n_shards: int,
                              final_stores: Optional[dict] = None) -> Verdict:
    """Each shard's committed effects must form one order consistent with
    timestamps and real time, and reproduce the recorded local results."""
    for shard in range(n_shards):
        sub = []
        for r in history:
            if shard not in r.shards:
                continue
            local_results = tuple(
                (k, v) for k, v in r.results
                if (isinstance(k, int) and k % n_shards == shard)
                or not isinstance(k, int))
            sub.append(HistoryRecord(
                r.txn_id,
                frozenset(k for k in r.read_set if k % n_shards == shard),
                frozenset(k for k in r.write_set if k % n_shards == shard),
                r.op, r.payload,
                tuple((k, v) for k, v in r.requires if k % n_shards == shard),
                frozenset({shard}), r.start_us, r.commit_us, r.t,
                local_results, r.path, r.retries))
        stores = None
        if final_stores is not None and shard in final_stores:
            stores = {shard: final_stores[shard]}
        v = check_values(sub, stores, n_shards, ignore_applied=True)
        if not v:
            return Verdict.failing(v.kind, v.witness,
                                   f"shard {shard}: {v.detail}")
        v = check_realtime(sub)
        if not v:
            return Verdict.failing(v.kind, v.witness,
                                   f"shard {shard}: {v.detail}")
    return Verdict.passing()
