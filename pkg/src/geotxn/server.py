"""Shard replica state machine.

Transactions wait in a timestamp-ordered priority queue until the local clock
passes their timestamp.  Followers then log them and answer immediately;
leaders execute them and, for multi-shard transactions, run the inter-leader
timestamp agreement before the entry is allowed into the log.  A transaction
whose agreement is still open stays at the front of the queue and blocks every
conflicting transaction behind it, which is what keeps cross-shard real-time
ordering intact.

The leader's log is kept sorted by timestamp at all times.  An entry can be
inserted below the tail only when it conflicts with nothing above it (the
acceptance check forces conflicting latecomers above every recorded stamp),
so mid-log inserts always commute with the entries they displace.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional

from . import hashing, messages as m, recovery
from .hashing import PerKeyHashTable, digest_of
from .sim import NodeId, Simulator
from .store import VersionedStore, execute_txn, revoke_txn
from .types import (DETECTIVE, LogEntry, PREVENTIVE, READ, Timestamp,
                    Transaction, TxnId, ViewRecord)

NORMAL = "normal"
VIEWCHANGE = "viewchange"
RECOVERING = "recovering"

QUEUED = "queued"
AGREEING = "agreeing"

HELD_CAP = 10_000


def super_quorum(f: int) -> int:
    return 1 + f + (f + 1) // 2     # 1 + f + ceil(f/2)


@dataclass
class ProtocolParams:
    f: int
    n_shards: int
    tick_us: int = 1_000
    hash_mode: str = hashing.WHOLE_LOG
    heartbeat_us: int = 50_000
    fetch_timeout_us: int = 150_000
    agreement_retry_us: int = 200_000
    commit_notice_timeout_us: int = 2_000_000
    inquiry_mode: bool = False          # batched slow-reply inquiry
    disable_round2: bool = False        # test hook: skip the confirm round
    preventive_execute_on_agreement: bool = True

    @property
    def n_replicas(self) -> int:
        return 2 * self.f + 1

    @property
    def super_quorum(self) -> int:
        return super_quorum(self.f)


@dataclass
class PqEntry:
    txn: Transaction
    t: Timestamp
    phase: str = QUEUED
    executed: bool = False
    result: Optional[dict] = None

    @property
    def txn_id(self) -> TxnId:
        return self.txn.id


@dataclass
class Agreement:
    shards: frozenset
    q1: dict = field(default_factory=dict)      # shard -> reported time_us
    q2: set = field(default_factory=set)        # shards confirmed at agreed
    round: int = 1
    agreed_us: Optional[int] = None
    released: bool = False                      # this leader released locally
    complete: bool = False
    retrying: bool = False


class Server:
    def __init__(self, node_id: NodeId, params: ProtocolParams,
                 initial_view: ViewRecord):
        self.id = node_id
        self.sid = node_id.shard
        self.rid = node_id.replica
        self.params = params
        self.g_view = initial_view.g_view
        self.g_vec = list(initial_view.g_vec)
        self.g_mode = initial_view.g_mode
        self.l_view = self.g_vec[self.sid]
        self.last_normal_view = self.l_view
        self.status = NORMAL
        self._reset_runtime_state()
        # counters surface in run statistics
        self.rollbacks = 0
        self.held_evictions = 0

    def _reset_runtime_state(self):
        self.pq = []                    # PqEntry list sorted by t
        self.log = []                   # LogEntry list sorted by t
        self.log_hash = hashing.EMPTY_HASH
        self.perkey = PerKeyHashTable()
        self.rmap = {}                  # key -> Timestamp of last released reader
        self.wmap = {}
        self.store = VersionedStore()
        self.executed = set()           # txn ids whose effects are in the store
        self.results = {}               # txn id -> final result map (leader)
        self.state_of = {}              # txn id -> "pq" | "held" | "logged"
        self.held = {}                  # txn id -> (txn, Timestamp), insertion = LRU
        self.removed_cache = {}         # bodies displaced during log sync
        self.coord_of = {}              # txn id -> coordinator NodeId
        self.agreement = {}
        self.sync_point = 0             # followers: leader-confirmed prefix length
        self.commit_point = 0
        self.follower_sps = {}
        self.slow_sent = {}             # txn id -> time_us already slow-replied
        self.noticed = set()            # txn ids with commit notices received
        self.notice_watch = set()
        # view-change collections (recovery module)
        self.v_quorum = {}
        self.t_quorum = {}
        self.vc_done = False
        self.t_finished = False
        self.t_fetching = set()

    # -- identity ------------------------------------------------------------

    def is_leader(self) -> bool:
        return self.rid == self.l_view % self.params.n_replicas

    def leader_node(self, shard: int) -> NodeId:
        return NodeId.server(shard, self.g_vec[shard] % self.params.n_replicas)

    def pending_summary(self):
        if self.pq or self.agreement:
            return f"pq={len(self.pq)} agreements={len(self.agreement)}"
        return None

    # -- lifecycle -------------------------------------------------------------

    def start(self, sim: Simulator):
        sim.schedule_after(self.id, self.params.tick_us, "tick")
        sim.schedule_after(self.id, self.params.heartbeat_us, "heartbeat")

    def on_restart(self, sim: Simulator):
        """Rebooted with empty state; rejoin through the view manager."""
        self._reset_runtime_state()
        self.status = RECOVERING
        self.start(sim)
        recovery.begin_rejoin(self, sim)

    # -- timers ------------------------------------------------------------------

    def on_timer(self, sim: Simulator, tag):
        kind = tag if isinstance(tag, str) else tag[0]
        if kind == "tick":
            if self.status == NORMAL:
                self.release_expired(sim)
            sim.schedule_after(self.id, self.params.tick_us, "tick")
        elif kind == "heartbeat":
            sim.send(self.id, NodeId.view_manager(0),
                     m.Heartbeat(self.sid, self.rid))
            sim.schedule_after(self.id, self.params.heartbeat_us, "heartbeat")
        elif kind == "fetch":
            self._fetch_missing_txn(sim, tag[1])
        elif kind == "agree-retry":
            self._retry_agreement(sim, tag[1])
        elif kind == "notice":
            self._check_commit_notice(sim, tag[1])
        elif kind == "rejoin":
            recovery.begin_rejoin(self, sim)
        elif kind == "verify-retry":
            recovery.retry_verification(self, sim)

    # -- message dispatch -----------------------------------------------------------

    def on_message(self, sim: Simulator, src: NodeId, msg):
        if isinstance(msg, m.TxnMulticast):
            self.on_txn(sim, msg)
        elif isinstance(msg, m.TimestampNotification):
            self.on_timestamp_notification(sim, msg)
        elif isinstance(msg, m.LogSync):
            self.on_log_sync(sim, src, msg)
        elif isinstance(msg, m.LogResyncReq):
            self.on_log_resync_req(sim, src, msg)
        elif isinstance(msg, m.LogResyncRep):
            self.on_log_resync_rep(sim, msg)
        elif isinstance(msg, m.SyncPointReport):
            self.on_sync_point_report(sim, msg)
        elif isinstance(msg, m.CommitPoint):
            self.on_commit_point(sim, msg)
        elif isinstance(msg, m.SyncPointInquiry):
            self.on_sync_point_inquiry(sim, src, msg)
        elif isinstance(msg, m.TxnFetchReq):
            self.on_txn_fetch_req(sim, src, msg)
        elif isinstance(msg, m.TxnFetchRep):
            self.on_txn_fetch_rep(sim, msg)
        elif isinstance(msg, m.CommitNotice):
            self.noticed.add(msg.txn_id)
        elif isinstance(msg, m.ViewChangeReq):
            recovery.on_view_change_req(self, sim, msg)
        elif isinstance(msg, m.ViewChange):
            recovery.on_view_change(self, sim, msg)
        elif isinstance(msg, m.TimestampVerification):
            recovery.on_timestamp_verification(self, sim, msg)
        elif isinstance(msg, m.StartView):
            recovery.on_start_view(self, sim, msg)
        elif isinstance(msg, m.StateTransferReq):
            recovery.on_state_transfer_req(self, sim, src, msg)
        elif isinstance(msg, m.StateTransferRep):
            recovery.on_state_transfer_rep(self, sim, msg)
        elif isinstance(msg, m.InquireRep):
            recovery.on_view_inquiry_rep(self, sim, msg)
        elif isinstance(msg, m.Probe):
            sample = sim.local_clock(self.id) - msg.send_local_us
            sim.send(self.id, src, m.ProbeEcho(sample))

    # -- arrival and conflict detection -------------------------------------------

    def on_txn(self, sim: Simulator, msg: m.TxnMulticast):
        if self.status != NORMAL:
            return
        txn = msg.txn
        txn_id = txn.id
        self.coord_of[txn_id] = msg.coord_node
        state = self.state_of.get(txn_id)
        if state == "logged":
            self._resend_logged_replies(sim, txn_id)
            return
        if state == "pq":
            return                          # retransmission; already in flight
        if state == "held":
            _, old_t = self.held[txn_id]
            if txn.t <= old_t:
                return
            del self.held[txn_id]
            self.state_of.pop(txn_id, None)
        self._admit(sim, txn, txn.t)

    def _admit(self, sim: Simulator, txn: Transaction, t: Timestamp):
        txn_id = txn.id
        if self.conflict_detection(txn, t):
            self._insert_pq(PqEntry(txn, t))
            self.state_of[txn_id] = "pq"
        elif self.is_leader():
            bumped = self._bump_timestamp(txn, sim.local_clock(self.id))
            self._insert_pq(PqEntry(txn, bumped))
            self.state_of[txn_id] = "pq"
        else:
            self._hold(txn, t)

    def conflict_detection(self, txn: Transaction, t: Timestamp) -> bool:
        """Accept only above every released conflicting transaction's stamp."""
        n = self.params.n_shards
        for k in txn.local_reads(self.sid, n):
            w = self.wmap.get(k)
            if w is not None and t <= w:
                return False
        for k in txn.local_writes(self.sid, n):
            w = self.wmap.get(k)
            if w is not None and t <= w:
                return False
            r = self.rmap.get(k)
            if r is not None and t <= r:
                return False
        return True

    def _bump_timestamp(self, txn: Transaction, local_now: int) -> Timestamp:
        """Leader-side update for latecomers: the local clock, pushed just past
        any recorded conflicting stamp that ties with it."""
        floor = local_now
        n = self.params.n_shards
        for k in txn.local_reads(self.sid, n):
            w = self.wmap.get(k)
            if w is not None:
                floor = max(floor, w.time_us + 1)
        for k in txn.local_writes(self.sid, n):
            for stamp_map in (self.wmap, self.rmap):
                s = stamp_map.get(k)
                if s is not None:
                    floor = max(floor, s.time_us + 1)
        return Timestamp.of(floor, txn.id)

    def _hold(self, txn: Transaction, t: Timestamp):
        if len(self.held) >= HELD_CAP:
            victim = next(iter(self.held))
            del self.held[victim]
            self.state_of.pop(victim, None)
            self.held_evictions += 1
        self.held[txn.id] = (txn, t)
        self.state_of[txn.id] = "held"

    def _insert_pq(self, entry: PqEntry):
        bisect.insort(self.pq, entry, key=lambda e: e.t)

    def _remove_pq(self, entry: PqEntry):
        i = bisect.bisect_left(self.pq, entry.t, key=lambda e: e.t)
        while i < len(self.pq) and self.pq[i] is not entry:
            i += 1
        if i < len(self.pq):
            self.pq.pop(i)

    # -- release loop -----------------------------------------------------------------

    def release_expired(self, sim: Simulator):
        now_local = sim.local_clock(self.id)
        blocked_r, blocked_w = set(), set()
        release = []
        n = self.params.n_shards
        for entry in self.pq:
            if entry.t.time_us > now_local:
                break
            rs = entry.txn.local_reads(self.sid, n)
            ws = entry.txn.local_writes(self.sid, n)
            if entry.phase == QUEUED:
                clash = any(k in blocked_w for k in rs) or \
                    any(k in blocked_w or k in blocked_r for k in ws)
                if not clash:
                    release.append(entry)
            blocked_r.update(rs)
            blocked_w.update(ws)
        for entry in release:
            self._release_one(sim, entry)

    def _stamp_maps(self, txn: Transaction, t: Timestamp):
        n = self.params.n_shards
        for k in txn.local_reads(self.sid, n):
            cur = self.rmap.get(k)
            if cur is None or t > cur:
                self.rmap[k] = t
        for k in txn.local_writes(self.sid, n):
            cur = self.wmap.get(k)
            if cur is None or t > cur:
                self.wmap[k] = t

    def _release_one(self, sim: Simulator, entry: PqEntry):
        self._stamp_maps(entry.txn, entry.t)
        if not self.is_leader():
            self._remove_pq(entry)
            log_entry = self._place_entry(entry.txn, entry.t)
            self._send_fast_reply(sim, log_entry, with_result=False)
            return
        multi = len(entry.txn.shards) > 1
        detective = self.g_mode == DETECTIVE
        if not multi:
            self._execute_entry(sim, entry)
            self._finalize(sim, entry)
            return
        ag = self.agreement.get(entry.txn_id)
        if ag is None:
            ag = Agreement(shards=entry.txn.shards)
            self.agreement[entry.txn_id] = ag
        if ag.round == 1:
            # first release: optimistic execution only in detective mode
            if detective:
                self._execute_entry(sim, entry)
                self._send_optimistic_reply(sim, entry)
            ag.q1[self.sid] = max(ag.q1.get(self.sid, -1), entry.t.time_us)
            ag.released = True
            entry.phase = AGREEING
            self._broadcast_notification(sim, entry.txn, 1, entry.t.time_us)
            self._arm_agreement_retry(sim, entry.txn_id, ag)
            self._evaluate_agreement(sim, entry.txn_id)
        else:
            # back at the head after a revoke: run with the agreed timestamp
            if detective:
                self._execute_entry(sim, entry)
                self._send_optimistic_reply(sim, entry)
            ag.released = True
            entry.phase = AGREEING
            self._maybe_finalize(sim, entry.txn_id)

    def _execute_entry(self, sim: Simulator, entry: PqEntry):
        entry.result = execute_txn(self.store, entry.txn, entry.t,
                                   self.sid, self.params.n_shards)
        entry.executed = True
        self.executed.add(entry.txn_id)
        if entry.txn.local_writes(self.sid, self.params.n_shards):
            self.perkey.fold(entry.txn.keys(), digest_of(entry.txn_id, entry.t))

    def _revoke_entry(self, entry: PqEntry):
        if not entry.executed:
            return
        revoke_txn(self.store, entry.txn, entry.t, self.sid, self.params.n_shards)
        if entry.txn.local_writes(self.sid, self.params.n_shards):
            self.perkey.unfold(entry.txn.keys(), digest_of(entry.txn_id, entry.t))
        self.executed.discard(entry.txn_id)
        entry.executed = False
        entry.result = None

    # -- fast replies ----------------------------------------------------------------

    def _reply_hash(self, txn: Transaction) -> int:
        if self.params.hash_mode == hashing.PER_KEY:
            return self.perkey.reply_hash(sorted(txn.keys()))
        return self.log_hash

    def _send_optimistic_reply(self, sim: Simulator, entry: PqEntry):
        """Detective-mode leader reply, sent before the entry holds a log slot."""
        reply = m.FastReply(self.g_view, self.l_view, self.sid, self.rid,
                            entry.txn_id, entry.t, self._reply_hash(entry.txn),
                            tuple(sorted(entry.result.items())), None)
        self._send_to_coord(sim, entry.txn_id, reply)

    def _send_fast_reply(self, sim: Simulator, log_entry: LogEntry,
                         with_result: bool, log_pos: Optional[int] = None):
        result = None
        if with_result and log_entry.result is not None:
            result = tuple(sorted(log_entry.result.items()))
        reply = m.FastReply(self.g_view, self.l_view, self.sid, self.rid,
                            log_entry.txn_id, log_entry.t, log_entry.reply_hash,
                            result, log_pos)
        self._send_to_coord(sim, log_entry.txn_id, reply)

    def _send_to_coord(self, sim: Simulator, txn_id: TxnId, msg):
        # entries installed via log sync may predate any multicast seen here;
        # the submitting coordinator's index is part of the transaction id
        coord = self.coord_of.get(txn_id) or NodeId.coordinator(txn_id.coord)
        sim.send(self.id, coord, msg)

    # -- log placement ------------------------------------------------------------------

    def _log_pos(self, t: Timestamp) -> int:
        return bisect.bisect_left(self.log, t, key=lambda e: e.t)

    def _place_entry(self, txn: Transaction, t: Timestamp,
                     result=None) -> LogEntry:
        """Insert an entry at its timestamp position; captures the pre-entry
        hash and the reply hash the entry answers duplicates with.

        Follower placements are eager (synced=False) until the leader confirms
        the slot through log sync; a leader's own log is synced by definition.
        """
        pre = self.log_hash
        leader = self.is_leader()
        if self.params.hash_mode == hashing.PER_KEY and not leader:
            # followers fold at placement; leaders folded at execution
            if txn.local_writes(self.sid, self.params.n_shards):
                self.perkey.fold(txn.keys(), digest_of(txn.id, t))
        entry = LogEntry(txn, t, pre_hash=pre, result=result, synced=leader)
        entry.reply_hash = self._reply_hash(txn) \
            if self.params.hash_mode == hashing.PER_KEY else pre
        self.log.insert(self._log_pos(t), entry)
        self.log_hash ^= digest_of(txn.id, t)
        self.state_of[txn.id] = "logged"
        if not leader:
            self.slow_sent.pop(txn.id, None)
            self._refresh_sync_point()
        return entry

    def _refresh_sync_point(self):
        """The sync point is the length of the leader-confirmed prefix; an
        eager placement below it invalidates the claim from there on."""
        sp = 0
        for e in self.log:
            if not e.synced:
                break
            sp += 1
        self.sync_point = sp

    def _remove_log_at(self, pos: int):
        entry = self.log.pop(pos)
        self.log_hash ^= digest_of(entry.txn_id, entry.t)
        if self.params.hash_mode == hashing.PER_KEY and \
                entry.txn.local_writes(self.sid, self.params.n_shards):
            self.perkey.unfold(entry.txn.keys(), digest_of(entry.txn_id, entry.t))
        if entry.txn_id in self.executed:
            revoke_txn(self.store, entry.txn, entry.t, self.sid, self.params.n_shards)
            self.executed.discard(entry.txn_id)
        self.removed_cache[entry.txn_id] = entry.txn
        self.state_of.pop(entry.txn_id, None)
        return entry

    def _finalize(self, sim: Simulator, entry: PqEntry):
        """Agreement settled (or single-shard): give the entry its log slot,
        sync followers, and retire it from the queue."""
        if not entry.executed:
            self._execute_entry(sim, entry)     # preventive mode executes here
            fresh_result = True
        else:
            fresh_result = False
        self._remove_pq(entry)
        log_entry = self._place_entry(entry.txn, entry.t, entry.result)
        self.results[entry.txn_id] = entry.result
        pos = self._log_pos(entry.t)
        if fresh_result:
            self._send_fast_reply(sim, log_entry, with_result=True, log_pos=pos)
        elif self.params.inquiry_mode:
            self._send_fast_reply(sim, log_entry, with_result=True, log_pos=pos)
        self._send_log_sync(sim, log_entry, pos)
        self.agreement.pop(entry.txn_id, None)
        self.notice_watch.add(entry.txn_id)
        sim.schedule_after(self.id, self.params.commit_notice_timeout_us,
                           ("notice", entry.txn_id))
        self._recompute_commit_point(sim)

    def _send_log_sync(self, sim: Simulator, log_entry: LogEntry, pos: int):
        prev_id = self.log[pos - 1].txn_id if pos > 0 else None
        msg = m.LogSync(self.g_view, self.l_view, self.sid, self.rid,
                        pos, prev_id, log_entry.txn, log_entry.t)
        for r in range(self.params.n_replicas):
            if r != self.rid:
                sim.send(self.id, NodeId.server(self.sid, r), msg)

    # -- timestamp agreement -----------------------------------------------------------

    def _broadcast_notification(self, sim: Simulator, txn: Transaction,
                                round_no: int, time_us: int):
        msg = m.TimestampNotification(self.g_view, self.sid, self.rid,
                                      txn.id, time_us, round_no)
        for ss in sorted(txn.shards):
            if ss != self.sid:
                sim.send(self.id, self.leader_node(ss), msg)

    def on_timestamp_notification(self, sim: Simulator, msg: m.TimestampNotification):
        if self.status != NORMAL or msg.g_view != self.g_view:
            return
        if not self.is_leader():
            return
        if msg.replica != self.g_vec[msg.shard] % self.params.n_replicas:
            return
        txn_id = msg.txn_id
        state = self.state_of.get(txn_id)
        if state == "logged":
            # settled here; re-confirm so a stalled peer can make progress
            entry = self._find_log(txn_id)
            if entry is not None:
                reply = m.TimestampNotification(self.g_view, self.sid, self.rid,
                                                txn_id, entry.t.time_us, 2)
                sim.send(self.id, NodeId.server(msg.shard, msg.replica), reply)
            return
        ag = self.agreement.get(txn_id)
        if ag is None:
            ag = Agreement(shards=frozenset())
            self.agreement[txn_id] = ag
            if state is None:
                # peer saw a transaction this leader never received
                sim.schedule_after(self.id, self.params.fetch_timeout_us,
                                   ("fetch", txn_id))
        ag.q1[msg.shard] = max(ag.q1.get(msg.shard, -1), msg.time_us)
        if msg.round == 2:
            ag.q2.add(msg.shard)
            ag.agreed_us = msg.time_us
        self._evaluate_agreement(sim, txn_id)

    def _evaluate_agreement(self, sim: Simulator, txn_id: TxnId):
        ag = self.agreement.get(txn_id)
        if ag is None or not ag.released:
            return
        entry = self._find_pq(txn_id)
        if entry is None:
            return
        shards = entry.txn.shards
        if ag.round == 1:
            if len(ag.q1) < len(shards):
                return
            agreed = max(ag.q1.values())
            ag.agreed_us = agreed
            mine = entry.t.time_us
            if mine == agreed:
                if all(v == agreed for v in ag.q1.values()):
                    ag.complete = True          # Case-1: everybody matched
                elif self.params.disable_round2:
                    ag.complete = True
                else:
                    ag.round = 2                # Case-2: confirm before release
                    ag.q2 |= {s for s, v in ag.q1.items() if v == agreed}
                    ag.q2.add(self.sid)
                    self._broadcast_notification(sim, entry.txn, 2, agreed)
                    if len(ag.q2) == len(shards):
                        ag.complete = True
            else:
                # Case-3: the optimistic run used a stale timestamp
                self.rollbacks += 1
                self._revoke_entry(entry)
                self._remove_pq(entry)
                entry.t = entry.t.at(agreed)
                entry.phase = QUEUED
                self._insert_pq(entry)
                ag.round = 2
                ag.q2 |= {s for s, v in ag.q1.items() if v == agreed}
                ag.q2.add(self.sid)
                if self.params.disable_round2:
                    ag.complete = True
                else:
                    self._broadcast_notification(sim, entry.txn, 2, agreed)
                    if len(ag.q2) == len(shards):
                        ag.complete = True
                return
        else:
            if len(ag.q2) >= len(shards):
                ag.complete = True
        self._maybe_finalize(sim, txn_id)

    def _maybe_finalize(self, sim: Simulator, txn_id: TxnId):
        ag = self.agreement.get(txn_id)
        if ag is None or not ag.complete:
            return
        entry = self._find_pq(txn_id)
        if entry is not None and entry.phase == AGREEING:
            self._finalize(sim, entry)

    def _arm_agreement_retry(self, sim: Simulator, txn_id: TxnId, ag: Agreement):
        if not ag.retrying:
            ag.retrying = True
            sim.schedule_after(self.id, self.params.agreement_retry_us,
                               ("agree-retry", txn_id))

    def _retry_agreement(self, sim: Simulator, txn_id: TxnId):
        ag = self.agreement.get(txn_id)
        if ag is None or ag.complete or self.status != NORMAL:
            return
        entry = self._find_pq(txn_id)
        if entry is None:
            return
        t_us = ag.agreed_us if ag.round == 2 else entry.t.time_us
        self._broadcast_notification(sim, entry.txn, ag.round, t_us)
        sim.schedule_after(self.id, self.params.agreement_retry_us,
                           ("agree-retry", txn_id))

    # -- missing transaction fetch (coordinator died mid-multicast) ----------------------

    def _fetch_missing_txn(self, sim: Simulator, txn_id: TxnId):
        if self.state_of.get(txn_id) is not None or self.status != NORMAL:
            return
        ag = self.agreement.get(txn_id)
        if ag is None or not ag.q1:
            return
        source = sorted(ag.q1)[0]
        sim.send(self.id, self.leader_node(source),
                 m.TxnFetchReq(self.g_view, self.sid, self.rid, txn_id))
        sim.schedule_after(self.id, self.params.fetch_timeout_us,
                           ("fetch", txn_id))

    def on_txn_fetch_req(self, sim: Simulator, src: NodeId, msg: m.TxnFetchReq):
        if msg.g_view != self.g_view:
            return
        txn, t_us = None, None
        entry = self._find_pq(msg.txn_id)
        if entry is not None:
            txn, t_us = entry.txn, entry.t.time_us
        else:
            log_entry = self._find_log(msg.txn_id)
            if log_entry is not None:
                txn, t_us = log_entry.txn, log_entry.t.time_us
        sim.send(self.id, src, m.TxnFetchRep(self.g_view, msg.txn_id, txn, t_us))

    def on_txn_fetch_rep(self, sim: Simulator, msg: m.TxnFetchRep):
        if msg.g_view != self.g_view:
            return
        if recovery.on_verification_fetch_rep(self, sim, msg):
            return
        if msg.txn is None:
            return
        if self.state_of.get(msg.txn_id) is not None or self.status != NORMAL:
            return
        self._admit(sim, msg.txn, Timestamp.of(msg.time_us, msg.txn_id))

    # -- duplicate handling ------------------------------------------------------------------

    def _resend_logged_replies(self, sim: Simulator, txn_id: TxnId):
        entry = self._find_log(txn_id)
        if entry is None:
            return
        pos = self._log_pos(entry.t)
        if self.is_leader():
            self._send_fast_reply(sim, entry, with_result=True, log_pos=pos)
        else:
            self._send_fast_reply(sim, entry, with_result=False)
            if pos < self.sync_point:
                self._send_slow_reply(sim, entry)

    def _find_pq(self, txn_id: TxnId) -> Optional[PqEntry]:
        if self.state_of.get(txn_id) != "pq":
            return None
        for e in self.pq:
            if e.txn_id == txn_id:
                return e
        return None

    def _find_log(self, txn_id: TxnId) -> Optional[LogEntry]:
        if self.state_of.get(txn_id) != "logged":
            return None
        for e in self.log:
            if e.txn_id == txn_id:
                return e
        return None

    # -- follower log synchronization -------------------------------------------------------------

    def on_log_sync(self, sim: Simulator, src: NodeId, msg: m.LogSync):
        if self.status != NORMAL or msg.g_view != self.g_view or msg.l_view != self.l_view:
            return
        if self.is_leader():
            return
        pos = msg.pos
        if pos > len(self.log) or \
                (pos > 0 and self.log[pos - 1].txn_id != msg.prev_id):
            sim.send(self.id, src, m.LogResyncReq(self.g_view, self.l_view,
                                                  self.sid, self.rid))
            return
        self._apply_sync_slot(pos, msg.txn, msg.t)
        self._refresh_sync_point()
        self._after_sync(sim)

    def _apply_sync_slot(self, pos: int, txn: Transaction, t: Timestamp):
        txn_id = txn.id
        j = pos
        found = None
        while j < len(self.log):
            if self.log[j].txn_id == txn_id:
                found = j
                break
            j += 1
        if found is not None:
            while found > pos:
                self._remove_log_at(pos)    # entries the leader does not have here
                found -= 1
            entry = self.log[pos]
            if entry.t != t:
                self.log_hash ^= digest_of(txn_id, entry.t)
                self.log_hash ^= digest_of(txn_id, t)
                if self.params.hash_mode == hashing.PER_KEY and \
                        txn.local_writes(self.sid, self.params.n_shards):
                    self.perkey.unfold(txn.keys(), digest_of(txn_id, entry.t))
                    self.perkey.fold(txn.keys(), digest_of(txn_id, t))
                if txn_id in self.executed:
                    revoke_txn(self.store, entry.txn, entry.t,
                               self.sid, self.params.n_shards)
                    self.executed.discard(txn_id)
                entry.t = t
                self.slow_sent.pop(txn_id, None)
            entry.synced = True
            return
        # not ahead of pos: take the body from wherever we have it
        pq_entry = self._find_pq(txn_id)
        if pq_entry is not None:
            self._remove_pq(pq_entry)
        self.held.pop(txn_id, None)
        body = self.removed_cache.pop(txn_id, None) or txn
        pre = self.log_hash
        if self.params.hash_mode == hashing.PER_KEY and \
                body.local_writes(self.sid, self.params.n_shards):
            self.perkey.fold(body.keys(), digest_of(txn_id, t))
        entry = LogEntry(body, t, pre_hash=pre, synced=True)
        entry.reply_hash = self._reply_hash(body) \
            if self.params.hash_mode == hashing.PER_KEY else pre
        self.log.insert(pos, entry)
        self.log_hash ^= digest_of(txn_id, t)
        self.state_of[txn_id] = "logged"
        self.slow_sent.pop(txn_id, None)

    def _after_sync(self, sim: Simulator):
        leader = self.leader_node(self.sid)
        sim.send(self.id, leader,
                 m.SyncPointReport(self.g_view, self.l_view, self.sid,
                                   self.rid, self.sync_point))
        if not self.params.inquiry_mode:
            for entry in self.log[:self.sync_point]:
                if self.slow_sent.get(entry.txn_id) != entry.t.time_us:
                    self._send_slow_reply(sim, entry)
        self._execute_committed(sim)

    def _send_slow_reply(self, sim: Simulator, entry: LogEntry):
        self.slow_sent[entry.txn_id] = entry.t.time_us
        self._send_to_coord(sim, entry.txn_id,
                            m.SlowReply(self.g_view, self.l_view, self.sid,
                                        self.rid, entry.txn_id, entry.t,
                                        self.sync_point))

    def on_log_resync_req(self, sim: Simulator, src: NodeId, msg: m.LogResyncReq):
        if msg.g_view != self.g_view or msg.l_view != self.l_view or not self.is_leader():
            return
        entries = tuple((e.txn, e.t) for e in self.log)
        sim.send(self.id, src, m.LogResyncRep(self.g_view, self.l_view, entries))

    def on_log_resync_rep(self, sim: Simulator, msg: m.LogResyncRep):
        if self.status != NORMAL or msg.g_view != self.g_view or msg.l_view != self.l_view:
            return
        self.install_log(msg.entries)
        self.sync_point = len(self.log)
        self._after_sync(sim)

    def install_log(self, entries):
        """Replace the log wholesale (resync, start-view, state transfer)."""
        for e in self.log:
            self.removed_cache[e.txn_id] = e.txn
            if self.state_of.get(e.txn_id) == "logged":
                self.state_of.pop(e.txn_id, None)
        self.log = []
        self.log_hash = hashing.EMPTY_HASH
        self.perkey = PerKeyHashTable()
        self.store = VersionedStore()
        self.executed = set()
        pq_stale = [e for e in self.pq if any(e.txn_id == txn.id for txn, _ in entries)]
        for e in pq_stale:
            self._remove_pq(e)
        for txn, t in entries:
            body = self.removed_cache.pop(txn.id, None) or txn
            pre = self.log_hash
            if self.params.hash_mode == hashing.PER_KEY and \
                    body.local_writes(self.sid, self.params.n_shards):
                self.perkey.fold(body.keys(), digest_of(body.id, t))
            entry = LogEntry(body, t, pre_hash=pre, synced=True)
            entry.reply_hash = self._reply_hash(body) \
                if self.params.hash_mode == hashing.PER_KEY else pre
            self.log.append(entry)
            self.log_hash ^= digest_of(body.id, t)
            self.state_of[body.id] = "logged"
        self.rebuild_maps()

    def rebuild_maps(self):
        self.rmap, self.wmap = {}, {}
        for e in self.log:
            self._stamp_maps(e.txn, e.t)

    # -- sync points and the commit point -----------------------------------------------------------

    def on_sync_point_report(self, sim: Simulator, msg: m.SyncPointReport):
        if msg.g_view != self.g_view or msg.l_view != self.l_view or not self.is_leader():
            return
        cur = self.follower_sps.get(msg.replica, 0)
        self.follower_sps[msg.replica] = max(cur, msg.sync_point)
        self._recompute_commit_point(sim)

    def _recompute_commit_point(self, sim: Simulator):
        if not self.is_leader():
            return
        covers = sorted([len(self.log)] + list(self.follower_sps.values()),
                        reverse=True)
        if len(covers) < self.params.f + 1:
            return
        candidate = covers[self.params.f]
        if candidate > self.commit_point:
            self.commit_point = candidate
            msg = m.CommitPoint(self.g_view, self.l_view, candidate)
            for r in range(self.params.n_replicas):
                if r != self.rid:
                    sim.send(self.id, NodeId.server(self.sid, r), msg)

    def on_commit_point(self, sim: Simulator, msg: m.CommitPoint):
        if self.status != NORMAL or msg.g_view != self.g_view or msg.l_view != self.l_view:
            return
        self.commit_point = max(self.commit_point, msg.commit_point)
        self._execute_committed(sim)

    def _execute_committed(self, sim: Simulator):
        """Followers apply entries once they are both synced and committed."""
        if self.is_leader():
            return
        bound = min(self.commit_point, self.sync_point, len(self.log))
        for entry in self.log[:bound]:
            if entry.txn_id not in self.executed:
                execute_txn(self.store, entry.txn, entry.t,
                            self.sid, self.params.n_shards)
                self.executed.add(entry.txn_id)

    # -- batched slow-reply inquiry ---------------------------------------------------------------------

    def on_sync_point_inquiry(self, sim: Simulator, src: NodeId,
                              msg: m.SyncPointInquiry):
        if self.status != NORMAL:
            return
        sim.send(self.id, src,
                 m.SyncPointInquiryRep(self.g_view, self.l_view, self.sid,
                                       self.rid, self.sync_point))

    # -- coordinator failure detection --------------------------------------------------------------------

    def _check_commit_notice(self, sim: Simulator, txn_id: TxnId):
        if txn_id in self.noticed or txn_id not in self.notice_watch:
            return
        self.notice_watch.discard(txn_id)
        entry = self._find_log(txn_id)
        if entry is None:
            return
        spawn = sim.services.get("spawn_recovery")
        if spawn is not None:
            spawn(sim, entry.txn, entry.t)
