"""Client-facing coordinator.

Assigns each transaction a future timestamp from measured one-way delays
(send time plus the worst delay across each shard's closest super quorum plus
a fixed margin), multicasts to every replica of every participating shard,
and declares commit once each shard is fast-committed (a super quorum of
matching hash+timestamp replies including the leader) or slow-committed (the
leader's reply plus f follower slow replies), with all leaders quoting the
same timestamp.  Replies from other views are ignored; on a view change every
pending transaction is resubmitted under its original id with a fresh
timestamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import messages as m
from .sim import NodeId, OwdEstimator, Simulator
from .types import Timestamp, Transaction, TxnId, ViewRecord

PROBE_PERIOD_US = 100_000
VM_POLL_US = 200_000
MAX_RETRIES = 25


@dataclass
class PendingTxn:
    txn: Transaction
    t: Timestamp
    start_us: int
    fast: dict = field(default_factory=dict)    # NodeId -> FastReply
    slow: dict = field(default_factory=dict)    # NodeId -> SlowReply
    covered: set = field(default_factory=set)   # NodeIds vouched via inquiry
    retries: int = 0


class Coordinator:
    def __init__(self, node_id: NodeId, f: int, n_shards: int,
                 initial_view: ViewRecord, delta_us: int = 10_000,
                 headroom_delta_us: int = 0, probe_period_us: int = PROBE_PERIOD_US,
                 probe_stop_us: Optional[int] = None,
                 inquiry_mode: bool = False, inquiry_period_us: int = 10_000,
                 simple_quorum: bool = False,
                 retransmit_us: Optional[int] = None):
        self.id = node_id
        self.f = f
        self.n_shards = n_shards
        self.n_replicas = 2 * f + 1
        self.view = initial_view
        self.delta_us = delta_us
        self.headroom_delta_us = headroom_delta_us
        self.owd = OwdEstimator()
        self.pending = {}
        self.committed = set()
        self.seq = 0
        self.probe_period_us = probe_period_us
        self.probe_stop_us = probe_stop_us
        self.inquiry_mode = inquiry_mode
        self.inquiry_period_us = inquiry_period_us
        self.simple_quorum = simple_quorum
        self.retransmit_us = retransmit_us
        self.exhausted = []             # txns that ran out of retries

    # -- wiring ------------------------------------------------------------

    def start(self, sim: Simulator):
        self._probe(sim)
        sim.schedule_after(self.id, VM_POLL_US, "vm-poll")
        if self.inquiry_mode:
            sim.schedule_after(self.id, self.inquiry_period_us, "inquiry")

    def pending_summary(self):
        if self.pending:
            return f"pending={sorted(self.pending)}"
        return None

    def next_txn_id(self) -> TxnId:
        self.seq += 1
        return TxnId(self.id.a, self.seq)

    def _servers(self):
        for s in range(self.n_shards):
            for r in range(self.n_replicas):
                yield NodeId.server(s, r)

    # -- probes and view polling -----------------------------------------------

    def _probe(self, sim: Simulator):
        if self.probe_stop_us is not None and sim.now >= self.probe_stop_us:
            return
        local = sim.local_clock(self.id)
        for node in self._servers():
            sim.send(self.id, node, m.Probe(local))
        sim.schedule_after(self.id, self.probe_period_us, "probe")

    def on_timer(self, sim: Simulator, tag):
        kind = tag if isinstance(tag, str) else tag[0]
        if kind == "probe":
            self._probe(sim)
        elif kind == "vm-poll":
            sim.send(self.id, NodeId.view_manager(0), m.InquireReq(self.id))
            sim.schedule_after(self.id, VM_POLL_US, "vm-poll")
        elif kind == "inquiry":
            self._poll_sync_points(sim)
            sim.schedule_after(self.id, self.inquiry_period_us, "inquiry")
        elif kind == "retransmit":
            self._retransmit(sim, tag[1], tag[2])

    # -- timestamp initialization ----------------------------------------------

    def quorum_size(self) -> int:
        if self.simple_quorum:
            return self.f + 1
        return 1 + self.f + (self.f + 1) // 2

    def init_timestamp(self, txn: Transaction, local_send_us: int) -> Timestamp:
        """Send time plus the largest estimated delay to each shard's closest
        super quorum, plus the fixed margin (and any configured sweep offset)."""
        want = self.quorum_size()
        worst = 0
        for s in sorted(txn.shards):
            ests = sorted(e for e in (self.owd.estimate(NodeId.server(s, r))
                                      for r in range(self.n_replicas))
                          if e is not None)
            if not ests:
                raise RuntimeError(f"no delay estimates for shard {s}")
            take = ests[:want] if len(ests) >= want else ests[:self.f + 1]
            worst = max(worst, take[-1])
        time_us = local_send_us + worst + self.delta_us + self.headroom_delta_us
        return Timestamp.of(max(time_us, local_send_us + 1), txn.id)

    # -- submission ----------------------------------------------------------------

    def submit(self, sim: Simulator, txn: Transaction):
        t = self.init_timestamp(txn, sim.local_clock(self.id))
        stamped = txn.with_timestamp(t)
        p = self.pending.get(txn.id)
        if p is None:
            p = PendingTxn(stamped, t, start_us=sim.now)
            self.pending[txn.id] = p
            history = sim.services.get("history")
            if history is not None:
                history.open(stamped, sim.now)
        else:
            p.txn, p.t = stamped, t
        self._multicast(sim, p)
        if self.retransmit_us:
            sim.schedule_after(self.id, self.retransmit_us,
                               ("retransmit", txn.id, p.retries))

    def _multicast(self, sim: Simulator, p: PendingTxn):
        msg = m.TxnMulticast(p.txn, self.id)
        for s in sorted(p.txn.shards):
            for r in range(self.n_replicas):
                sim.send(self.id, NodeId.server(s, r), msg)

    def _retransmit(self, sim: Simulator, txn_id: TxnId, generation: int):
        p = self.pending.get(txn_id)
        if p is None or p.retries != generation:
            return                      # committed or already resubmitted
        if p.retries >= MAX_RETRIES:
            del self.pending[txn_id]
            self.exhausted.append(txn_id)
            return
        p.retries += 1
        p.fast.clear()
        p.slow.clear()
        p.covered.clear()
        self.submit(sim, p.txn)

    # -- replies --------------------------------------------------------------------

    def on_message(self, sim: Simulator, src: NodeId, msg):
        if isinstance(msg, m.ProbeEcho):
            self.owd.observe(src, msg.sample_us)
        elif isinstance(msg, m.FastReply):
            self.on_fast_reply(sim, src, msg)
        elif isinstance(msg, m.SlowReply):
            self.on_slow_reply(sim, src, msg)
        elif isinstance(msg, m.SyncPointInquiryRep):
            self.on_inquiry_rep(sim, src, msg)
        elif isinstance(msg, m.InquireRep):
            self.on_view_record(sim, ViewRecord(msg.g_view, msg.g_vec, msg.g_mode))

    def _view_ok(self, g_view: int, l_view: int, shard: int) -> bool:
        return g_view == self.view.g_view and l_view == self.view.g_vec[shard]

    def on_fast_reply(self, sim: Simulator, src: NodeId, msg: m.FastReply):
        if not self._view_ok(msg.g_view, msg.l_view, msg.shard):
            return
        p = self.pending.get(msg.txn_id)
        if p is None:
            return                      # duplicate after commit
        p.fast[src] = msg
        self._evaluate(sim, msg.txn_id)

    def on_slow_reply(self, sim: Simulator, src: NodeId, msg: m.SlowReply):
        if not self._view_ok(msg.g_view, msg.l_view, msg.shard):
            return
        p = self.pending.get(msg.txn_id)
        if p is None:
            return
        p.slow[src] = msg
        self._evaluate(sim, msg.txn_id)

    def _evaluate(self, sim: Simulator, txn_id: TxnId):
        p = self.pending.get(txn_id)
        if p is None:
            return
        shard_paths = {}
        leader_replies = {}
        for s in sorted(p.txn.shards):
            leader = NodeId.server(s, self.view.g_vec[s] % self.n_replicas)
            lead = p.fast.get(leader)
            if lead is None or lead.result is None:
                return
            leader_replies[s] = lead
            fastq, slowq = 1, 0
            for r in range(self.n_replicas):
                node = NodeId.server(s, r)
                if node == leader:
                    continue
                sr = p.slow.get(node)
                if (sr is not None and sr.t == lead.t) or node in p.covered:
                    slowq += 1
                    fastq += 1
                    continue
                fr = p.fast.get(node)
                if fr is not None and fr.hash == lead.hash and fr.t == lead.t:
                    fastq += 1
            if fastq >= self.quorum_size():
                shard_paths[s] = m.FAST
            elif slowq >= self.f:
                shard_paths[s] = m.SLOW
            else:
                return
        t_max = max(r.t for r in leader_replies.values())
        if any(r.t != t_max for r in leader_replies.values()):
            # some leaders raised the timestamp; drop the stale replies and wait
            for store in (p.fast, p.slow):
                for node in [n for n, r in store.items() if r.t < t_max]:
                    del store[node]
            return
        results = {}
        applied = None
        for rep in leader_replies.values():
            d = dict(rep.result)
            # conditional-write success is the conjunction over shards
            if "applied" in d:
                flag = d.pop("applied")
                applied = flag if applied is None else min(applied, flag)
            results.update(d)
        if applied is not None:
            results["applied"] = applied
        path = m.FAST if all(v == m.FAST for v in shard_paths.values()) else m.SLOW
        self._commit(sim, p, t_max, results, path)

    def _commit(self, sim: Simulator, p: PendingTxn, t: Timestamp,
                results: dict, path: str):
        txn_id = p.txn.id
        del self.pending[txn_id]
        self.committed.add(txn_id)
        for s in sorted(p.txn.shards):
            leader = NodeId.server(s, self.view.g_vec[s] % self.n_replicas)
            sim.send(self.id, leader, m.CommitNotice(txn_id))
        history = sim.services.get("history")
        if history is not None:
            history.close(txn_id, sim.now, t, results, path, p.retries)
        on_commit = sim.services.get("on_commit")
        if on_commit is not None:
            on_commit(sim, txn_id, results)

    # -- batched slow-reply inquiry -------------------------------------------------

    def _poll_sync_points(self, sim: Simulator):
        """Ask followers for their sync points; coverage past an entry's
        leader-assigned slot counts like a slow reply for it."""
        shards = set()
        for p in self.pending.values():
            shards.update(p.txn.shards)
        for s in sorted(shards):
            leader_rid = self.view.g_vec[s] % self.n_replicas
            for r in range(self.n_replicas):
                if r != leader_rid:
                    sim.send(self.id, NodeId.server(s, r), m.SyncPointInquiry(()))

    def on_inquiry_rep(self, sim: Simulator, src: NodeId,
                       msg: m.SyncPointInquiryRep):
        if not self._view_ok(msg.g_view, msg.l_view, msg.shard):
            return
        for txn_id in list(self.pending):
            p = self.pending[txn_id]
            if msg.shard not in p.txn.shards:
                continue
            leader = NodeId.server(msg.shard,
                                   self.view.g_vec[msg.shard] % self.n_replicas)
            lead = p.fast.get(leader)
            if lead is None or lead.log_pos is None:
                continue
            if msg.sync_point > lead.log_pos:
                p.covered.add(src)
                self._evaluate(sim, txn_id)

    # -- view changes ------------------------------------------------------------------

    def on_view_record(self, sim: Simulator, rec: ViewRecord):
        if rec.g_view <= self.view.g_view:
            return
        self.view = rec
        for txn_id in sorted(self.pending):
            p = self.pending[txn_id]
            p.fast.clear()
            p.slow.clear()
            p.covered.clear()
            p.retries += 1
            self.submit(sim, p.txn)


class RecoveryCoordinator(Coordinator):
    """Stateless stand-in launched by servers when a submitting coordinator
    goes quiet: fetches the current view, then re-runs the commit procedure
    for one transaction under its original id."""

    def __init__(self, node_id: NodeId, f: int, n_shards: int,
                 initial_view: ViewRecord, txn: Transaction,
                 static_owd, **kwargs):
        super().__init__(node_id, f, n_shards, initial_view, **kwargs)
        self.txn = txn
        self.started = False
        for node in self._servers():
            self.owd.observe(node, static_owd(self.id, node))

    def start(self, sim: Simulator):
        sim.send(self.id, NodeId.view_manager(0), m.InquireReq(self.id))
        sim.schedule_after(self.id, VM_POLL_US, "vm-poll")

    def on_message(self, sim: Simulator, src: NodeId, msg):
        if isinstance(msg, m.InquireRep) and not self.started:
            self.started = True
            self.view = ViewRecord(msg.g_view, msg.g_vec, msg.g_mode)
            self.submit(sim, self.txn)
            return
        super().on_message(sim, src, msg)
