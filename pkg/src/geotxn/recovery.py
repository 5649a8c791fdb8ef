"""Global view change and failed-server rejoin.

On a view-change request every server quiesces, drains its queue into its log
and ships the log to its shard's new leader.  The new leader rebuilds from any
f+1 logs: part (a) copies the largest synced prefix among the messages with
the freshest last-normal-view; part (b) keeps later entries present on at
least ceil(f/2)+1 of the logs.  New leaders then cross-check the timestamps of
their rebuilt entries with the other shards, adopt the maximum per
transaction, and broadcast start-view.  A rebooted server rejoins by asking
the view manager for the current view and pulling a state transfer from its
shard's leader.
"""

from __future__ import annotations

import bisect

from . import messages as m
from .hashing import digest_of
from .sim import NodeId, Simulator
from .store import execute_txn
from .types import LogEntry, Timestamp

NORMAL = "normal"
VIEWCHANGE = "viewchange"
RECOVERING = "recovering"

REJOIN_BACKOFF_US = 100_000
VERIFY_RETRY_US = 100_000


# -- entering a view change ----------------------------------------------------

def _enter_view_change(server, g_view, g_vec, g_mode) -> m.ViewChange:
    """Quiesce, adopt the new view, and build this server's view-change
    message.  The reported sync point reflects the server's old role: a
    leader's whole pre-drain log is self-consistent, a follower counts its
    leader-confirmed prefix."""
    was_leader = server.is_leader()
    old_sp = len(server.log) if was_leader else server.sync_point
    server.status = VIEWCHANGE
    _drain_pq_into_log(server)
    server.g_view = g_view
    server.g_vec = list(g_vec)
    server.g_mode = g_mode
    server.l_view = server.g_vec[server.sid]
    server.v_quorum = {}
    server.t_quorum = {}
    server.vc_done = False
    server.t_finished = False
    server.t_fetching = set()
    server.agreement = {}
    server.follower_sps = {}
    return m.ViewChange(
        g_view=server.g_view,
        g_vec=tuple(server.g_vec),
        l_view=server.l_view,
        g_mode=server.g_mode,
        replica=server.rid,
        lnv=server.last_normal_view,
        log=tuple((e.txn, e.t) for e in server.log),
        sp=old_sp,
    )


def _drain_pq_into_log(server):
    """Queued transactions are appended behind the log in timestamp order."""
    for entry in sorted(server.pq, key=lambda e: e.t):
        if entry.executed:
            server._revoke_entry(entry)
        log_entry = LogEntry(entry.txn, entry.t, pre_hash=server.log_hash)
        log_entry.reply_hash = log_entry.pre_hash
        log_entry.synced = False
        server.log.append(log_entry)
        server.log_hash ^= digest_of(entry.txn_id, entry.t)
        server.state_of[entry.txn_id] = "logged"
    server.pq = []


def on_view_change_req(server, sim: Simulator, msg: m.ViewChangeReq):
    if msg.g_view <= server.g_view or server.status == RECOVERING:
        return
    vc = _enter_view_change(server, msg.g_view, msg.g_vec, msg.g_mode)
    new_leader = server.leader_node(server.sid)
    if new_leader == server.id:
        on_view_change(server, sim, vc)
    else:
        sim.send(server.id, new_leader, vc)


def on_view_change(server, sim: Simulator, msg: m.ViewChange):
    if msg.g_view < server.g_view or server.status == RECOVERING:
        return
    if msg.g_view > server.g_view:
        # a peer heard the view manager before this server did
        own = _enter_view_change(server, msg.g_view, msg.g_vec, msg.g_mode)
        if server.leader_node(server.sid) == server.id:
            server.v_quorum[server.rid] = own
    if server.status != VIEWCHANGE or server.leader_node(server.sid) != server.id:
        return
    server.v_quorum.setdefault(msg.replica, msg)
    if len(server.v_quorum) >= server.params.f + 1 and not server.vc_done:
        server.vc_done = True
        entries = rebuild_log(list(server.v_quorum.values()), server.params.f)
        server.install_log(entries)
        server.sync_point = len(server.log)
        _mark_all_synced(server)
        if server.params.n_shards > 1:
            send_timestamp_verification(server, sim)
            sim.schedule_after(server.id, VERIFY_RETRY_US, "verify-retry")
            _maybe_finish_verification(server, sim)
        else:
            _leader_start_view(server, sim)


def _mark_all_synced(server):
    for e in server.log:
        e.synced = True


def rebuild_log(msgs, f: int):
    """Merge f+1 quiesced logs into the recovered one; returns ((txn, t) ...).

    Entries beyond the chosen prefix survive only when held by at least
    ceil(f/2)+1 of the messages and stamped above everything in the prefix;
    copies with diverging timestamps unify at the maximum.
    """
    need = (f + 1) // 2 + 1
    best_lnv = max(msg.lnv for msg in msgs)
    chosen = max((x for x in msgs if x.lnv == best_lnv), key=lambda x: x.sp)
    prefix = list(chosen.log[:chosen.sp])
    prefix_ids = {txn.id for txn, _ in prefix}
    max_t_a = max((t for _, t in prefix), default=None)

    candidates = {}         # txn id -> (body, max timestamp seen)
    for msg in msgs:
        for txn, t in msg.log[msg.sp:]:
            if txn.id in prefix_ids:
                continue
            body, best = candidates.get(txn.id, (txn, t))
            candidates[txn.id] = (body, max(best, t))
    survivors = []
    for txn_id, (txn, t) in candidates.items():
        holders = sum(1 for msg in msgs
                      if any(x.id == txn_id for x, _ in msg.log))
        if holders < need:
            continue
        if max_t_a is not None and t <= max_t_a:
            continue
        survivors.append((txn, t))
    survivors.sort(key=lambda pair: pair[1])
    return tuple(prefix) + tuple(survivors)


# -- cross-shard timestamp verification -------------------------------------------

def send_timestamp_verification(server, sim: Simulator):
    for ss in range(server.params.n_shards):
        if ss == server.sid:
            continue
        info = tuple((e.txn_id, e.t.time_us) for e in server.log
                     if ss in e.txn.shards)
        sim.send(server.id, server.leader_node(ss),
                 m.TimestampVerification(server.g_view, server.g_vec[ss],
                                         server.sid, server.rid, info))


def retry_verification(server, sim: Simulator):
    """Peers may still be collecting their own quorums; keep knocking."""
    if server.status != VIEWCHANGE or not server.vc_done or server.t_finished:
        return
    send_timestamp_verification(server, sim)
    for txn_id in sorted(server.t_fetching):
        shard = _holder_of(server, txn_id)
        if shard is not None:
            sim.send(server.id, server.leader_node(shard),
                     m.TxnFetchReq(server.g_view, server.sid, server.rid, txn_id))
    sim.schedule_after(server.id, VERIFY_RETRY_US, "verify-retry")


def _holder_of(server, txn_id):
    for shard, msg in server.t_quorum.items():
        if any(tid == txn_id for tid, _ in msg.info):
            return shard
    return None


def on_timestamp_verification(server, sim: Simulator, msg: m.TimestampVerification):
    if server.status != VIEWCHANGE or msg.g_view != server.g_view \
            or msg.l_view != server.l_view:
        return
    server.t_quorum[msg.shard] = msg
    _maybe_finish_verification(server, sim)


def _maybe_finish_verification(server, sim: Simulator):
    if not server.vc_done or server.t_finished:
        return
    if len(server.t_quorum) < server.params.n_shards - 1:
        return
    known = {e.txn_id for e in server.log}
    for shard, msg in sorted(server.t_quorum.items()):
        for txn_id, _ in msg.info:
            if txn_id not in known and txn_id not in server.t_fetching:
                server.t_fetching.add(txn_id)
                sim.send(server.id, server.leader_node(shard),
                         m.TxnFetchReq(server.g_view, server.sid,
                                       server.rid, txn_id))
    if server.t_fetching:
        return
    _apply_verified_timestamps(server)
    server.t_finished = True
    _leader_start_view(server, sim)


def on_verification_fetch_rep(server, sim: Simulator, msg: m.TxnFetchRep) -> bool:
    if msg.txn_id not in server.t_fetching:
        return False
    if msg.txn is None:
        return True         # peer not ready; the retry timer asks again
    server.t_fetching.discard(msg.txn_id)
    if not any(e.txn_id == msg.txn_id for e in server.log):
        t = Timestamp.of(msg.time_us, msg.txn_id)
        pos = bisect.bisect_left(server.log, t, key=lambda e: e.t)
        entry = LogEntry(msg.txn, t, pre_hash=server.log_hash)
        entry.reply_hash = entry.pre_hash
        entry.synced = True
        server.log.insert(pos, entry)
        server.log_hash ^= digest_of(msg.txn_id, t)
        server.state_of[msg.txn_id] = "logged"
    _maybe_finish_verification(server, sim)
    return True


def _apply_verified_timestamps(server):
    peer_ts = {}
    for msg in server.t_quorum.values():
        for txn_id, t_us in msg.info:
            peer_ts[txn_id] = max(peer_ts.get(txn_id, -1), t_us)
    changed = False
    for e in server.log:
        best = peer_ts.get(e.txn_id)
        if best is not None and best > e.t.time_us:
            server.log_hash ^= digest_of(e.txn_id, e.t)
            e.t = e.t.at(best)
            server.log_hash ^= digest_of(e.txn_id, e.t)
            changed = True
    if changed:
        server.log.sort(key=lambda e: e.t)
    server.rebuild_maps()


# -- resuming normal processing --------------------------------------------------

def _leader_start_view(server, sim: Simulator):
    msg = m.StartView(server.g_view, server.l_view, server.g_mode,
                      server.sid, server.rid,
                      tuple((e.txn, e.t) for e in server.log))
    for r in range(server.params.n_replicas):
        if r != server.rid:
            sim.send(server.id, NodeId.server(server.sid, r), msg)
    server.commit_point = min(server.commit_point, len(server.log))
    for e in server.log:
        result = execute_txn(server.store, e.txn, e.t,
                             server.sid, server.params.n_shards)
        e.result = result
        server.executed.add(e.txn_id)
        server.results[e.txn_id] = result
    server.last_normal_view = server.l_view
    server.status = NORMAL
    stats = sim.services.get("stats")
    if stats is not None:
        stats.record_start_view(sim.now, server.id, server.g_view)


def on_start_view(server, sim: Simulator, msg: m.StartView):
    if server.status != VIEWCHANGE or msg.l_view != server.l_view:
        return
    server.install_log(msg.log)
    server.sync_point = len(server.log)
    _mark_all_synced(server)
    server.commit_point = min(server.commit_point, len(server.log))
    server.last_normal_view = server.l_view
    server.status = NORMAL
    server.slow_sent = {}
    server._execute_committed(sim)


# -- rejoin after a crash -----------------------------------------------------------

def begin_rejoin(server, sim: Simulator):
    if server.status != RECOVERING:
        return
    sim.send(server.id, NodeId.view_manager(0), m.InquireReq(server.id))
    sim.schedule_after(server.id, REJOIN_BACKOFF_US, "rejoin")


def on_view_inquiry_rep(server, sim: Simulator, msg: m.InquireRep):
    if server.status != RECOVERING:
        return
    server.g_view = msg.g_view
    server.g_vec = list(msg.g_vec)
    server.g_mode = msg.g_mode
    server.l_view = server.g_vec[server.sid]
    leader = server.leader_node(server.sid)
    if leader == server.id:
        return      # still named leader; wait out the pending view change
    sim.send(server.id, leader,
             m.StateTransferReq(server.g_view, server.l_view,
                                server.sid, server.rid))


def on_state_transfer_req(server, sim: Simulator, src: NodeId,
                          msg: m.StateTransferReq):
    if server.status != NORMAL:
        return
    if msg.g_view != server.g_view or msg.l_view != server.l_view:
        return
    sim.send(server.id, src,
             m.StateTransferRep(server.g_view, server.l_view,
                                tuple((e.txn, e.t) for e in server.log),
                                len(server.log), server.commit_point))


def on_state_transfer_rep(server, sim: Simulator, msg: m.StateTransferRep):
    if server.status != RECOVERING:
        return
    if msg.g_view != server.g_view or msg.l_view != server.l_view:
        return
    server.install_log(msg.entries)
    server.sync_point = msg.sp
    _mark_all_synced(server)
    server.commit_point = min(msg.commit_point, len(server.log))
    server.last_normal_view = server.l_view
    server.status = NORMAL
    server.slow_sent = {}
    server._execute_committed(sim)
    stats = sim.services.get("stats")
    if stats is not None:
        stats.record_rejoin(sim.now, server.id)
