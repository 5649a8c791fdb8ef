"""Failure detector and view-change initiator.

A small replicated record of (g-view, g-vec, g-mode): the leader replica
tracks server heartbeats, and when a shard leader goes quiet it prepares a new
view, collects a majority of prepare acks from its own replicas, then commits
and broadcasts the view-change request to every server.  New leaders are
chosen to be co-located in one region whenever some region has a live replica
of every shard; the planned agreement mode rides along in the record.

The manager's replicas themselves never crash in the simulation; the
prepare/commit exchange still runs so the message flow is exercised.
"""

from __future__ import annotations

from typing import Callable, Optional

from . import messages as m
from .sim import NodeId, Simulator
from .types import DETECTIVE, PREVENTIVE, ViewRecord

HEARTBEAT_US = 50_000
MISS_THRESHOLD = 3
COLOCATE_THRESHOLD_US = 10_000


def find_new_leaders(alive: dict, n_shards: int, n_replicas: int) -> Optional[list]:
    """Pick one replica id per shard from the liveness map.

    Prefer a single replica index live across all shards (those servers share
    a region); otherwise start from the index with the most live servers and
    patch dead slots with any live replica.  Returns None when some shard has
    no live replica at all.
    """
    for r in range(n_replicas):
        if all(alive.get((s, r), False) for s in range(n_shards)):
            return [r] * n_shards
    def live_count(r):
        return sum(1 for s in range(n_shards) if alive.get((s, r), False))
    best = max(range(n_replicas), key=lambda r: (live_count(r), -r))
    leaders = []
    for s in range(n_shards):
        if alive.get((s, best), False):
            leaders.append(best)
        else:
            candidates = [r for r in range(n_replicas) if alive.get((s, r), False)]
            if not candidates:
                return None
            leaders.append(candidates[0])
    return leaders


class ViewManagerReplica:
    def __init__(self, node_id: NodeId, f: int, n_shards: int,
                 initial_view: ViewRecord,
                 owd_lookup: Callable[[NodeId, NodeId], int],
                 mode_override: Optional[str] = None,
                 heartbeat_us: int = HEARTBEAT_US,
                 miss_threshold: int = MISS_THRESHOLD):
        self.id = node_id
        self.v_view = 0
        self.v_rid = node_id.a
        self.f = f
        self.n_shards = n_shards
        self.n_replicas = 2 * f + 1
        self.g_view = initial_view.g_view
        self.g_vec = list(initial_view.g_vec)
        self.g_mode = initial_view.g_mode
        self.prepare_g_view = self.g_view
        self.prepare_g_vec = list(self.g_vec)
        self.prepare_mode = self.g_mode
        self.prepare_quorum = set()
        self.prepare_announced = False
        self.owd_lookup = owd_lookup
        self.mode_override = mode_override
        self.heartbeat_us = heartbeat_us
        self.miss_threshold = miss_threshold
        self.last_heard = {}            # (shard, replica) -> local time
        self.halted = False

    def is_leader(self) -> bool:
        return self.v_rid == self.v_view % self.n_replicas

    def record(self) -> ViewRecord:
        return ViewRecord(self.g_view, tuple(self.g_vec), self.g_mode)

    def start(self, sim: Simulator):
        if self.is_leader():
            now = sim.local_clock(self.id)
            for s in range(self.n_shards):
                for r in range(self.n_replicas):
                    self.last_heard[(s, r)] = now
            sim.schedule_after(self.id, self.heartbeat_us, "check")

    # -- failure detection -------------------------------------------------

    def on_timer(self, sim: Simulator, tag):
        if tag != "check" or not self.is_leader():
            return
        sim.schedule_after(self.id, self.heartbeat_us, "check")
        if self.halted:
            return
        now = sim.local_clock(self.id)
        horizon = self.miss_threshold * self.heartbeat_us
        alive = {sr: (now - heard) <= horizon for sr, heard in self.last_heard.items()}
        leaders_down = [
            s for s in range(self.n_shards)
            if not alive.get((s, self.g_vec[s] % self.n_replicas), False)
        ]
        if not leaders_down:
            return
        planned = {s: self.prepare_g_vec[s] % self.n_replicas
                   for s in range(self.n_shards)}
        if self.prepare_g_view > self.g_view and \
                all(alive.get((s, planned[s]), False) for s in range(self.n_shards)):
            return          # a change covering the failures is already in flight
        self.initiate_view_change(sim, alive)

    def initiate_view_change(self, sim: Simulator, alive: dict):
        leaders = find_new_leaders(alive, self.n_shards, self.n_replicas)
        if leaders is None:
            self.halted = True
            stats = sim.services.get("stats")
            if stats is not None:
                stats.record_halt(sim.now, "a shard has no live replica")
            return
        self.prepare_g_view = max(self.prepare_g_view, self.g_view) + 1
        new_vec = []
        for s in range(self.n_shards):
            r_old = self.g_vec[s] % self.n_replicas
            r_new = leaders[s]
            new_vec.append(self.g_vec[s] + (r_new - r_old) % self.n_replicas)
        self.prepare_g_vec = new_vec
        self.prepare_mode = self._choose_mode(leaders)
        self.prepare_quorum = {self.v_rid}
        self.prepare_announced = False
        msg = m.CmPrepare(self.v_view, self.v_rid, self.prepare_g_view,
                          tuple(self.prepare_g_vec), self.prepare_mode)
        for rid in range(self.n_replicas):
            if rid != self.v_rid:
                sim.send(self.id, NodeId.view_manager(rid), msg)

    def _choose_mode(self, leaders) -> str:
        if self.mode_override in (PREVENTIVE, DETECTIVE):
            return self.mode_override
        nodes = [NodeId.server(s, leaders[s]) for s in range(self.n_shards)]
        worst = 0
        for i, a in enumerate(nodes):
            for b in nodes[i + 1:]:
                worst = max(worst, self.owd_lookup(a, b))
        return PREVENTIVE if worst <= COLOCATE_THRESHOLD_US else DETECTIVE

    # -- messages ------------------------------------------------------------

    def on_message(self, sim: Simulator, src: NodeId, msg):
        if isinstance(msg, m.Heartbeat):
            self.last_heard[(msg.shard, msg.replica)] = sim.local_clock(self.id)
        elif isinstance(msg, m.CmPrepare):
            self.on_prepare(sim, msg)
        elif isinstance(msg, m.CmPrepareReply):
            self.on_prepare_reply(sim, msg)
        elif isinstance(msg, m.CmCommit):
            self.on_commit(msg)
        elif isinstance(msg, m.InquireReq):
            self.on_inquire(sim, msg)

    def on_prepare(self, sim: Simulator, msg: m.CmPrepare):
        if msg.v_view != self.v_view:
            return
        self.prepare_g_view = msg.prepare_g_view
        self.prepare_g_vec = list(msg.prepare_g_vec)
        self.prepare_mode = msg.prepare_mode
        sim.send(self.id, NodeId.view_manager(msg.v_rid),
                 m.CmPrepareReply(self.v_view, self.v_rid, msg.prepare_g_view,
                                  msg.prepare_g_vec, msg.prepare_mode))

    def on_prepare_reply(self, sim: Simulator, msg: m.CmPrepareReply):
        if msg.v_view != self.v_view or not self.is_leader():
            return
        if msg.prepare_g_view != self.prepare_g_view or \
                tuple(msg.prepare_g_vec) != tuple(self.prepare_g_vec):
            return
        self.prepare_quorum.add(msg.v_rid)
        if len(self.prepare_quorum) >= self.f + 1 and not self.prepare_announced:
            self.prepare_announced = True
            self.g_view = self.prepare_g_view
            self.g_vec = list(self.prepare_g_vec)
            self.g_mode = self.prepare_mode
            self._broadcast_view_change(sim)
            commit = m.CmCommit(self.v_view, self.v_rid, self.g_view,
                                tuple(self.g_vec), self.g_mode)
            for rid in range(self.n_replicas):
                if rid != self.v_rid:
                    sim.send(self.id, NodeId.view_manager(rid), commit)
            stats = sim.services.get("stats")
            if stats is not None:
                stats.record_view_change(sim.now, self.record())

    def _broadcast_view_change(self, sim: Simulator):
        msg = m.ViewChangeReq(self.g_view, tuple(self.g_vec), self.g_mode)
        for s in range(self.n_shards):
            for r in range(self.n_replicas):
                sim.send(self.id, NodeId.server(s, r), msg)

    def on_commit(self, msg: m.CmCommit):
        if msg.v_view != self.v_view:
            return
        if msg.g_view >= self.g_view:
            self.g_view = msg.g_view
            self.g_vec = list(msg.g_vec)
            self.g_mode = msg.g_mode

    def on_inquire(self, sim: Simulator, msg: m.InquireReq):
        if not self.is_leader():
            # followers forward to the leader, which answers the requester
            leader = NodeId.view_manager(self.v_view % self.n_replicas)
            sim.send(self.id, leader, msg)
            return
        sim.send(self.id, msg.requester,
                 m.InquireRep(self.g_view, tuple(self.g_vec), self.g_mode))
