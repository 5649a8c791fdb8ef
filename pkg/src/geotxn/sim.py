"""Deterministic discrete-event simulator.

One event loop over virtual true time (integer microseconds).  Nodes are
registered handler objects; each event runs one handler to completion.  The
network model applies a one-way-delay matrix plus seeded jitter, probabilistic
drops, partitions and per-link extra-delay windows.  Per-node clocks have a
fixed offset and linear drift; nodes only ever see their local clock.

Two runs with the same seed and configuration produce identical event traces.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

COORDINATOR = "coordinator"
SERVER = "server"
VIEW_MANAGER = "view-manager"


class NodeId(NamedTuple):
    kind: str
    a: int      # shard id for servers, index otherwise
    b: int      # replica id for servers, 0 otherwise

    @classmethod
    def server(cls, shard: int, replica: int) -> "NodeId":
        return cls(SERVER, shard, replica)

    @classmethod
    def coordinator(cls, index: int) -> "NodeId":
        return cls(COORDINATOR, index, 0)

    @classmethod
    def view_manager(cls, index: int) -> "NodeId":
        return cls(VIEW_MANAGER, index, 0)

    @property
    def shard(self):
        return self.a

    @property
    def replica(self):
        return self.b

    def __repr__(self):
        if self.kind == SERVER:
            return f"S{self.a}.{self.b}"
        if self.kind == COORDINATOR:
            return f"C{self.a}"
        return f"VM{self.a}"


class ClockModel:
    """local_time(node, t) = t + offset + drift_ppm * t / 1e6, monotone in t."""

    def __init__(self, offsets_us=None, drifts_ppm=None):
        self.offsets_us = dict(offsets_us or {})
        self.drifts_ppm = dict(drifts_ppm or {})

    def local(self, node: NodeId, true_us: int) -> int:
        off = self.offsets_us.get(node, 0)
        drift = self.drifts_ppm.get(node, 0.0)
        if drift:
            return int(true_us + off + true_us * drift / 1e6)
        return true_us + off

    def to_true(self, node: NodeId, local_us: int) -> int:
        off = self.offsets_us.get(node, 0)
        drift = self.drifts_ppm.get(node, 0.0)
        if drift:
            return int(round((local_us - off) / (1.0 + drift / 1e6)))
        return local_us - off


JITTER_EXP = "exp"
JITTER_UNIFORM = "uniform"


@dataclass
class ExtraDelay:
    src: NodeId
    dst: NodeId
    start_us: int
    end_us: int
    extra_us: int


@dataclass
class Partition:
    groups: list                # list of sets of NodeId
    start_us: int
    end_us: int

    def blocks(self, src: NodeId, dst: NodeId, now: int) -> bool:
        if not (self.start_us <= now < self.end_us):
            return False
        gs = gd = None
        for i, g in enumerate(self.groups):
            if src in g:
                gs = i
            if dst in g:
                gd = i
        return gs is not None and gd is not None and gs != gd


class NetModel:
    """One-way delays indexed by node pair, with jitter, drops and partitions.

    Per-(src, dst) FIFO is deliberately not guaranteed: jitter is drawn per
    message, so later sends can overtake earlier ones.
    """

    def __init__(self, owd_us: Callable[[NodeId, NodeId], int],
                 jitter_mean_us: int = 0, jitter_kind: str = JITTER_EXP,
                 jitter_cap_us: Optional[int] = None,
                 drop_probability: float = 0.0):
        self.owd_us = owd_us
        self.jitter_mean_us = jitter_mean_us
        self.jitter_kind = jitter_kind
        self.jitter_cap_us = jitter_cap_us
        self.drop_probability = drop_probability
        self.partitions = []
        self.extra_delays = []

    def base_delay(self, src, dst) -> int:
        return self.owd_us(src, dst)

    def sample_jitter(self, rng: random.Random, base: int) -> int:
        if self.jitter_mean_us <= 0:
            return 0
        if self.jitter_kind == JITTER_UNIFORM:
            j = int(rng.uniform(-self.jitter_mean_us, self.jitter_mean_us))
            return max(j, -base)     # delivery never precedes the send
        j = int(rng.expovariate(1.0 / self.jitter_mean_us))
        if self.jitter_cap_us is not None:
            j = min(j, self.jitter_cap_us)
        return j

    def delay(self, rng, src, dst, now) -> int:
        d = self.base_delay(src, dst)
        for w in self.extra_delays:
            if w.src == src and w.dst == dst and w.start_us <= now < w.end_us:
                d += w.extra_us
        return d + self.sample_jitter(rng, d)

    def partitioned(self, src, dst, now) -> bool:
        return any(p.blocks(src, dst, now) for p in self.partitions)


class OwdEstimator:
    """Exponentially weighted mean of one-way-delay probe samples.

    A sample is receiver-local arrival time minus sender-local send time, so
    clock error between the two nodes is absorbed into the estimate; with
    synchronized clocks and no jitter the estimate equals the true delay.
    """

    def __init__(self, alpha: float = 0.125):
        self.alpha = alpha
        self.est = {}

    def observe(self, node: NodeId, sample_us: int):
        prev = self.est.get(node)
        if prev is None:
            self.est[node] = max(0, sample_us)
        else:
            self.est[node] = max(0, int(prev + self.alpha * (sample_us - prev)))

    def estimate(self, node: NodeId) -> Optional[int]:
        return self.est.get(node)


class SimulationStalled(Exception):
    """Event queue exhausted before the stop condition held."""

    def __init__(self, waiting):
        self.waiting = waiting
        super().__init__(f"event queue exhausted; waiting nodes: {waiting}")


@dataclass(order=True)
class _Event:
    due: int
    seq: int
    target: NodeId = field(compare=False)
    payload: object = field(compare=False)
    is_timer: bool = field(compare=False, default=False)
    src: Optional[NodeId] = field(compare=False, default=None)


class Simulator:
    """Single-threaded event loop over virtual true time.

    Node handler objects expose `on_message(sim, src, msg)` and
    `on_timer(sim, tag)`; crashed nodes receive neither until restarted.
    """

    def __init__(self, clock: ClockModel, net: NetModel, seed: int = 0,
                 record_trace: bool = True):
        self.clock = clock
        self.net = net
        self.rng = random.Random(seed)
        self.now = 0
        self._heap = []
        self._seq = 0
        self.nodes = {}
        self.crashed = set()
        self.trace = [] if record_trace else None
        self.services = {}      # wiring hooks (recovery spawner, stats, ...)

    # -- topology ----------------------------------------------------------

    def register(self, node_id: NodeId, handler):
        self.nodes[node_id] = handler

    def is_crashed(self, node_id: NodeId) -> bool:
        return node_id in self.crashed

    # -- clocks ------------------------------------------------------------

    def local_clock(self, node: NodeId) -> int:
        return self.clock.local(node, self.now)

    # -- event scheduling ----------------------------------------------------

    def _push(self, due, target, payload, is_timer, src=None):
        self._seq += 1
        heapq.heappush(self._heap, _Event(due, self._seq, target, payload, is_timer, src))

    def send(self, src: NodeId, dst: NodeId, msg) -> bool:
        """Queue a message; returns False if it was dropped at send time."""
        if dst not in self.nodes:
            raise KeyError(f"unknown destination node {dst}")
        if src in self.crashed:
            return False
        if self.net.partitioned(src, dst, self.now):
            self._trace("part-drop", dst, msg)
            return False
        p = self.net.drop_probability
        if p > 0 and self.rng.random() < p:
            self._trace("drop", dst, msg)
            return False
        self._push(self.now + self.net.delay(self.rng, src, dst, self.now), dst, msg, False, src)
        return True

    def schedule_local(self, node: NodeId, local_due_us: int, tag):
        """Timer expressed on the node's own clock."""
        due = max(self.now, self.clock.to_true(node, local_due_us))
        self._push(due, node, tag, True)

    def schedule_after(self, node: NodeId, delay_us: int, tag):
        self._push(self.now + delay_us, node, tag, True)

    def schedule_at(self, true_due_us: int, fn: Callable):
        """Simulator-level control action (fault injection, load arrival)."""
        self._push(max(self.now, true_due_us), None, fn, True)

    # -- fault injection -----------------------------------------------------

    def crash(self, node: NodeId):
        self.crashed.add(node)
        self._trace("crash", node, None)

    def restart(self, node: NodeId):
        self.crashed.discard(node)
        self._trace("restart", node, None)
        handler = self.nodes[node]
        if hasattr(handler, "on_restart"):
            handler.on_restart(self)

    # -- main loop -----------------------------------------------------------

    def run_until(self, cond: Callable[["Simulator"], bool],
                  max_time_us: Optional[int] = None):
        """Process events in due order until `cond` holds.  Raises
        SimulationStalled when the queue drains first; returns the trace."""
        while not cond(self):
            if not self._heap:
                raise SimulationStalled(self._waiting_report())
            ev = heapq.heappop(self._heap)
            if max_time_us is not None and ev.due > max_time_us:
                heapq.heappush(self._heap, ev)
                self.now = max_time_us
                break
            self.now = ev.due
            if ev.target is None:
                ev.payload(self)
                continue
            if ev.target in self.crashed:
                self._trace("dead-drop", ev.target, ev.payload)
                continue
            handler = self.nodes[ev.target]
            if ev.is_timer:
                self._trace("timer", ev.target, ev.payload)
                handler.on_timer(self, ev.payload)
            else:
                self._trace("deliver", ev.target, ev.payload)
                handler.on_message(self, ev.src, ev.payload)
        return self.trace

    def run_for(self, duration_us: int):
        end = self.now + duration_us
        return self.run_until(lambda s: s.now >= end, max_time_us=end)

    def _waiting_report(self):
        report = []
        for node_id, handler in self.nodes.items():
            if node_id in self.crashed:
                continue
            pending = getattr(handler, "pending_summary", None)
            if pending:
                summary = pending()
                if summary:
                    report.append((node_id, summary))
        return report

    def _trace(self, kind, node, payload):
        if self.trace is not None:
            self.trace.append((self.now, kind, node, type(payload).__name__
                               if payload is not None and not isinstance(payload, str)
                               else payload))
