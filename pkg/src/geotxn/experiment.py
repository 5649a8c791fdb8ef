"""Experiment wiring: build a cluster from a config, drive a workload through
it, collect statistics and run the correctness checkers.

Node placement follows the evaluation convention that replica r of every
shard lives in region r; the one-way delay between two nodes is the entry for
their regions in the configured matrix.  All randomness (jitter, drops, clock
offsets, workload) derives from the one seed, so a run is reproducible
bit-for-bit from its config.
"""

from __future__ import annotations

import dataclasses
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import checker as chk
from . import messages as msg_mod
from .coordinator import Coordinator, RecoveryCoordinator
from .server import ProtocolParams, Server
from .sim import (ClockModel, ExtraDelay, NetModel, NodeId, Partition,
                  Simulator)
from .types import DETECTIVE, PREVENTIVE, Timestamp, TxnId, ViewRecord
from .viewmanager import COLOCATE_THRESHOLD_US, ViewManagerReplica
from .workload import WorkloadConfig, decompose, DependentTemplate, gen_txn

US_PER_MS = 1000


def _ms(v) -> int:
    return int(round(v * US_PER_MS))


@dataclass
class ExperimentConfig:
    # topology
    f: int = 1
    n_shards: int = 3
    coordinator_regions: tuple = (0,)
    leader_layout: str = "colocated"        # colocated | rotated
    mode: str = "auto"                      # auto | preventive | detective
    # network (milliseconds)
    owd_ms: float = 60.0
    intra_region_owd_ms: float = 1.0
    owd_matrix_ms: Optional[tuple] = None   # full region-by-region override
    jitter_mean_ms: float = 0.0
    jitter_kind: str = "exp"
    jitter_cap_ms: Optional[float] = None
    drop_probability: float = 0.0
    # clocks
    clock_error_ms: float = 0.0             # per-node offsets drawn U(-e, +e)
    clock_offsets_ms: dict = field(default_factory=dict)   # "S0.1" / "C0" / "VM0"
    shard_clock_offsets_ms: Optional[tuple] = None
    drift_ppm: dict = field(default_factory=dict)
    # protocol
    delta_ms: float = 10.0
    headroom_delta_ms: float = 0.0
    tick_ms: float = 1.0
    hash_mode: str = "whole-log"            # whole-log | per-key
    inquiry_mode: bool = False
    simple_quorum: bool = False
    disable_round2: bool = False
    probe_period_ms: float = 100.0
    probe_stop_ms: Optional[float] = None
    retransmit_ms: Optional[float] = None
    commit_notice_timeout_ms: float = 2_000.0
    heartbeat_ms: float = 50.0
    # workload
    keys_per_shard: int = 100_000
    ops_per_txn: int = 3
    skew: float = 0.5
    read_fraction: float = 0.0
    interactive_fraction: float = 0.0
    disjoint_keys: bool = False
    rate_per_coord: float = 100.0           # transactions per second
    duration_ms: float = 2_000.0
    warmup_ms: float = 400.0
    outstanding_cap: int = 64
    # faults: dicts like {"kind": "crash", "node": "S0.0", "at_ms": 1000}
    faults: tuple = ()
    # run control
    seed: int = 1
    checker: bool = True
    drain_ms: float = 30_000.0
    record_trace: bool = False
    output_dir: Optional[str] = None

    @property
    def n_replicas(self) -> int:
        return 2 * self.f + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        for k in ("coordinator_regions", "faults", "owd_matrix_ms",
                  "shard_clock_offsets_ms"):
            if kwargs.get(k) is not None:
                kwargs[k] = tuple(kwargs[k] if not isinstance(kwargs[k][0], list)
                                  else [tuple(row) for row in kwargs[k]]) \
                    if k == "owd_matrix_ms" else tuple(kwargs[k])
        return cls(**kwargs)


def parse_node(s: str) -> NodeId:
    if s.startswith("VM"):
        return NodeId.view_manager(int(s[2:]))
    if s.startswith("S"):
        shard, replica = s[1:].split(".")
        return NodeId.server(int(shard), int(replica))
    if s.startswith("C"):
        return NodeId.coordinator(int(s[1:]))
    raise ValueError(f"cannot parse node name {s!r}")


# -- run-time services ------------------------------------------------------------


class History:
    """Global per-transaction record: opened at first submission, closed once
    at the first commit decision; duplicates are ignored."""

    def __init__(self):
        self.records = {}

    def open(self, txn, now_us: int):
        if txn.id in self.records:
            return
        self.records[txn.id] = {
            "txn": txn, "start_us": now_us, "commit_us": None,
            "t": None, "results": None, "path": None, "retries": 0,
        }

    def close(self, txn_id, now_us, t, results, path, retries):
        rec = self.records.get(txn_id)
        if rec is None or rec["commit_us"] is not None:
            return
        rec.update(commit_us=now_us, t=t, results=results, path=path,
                   retries=retries)

    def committed(self) -> list:
        out = []
        for rec in self.records.values():
            if rec["commit_us"] is None:
                continue
            txn = rec["txn"]
            out.append(chk.HistoryRecord(
                txn_id=txn.id, read_set=txn.read_set, write_set=txn.write_set,
                op=txn.op, payload=txn.payload, requires=txn.requires,
                shards=txn.shards, start_us=rec["start_us"],
                commit_us=rec["commit_us"], t=rec["t"],
                results=tuple(sorted(rec["results"].items(),
                                     key=lambda kv: str(kv[0]))),
                path=rec["path"], retries=rec["retries"]))
        return out

    def open_count(self) -> int:
        return sum(1 for rec in self.records.values()
                   if rec["commit_us"] is None)


class StatsCollector:
    def __init__(self):
        self.start_views = []
        self.view_changes = []
        self.rejoins = []
        self.halts = []
        self.crashes = []
        self.restarts = []

    def record_start_view(self, now, node, g_view):
        self.start_views.append((now, repr(node), g_view))

    def record_view_change(self, now, record):
        self.view_changes.append((now, record.g_view, list(record.g_vec),
                                  record.g_mode))

    def record_rejoin(self, now, node):
        self.rejoins.append((now, repr(node)))

    def record_halt(self, now, reason):
        self.halts.append((now, reason))


# -- cluster assembly ---------------------------------------------------------------


class Cluster:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        n, m = cfg.n_replicas, cfg.n_shards
        self.region_of = {}
        for s in range(m):
            for r in range(n):
                self.region_of[NodeId.server(s, r)] = r
        for i in range(n):
            self.region_of[NodeId.view_manager(i)] = i
        for j, reg in enumerate(cfg.coordinator_regions):
            self.region_of[NodeId.coordinator(j)] = reg

        matrix = cfg.owd_matrix_ms
        if matrix is None:
            matrix = [[cfg.intra_region_owd_ms if a == b else cfg.owd_ms
                       for b in range(n)] for a in range(n)]

        def owd_us(src: NodeId, dst: NodeId) -> int:
            return _ms(matrix[self.region_of[src]][self.region_of[dst]])

        self.owd_us = owd_us
        net = NetModel(owd_us,
                       jitter_mean_us=_ms(cfg.jitter_mean_ms),
                       jitter_kind=cfg.jitter_kind,
                       jitter_cap_us=_ms(cfg.jitter_cap_ms)
                       if cfg.jitter_cap_ms is not None else None,
                       drop_probability=cfg.drop_probability)
        for fault in cfg.faults:
            if fault["kind"] == "partition":
                net.partitions.append(Partition(
                    groups=[{parse_node(x) for x in g} for g in fault["groups"]],
                    start_us=_ms(fault["from_ms"]),
                    end_us=_ms(fault["to_ms"])))
            elif fault["kind"] == "extra_delay":
                net.extra_delays.append(ExtraDelay(
                    src=parse_node(fault["src"]), dst=parse_node(fault["dst"]),
                    start_us=_ms(fault["from_ms"]), end_us=_ms(fault["to_ms"]),
                    extra_us=_ms(fault["extra_ms"])))

        clock = ClockModel(self._clock_offsets(),
                           {parse_node(k): v for k, v in cfg.drift_ppm.items()})
        self.sim = Simulator(clock, net, seed=cfg.seed,
                             record_trace=cfg.record_trace)

        if cfg.leader_layout == "rotated":
            g_vec = tuple(s % n for s in range(m))
        else:
            g_vec = (0,) * m
        mode = cfg.mode
        if mode == "auto":
            leaders = [NodeId.server(s, g_vec[s] % n) for s in range(m)]
            worst = max((owd_us(a, b) for i, a in enumerate(leaders)
                         for b in leaders[i + 1:]), default=0)
            mode = PREVENTIVE if worst <= COLOCATE_THRESHOLD_US else DETECTIVE
        self.initial_view = ViewRecord(0, g_vec, mode)

        params = ProtocolParams(
            f=cfg.f, n_shards=m, tick_us=_ms(cfg.tick_ms),
            hash_mode=cfg.hash_mode,
            heartbeat_us=_ms(cfg.heartbeat_ms),
            commit_notice_timeout_us=_ms(cfg.commit_notice_timeout_ms),
            inquiry_mode=cfg.inquiry_mode,
            disable_round2=cfg.disable_round2)
        self.params = params

        self.servers = {}
        for s in range(m):
            for r in range(n):
                node = NodeId.server(s, r)
                srv = Server(node, params, self.initial_view)
                self.servers[node] = srv
                self.sim.register(node, srv)

        mode_override = None if cfg.mode == "auto" else mode
        self.vmgr = []
        for i in range(n):
            node = NodeId.view_manager(i)
            vm = ViewManagerReplica(node, cfg.f, m, self.initial_view,
                                    owd_lookup=owd_us,
                                    mode_override=mode_override,
                                    heartbeat_us=_ms(cfg.heartbeat_ms))
            self.vmgr.append(vm)
            self.sim.register(node, vm)

        retransmit_us = _ms(cfg.retransmit_ms) if cfg.retransmit_ms else \
            2 * (2 * self._max_owd_us() + _ms(cfg.delta_ms))
        self.coordinators = []
        for j in range(len(cfg.coordinator_regions)):
            node = NodeId.coordinator(j)
            coord = Coordinator(
                node, cfg.f, m, self.initial_view,
                delta_us=_ms(cfg.delta_ms),
                headroom_delta_us=_ms(cfg.headroom_delta_ms),
                probe_period_us=_ms(cfg.probe_period_ms),
                probe_stop_us=_ms(cfg.probe_stop_ms)
                if cfg.probe_stop_ms is not None else None,
                inquiry_mode=cfg.inquiry_mode,
                simple_quorum=cfg.simple_quorum,
                retransmit_us=retransmit_us)
            self.coordinators.append(coord)
            self.sim.register(node, coord)

        self.history = History()
        self.stats = StatsCollector()
        self.recovery_coordinators = []
        self.sim.services["history"] = self.history
        self.sim.services["stats"] = self.stats
        self.sim.services["spawn_recovery"] = self._spawn_recovery
        self.sim.services["on_commit"] = self._dispatch_commit
        self.sim.services["commit_hooks"] = {}
        self.drivers = []

        for srv in self.servers.values():
            srv.start(self.sim)
        for vm in self.vmgr:
            vm.start(self.sim)
        for coord in self.coordinators:
            coord.start(self.sim)
        for fault in cfg.faults:
            if fault["kind"] == "crash":
                node = parse_node(fault["node"])
                self.sim.schedule_at(_ms(fault["at_ms"]),
                                     lambda s, nd=node: (s.crash(nd),
                                                         self.stats.crashes.append((s.now, repr(nd)))))
            elif fault["kind"] == "restart":
                node = parse_node(fault["node"])
                self.sim.schedule_at(_ms(fault["at_ms"]),
                                     lambda s, nd=node: (s.restart(nd),
                                                         self.stats.restarts.append((s.now, repr(nd)))))

    def _clock_offsets(self) -> dict:
        cfg = self.cfg
        offsets = {}
        rng = random.Random(f"{cfg.seed}/clocks")
        for node in self.region_of:
            name = repr(node)
            if name in cfg.clock_offsets_ms:
                offsets[node] = _ms(cfg.clock_offsets_ms[name])
            elif node.kind == "server" and cfg.shard_clock_offsets_ms is not None:
                offsets[node] = _ms(cfg.shard_clock_offsets_ms[node.shard])
            elif cfg.clock_error_ms > 0:
                offsets[node] = int(rng.uniform(-cfg.clock_error_ms,
                                                cfg.clock_error_ms) * US_PER_MS)
            else:
                offsets[node] = 0
        return offsets

    def _max_owd_us(self) -> int:
        nodes = list(self.region_of)
        return max(self.owd_us(a, b) for a in nodes for b in nodes)

    # -- recovery coordinators -------------------------------------------------

    def _spawn_recovery(self, sim: Simulator, txn, t):
        if any(rc.txn.id == txn.id for rc in self.recovery_coordinators):
            return
        idx = 1_000 + len(self.recovery_coordinators)
        node = NodeId.coordinator(idx)
        origin = NodeId.coordinator(txn.id.coord)
        self.region_of[node] = self.region_of.get(origin, 0)
        sim.clock.offsets_us[node] = sim.clock.offsets_us.get(origin, 0)
        rc = RecoveryCoordinator(node, self.cfg.f, self.cfg.n_shards,
                                 self.initial_view, txn,
                                 static_owd=self.owd_us,
                                 delta_us=_ms(self.cfg.delta_ms),
                                 retransmit_us=2 * (2 * self._max_owd_us()
                                                    + _ms(self.cfg.delta_ms)))
        self.recovery_coordinators.append(rc)
        sim.register(node, rc)
        rc.start(sim)

    def _dispatch_commit(self, sim: Simulator, txn_id, results):
        hooks = sim.services["commit_hooks"]
        cb = hooks.pop(txn_id, None)
        if cb is not None:
            cb(sim, txn_id, results)

    # -- workload -----------------------------------------------------------------

    def schedule_load(self):
        cfg = self.cfg
        wl = WorkloadConfig(
            keys_per_shard=cfg.keys_per_shard, n_shards=cfg.n_shards,
            ops_per_txn=cfg.ops_per_txn, skew=cfg.skew,
            read_fraction=cfg.read_fraction,
            interactive_fraction=cfg.interactive_fraction,
            disjoint_keys=cfg.disjoint_keys)
        self.workload = wl
        self.skipped = 0
        for j, coord in enumerate(self.coordinators):
            rng = random.Random(f"{cfg.seed}/load/{j}")
            t = _ms(cfg.warmup_ms)
            end = _ms(cfg.warmup_ms + cfg.duration_ms)
            gap_us = 1e6 / cfg.rate_per_coord
            while t < end:
                self.sim.schedule_at(t, self._arrival(coord, rng, wl))
                t += max(1, int(rng.expovariate(1.0) * gap_us))

    def _arrival(self, coord, rng, wl):
        def fire(sim):
            if len(coord.pending) >= self.cfg.outstanding_cap:
                self.skipped += 1
                return
            if wl.interactive_fraction > 0 and rng.random() < wl.interactive_fraction:
                sources = tuple(sorted(rng.sample(range(wl.n_shards), 2)))
                a = rng.randrange(wl.keys_per_shard) * wl.n_shards + sources[0]
                b = rng.randrange(wl.keys_per_shard) * wl.n_shards + sources[1]
                driver = decompose(wl, DependentTemplate((a, b)), coord)
                self.drivers.append(driver)
                driver.start(sim)
            else:
                coord.submit(sim, gen_txn(rng, wl, coord.next_txn_id()))
        return fire

    # -- running ----------------------------------------------------------------------

    def all_coordinators(self):
        return list(self.coordinators) + list(self.recovery_coordinators)

    def quiesced(self) -> bool:
        if any(c.pending for c in self.all_coordinators()):
            return False
        if any(not d.done for d in self.drivers):
            return False
        return True

    def run(self):
        cfg = self.cfg
        end_load = _ms(cfg.warmup_ms + cfg.duration_ms)
        self.sim.run_until(lambda s: s.now >= end_load, max_time_us=end_load)
        wall = end_load + _ms(cfg.drain_ms)
        self.sim.run_until(lambda s: s.now >= wall or
                           (s.now > end_load and self.quiesced()),
                           max_time_us=wall)

    # -- exports -----------------------------------------------------------------------

    def leader_of(self, shard: int) -> Server:
        rec = self.current_view()
        node = NodeId.server(shard, rec.g_vec[shard] % self.cfg.n_replicas)
        return self.servers[node]

    def current_view(self) -> ViewRecord:
        return self.vmgr[0].record()

    def shard_logs(self) -> dict:
        return {s: [(e.txn_id, e.t.time_us) for e in self.leader_of(s).log]
                for s in range(self.cfg.n_shards)}

    def final_stores(self) -> dict:
        return {s: self.leader_of(s).store.snapshot_latest()
                for s in range(self.cfg.n_shards)}

    def leader_results(self) -> dict:
        return {s: dict(self.leader_of(s).results)
                for s in range(self.cfg.n_shards)}

    def rollback_count(self) -> int:
        return sum(srv.rollbacks for srv in self.servers.values())


# -- statistics -------------------------------------------------------------------------


@dataclass
class RunStats:
    committed: int
    throughput: float
    p50_ms: float
    p90_ms: float
    fast_fraction: float
    rollbacks: int
    retries: int
    skipped: int
    undrained: int
    template_commits: int
    template_aborts: int
    view_changes: int
    recovery_downtime_ms: Optional[float]
    first_commit_after_recovery_ms: Optional[float]

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    config: ExperimentConfig
    stats: RunStats
    verdicts: dict
    history: list
    shard_logs: dict
    final_stores: dict
    leader_results: dict
    events: StatsCollector
    trace: Optional[list]

    @property
    def ok(self) -> bool:
        return all(v.ok for v in self.verdicts.values())


def summarize(cluster: Cluster) -> RunStats:
    cfg = cluster.cfg
    records = cluster.history.committed()
    lat_ms = sorted((r.commit_us - r.start_us) / US_PER_MS for r in records)
    fast = sum(1 for r in records if r.path == "fast")
    p50 = p90 = 0.0
    if lat_ms:
        p50 = lat_ms[int(0.50 * (len(lat_ms) - 1))]
        p90 = lat_ms[int(0.90 * (len(lat_ms) - 1))]
    downtime = first_after = None
    if cluster.stats.crashes and cluster.stats.start_views:
        crash_t = cluster.stats.crashes[0][0]
        sv = max(t for t, _, _ in cluster.stats.start_views)
        commits_after = [r.commit_us for r in records if r.commit_us > sv]
        if commits_after:
            first_after = (min(commits_after) - sv) / US_PER_MS
            downtime = (min(commits_after) - crash_t) / US_PER_MS
    duration_s = cfg.duration_ms / 1000.0
    return RunStats(
        committed=len(records),
        throughput=len(records) / duration_s if duration_s else 0.0,
        p50_ms=p50, p90_ms=p90,
        fast_fraction=fast / len(records) if records else 0.0,
        rollbacks=cluster.rollback_count(),
        retries=sum(r.retries for r in records),
        skipped=cluster.skipped,
        undrained=cluster.history.open_count(),
        template_commits=sum(1 for d in cluster.drivers if d.done and not d.aborted),
        template_aborts=sum(1 for d in cluster.drivers if d.done and d.aborted),
        view_changes=len(cluster.stats.view_changes),
        recovery_downtime_ms=downtime,
        first_commit_after_recovery_ms=first_after,
    )


def run(cfg: ExperimentConfig) -> RunResult:
    cluster = Cluster(cfg)
    cluster.schedule_load()
    cluster.run()
    stats = summarize(cluster)
    records = cluster.history.committed()
    shard_logs = cluster.shard_logs()
    stores = cluster.final_stores()
    verdicts = {}
    if cfg.checker:
        drained = stats.undrained == 0
        verdicts["strict-serializability"] = chk.check_strict_serializability(
            records, shard_logs, stores if drained else None, cfg.n_shards)
        verdicts["linearizability"] = chk.linearizability_per_shard(
            records, cfg.n_shards, stores if drained else None)
    result = RunResult(cfg, stats, verdicts, records, shard_logs, stores,
                       cluster.leader_results(), cluster.stats,
                       cluster.sim.trace)
    if cfg.output_dir:
        write_outputs(result, Path(cfg.output_dir))
    return result


def sweep(param: str, values, base: ExperimentConfig) -> list:
    """One run per value under the shared seed; returns (value, RunResult) rows."""
    rows = []
    for v in values:
        cfg = dataclasses.replace(base, **{param: v})
        rows.append((v, run(cfg)))
    return rows


# -- serialization -----------------------------------------------------------------------


def record_to_json(r: chk.HistoryRecord) -> dict:
    return {
        "coord": r.txn_id.coord, "seq": r.txn_id.seq,
        "reads": sorted(r.read_set), "writes": sorted(r.write_set),
        "op": r.op, "payload": [list(kv) for kv in r.payload],
        "requires": [list(kv) for kv in r.requires],
        "shards": sorted(r.shards),
        "start_us": r.start_us, "commit_us": r.commit_us,
        "t": [r.t.time_us, r.t.coord, r.t.seq],
        "results": [[str(k), v] for k, v in r.results],
        "path": r.path, "retries": r.retries,
    }


def record_from_json(d: dict) -> chk.HistoryRecord:
    results = tuple((int(k) if k.lstrip("-").isdigit() else k, v)
                    for k, v in d["results"])
    return chk.HistoryRecord(
        txn_id=TxnId(d["coord"], d["seq"]),
        read_set=frozenset(d["reads"]), write_set=frozenset(d["writes"]),
        op=d["op"], payload=tuple(tuple(kv) for kv in d["payload"]),
        requires=tuple(tuple(kv) for kv in d["requires"]),
        shards=frozenset(d["shards"]),
        start_us=d["start_us"], commit_us=d["commit_us"],
        t=Timestamp(*d["t"]), results=results,
        path=d["path"], retries=d["retries"])


def write_outputs(result: RunResult, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(result.config.to_dict(), indent=2, sort_keys=True))
    with (outdir / "history.jsonl").open("w") as fh:
        for r in sorted(result.history, key=lambda r: (r.commit_us, r.t)):
            fh.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")
    logs = {str(s): [[tid.coord, tid.seq, t_us] for tid, t_us in order]
            for s, order in result.shard_logs.items()}
    (outdir / "shard_logs.json").write_text(json.dumps(logs, sort_keys=True))
    stores = {str(s): {str(k): v for k, v in store.items()}
              for s, store in result.final_stores.items()}
    (outdir / "final_stores.json").write_text(json.dumps(stores, sort_keys=True))
    summary = {
        "stats": result.stats.to_dict(),
        "verdicts": {k: {"ok": v.ok, "kind": v.kind,
                         "witness": repr(v.witness), "detail": v.detail}
                     for k, v in result.verdicts.items()},
    }
    (outdir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))


def load_history(path: Path) -> list:
    records = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json(json.loads(line)))
    return records
