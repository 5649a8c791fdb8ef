"""Workload generation: Zipfian multi-shard increments plus the decomposition
of dependent transactions into one-shot pieces.

Keys are 64-bit integers homed by key mod shard-count.  A generated
transaction touches one key in each of `ops_per_txn` distinct shards, with
key popularity following a Zipfian distribution over each shard's key space.
Lock sentinels for the decomposition live in a disjoint key range above the
data keys, homed with their data key's shard.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .store import APPLIED_KEY
from .types import INCREMENT, READ, WRITE, Transaction, TxnId, make_txn

_zipf_cache = {}


def zipf_cdf(n: int, skew: float) -> np.ndarray:
    """Cumulative rank-probability table for a Zipf(skew) law over n items;
    skew=0 degenerates to uniform."""
    key = (n, round(skew, 6))
    cdf = _zipf_cache.get(key)
    if cdf is None:
        ranks = np.arange(1, n + 1, dtype=np.float64)
        weights = ranks ** -skew if skew > 0 else np.ones(n)
        cdf = np.cumsum(weights)
        cdf /= cdf[-1]
        _zipf_cache[key] = cdf
    return cdf


def zipf_rank(rng: random.Random, cdf: np.ndarray) -> int:
    """Rejection-free draw: invert the precomputed cumulative table."""
    return int(np.searchsorted(cdf, rng.random(), side="left"))


@dataclass
class WorkloadConfig:
    keys_per_shard: int = 1_000_000
    n_shards: int = 3
    ops_per_txn: int = 3
    skew: float = 0.5
    read_fraction: float = 0.0
    interactive_fraction: float = 0.0
    disjoint_keys: bool = False     # every txn draws fresh keys (commutative)
    _fresh_rank: int = 0

    def __post_init__(self):
        if not 0 <= self.skew < 1:
            raise ValueError("skew must lie in [0, 1)")
        if self.ops_per_txn < 1:
            raise ValueError("ops_per_txn must be at least 1")

    def next_fresh_rank(self) -> int:
        self._fresh_rank += 1
        return self._fresh_rank % self.keys_per_shard

    @property
    def lock_base(self) -> int:
        return self.keys_per_shard * self.n_shards


def lock_key(cfg: WorkloadConfig, key: int) -> int:
    """Sentinel lock key co-homed with its data key."""
    return key + cfg.lock_base


def pick_keys(rng: random.Random, cfg: WorkloadConfig, count: int) -> list:
    """`count` keys in distinct shards, Zipfian-ranked within each shard."""
    shards = sorted(rng.sample(range(cfg.n_shards), min(count, cfg.n_shards)))
    cdf = zipf_cdf(cfg.keys_per_shard, cfg.skew)
    keys = []
    for s in shards:
        rank = zipf_rank(rng, cdf)
        keys.append(rank * cfg.n_shards + s)
    return keys


def gen_txn(rng: random.Random, cfg: WorkloadConfig, txn_id: TxnId) -> Transaction:
    """One MicroBench-style one-shot transaction: increments on
    `ops_per_txn` keys across distinct shards (or pure reads for the
    read fraction)."""
    if cfg.disjoint_keys:
        keys = [cfg.next_fresh_rank() * cfg.n_shards + (j % cfg.n_shards)
                for j in range(cfg.ops_per_txn)]
    else:
        keys = pick_keys(rng, cfg, cfg.ops_per_txn)
    if rng.random() < cfg.read_fraction:
        return make_txn(txn_id, keys, (), cfg.n_shards, op=READ)
    return make_txn(txn_id, (), keys, cfg.n_shards, op=INCREMENT,
                    payload={k: 1 for k in keys})


# -- dependent transactions -----------------------------------------------------


@dataclass
class DependentTemplate:
    """A transaction whose write keys derive from the values it reads:
    write F(va, vb) to keys selected by (va, vb)."""
    sources: tuple                  # (a, b)

    def derive_keys(self, cfg: WorkloadConfig, va: int, vb: int) -> tuple:
        a, b = self.sources
        c = ((va + vb) % cfg.keys_per_shard) * cfg.n_shards + a % cfg.n_shards
        d = ((va * 31 + vb + 7) % cfg.keys_per_shard) * cfg.n_shards + b % cfg.n_shards
        return c, d

    def derive_values(self, va: int, vb: int) -> tuple:
        return va + vb + 1, va - vb + 2


def run_template_serially(cfg: WorkloadConfig, template: DependentTemplate,
                          store: dict) -> dict:
    """Oracle: the template applied atomically against a plain dict."""
    a, b = template.sources
    va, vb = store.get(a, 0), store.get(b, 0)
    c, d = template.derive_keys(cfg, va, vb)
    fc, fd = template.derive_values(va, vb)
    store[c] = fc
    store[d] = fd
    return {"sources": (va, vb), "writes": {c: fc, d: fd}}


@dataclass
class TemplateDriver:
    """Client-side state machine executing one dependent template as three
    one-shot transactions: lock+read the sources, validate-and-write the
    derived keys, unlock.  A failed validation or lock releases everything
    and retries from the start."""

    cfg: WorkloadConfig
    template: DependentTemplate
    coordinator: object
    budget: int = 3
    attempts: int = 0
    phase: str = "idle"
    done: bool = False
    aborted: bool = False
    retry_after_unlock: bool = False
    snapshot: Optional[tuple] = None
    writes: dict = field(default_factory=dict)
    in_flight: Optional[TxnId] = None

    def start(self, sim):
        self.attempts += 1
        a, b = self.template.sources
        la, lb = lock_key(self.cfg, a), lock_key(self.cfg, b)
        txn = make_txn(self.coordinator.next_txn_id(),
                       read_set=(a, b), write_set=(la, lb),
                       n_shards=self.cfg.n_shards, op=INCREMENT,
                       payload={la: 1, lb: 1})
        self.phase = "lock"
        self._submit(sim, txn)

    def _submit(self, sim, txn):
        self.in_flight = txn.id
        hooks = sim.services.setdefault("commit_hooks", {})
        hooks[txn.id] = self.on_commit
        self.coordinator.submit(sim, txn)

    def on_commit(self, sim, txn_id: TxnId, results: dict):
        if txn_id != self.in_flight:
            return
        a, b = self.template.sources
        la, lb = lock_key(self.cfg, a), lock_key(self.cfg, b)
        if self.phase == "lock":
            if results[la] != 0 or results[lb] != 0:
                self._unlock(sim, retry=True)   # contended; back off and retry
                return
            va, vb = results[a], results[b]
            self.snapshot = (va, vb)
            c, d = self.template.derive_keys(self.cfg, va, vb)
            fc, fd = self.template.derive_values(va, vb)
            self.writes = {c: fc, d: fd}
            txn = make_txn(self.coordinator.next_txn_id(),
                           read_set=(a, b), write_set=(c, d),
                           n_shards=self.cfg.n_shards, op=WRITE,
                           payload=self.writes, requires={a: va, b: vb})
            self.phase = "write"
            self._submit(sim, txn)
        elif self.phase == "write":
            ok = results.get(APPLIED_KEY, 0) == 1
            self._unlock(sim, retry=not ok)
        elif self.phase == "unlock":
            if self.retry_after_unlock and self.attempts < self.budget:
                self.start(sim)
            else:
                self.done = True
                self.aborted = self.retry_after_unlock
                self.phase = "idle"

    def _unlock(self, sim, retry: bool):
        a, b = self.template.sources
        la, lb = lock_key(self.cfg, a), lock_key(self.cfg, b)
        txn = make_txn(self.coordinator.next_txn_id(),
                       read_set=(), write_set=(la, lb),
                       n_shards=self.cfg.n_shards, op=INCREMENT,
                       payload={la: -1, lb: -1})
        self.phase = "unlock"
        self.retry_after_unlock = retry
        self._submit(sim, txn)


def decompose(cfg: WorkloadConfig, template: DependentTemplate,
              coordinator, budget: int = 3) -> TemplateDriver:
    """Dependent template -> lock / validate-write / unlock driver."""
    return TemplateDriver(cfg, template, coordinator, budget=budget)
