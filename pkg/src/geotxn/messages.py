"""Wire message schemas.

Every message is a frozen value; a field list here is the external interface
between node implementations.  All intra-protocol messages carry the sender's
global view (and local view where relevant) so receivers can discard traffic
from stale epochs uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .types import Timestamp, Transaction, TxnId

FAST = "fast"
SLOW = "slow"


# -- client path -------------------------------------------------------------

@dataclass(frozen=True)
class TxnMulticast:
    txn: Transaction            # txn.t is the coordinator-assigned timestamp
    coord_node: object          # NodeId to reply to


@dataclass(frozen=True)
class FastReply:
    g_view: int
    l_view: int
    shard: int
    replica: int
    txn_id: TxnId
    t: Timestamp
    hash: int
    result: Optional[tuple] = None      # leader only; sorted (key, value) pairs
    log_pos: Optional[int] = None       # set once the entry holds a log slot


@dataclass(frozen=True)
class SlowReply:
    g_view: int
    l_view: int
    shard: int
    replica: int
    txn_id: TxnId
    t: Timestamp
    sync_point: int


@dataclass(frozen=True)
class CommitNotice:
    """Coordinator -> leaders, fire-and-forget, after a commit decision.
    Its absence after a timeout is how servers suspect a dead coordinator."""
    txn_id: TxnId


# -- leader-to-leader timestamp agreement -------------------------------------

@dataclass(frozen=True)
class TimestampNotification:
    g_view: int
    shard: int
    replica: int
    txn_id: TxnId
    time_us: int
    round: int                  # 1 = local stamp, 2 = agreed confirmation


@dataclass(frozen=True)
class TxnFetchReq:
    g_view: int
    shard: int
    replica: int
    txn_id: TxnId


@dataclass(frozen=True)
class TxnFetchRep:
    g_view: int
    txn_id: TxnId
    txn: Optional[Transaction]
    time_us: Optional[int]


# -- intra-shard log replication ----------------------------------------------

@dataclass(frozen=True)
class LogSync:
    """Leader -> followers after placing one entry.

    `pos` is the entry's slot, `prev_id` the id at pos-1 (chain check).  The
    entry body rides along so a follower that never saw the transaction can
    still apply the slot without a fetch round trip.
    """
    g_view: int
    l_view: int
    shard: int
    replica: int
    pos: int
    prev_id: Optional[TxnId]
    txn: Transaction
    t: Timestamp


@dataclass(frozen=True)
class LogResyncReq:
    g_view: int
    l_view: int
    shard: int
    replica: int


@dataclass(frozen=True)
class LogResyncRep:
    g_view: int
    l_view: int
    entries: tuple              # ((txn, t) ...) — the leader's whole log


@dataclass(frozen=True)
class SyncPointReport:
    g_view: int
    l_view: int
    shard: int
    replica: int
    sync_point: int


@dataclass(frozen=True)
class CommitPoint:
    g_view: int
    l_view: int
    commit_point: int


@dataclass(frozen=True)
class SyncPointInquiry:
    txn_ids: tuple


@dataclass(frozen=True)
class SyncPointInquiryRep:
    g_view: int
    l_view: int
    shard: int
    replica: int
    sync_point: int


# -- view manager --------------------------------------------------------------

@dataclass(frozen=True)
class Heartbeat:
    shard: int
    replica: int


@dataclass(frozen=True)
class CmPrepare:
    v_view: int
    v_rid: int
    prepare_g_view: int
    prepare_g_vec: tuple
    prepare_mode: str


@dataclass(frozen=True)
class CmPrepareReply:
    v_view: int
    v_rid: int
    prepare_g_view: int
    prepare_g_vec: tuple
    prepare_mode: str


@dataclass(frozen=True)
class CmCommit:
    v_view: int
    v_rid: int
    g_view: int
    g_vec: tuple
    g_mode: str


@dataclass(frozen=True)
class ViewChangeReq:
    g_view: int
    g_vec: tuple
    g_mode: str


@dataclass(frozen=True)
class InquireReq:
    requester: object           # NodeId the (possibly forwarded) reply goes to


@dataclass(frozen=True)
class InquireRep:
    g_view: int
    g_vec: tuple
    g_mode: str


# -- global view change ----------------------------------------------------------

@dataclass(frozen=True)
class ViewChange:
    """Server -> new leader of its shard after quiescing."""
    g_view: int
    g_vec: tuple
    l_view: int
    g_mode: str
    replica: int                # sender, for quorum bookkeeping
    lnv: int                    # last-normal-view
    log: tuple                  # ((txn, t) ...)
    sp: int


@dataclass(frozen=True)
class TimestampVerification:
    g_view: int
    l_view: int                 # recipient shard's local view
    shard: int
    replica: int
    info: tuple                 # ((txn_id, time_us) ...) entries involving recipient


@dataclass(frozen=True)
class StartView:
    g_view: int
    l_view: int
    g_mode: str
    shard: int
    replica: int
    log: tuple                  # ((txn, t) ...)


# -- rejoin ------------------------------------------------------------------------

@dataclass(frozen=True)
class StateTransferReq:
    g_view: int
    l_view: int
    shard: int
    replica: int


@dataclass(frozen=True)
class StateTransferRep:
    g_view: int
    l_view: int
    log: tuple                  # ((txn, t) ...)
    sp: int
    commit_point: int


# -- delay probes --------------------------------------------------------------------

@dataclass(frozen=True)
class Probe:
    send_local_us: int


@dataclass(frozen=True)
class ProbeEcho:
    sample_us: int              # receiver local arrival minus sender local send
