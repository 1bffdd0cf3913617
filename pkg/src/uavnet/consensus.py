"""Delegated-validator agreement with a certified two-round commit path.

Validator election is score-based (stake, fuel, sensing, history) with a
stake-weighted proposer draw; agreement runs pre-prepare / prepare / commit
with quorum ceil(2N/3), prepared-certificate locking, and view changes that
carry the sender's certificate so a new proposer re-proposes any possibly
committed block. Timeouts rotate proposers round-robin from the height's
stake-drawn origin.

Wire format (canonical, used for digests and signature preimages):
integers are 8-byte big-endian two's complement, byte strings and UTF-8
strings are 4-byte big-endian length prefixed, sequences are count prefixed
then concatenated, optional fields are a 0x00/0x01 presence byte then the
value. Field order is fixed per record and documented at each encoder.
"""

from __future__ import annotations

import copy
import hashlib
import hmac
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

GENESIS_PARENT = "0" * 64

TX_KINDS = ("coordination", "contract_call", "metric_beacon")

MSG_PRE_PREPARE = "pre_prepare"
MSG_PREPARE = "prepare"
MSG_COMMIT = "commit"
MSG_VIEW_CHANGE = "view_change"
MSG_BLOCK_SYNC = "block_sync"

PHASE_IDLE = "idle"
PHASE_PRE_PREPARED = "pre_prepared"
PHASE_PREPARED = "prepared"
PHASE_COMMITTED = "committed"

MODE_DPOS = "dpos"
MODE_PBFT = "pbft"


class ConsensusError(ValueError):
    """Raised for malformed consensus inputs and configuration."""


# ---- canonical encoding ----

def enc_int(x: int) -> bytes:
    return struct.pack(">q", x)


def enc_bytes(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


def enc_seq(parts: Sequence[bytes]) -> bytes:
    return struct.pack(">I", len(parts)) + b"".join(parts)


def enc_opt(part: Optional[bytes]) -> bytes:
    return b"\x00" if part is None else b"\x01" + part


def _memo(obj, slot: str, compute):
    """Per-instance cache for derived bytes/digests on frozen records; hot
    paths hit the same shared objects thousands of times."""
    value = obj.__dict__.get(slot)
    if value is None:
        value = compute()
        object.__setattr__(obj, slot, value)
    return value


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ConsensusError("truncated record")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def int_(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def bytes_(self) -> bytes:
        (n,) = struct.unpack(">I", self.take(4))
        return self.take(n)

    def str_(self) -> str:
        return self.bytes_().decode("utf-8")

    def count(self) -> int:
        (n,) = struct.unpack(">I", self.take(4))
        return n

    def opt(self) -> bool:
        flag = self.take(1)
        if flag not in (b"\x00", b"\x01"):
            raise ConsensusError("bad presence byte")
        return flag == b"\x01"

    def done(self) -> None:
        if self.off != len(self.buf):
            raise ConsensusError("trailing bytes in record")


# ---- signing ----

class KeyedHashScheme:
    """Keyed-hash signatures for fast deterministic runs. The registry holds
    the shared keys, standing in for a pre-provisioned fleet PKI."""

    name = "keyed_hash"

    def keygen(self, seed32: bytes) -> Tuple[bytes, bytes]:
        sk = hashlib.sha256(b"uavnet-khk" + seed32).digest()
        return sk, hashlib.sha256(sk).digest()

    def sign(self, sk: bytes, msg: bytes) -> bytes:
        return hmac.new(sk, msg, hashlib.sha256).digest()

    def verify(self, sk: bytes, pk: bytes, msg: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(hmac.new(sk, msg, hashlib.sha256).digest(), sig)


class Ed25519Scheme:
    """Real elliptic-curve signatures for realism runs; deterministic, so
    byte-identical replays still hold."""

    name = "ed25519"

    def keygen(self, seed32: bytes) -> Tuple[bytes, bytes]:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
        key = Ed25519PrivateKey.from_private_bytes(seed32)
        from cryptography.hazmat.primitives import serialization
        pk = key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return seed32, pk

    def sign(self, sk: bytes, msg: bytes) -> bytes:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
        return Ed25519PrivateKey.from_private_bytes(sk).sign(msg)

    def verify(self, sk: bytes, pk: bytes, msg: bytes, sig: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
        try:
            Ed25519PublicKey.from_public_bytes(pk).verify(sig, msg)
            return True
        except InvalidSignature:
            return False


SCHEMES = {s.name: s for s in (KeyedHashScheme(), Ed25519Scheme())}


class KeyRegistry:
    """Static key material for every node, derived from the run seed."""

    def __init__(self, scheme_name: str = "keyed_hash"):
        if scheme_name not in SCHEMES:
            raise ConsensusError(f"unknown signature scheme {scheme_name!r}")
        self.scheme = SCHEMES[scheme_name]
        self.keys: Dict[int, Tuple[bytes, bytes]] = {}

    def register(self, node_id: int, seed_material: bytes) -> None:
        seed32 = hashlib.sha256(b"uavnet-key" + seed_material + enc_int(node_id)).digest()
        self.keys[node_id] = self.scheme.keygen(seed32)

    def sign(self, node_id: int, msg: bytes) -> bytes:
        if node_id not in self.keys:
            raise ConsensusError(f"no key for node {node_id}")
        return self.scheme.sign(self.keys[node_id][0], msg)

    def verify(self, node_id: int, msg: bytes, sig: bytes) -> bool:
        if node_id not in self.keys:
            return False
        sk, pk = self.keys[node_id]
        return self.scheme.verify(sk, pk, msg, sig)


# ---- transactions and blocks ----

@dataclass(frozen=True)
class Transaction:
    kind: str
    sender: int
    nonce: int
    timestamp_us: int
    payload: bytes
    signature: bytes = b""

    def __post_init__(self) -> None:
        if self.kind not in TX_KINDS:
            raise ConsensusError(f"unknown transaction kind {self.kind!r}")

    def preimage(self) -> bytes:
        # order: kind, sender, nonce, timestamp, payload
        return _memo(self, "_pre", lambda: (
            b"T" + enc_str(self.kind) + enc_int(self.sender) + enc_int(self.nonce)
            + enc_int(self.timestamp_us) + enc_bytes(self.payload)
        ))

    @property
    def tx_id(self) -> str:
        return _memo(self, "_id",
                     lambda: hashlib.sha256(self.preimage()).hexdigest())


def sign_tx(registry: KeyRegistry, tx: Transaction) -> Transaction:
    return replace(tx, signature=registry.sign(tx.sender, tx.preimage()))


def tx_valid(registry: KeyRegistry, tx: Transaction) -> bool:
    return registry.verify(tx.sender, tx.preimage(), tx.signature)


def encode_tx(tx: Transaction) -> bytes:
    return tx.preimage() + enc_bytes(tx.signature)


def decode_tx(r: _Reader) -> Transaction:
    tag = r.take(1)
    if tag != b"T":
        raise ConsensusError("bad transaction tag")
    kind = r.str_()
    sender = r.int_()
    nonce = r.int_()
    ts = r.int_()
    payload = r.bytes_()
    sig = r.bytes_()
    return Transaction(kind, sender, nonce, ts, payload, sig)


@dataclass(frozen=True)
class EvidenceRecord:
    """Two conflicting signed proposals from one proposer at one (height, view)."""

    proposer: int
    height: int
    view: int
    digest_a: str
    sig_a: bytes
    digest_b: str
    sig_b: bytes

    def encode(self) -> bytes:
        return (b"E" + enc_int(self.proposer) + enc_int(self.height) + enc_int(self.view)
                + enc_str(self.digest_a) + enc_bytes(self.sig_a)
                + enc_str(self.digest_b) + enc_bytes(self.sig_b))


def decode_evidence(r: _Reader) -> EvidenceRecord:
    if r.take(1) != b"E":
        raise ConsensusError("bad evidence tag")
    return EvidenceRecord(r.int_(), r.int_(), r.int_(), r.str_(), r.bytes_(),
                          r.str_(), r.bytes_())


@dataclass(frozen=True)
class Block:
    """The digest covers content only (not view or approvals) so a block
    re-proposed at a later view keeps its identity."""

    height: int
    view: int
    parent: str
    proposer: int
    timestamp_us: int
    txs: Tuple[Transaction, ...] = ()
    evidence: Tuple[EvidenceRecord, ...] = ()
    approvals: Dict[int, bytes] = field(default_factory=dict)

    def content(self) -> bytes:
        # order: height, parent, proposer, timestamp, txs, evidence
        return _memo(self, "_content", lambda: (
            b"B" + enc_int(self.height) + enc_str(self.parent)
            + enc_int(self.proposer) + enc_int(self.timestamp_us)
            + enc_seq([encode_tx(t) for t in self.txs])
            + enc_seq([e.encode() for e in self.evidence])
        ))

    @property
    def digest(self) -> str:
        return _memo(self, "_digest",
                     lambda: hashlib.sha256(self.content()).hexdigest())


def encode_block(b: Block) -> bytes:
    voters = sorted(b.approvals)
    return (b.content() + enc_int(b.view)
            + enc_seq([enc_int(v) + enc_bytes(b.approvals[v]) for v in voters]))


def decode_block(r: _Reader) -> Block:
    if r.take(1) != b"B":
        raise ConsensusError("bad block tag")
    height = r.int_()
    parent = r.str_()
    proposer = r.int_()
    ts = r.int_()
    txs = tuple(decode_tx(r) for _ in range(r.count()))
    evidence = tuple(decode_evidence(r) for _ in range(r.count()))
    view = r.int_()
    approvals = {}
    for _ in range(r.count()):
        voter = r.int_()
        approvals[voter] = r.bytes_()
    return Block(height, view, parent, proposer, ts, txs, evidence, approvals)


# ---- election math ----

@dataclass
class ConsensusParams:
    n_delegates: int = 20
    block_time_s: float = 5.0
    view_timeout_s: float = 2.0
    margin_num: int = 2              # quorum fraction numerator
    margin_den: int = 3
    epoch_blocks: int = 10
    fault_threshold: Optional[int] = None   # None -> floor(N/5)
    removal_threshold: int = 3
    max_block_txs: int = 600
    mempool_capacity: int = 5000
    min_dpos_delegates: int = 15
    min_pbft_nodes: int = 5
    regional_quorum_normal: int = 4   # only applied when N == min_pbft_nodes == 5
    regional_quorum_degraded: int = 3
    score_weights: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    seed: int = 0
    signature_scheme: str = "keyed_hash"

    def theta(self, n: int) -> int:
        """Fault-escalation threshold; defaults to floor(N/5)."""
        return self.fault_threshold if self.fault_threshold is not None else n // 5


def quorum_size(params: ConsensusParams, n: int, degraded: bool = False) -> int:
    """Votes needed to pass: exact ceil(margin * N) in integer arithmetic.

    The five-node regional preset keeps its published fixed quorums
    (4 normal, 3 degraded); every other size uses the ceiling.
    """
    if n <= 0:
        raise ConsensusError(f"validator count must be positive: {n}")
    if n == 5 and params.min_pbft_nodes == 5:
        return params.regional_quorum_degraded if degraded else params.regional_quorum_normal
    return (params.margin_num * n + params.margin_den - 1) // params.margin_den


def validator_score(params: ConsensusParams, stake: float, max_stake: float,
                    fuel: float, sensing: float, history: float) -> float:
    """Weighted fitness; stake is normalized by the fleet max before weighting."""
    w = params.score_weights
    s_norm = stake / max_stake if max_stake > 0.0 else 0.0
    return w[0] * s_norm + w[1] * fuel + w[2] * sensing + w[3] * history


def select_validators(scored: Sequence[Tuple[int, float]], n_delegates: int) -> List[int]:
    """Top-n by score, ties to the lower id; short candidate lists select all."""
    ranked = sorted(scored, key=lambda p: (-p[1], p[0]))
    return sorted(uid for uid, _ in ranked[:n_delegates])


def proposer_probability(stakes: Dict[int, float]) -> Dict[int, float]:
    """Stake-proportional draw weights; an all-zero book degenerates to uniform."""
    if not stakes:
        raise ConsensusError("no validators to weight")
    if any(s < 0.0 for s in stakes.values()):
        raise ConsensusError("negative stake")
    total = sum(stakes.values())
    if total == 0.0:
        u = 1.0 / len(stakes)
        return {uid: u for uid in stakes}
    return {uid: s / total for uid, s in stakes.items()}


def draw_proposer(stakes: Dict[int, float], height: int, seed: int) -> int:
    """Deterministic stake-weighted draw for a height: every node computes the
    same proposer from the shared seed, no message exchange needed."""
    probs = proposer_probability(stakes)
    ids = sorted(probs)
    raw = hashlib.sha256(b"uavnet-draw" + enc_int(seed) + enc_int(height)).digest()
    u = int.from_bytes(raw[:8], "big") / 2.0 ** 64
    acc = 0.0
    for uid in ids:
        acc += probs[uid]
        if u < acc:
            return uid
    return ids[-1]  # guard against accumulated rounding


# ---- mempool ----

class Mempool:
    """Pending transactions, deduplicated by id, arrival order preserved.
    Over capacity the oldest entries fall off first."""

    def __init__(self, registry: KeyRegistry, capacity: int = 5000):
        self.registry = registry
        self.capacity = capacity
        self.txs: Dict[str, Transaction] = {}
        self.rejected_bad_sig = 0

    def add(self, tx: Transaction) -> bool:
        if tx.tx_id in self.txs:
            return False
        if not tx_valid(self.registry, tx):
            self.rejected_bad_sig += 1
            return False
        self.txs[tx.tx_id] = tx
        while len(self.txs) > self.capacity:
            oldest = next(iter(self.txs))
            del self.txs[oldest]
        return True

    def remove(self, tx_ids) -> None:
        for tid in tx_ids:
            self.txs.pop(tid, None)

    def take(self, limit: int) -> List[Transaction]:
        out = []
        for tx in self.txs.values():
            if len(out) >= limit:
                break
            out.append(tx)
        return out

    def __len__(self) -> int:
        return len(self.txs)


# ---- messages ----

@dataclass(frozen=True)
class PreparedCert:
    """Quorum of prepare signatures for one digest at one (height, view)."""

    height: int
    view: int
    digest: str
    sigs: Dict[int, bytes]

    def encode(self) -> bytes:
        voters = sorted(self.sigs)
        return (b"Q" + enc_int(self.height) + enc_int(self.view) + enc_str(self.digest)
                + enc_seq([enc_int(v) + enc_bytes(self.sigs[v]) for v in voters]))


def decode_cert(r: _Reader) -> PreparedCert:
    if r.take(1) != b"Q":
        raise ConsensusError("bad certificate tag")
    height = r.int_()
    view = r.int_()
    digest = r.str_()
    sigs = {}
    for _ in range(r.count()):
        voter = r.int_()
        sigs[voter] = r.bytes_()
    return PreparedCert(height, view, digest, sigs)


@dataclass(frozen=True)
class ConsensusMessage:
    kind: str
    height: int
    view: int
    sender: int
    digest: str = ""
    block: Optional[Block] = None                      # pre_prepare, block_sync
    pc: Optional[PreparedCert] = None                  # view_change lock
    justify_vc: Tuple["ConsensusMessage", ...] = ()    # pre_prepare at view > 0
    signature: bytes = b""

    def preimage(self) -> bytes:
        # order: kind, height, view, sender, digest; block bound via digest
        return _memo(self, "_pre", lambda: (
            b"M" + enc_str(self.kind) + enc_int(self.height) + enc_int(self.view)
            + enc_int(self.sender) + enc_str(self.digest)
        ))


def encode_message(m: ConsensusMessage) -> bytes:
    return (m.preimage()
            + enc_opt(encode_block(m.block) if m.block is not None else None)
            + enc_opt(m.pc.encode() if m.pc is not None else None)
            + enc_seq([encode_message(v) for v in m.justify_vc])
            + enc_bytes(m.signature))


def decode_message(buf: bytes) -> ConsensusMessage:
    r = _Reader(buf)
    m = _decode_message(r)
    r.done()
    return m


def _decode_message(r: _Reader) -> ConsensusMessage:
    if r.take(1) != b"M":
        raise ConsensusError("bad message tag")
    kind = r.str_()
    height = r.int_()
    view = r.int_()
    sender = r.int_()
    digest = r.str_()
    block = decode_block(r) if r.opt() else None
    pc = decode_cert(r) if r.opt() else None
    justify = tuple(_decode_message(r) for _ in range(r.count()))
    sig = r.bytes_()
    return ConsensusMessage(kind, height, view, sender, digest, block, pc, justify, sig)


def make_message(registry: KeyRegistry, kind: str, height: int, view: int,
                 sender: int, digest: str = "", block: Optional[Block] = None,
                 pc: Optional[PreparedCert] = None,
                 justify_vc: Tuple[ConsensusMessage, ...] = ()) -> ConsensusMessage:
    m = ConsensusMessage(kind, height, view, sender, digest, block, pc, justify_vc)
    return replace(m, signature=registry.sign(sender, m.preimage()))


# ---- per-node state ----

class RoundOutcome(Enum):
    COMMITTED = "committed"
    ESCALATE = "escalate"
    FAIL = "fail"


@dataclass
class ConsensusState:
    """One node's replica state. Everything observable by other nodes flows
    through signed messages; callbacks wire in execution and election."""

    node_id: int
    params: ConsensusParams
    registry: KeyRegistry
    validators: List[int]
    stake_book: Dict[int, float] = field(default_factory=dict)
    ledger: List[Block] = field(default_factory=list)
    mode: str = MODE_DPOS
    height: int = 0
    view: int = 0
    phase: str = PHASE_IDLE
    current_proposal: Optional[Block] = None
    seen_digest: Dict[Tuple[int, int], Tuple[str, bytes]] = field(default_factory=dict)
    prepares: Dict[Tuple[int, str], Dict[int, bytes]] = field(default_factory=dict)
    commits: Dict[Tuple[int, str], Dict[int, bytes]] = field(default_factory=dict)
    prepare_voted: Set[int] = field(default_factory=set)   # views voted this height
    commit_voted: Set[int] = field(default_factory=set)
    lock: Optional[PreparedCert] = None
    lock_block: Optional[Block] = None
    view_changes: Dict[int, Dict[int, ConsensusMessage]] = field(default_factory=dict)
    vc_voted: Set[int] = field(default_factory=set)
    known_blocks: Dict[str, Block] = field(default_factory=dict)
    fault_ledger: Dict[int, int] = field(default_factory=dict)
    evicted: Set[int] = field(default_factory=set)
    pending_evidence: Dict[Tuple[int, int, int], EvidenceRecord] = field(default_factory=dict)
    recorded_evidence: Set[Tuple[int, int, int]] = field(default_factory=set)
    local_faults: int = 0
    vote_equivocators: Dict[int, int] = field(default_factory=dict)
    mempool: Optional[Mempool] = None
    execute_block: Optional[Callable[[Block], None]] = None
    epoch_provider: Optional[Callable[[int], List[Tuple[int, float]]]] = None
    # counters for reporting
    blocks_proposed: int = 0
    view_changes_sent: int = 0
    commits_observed: List[Tuple[int, int]] = field(default_factory=list)  # (height, view)

    def tip_digest(self) -> str:
        return self.ledger[-1].digest if self.ledger else GENESIS_PARENT

    def n(self) -> int:
        return len(self.validators)

    def quorum(self) -> int:
        return quorum_size(self.params, self.n(), degraded=self.mode == MODE_PBFT)

    def is_validator(self, uid: int) -> bool:
        return uid in self.validators

    def canonical_key(self):
        """Hashable snapshot of agreement-relevant state, for model checking."""
        return (
            self.height,
            self.view,
            self.phase,
            self.mode,
            self.current_proposal.digest if self.current_proposal else None,
            tuple(sorted(
                (k, tuple(sorted(v))) for k, v in self.prepares.items()
            )),
            tuple(sorted(
                (k, tuple(sorted(v))) for k, v in self.commits.items()
            )),
            tuple(sorted(self.prepare_voted)),
            tuple(sorted(self.commit_voted)),
            (self.lock.view, self.lock.digest) if self.lock else None,
            tuple(sorted(
                (nv, tuple(sorted(senders))) for nv, senders in self.view_changes.items()
            )),
            tuple(sorted(self.vc_voted)),
            tuple(b.digest for b in self.ledger),
        )


def clone_state(state: ConsensusState) -> ConsensusState:
    """Deep copy for exploration; callbacks and key registry stay shared."""
    memo = {
        id(state.registry): state.registry,
        id(state.execute_block): state.execute_block,
        id(state.epoch_provider): state.epoch_provider,
        id(state.params): state.params,
    }
    return copy.deepcopy(state, memo)


def expected_proposer(state: ConsensusState, height: int, view: int) -> int:
    """View 0 comes from the stake draw; later views rotate round-robin."""
    origin = draw_proposer(state_stakes(state), height, state.params.seed)
    if view == 0:
        return origin
    ids = state.validators
    return ids[(ids.index(origin) + view) % len(ids)]


def state_stakes(state: ConsensusState) -> Dict[int, float]:
    """Draw weights over the current set; an empty book means equal weight."""
    if state.stake_book:
        return {uid: state.stake_book.get(uid, 0.0) for uid in state.validators}
    return {uid: 1.0 for uid in state.validators}


# ---- proposing ----

def propose_block(state: ConsensusState, now_us: int) -> Block:
    """Assemble the next block from the node's mempool; an empty pool still
    yields a heartbeat block so the chain keeps cadence."""
    txs: List[Transaction] = []
    if state.mempool is not None:
        for tx in state.mempool.take(state.params.max_block_txs):
            if tx_valid(state.registry, tx):
                txs.append(tx)
            # invalid entries cannot enter the mempool, but re-check anyway
    evidence = tuple(
        state.pending_evidence[k] for k in sorted(state.pending_evidence)
        if k not in state.recorded_evidence
    )
    block = Block(
        height=state.height,
        view=state.view,
        parent=state.tip_digest(),
        proposer=state.node_id,
        timestamp_us=now_us,
        txs=tuple(txs),
        evidence=evidence,
    )
    state.blocks_proposed += 1
    return block


def make_pre_prepare(state: ConsensusState, now_us: int) -> Optional[ConsensusMessage]:
    """Proposal for the node's current (height, view); at views past zero the
    view-change quorum is attached and any certified lock is re-proposed."""
    h, v = state.height, state.view
    justify: Tuple[ConsensusMessage, ...] = ()
    block: Optional[Block] = None
    if v > 0:
        vcs = state.view_changes.get(v, {})
        if len(vcs) < quorum_size(state.params, state.n(), state.mode == MODE_PBFT):
            return None
        justify = tuple(vcs[s] for s in sorted(vcs))
        best: Optional[PreparedCert] = None
        best_block: Optional[Block] = None
        for vc in justify:
            if vc.pc is not None and vc.block is not None:
                if best is None or vc.pc.view > best.view:
                    best, best_block = vc.pc, vc.block
        if state.lock is not None and (best is None or state.lock.view > best.view):
            best, best_block = state.lock, state.lock_block
        if best is not None and best_block is not None:
            block = replace(best_block, view=v)
    if block is None:
        block = propose_block(state, now_us)
        block = replace(block, view=v)
    msg = make_message(state.registry, MSG_PRE_PREPARE, h, v, state.node_id,
                       digest=block.digest, block=block, justify_vc=justify)
    return msg


# ---- validation helpers ----

def _verify_vote_sig(state: ConsensusState, msg: ConsensusMessage) -> bool:
    return state.registry.verify(msg.sender, msg.preimage(), msg.signature)


def _verify_cert(state: ConsensusState, cert: PreparedCert, kind: str) -> bool:
    if len(cert.sigs) < quorum_size(state.params, state.n(), state.mode == MODE_PBFT):
        return False
    for voter, sig in cert.sigs.items():
        if voter not in state.validators:
            return False
        probe = ConsensusMessage(kind, cert.height, cert.view, voter, cert.digest)
        if not state.registry.verify(voter, probe.preimage(), sig):
            return False
    return True


def verify_commit_cert(state: ConsensusState, block: Block) -> bool:
    """A block's approval set must be a commit quorum over its digest."""
    cert = PreparedCert(block.height, block.view, block.digest, dict(block.approvals))
    return _verify_cert(state, cert, MSG_COMMIT)


def _justified_pre_prepare(state: ConsensusState, msg: ConsensusMessage) -> bool:
    """Past view zero a proposal must carry a view-change quorum, and must
    re-propose the highest certified lock found in it, if any."""
    if msg.view == 0:
        return True
    senders = set()
    best: Optional[PreparedCert] = None
    for vc in msg.justify_vc:
        if vc.kind != MSG_VIEW_CHANGE or vc.height != msg.height or vc.view != msg.view:
            return False
        if vc.sender not in state.validators or not _verify_vote_sig(state, vc):
            return False
        if vc.pc is not None:
            if not _verify_cert(state, vc.pc, MSG_PREPARE) or vc.pc.height != msg.height:
                return False
            if best is None or vc.pc.view > best.view:
                best = vc.pc
        senders.add(vc.sender)
    if len(senders) < quorum_size(state.params, state.n(), state.mode == MODE_PBFT):
        return False
    if best is not None and msg.digest != best.digest:
        return False
    return True


def _valid_block(state: ConsensusState, msg: ConsensusMessage) -> bool:
    block = msg.block
    if block is None or block.digest != msg.digest:
        return False
    if block.height != state.height or block.parent != state.tip_digest():
        return False
    for tx in block.txs:
        if not tx_valid(state.registry, tx):
            return False
    for ev in block.evidence:
        if not _evidence_valid(state, ev):
            return False
    return True


def _evidence_valid(state: ConsensusState, ev: EvidenceRecord) -> bool:
    if ev.digest_a == ev.digest_b:
        return False
    for digest, sig in ((ev.digest_a, ev.sig_a), (ev.digest_b, ev.sig_b)):
        probe = ConsensusMessage(MSG_PRE_PREPARE, ev.height, ev.view, ev.proposer, digest)
        if not state.registry.verify(ev.proposer, probe.preimage(), sig):
            return False
    return True


# ---- the round decision (fast path classifier) ----

def dpos_round(params: ConsensusParams, validators: Sequence[int], block: Block,
               votes: Dict[int, str], observed_faults: int) -> RoundOutcome:
    """Classify one approval round: quorum of matching approvals commits,
    too many observed faults escalates, anything else fails into a retry."""
    n = len(validators)
    approvals = sum(
        1 for voter, digest in votes.items()
        if voter in validators and digest == block.digest
    )
    if approvals >= quorum_size(params, n):
        return RoundOutcome.COMMITTED
    if observed_faults > params.theta(n):
        return RoundOutcome.ESCALATE
    return RoundOutcome.FAIL


# ---- the agreement state machine ----

def pbft_handle(state: ConsensusState, msg: ConsensusMessage,
                now_us: int = 0) -> List[ConsensusMessage]:
    """Feed one message to a replica; returns messages to broadcast.

    Self-votes are recorded at emission, so delivering a node's own message
    back is a no-op. Stale heights and views are ignored, not errors.
    """
    if msg.kind == MSG_BLOCK_SYNC:
        return _handle_block_sync(state, msg)
    if msg.height != state.height:
        return []
    if msg.sender not in state.validators:
        state.local_faults += 1
        return []
    if not _verify_vote_sig(state, msg):
        state.local_faults += 1
        return []

    if msg.kind == MSG_PRE_PREPARE:
        return _handle_pre_prepare(state, msg, now_us)
    if msg.kind == MSG_PREPARE:
        return _handle_prepare(state, msg, now_us)
    if msg.kind == MSG_COMMIT:
        return _handle_commit(state, msg, now_us)
    if msg.kind == MSG_VIEW_CHANGE:
        return _handle_view_change(state, msg, now_us)
    raise ConsensusError(f"unknown message kind {msg.kind!r}")


def _record_equivocation(state: ConsensusState, first: Tuple[str, bytes],
                         msg: ConsensusMessage) -> None:
    key = (msg.sender, msg.height, msg.view)
    if key not in state.pending_evidence and key not in state.recorded_evidence:
        state.pending_evidence[key] = EvidenceRecord(
            proposer=msg.sender, height=msg.height, view=msg.view,
            digest_a=first[0], sig_a=first[1],
            digest_b=msg.digest, sig_b=msg.signature,
        )
    state.local_faults += 1


def _handle_pre_prepare(state: ConsensusState, msg: ConsensusMessage,
                        now_us: int) -> List[ConsensusMessage]:
    h, v = msg.height, msg.view
    if v < state.view or state.phase == PHASE_COMMITTED:
        return []
    if msg.sender != expected_proposer(state, h, v):
        state.local_faults += 1
        return []

    seen = state.seen_digest.get((h, v))
    if seen is not None and seen[0] != msg.digest:
        _record_equivocation(state, seen, msg)
        return []

    if not _justified_pre_prepare(state, msg):
        state.local_faults += 1
        return []
    if not _valid_block(state, msg):
        state.local_faults += 1
        return []

    if seen is None:
        state.seen_digest[(h, v)] = (msg.digest, msg.signature)
    state.known_blocks[msg.digest] = msg.block

    # certified lock carried by the re-proposal supersedes an older one
    for vc in msg.justify_vc:
        if vc.pc is not None and (state.lock is None or vc.pc.view > state.lock.view):
            state.lock = vc.pc
            state.lock_block = vc.block

    if v > state.view:
        _enter_view(state, v)

    # lock guard: never prepare a conflicting digest under a live lock
    if state.lock is not None and state.lock.digest != msg.digest:
        return []

    state.current_proposal = msg.block
    if state.phase == PHASE_IDLE:
        state.phase = PHASE_PRE_PREPARED

    out: List[ConsensusMessage] = []
    if state.node_id in state.validators and v not in state.prepare_voted:
        state.prepare_voted.add(v)
        prep = make_message(state.registry, MSG_PREPARE, h, v, state.node_id,
                            digest=msg.digest)
        _tally_prepare(state, prep)
        out.append(prep)
        out.extend(_advance(state, now_us))
    return out


def _tally_prepare(state: ConsensusState, msg: ConsensusMessage) -> None:
    key = (msg.view, msg.digest)
    for (view, digest), voters in state.prepares.items():
        if view == msg.view and digest != msg.digest and msg.sender in voters:
            state.vote_equivocators[msg.sender] = \
                state.vote_equivocators.get(msg.sender, 0) + 1
            state.local_faults += 1
            return
    state.prepares.setdefault(key, {}).setdefault(msg.sender, msg.signature)


def _tally_commit(state: ConsensusState, msg: ConsensusMessage) -> None:
    key = (msg.view, msg.digest)
    for (view, digest), voters in state.commits.items():
        if view == msg.view and digest != msg.digest and msg.sender in voters:
            state.vote_equivocators[msg.sender] = \
                state.vote_equivocators.get(msg.sender, 0) + 1
            state.local_faults += 1
            return
    state.commits.setdefault(key, {}).setdefault(msg.sender, msg.signature)


def _handle_prepare(state: ConsensusState, msg: ConsensusMessage,
                    now_us: int) -> List[ConsensusMessage]:
    _tally_prepare(state, msg)
    return _advance(state, now_us)


def _handle_commit(state: ConsensusState, msg: ConsensusMessage,
                   now_us: int) -> List[ConsensusMessage]:
    _tally_commit(state, msg)
    return _advance(state, now_us)


def _advance(state: ConsensusState, now_us: int) -> List[ConsensusMessage]:
    """Fire any quorum-triggered transitions available right now."""
    out: List[ConsensusMessage] = []
    h, v = state.height, state.view
    q = state.quorum()

    if state.current_proposal is not None and state.phase == PHASE_PRE_PREPARED:
        d = state.current_proposal.digest
        voters = state.prepares.get((v, d), {})
        if len(voters) >= q:
            cert = PreparedCert(h, v, d, dict(voters))
            if state.lock is None or cert.view >= state.lock.view:
                state.lock = cert
                state.lock_block = state.current_proposal
            state.phase = PHASE_PREPARED
            if state.node_id in state.validators and v not in state.commit_voted:
                state.commit_voted.add(v)
                com = make_message(state.registry, MSG_COMMIT, h, v,
                                   state.node_id, digest=d)
                _tally_commit(state, com)
                out.append(com)

    # commit: any digest with a commit quorum and a known body finalizes,
    # even at a view this node has already left
    for (view, digest), voters in sorted(state.commits.items()):
        if len(voters) >= q and digest in state.known_blocks:
            block = state.known_blocks[digest]
            block = replace(block, view=view, approvals=dict(voters))
            out.extend(_finalize(state, block, now_us))
            break
    return out


def _enter_view(state: ConsensusState, new_view: int) -> None:
    state.view = new_view
    state.current_proposal = None
    if state.phase != PHASE_COMMITTED:
        state.phase = PHASE_IDLE


def _handle_view_change(state: ConsensusState, msg: ConsensusMessage,
                        now_us: int) -> List[ConsensusMessage]:
    nv = msg.view
    if nv < state.view:
        return []
    if msg.pc is not None:
        if not _verify_cert(state, msg.pc, MSG_PREPARE) or msg.pc.height != msg.height:
            state.local_faults += 1
            return []
        if msg.block is None or msg.block.digest != msg.pc.digest:
            state.local_faults += 1
            return []
    state.view_changes.setdefault(nv, {}).setdefault(msg.sender, msg)

    out: List[ConsensusMessage] = []
    if nv > state.view and len(state.view_changes[nv]) >= state.quorum():
        _enter_view(state, nv)
        # adopt the strongest certified lock seen in the quorum
        for vc in state.view_changes[nv].values():
            if vc.pc is not None and (state.lock is None or vc.pc.view > state.lock.view):
                state.lock = vc.pc
                state.lock_block = vc.block
        if expected_proposer(state, state.height, nv) == state.node_id \
                and state.node_id in state.validators:
            pp = make_pre_prepare(state, now_us)
            if pp is not None:
                out.extend(_self_deliver_pre_prepare(state, pp, now_us))
                out.append(pp)
    return out


def _self_deliver_pre_prepare(state: ConsensusState, pp: ConsensusMessage,
                              now_us: int) -> List[ConsensusMessage]:
    return _handle_pre_prepare(state, pp, now_us)


def on_timeout(state: ConsensusState, height: int, view: int,
               now_us: int = 0) -> List[ConsensusMessage]:
    """View timer expiry: classify the stalled round, maybe escalate, and
    vote to move to the next view carrying any certified lock."""
    if state.height != height or state.view != view or state.phase == PHASE_COMMITTED:
        return []
    if state.node_id not in state.validators:
        return []

    if state.current_proposal is not None:
        votes = {
            voter: digest
            for (vv, digest), voters in state.prepares.items() if vv == view
            for voter in voters
        }
        outcome = dpos_round(state.params, state.validators,
                             state.current_proposal, votes, state.local_faults)
    else:
        n = state.n()
        outcome = (RoundOutcome.ESCALATE
                   if state.local_faults > state.params.theta(n)
                   else RoundOutcome.FAIL)
    if outcome is RoundOutcome.ESCALATE:
        state.mode = MODE_PBFT

    nv = view + 1
    out: List[ConsensusMessage] = []
    if nv not in state.vc_voted:
        state.vc_voted.add(nv)
        state.view_changes_sent += 1
        vc = make_message(
            state.registry, MSG_VIEW_CHANGE, height, nv, state.node_id,
            digest=state.lock.digest if state.lock else "",
            block=state.lock_block if state.lock else None,
            pc=state.lock,
        )
        out.extend(_handle_view_change(state, vc, now_us))
        out.append(vc)
    return out


# ---- finalization ----

def genesis_block() -> Block:
    """Height-zero anchor, identical on every node."""
    return Block(height=0, view=0, parent=GENESIS_PARENT, proposer=-1, timestamp_us=0)


def finalize(state: ConsensusState, block: Block) -> bool:
    """Verify a block's commit certificate and append it; genesis is exempt
    from the certificate check. A bad certificate is rejected and counted."""
    if block.height != 0 and not verify_commit_cert(state, block):
        state.local_faults += 1
        return False
    before = len(state.ledger)
    _finalize(state, block, block.timestamp_us)
    return len(state.ledger) > before


def _handle_block_sync(state: ConsensusState, msg: ConsensusMessage) -> List[ConsensusMessage]:
    block = msg.block
    if block is None or block.height != state.height:
        return []
    if block.parent != state.tip_digest() or block.digest != msg.digest:
        return []
    if not verify_commit_cert(state, block):
        state.local_faults += 1
        return []
    return _finalize(state, block, block.timestamp_us)


def _finalize(state: ConsensusState, block: Block, now_us: int) -> List[ConsensusMessage]:
    """Append a certified block, execute it, charge skipped proposers, and
    roll the epoch when the boundary passes."""
    if block.height != state.height or block.parent != state.tip_digest():
        return []
    state.ledger.append(block)
    state.commits_observed.append((block.height, block.view))
    state.phase = PHASE_COMMITTED

    for ev in block.evidence:
        key = (ev.proposer, ev.height, ev.view)
        if key not in state.recorded_evidence:
            state.recorded_evidence.add(key)
            state.fault_ledger[ev.proposer] = state.fault_ledger.get(ev.proposer, 0) + 1
        state.pending_evidence.pop(key, None)

    # a block landing at view v proves views 0..v-1 stalled under their proposers
    for skipped in range(block.view):
        culprit = expected_proposer(state, block.height, skipped)
        state.fault_ledger[culprit] = state.fault_ledger.get(culprit, 0) + 1

    if state.mempool is not None:
        state.mempool.remove([t.tx_id for t in block.txs])
    if state.execute_block is not None:
        state.execute_block(block)

    if block.height % state.params.epoch_blocks == 0:
        _roll_epoch(state, block.height)

    # reset round state for the next height
    state.height = block.height + 1
    state.view = 0
    state.phase = PHASE_IDLE
    state.current_proposal = None
    state.prepares.clear()
    state.commits.clear()
    state.prepare_voted.clear()
    state.commit_voted.clear()
    state.view_changes.clear()
    state.vc_voted.clear()
    state.known_blocks.clear()
    state.seen_digest = {k: x for k, x in state.seen_digest.items()
                         if k[0] > block.height}
    state.lock = None
    state.lock_block = None
    return []


def _roll_epoch(state: ConsensusState, height: int) -> None:
    for uid, count in state.fault_ledger.items():
        if count >= state.params.removal_threshold:
            state.evicted.add(uid)
    if state.epoch_provider is None:
        return
    scored = [
        (uid, score) for uid, score in state.epoch_provider(height)
        if uid not in state.evicted
    ]
    new_set = select_validators(scored, state.params.n_delegates)
    if new_set:
        state.validators = new_set


def epoch_validators(scored: Sequence[Tuple[int, float]], evicted: Set[int],
                     n_delegates: int) -> List[int]:
    """Next epoch's validator set: evictions first, then top-n by score."""
    return select_validators([(u, s) for u, s in scored if u not in evicted],
                             n_delegates)


# ---- ledger dump ----

def ledger_json_lines(ledger: Sequence[Block]) -> str:
    """One JSON object per block per line; payloads and signatures in hex."""
    import json
    lines = []
    for b in ledger:
        lines.append(json.dumps({
            "height": b.height,
            "view": b.view,
            "parent": b.parent,
            "proposer": b.proposer,
            "timestamp_us": b.timestamp_us,
            "digest": b.digest,
            "txs": [
                {
                    "tx_id": t.tx_id,
                    "kind": t.kind,
                    "sender": t.sender,
                    "nonce": t.nonce,
                    "timestamp_us": t.timestamp_us,
                    "payload": t.payload.hex(),
                    "signature": t.signature.hex(),
                }
                for t in b.txs
            ],
            "evidence": [
                {"proposer": e.proposer, "height": e.height, "view": e.view,
                 "digest_a": e.digest_a, "digest_b": e.digest_b}
                for e in b.evidence
            ],
            "approvals": {str(k): v.hex() for k, v in sorted(b.approvals.items())},
        }, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
