"""Verification segments and the node-selection policies that staff them.

A block's transactions are cut into segments, each segment checked by a
small replicated committee. Four policies choose committees:

* ``UNIFORM_RANDOM``: keyed by block digest and segment id.
* ``TEMPORAL_WINDOW``: keyed by sender and time window, so two transactions
  from one sender less than ``window`` apart always share a checker.
* ``FRESHNESS_PRIORITY``: newly joined nodes are favoured.
* ``LEAST_RECENTLY_USED``: idle nodes are favoured.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from .hashing import Digest, hash_bytes
from .ledger import Transaction
from .prng import SplitMix64, splitmix64

_U64 = struct.Struct(">Q")
_WINDOW_KEY = struct.Struct(">Qq")


class BadSegmentSize(ValueError):
    pass


class NotEnoughNodes(ValueError):
    pass


class MissingContext(ValueError):
    pass


class PolicyKind(enum.Enum):
    UNIFORM_RANDOM = "uniform"
    TEMPORAL_WINDOW = "temporal"
    FRESHNESS_PRIORITY = "freshness"
    LEAST_RECENTLY_USED = "lru"


@dataclass(frozen=True)
class SelectionPolicy:
    kind: PolicyKind = PolicyKind.UNIFORM_RANDOM
    window: int = 20
    tau_node: float = 50.0
    floor: float = 0.05
    # TemporalWindow committee size per segment, as a multiple of r
    cap_factor: int = 3

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.tau_node <= 0 or self.floor < 0:
            raise ValueError("tau_node must be positive and floor non-negative")
        if self.cap_factor < 1:
            raise ValueError("cap_factor must be at least 1")


@dataclass(frozen=True)
class Segment:
    segment_id: int
    transactions: tuple


@dataclass(frozen=True)
class Assignment:
    """Committee per segment plus, where a policy works per transaction,
    the full checker set of every transaction."""

    node_sets: dict
    quorum: int
    segments: tuple = ()
    txn_checkers: dict = field(default_factory=dict)

    def checkers(self, segment: Segment, tx: Transaction) -> frozenset:
        if tx in self.txn_checkers:
            return self.txn_checkers[tx]
        return frozenset(self.node_sets[segment.segment_id])

    def assigned_nodes(self) -> set:
        nodes = set()
        for members in self.node_sets.values():
            nodes.update(members)
        for members in self.txn_checkers.values():
            nodes.update(members)
        return nodes


@dataclass
class AssignmentContext:
    chain_seed: int
    live_nodes: Sequence[int]
    block_digest: Digest | None = None
    node_ages: Mapping[int, float] | None = None
    last_verified_round: Mapping[int, int] | None = None


def default_quorum(r: int) -> int:
    return math.ceil(2 * r / 3)


def partition_block(transactions: Sequence[Transaction], segment_size: int) -> list[Segment]:
    if segment_size < 1:
        raise BadSegmentSize(f"segment size must be at least 1, got {segment_size}")
    txs = tuple(transactions)
    return [Segment(i, txs[start:start + segment_size])
            for i, start in enumerate(range(0, len(txs), segment_size))]


def keyed_rng(chain_seed: int, key: bytes) -> SplitMix64:
    h = hash_bytes(_U64.pack(chain_seed) + key)
    return SplitMix64(splitmix64(int.from_bytes(h.value[:8], "big")))


def derive_node_set(chain_seed: int, key: bytes, r: int,
                    live_nodes: Sequence[int]) -> tuple:
    """``r`` distinct nodes drawn by rejection, in draw order."""
    if r > len(live_nodes):
        raise NotEnoughNodes(f"need {r} nodes, have {len(live_nodes)}")
    if r == len(live_nodes):
        return tuple(live_nodes)
    rng = keyed_rng(chain_seed, key)
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < r:
        i = rng.randbelow(len(live_nodes))
        if i not in seen:
            seen.add(i)
            chosen.append(live_nodes[i])
    return tuple(chosen)


def window_key(sender: int, window_index: int) -> bytes:
    return _WINDOW_KEY.pack(sender, window_index)


def window_checkers(chain_seed: int, tx: Transaction, window: int, r: int,
                    live_nodes: Sequence[int]) -> tuple:
    """Union of the sender's committees for the transaction's window and the one before."""
    w = tx.timestamp // window
    current = derive_node_set(chain_seed, window_key(tx.sender, w), r, live_nodes)
    previous = derive_node_set(chain_seed, window_key(tx.sender, w - 1), r, live_nodes)
    return tuple(dict.fromkeys(current + previous))


def _segment_key(context: AssignmentContext, segment_id: int) -> bytes:
    if context.block_digest is None:
        raise MissingContext("policy needs the block digest")
    return context.block_digest.value + _U64.pack(segment_id)


def _freshness_pick(rng: SplitMix64, nodes: Sequence[int], weights: Sequence[float],
                    r: int) -> tuple:
    pool = list(nodes)
    weights = list(weights)
    chosen = []
    for _ in range(r):
        target = rng.random() * sum(weights)
        acc = 0.0
        pick = len(pool) - 1
        for i, w in enumerate(weights):
            acc += w
            if target < acc:
                pick = i
                break
        chosen.append(pool.pop(pick))
        weights.pop(pick)
    return tuple(chosen)


def assign_segments(policy: SelectionPolicy, segments: Sequence[Segment],
                    context: AssignmentContext, r: int,
                    quorum: int | None = None) -> Assignment:
    live = list(context.live_nodes)
    if r > len(live):
        raise NotEnoughNodes(f"need {r} nodes, have {len(live)}")
    q = default_quorum(r) if quorum is None else quorum
    if not 1 <= q <= r:
        raise ValueError("quorum must satisfy 1 <= q <= r")
    node_sets: dict[int, tuple] = {}
    txn_checkers: dict[Transaction, frozenset] = {}

    if policy.kind is PolicyKind.UNIFORM_RANDOM:
        for seg in segments:
            node_sets[seg.segment_id] = derive_node_set(
                context.chain_seed, _segment_key(context, seg.segment_id), r, live)

    elif policy.kind is PolicyKind.TEMPORAL_WINDOW:
        cap = policy.cap_factor * r
        for seg in segments:
            committee: dict[int, None] = {}
            for tx in seg.transactions:
                members = window_checkers(context.chain_seed, tx, policy.window, r, live)
                txn_checkers[tx] = frozenset(members)
                committee.update(dict.fromkeys(members))
            # an empty segment still needs a committee to vote on it
            if not committee:
                committee = dict.fromkeys(derive_node_set(
                    context.chain_seed, b"empty" + _U64.pack(seg.segment_id), r, live))
            node_sets[seg.segment_id] = tuple(committee)[:cap]

    elif policy.kind is PolicyKind.FRESHNESS_PRIORITY:
        if context.node_ages is None:
            raise MissingContext("FreshnessPriority needs node ages")
        weights = [math.exp(-context.node_ages[n] / policy.tau_node) + policy.floor
                   for n in live]
        for seg in segments:
            rng = keyed_rng(context.chain_seed, _segment_key(context, seg.segment_id))
            node_sets[seg.segment_id] = _freshness_pick(rng, live, weights, r)

    elif policy.kind is PolicyKind.LEAST_RECENTLY_USED:
        if context.last_verified_round is None:
            raise MissingContext("LeastRecentlyUsed needs last_verified_round")
        usage = dict(context.last_verified_round)
        for seg in segments:
            rng = keyed_rng(context.chain_seed, _segment_key(context, seg.segment_id))
            ties = {n: rng.next_u64() for n in live}
            ranked = sorted(live, key=lambda n: (usage.get(n, -1), ties[n]))
            picked = tuple(ranked[:r])
            node_sets[seg.segment_id] = picked
            # later segments of the same block see these nodes as just used
            marker = max(usage.values(), default=-1) + 1
            for n in picked:
                usage[n] = marker
    else:  # pragma: no cover
        raise ValueError(policy.kind)

    return Assignment(node_sets, q, tuple(segments), txn_checkers)


def update_usage(assignment: Assignment, round_: int,
                 last_verified_round: Mapping[int, int]) -> dict:
    usage = dict(last_verified_round)
    for node in assignment.assigned_nodes():
        usage[node] = round_
    return usage


# --- double-spend detection ---------------------------------------------


def conflicts(tx1: Transaction, tx2: Transaction, balance: int) -> bool:
    """Same sender and either a reused nonce or a joint overdraft."""
    if tx1 == tx2 or tx1.sender != tx2.sender:
        return False
    return tx1.nonce == tx2.nonce or tx1.amount + tx2.amount > balance


def _arrival_key(tx: Transaction):
    return (tx.timestamp, tx.nonce, tx.encode())


def node_views(assignment: Assignment,
               retained: Mapping[int, Iterable[Transaction]] | None = None) -> dict:
    views: dict[int, dict[Transaction, None]] = {}
    for node, txs in (retained or {}).items():
        views.setdefault(node, {}).update(dict.fromkeys(txs))
    for seg in assignment.segments:
        for tx in seg.transactions:
            for node in assignment.checkers(seg, tx):
                views.setdefault(node, {})[tx] = None
    return {node: list(txs) for node, txs in views.items()}


def detect_double_spend(assignment: Assignment, balances: Mapping[int, int],
                        retained: Mapping[int, Iterable[Transaction]] | None = None) -> set:
    """Conflicting pairs seen together by at least one node.

    ``retained`` holds what each node still remembers from the current and
    previous window. Pairs come back ordered (earlier, later); the later
    transaction is the one to reject.
    """
    flagged = set()
    for txs in node_views(assignment, retained).values():
        by_sender: dict[int, list[Transaction]] = {}
        for tx in txs:
            by_sender.setdefault(tx.sender, []).append(tx)
        for sender, group in by_sender.items():
            balance = balances.get(sender, 0)
            for a, b in combinations(sorted(group, key=_arrival_key), 2):
                if conflicts(a, b, balance):
                    flagged.add((a, b))
    return flagged


def rejected_transactions(flagged: Iterable[tuple]) -> set:
    return {later for _, later in flagged}


def block_accepted(assignment: Assignment, approvals: Mapping[int, Iterable[int]]) -> bool:
    """Every segment needs ``quorum`` approvals from its own committee."""
    for seg_id, members in assignment.node_sets.items():
        approved = set(approvals.get(seg_id, ())) & set(members)
        if len(approved) < assignment.quorum:
            return False
    return True


# --- verification cost ---------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    per_txn: float = 1.0
    per_segment: float = 0.0


def measure_verification_latency(n_txns: int, cost: CostModel = CostModel(),
                                 segments: int | None = None) -> float:
    """Monolithic latency when ``segments`` is None, else the sharded latency.

    Segments are checked in parallel; their coordination is serial.
    """
    if segments is None:
        return cost.per_txn * n_txns
    if segments < 1:
        raise ValueError("segments must be at least 1")
    return cost.per_txn * math.ceil(n_txns / segments) + cost.per_segment * segments


# --- experiments ---------------------------------------------------------


def uniform_detection_closed_form(n_nodes: int, r: int) -> float:
    return 1.0 - math.comb(n_nodes - r, r) / math.comb(n_nodes, r)


@dataclass(frozen=True)
class DetectionResult:
    policy: str
    trials: int
    detected: int
    rate: float
    closed_form: float | None


def double_spend_trials(policy: SelectionPolicy, trials: int, n_nodes: int = 100,
                        r: int = 3, seed: int = 0) -> DetectionResult:
    """Conflicting pairs less than one window apart, each in its own block.

    Each pair is an overdraft: balance 100, two spends of 60 with distinct
    nonces.
    """
    rng = SplitMix64(splitmix64(seed))
    live = list(range(n_nodes))
    detected = 0
    for trial in range(trials):
        sender = rng.randbelow(1 << 32)
        t1 = rng.randbelow(1_000_000)
        t2 = t1 + rng.randbelow(policy.window)
        tx1 = Transaction(sender, sender + 1, 60, 0, t1)
        tx2 = Transaction(sender, sender + 2, 60, 1, t2)
        ages = {n: float(rng.randbelow(200)) for n in live}
        usage = {n: rng.randbelow(50) for n in live}
        context = AssignmentContext(seed, live, node_ages=ages, last_verified_round=usage)
        retained: dict[int, list[Transaction]] = {}
        for which, tx in enumerate((tx1, tx2)):
            context.block_digest = hash_bytes(_U64.pack(trial) + _U64.pack(which))
            assignment = assign_segments(policy, partition_block([tx], 1), context, r)
            if which == 0:
                retained = node_views(assignment)
                context.last_verified_round = update_usage(assignment, 50, usage)
        if detect_double_spend(assignment, {sender: 100}, retained):
            detected += 1
    closed = {PolicyKind.UNIFORM_RANDOM: uniform_detection_closed_form(n_nodes, r),
              PolicyKind.TEMPORAL_WINDOW: 1.0}.get(policy.kind)
    return DetectionResult(policy.kind.value, trials, detected, detected / trials if trials else 0.0,
                           closed)


def load_balance_run(policy: SelectionPolicy, seed: int, rounds: int = 1000,
                     initial_nodes: int = 50, join_fraction: float = 0.2,
                     segments_per_round: int = 15, r: int = 3,
                     capacity: int = 1) -> int:
    """Largest verification backlog any node reaches.

    Every round one block of ``segments_per_round`` segments is assigned;
    each node clears ``capacity`` jobs per round. ``join_fraction`` of the
    initial population joins at evenly spaced rounds.
    """
    joiners = int(round(initial_nodes * join_fraction))
    join_rounds = {initial_nodes + j: (j + 1) * rounds // (joiners + 1) for j in range(joiners)}
    joined = {n: 0 for n in range(initial_nodes)}
    queues: dict[int, int] = {n: 0 for n in joined}
    usage: dict[int, int] = {}
    worst = 0
    for round_ in range(rounds):
        for node, at in join_rounds.items():
            if at == round_:
                joined[node] = round_
                queues[node] = 0
        live = sorted(joined)
        context = AssignmentContext(
            seed, live, hash_bytes(_U64.pack(seed) + _U64.pack(round_)),
            {n: float(round_ - joined[n]) for n in live}, usage)
        segs = [Segment(i, ()) for i in range(segments_per_round)]
        assignment = assign_segments(policy, segs, context, r)
        for members in assignment.node_sets.values():
            for n in members:
                queues[n] += 1
        worst = max(worst, max(queues.values()))
        for n in live:
            queues[n] = max(0, queues[n] - capacity)
        usage = update_usage(assignment, round_, usage)
    return worst


def latency_table(n_txns: int, cost: CostModel, segment_counts: Iterable[int]) -> list[dict]:
    mono = measure_verification_latency(n_txns, cost)
    rows = [{"mode": "monolithic", "S": 1, "latency": mono, "speedup": 1.0}]
    for s in segment_counts:
        lat = measure_verification_latency(n_txns, cost, s)
        rows.append({"mode": "sharded", "S": s, "latency": lat, "speedup": mono / lat})
    return rows
