"""Deterministic discrete-event simulation of the mine, broadcast, verify, append loop.

Time is logical. Events are processed in (time, sequence) order, where the
sequence number is a monotone counter assigned at scheduling, so a run is
a pure function of its configuration and seed.
"""
from __future__ import annotations

import enum
import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

from .hashing import Digest
from .ledger import (
    Block,
    Chain,
    InvalidRemote,
    Transaction,
    AccountState,
    make_genesis,
    new_chain,
    payload_digest,
    replay,
    resolve_fork,
    validate_header,
    validate_transactions,
)
from .prng import SplitMix64, splitmix64
from .sharding import (
    AssignmentContext,
    PolicyKind,
    SelectionPolicy,
    assign_segments,
    block_accepted,
    conflicts,
    default_quorum,
    partition_block,
    update_usage,
    window_checkers,
)
from .hashing import encode_header, block_digest

log = logging.getLogger(__name__)

TXN_STREAM = 0x7478_6E73_7472_6D31
DRILL_STREAM = 0x6472_696C_6C73_7472


class ConfigInvalid(ValueError):
    pass


@dataclass
class SimConfig:
    n_nodes: int = 10
    difficulty: int = 8
    latency: tuple = (1, 5)
    seed: int = 0
    segment_size: int = 1000
    replication: int = 3
    window: int = 20
    trust_threshold: int = 50
    quorum: int | None = None
    run_blocks: int = 30
    run_time: int | None = None
    node_join_schedule: list = field(default_factory=list)
    adversaries: list = field(default_factory=list)
    n_accounts: int = 10
    initial_balance: int = 100
    txn_rate: float = 1.0
    max_amount: int = 20
    max_block_txns: int = 100
    verification: str = "full"
    policy: str = "temporal"
    tau_node: float = 50.0
    freshness_floor: float = 0.05
    drill_interval: int = 0

    def __post_init__(self):
        self.latency = tuple(self.latency)
        self.node_join_schedule = [tuple(p) for p in self.node_join_schedule]

    def validate(self) -> "SimConfig":
        def bad(name, why):
            raise ConfigInvalid(f"{name}: {why}")

        if self.n_nodes < 1:
            bad("n_nodes", "must be at least 1")
        if not 0 <= self.difficulty <= 256:
            bad("difficulty", "must be in [0, 256]")
        if len(self.latency) != 2 or not 0 <= self.latency[0] <= self.latency[1]:
            bad("latency", "must be [min, max] with 0 <= min <= max")
        if not 0 <= self.seed < 1 << 64:
            bad("seed", "must be a 64-bit unsigned integer")
        if self.segment_size < 1:
            bad("segment_size", "must be at least 1")
        if not 1 <= self.replication <= self.n_nodes:
            bad("replication", "must satisfy 1 <= r <= n_nodes")
        if self.quorum is not None and not 1 <= self.quorum <= self.replication:
            bad("quorum", "must satisfy 1 <= q <= r")
        if self.window <= 0:
            bad("window", "must be positive")
        if self.trust_threshold < 0:
            bad("trust_threshold", "must be non-negative")
        if self.run_blocks < 0:
            bad("run_blocks", "must be non-negative")
        if self.run_time is not None and self.run_time < 0:
            bad("run_time", "must be non-negative")
        if self.n_accounts < 2 or self.initial_balance < 0:
            bad("n_accounts", "need at least two accounts and a non-negative balance")
        if self.txn_rate < 0 or self.max_amount < 1 or self.max_block_txns < 0:
            bad("txn_rate", "rates and sizes must be non-negative")
        if self.verification not in ("full", "sharded"):
            bad("verification", "must be 'full' or 'sharded'")
        if self.policy not in {k.value for k in PolicyKind}:
            bad("policy", f"must be one of {[k.value for k in PolicyKind]}")
        if self.tau_node <= 0 or self.freshness_floor < 0:
            bad("tau_node", "must be positive (floor non-negative)")
        if self.drill_interval < 0:
            bad("drill_interval", "must be non-negative")
        for pair in self.node_join_schedule:
            if len(pair) != 2 or not 0 <= pair[0] < self.n_nodes or pair[1] < 0:
                bad("node_join_schedule", f"bad entry {list(pair)}")
        if self.node_join_schedule and all(t > 0 for _, t in self._join_times().items()):
            bad("node_join_schedule", "at least one node must be present at time 0")
        return self

    def _join_times(self) -> dict:
        times = {i: 0 for i in range(self.n_nodes)}
        times.update({int(n): int(t) for n, t in self.node_join_schedule})
        return times

    @property
    def effective_quorum(self) -> int:
        return default_quorum(self.replication) if self.quorum is None else self.quorum

    def selection_policy(self) -> SelectionPolicy:
        return SelectionPolicy(PolicyKind(self.policy), self.window,
                               self.tau_node, self.freshness_floor)

    def genesis(self) -> Block:
        return make_genesis([self.initial_balance] * self.n_accounts)


class EventKind(enum.IntEnum):
    MINE_ATTEMPT = 0
    DELIVER = 1
    TXN_ARRIVAL = 2
    DRILL_TICK = 3
    JOIN = 4
    TAMPER = 5


@dataclass(order=True)
class Event:
    time: int
    sequence: int
    kind: EventKind = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


@dataclass(frozen=True)
class Behavior:
    """Honest when ``kind`` is None; otherwise a malicious voting pattern."""

    kind: str | None = None
    rate: float = 0.0
    stream_seed: int = 0

    @property
    def honest(self) -> bool:
        return self.kind is None


HONEST = Behavior()


@dataclass
class NodeState:
    id: int
    join_time: int
    chain: Chain
    state: AccountState
    rng: SplitMix64
    behavior: Behavior = HONEST
    last_verified_round: int = -1
    live: bool = False
    mempool: dict = field(default_factory=dict)
    included: set = field(default_factory=set)
    rejected: set = field(default_factory=set)
    candidate: Any = None
    behavior_rng: SplitMix64 | None = None


@dataclass(frozen=True)
class TraceRow:
    time: int
    kind: str
    node: int
    detail: str


@dataclass(frozen=True)
class VoteRecord:
    round: int
    time: int
    node: int
    block: str
    segment: int
    approve: bool
    known_invalid: bool
    conflicting: bool
    latency: int


@dataclass
class SimTrace:
    rows: list
    votes: list
    chains: dict
    summary: dict

    def csv_records(self) -> list[dict]:
        return [{"time": r.time, "event_kind": r.kind, "node": r.node, "detail": r.detail}
                for r in self.rows]


def node_seed(global_seed: int, node_id: int) -> int:
    return splitmix64(global_seed ^ node_id)


def _build_candidate(node: NodeState, max_txns: int):
    scratch = node.state.copy()
    picked = []
    for tx in node.mempool:
        if len(picked) >= max_txns:
            break
        if tx in node.included or tx in node.rejected:
            continue
        if scratch.check(tx) is None:
            scratch.apply(tx)
            picked.append(tx)
    txs = tuple(picked)
    return node.chain.tip.digest, txs, payload_digest(txs)


def mine_attempt(node: NodeState, difficulty: int, now: int = 0,
                 max_txns: int = 100) -> Block | None:
    """One puzzle attempt: draw a nonce, hash the candidate header, check the target."""
    if node.candidate is None or node.candidate[0] != node.chain.tip.digest:
        node.candidate = _build_candidate(node, max_txns)
    _, txs, payload = node.candidate
    nonce = node.rng.next_u64()
    tip = node.chain.tip
    header = encode_header(tip.index + 1, tip.digest, payload, now, nonce)
    if block_digest(header).leading_zero_bits() < difficulty:
        return None
    return Block(tip.index + 1, tip.digest, payload, now, nonce, txs)


class Simulation:
    def __init__(self, config: SimConfig):
        try:
            self.config = config.validate()
        except ConfigInvalid:
            raise
        self.now = 0
        self._seq = 0
        self._queue: list[Event] = []
        self.rows: list[TraceRow] = []
        self.votes: list[VoteRecord] = []
        self.round = 0
        self.blocks_produced = 0
        self.forks_observed = 0
        self.mining = True
        self.policy = config.selection_policy()
        self.txn_rng = SplitMix64(splitmix64(config.seed ^ TXN_STREAM))
        self.drill_rng = SplitMix64(splitmix64(config.seed ^ DRILL_STREAM))
        self.sender_nonce: dict[int, int] = {}
        # what each checker remembers, keyed by node, for sharded admission
        self.retained: dict[int, list[Transaction]] = {}
        genesis = config.genesis()
        self.nodes: list[NodeState] = []
        for node_id, join in sorted(config._join_times().items()):
            chain, state = new_chain(genesis, config.difficulty)
            self.nodes.append(NodeState(node_id, join, chain, state,
                                        SplitMix64(node_seed(config.seed, node_id))))
        self.trace("genesis", -1, genesis.digest.hex())
        for node in self.nodes:
            self.schedule(node.join_time, EventKind.JOIN, node=node.id)
        self.schedule(0, EventKind.TXN_ARRIVAL, generated=True)
        if config.drill_interval:
            self.schedule(config.drill_interval, EventKind.DRILL_TICK)

    # -- plumbing --------------------------------------------------------

    def schedule(self, time: int, kind: EventKind, **payload) -> Event:
        if time < self.now:
            raise ValueError(f"cannot schedule at {time} before now={self.now}")
        event = Event(time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def trace(self, kind: str, node: int, detail: str = "") -> None:
        self.rows.append(TraceRow(self.now, kind, node, detail))

    def live_nodes(self) -> list[int]:
        return [n.id for n in self.nodes if n.live]

    def max_height(self) -> int:
        return max(n.chain.height for n in self.nodes)

    def pending(self) -> int:
        return len(self._queue)

    # -- event handlers --------------------------------------------------

    def _on_join(self, event: Event) -> None:
        node = self.nodes[event.payload["node"]]
        donors = [n for n in self.nodes if n.live]
        if donors:
            node.chain, node.state = donors[0].chain, donors[0].state.copy()
            node.included = set(donors[0].included)
            node.mempool = dict(donors[0].mempool)
        node.live = True
        self.trace("join", node.id, f"height={node.chain.height}")
        if self.mining:
            self.schedule(self.now + 1, EventKind.MINE_ATTEMPT, node=node.id)

    def _on_mine(self, event: Event) -> None:
        node = self.nodes[event.payload["node"]]
        if not self.mining or not node.live:
            return
        block = mine_attempt(node, self.config.difficulty, self.now, self.config.max_block_txns)
        if block is not None:
            self.blocks_produced += 1
            self.trace("mined", node.id, f"height={block.index} digest={block.digest.hex()}")
            if self._certify(node, block):
                self._adopt(node, Chain(node.chain.blocks + (block,), node.chain.difficulty),
                            extends=True)
                broadcast_block(self, node.id, block)
        self.schedule(self.now + 1, EventKind.MINE_ATTEMPT, node=node.id)

    def _on_deliver(self, event: Event) -> None:
        node = self.nodes[event.payload["to"]]
        if node.live:
            node_handle_message(self, node, event.payload["chain"])

    def _on_txn(self, event: Event) -> None:
        if not self.mining:
            return
        if event.payload.get("generated"):
            whole, frac = divmod(self.config.txn_rate, 1.0)
            count = int(whole) + (1 if self.txn_rng.random() < frac else 0)
            for _ in range(count):
                self.admit(self._random_txn())
            self.schedule(self.now + 1, EventKind.TXN_ARRIVAL, generated=True)
        else:
            self.admit(event.payload["txn"])

    def _on_drill(self, event: Event) -> None:
        if not self.mining:
            return
        self.fire_drill()
        self.schedule(self.now + self.config.drill_interval, EventKind.DRILL_TICK)

    def _on_tamper(self, event: Event) -> None:
        node = self.nodes[event.payload["node"]]
        height, bit = event.payload["height"], event.payload["bit"]
        if height > node.chain.height:
            self.trace("tamper_skipped", node.id, f"height={height}")
            return
        node.chain = tamper_chain(node.chain, height, bit)
        self.trace("tamper", node.id, f"height={height} bit={bit}")

    # -- transactions ----------------------------------------------------

    def next_nonce(self, sender: int) -> int:
        nonce = self.sender_nonce.get(sender, 0)
        self.sender_nonce[sender] = nonce + 1
        return nonce

    def _random_txn(self) -> Transaction:
        accounts = self.config.n_accounts
        sender = self.txn_rng.randbelow(accounts)
        recipient = (sender + 1 + self.txn_rng.randbelow(accounts - 1)) % accounts
        amount = 1 + self.txn_rng.randbelow(self.config.max_amount)
        return Transaction(sender, recipient, amount, self.next_nonce(sender), self.now)

    def admit(self, tx: Transaction) -> None:
        """Put ``tx`` in every live mempool; sharded mode screens it first.

        In sharded mode the transaction's checkers (per the selection
        policy) compare it against what they already hold; a conflict with
        an earlier transaction rejects the later one.
        """
        self.trace("txn", -1, f"sender={tx.sender} nonce={tx.nonce} amount={tx.amount}")
        for node in self.nodes:
            if node.live:
                node.mempool[tx] = None
                node.candidate = None
        if self.config.verification != "sharded":
            return
        live = self.live_nodes()
        r = min(self.config.replication, len(live))
        if self.policy.kind is PolicyKind.TEMPORAL_WINDOW:
            checkers = window_checkers(self.config.seed, tx, self.config.window, r, live)
        else:
            ctx = self._context(Digest(payload_digest([tx]).value))
            assignment = assign_segments(self.policy, partition_block([tx], 1), ctx, r)
            checkers = assignment.node_sets[0]
        current = tx.timestamp // self.config.window
        flagged = False
        for nid in checkers:
            memory = [old for old in self.retained.get(nid, [])
                      if old.timestamp // self.config.window >= current - 1]
            balance = self.nodes[nid].state.balance(tx.sender)
            if any(conflicts(old, tx, balance) for old in memory):
                flagged = True
            memory.append(tx)
            self.retained[nid] = memory
        if flagged:
            self.trace("double_spend_flagged", -1, f"sender={tx.sender} nonce={tx.nonce}")
            for node in self.nodes:
                node.rejected.add(tx)
                node.mempool.pop(tx, None)

    # -- sharded verification --------------------------------------------

    def _context(self, digest: Digest) -> AssignmentContext:
        live = self.live_nodes()
        return AssignmentContext(
            self.config.seed, live, digest,
            {n: float(self.now - self.nodes[n].join_time) for n in live},
            {n: self.nodes[n].last_verified_round for n in live})

    def collect_votes(self, block: Block, parent_state: AccountState,
                      known_invalid: bool = False) -> bool:
        """Committee votes on every segment of ``block``; True iff each segment
        reaches quorum."""
        live = self.live_nodes()
        r = min(self.config.replication, len(live))
        q = min(self.config.effective_quorum, r)
        segments = partition_block(block.transactions, self.config.segment_size)
        if not segments:
            segments = partition_block([], 1) or []
        assignment = assign_segments(self.policy, segments, self._context(block.digest), r, q)
        scratch = parent_state.copy()
        approvals: dict[int, list[int]] = {}
        label = block.digest.hex()[:16]
        for seg in segments:
            valid = validate_transactions(seg.transactions, scratch).valid
            if valid:
                for tx in seg.transactions:
                    scratch.apply(tx)
            for nid in assignment.node_sets[seg.segment_id]:
                votes = cast_votes(self.nodes[nid], valid)
                for approve in votes:
                    self.votes.append(VoteRecord(
                        self.round, self.now, nid, label, seg.segment_id, approve,
                        known_invalid, len(votes) > 1,
                        self.nodes[nid].rng.randint(*self.config.latency)))
                if votes[0]:
                    approvals.setdefault(seg.segment_id, []).append(nid)
        for nid, usage in update_usage(assignment, self.round, {}).items():
            self.nodes[nid].last_verified_round = usage
        self.round += 1
        return block_accepted(assignment, approvals)

    def _certify(self, node: NodeState, block: Block) -> bool:
        if self.config.verification != "sharded":
            return True
        accepted = self.collect_votes(block, node.state)
        if not accepted:
            self.trace("quorum_failed", node.id, f"height={block.index}")
        return accepted

    def fire_drill(self) -> None:
        """Put a known-invalid block (an overdraft) before a committee."""
        donor = next(n for n in self.nodes if n.live)
        sender = self.drill_rng.randbelow(self.config.n_accounts)
        tx = Transaction(sender, (sender + 1) % self.config.n_accounts,
                         donor.state.balance(sender) + 1,
                         donor.state.next_nonce.get(sender, 0), self.now)
        tip = donor.chain.tip
        block = Block.build(tip.index + 1, tip.digest, self.now,
                            self.drill_rng.next_u64(), [tx])
        accepted = self.collect_votes(block, donor.state, known_invalid=True)
        self.trace("drill", -1, f"accepted={int(accepted)}")

    # -- chain adoption --------------------------------------------------

    def _adopt(self, node: NodeState, chain: Chain, extends: bool,
               state: AccountState | None = None) -> None:
        if state is None:
            if extends:
                state = node.state.copy()
                for block in chain.blocks[len(node.chain):]:
                    for tx in block.transactions:
                        state.apply(tx)
            else:
                state = replay(chain)[1]
        if not extends:
            self.forks_observed += 1
            self.trace("reorg", node.id, f"from={node.chain.height} to={chain.height}")
            node.included = {tx for b in chain.blocks[1:] for tx in b.transactions}
        else:
            for block in chain.blocks[len(node.chain):]:
                node.included.update(block.transactions)
        for tx in list(node.mempool):
            if tx in node.included:
                del node.mempool[tx]
        node.chain, node.state = chain, state
        node.candidate = None

    # -- main loop -------------------------------------------------------

    def step(self) -> bool:
        if not self._queue:
            return False
        event = heapq.heappop(self._queue)
        if event.time < self.now:  # pragma: no cover - guarded by schedule()
            raise RuntimeError("event queue went back in time")
        self.now = event.time
        handler = {
            EventKind.MINE_ATTEMPT: self._on_mine,
            EventKind.DELIVER: self._on_deliver,
            EventKind.TXN_ARRIVAL: self._on_txn,
            EventKind.DRILL_TICK: self._on_drill,
            EventKind.JOIN: self._on_join,
            EventKind.TAMPER: self._on_tamper,
        }[event.kind]
        handler(event)
        return True

    def quiesce(self) -> None:
        """Stop mining and new arrivals, then drain in-flight deliveries."""
        self.mining = False
        while self.step():
            pass


def cast_votes(node: NodeState, segment_valid: bool) -> list[bool]:
    """The approve/reject votes a node casts on one segment.

    Malicious draws come from the behaviour's own stream so that a rate of
    zero leaves every other random draw of the run untouched.
    """
    b = node.behavior
    honest_vote = segment_valid
    if b.honest or b.rate <= 0.0:
        return [honest_vote]
    rng = node.behavior_rng
    if b.kind == "invalid_approver" and not segment_valid:
        return [rng.random() < b.rate or honest_vote]
    if b.kind == "equivocating" and rng.random() < b.rate:
        return [honest_vote, not honest_vote]
    return [honest_vote]


def broadcast_block(sim: Simulation, origin: int, block: Block) -> list[Event]:
    """Send the origin's chain (ending in ``block``) to every other live node."""
    rng = sim.nodes[origin].rng
    chain = sim.nodes[origin].chain
    events = []
    for node in sim.nodes:
        if node.id == origin or not node.live:
            continue
        delay = rng.randint(*sim.config.latency)
        events.append(sim.schedule(sim.now + delay, EventKind.DELIVER,
                                   to=node.id, origin=origin, chain=chain))
    return events


def node_handle_message(sim: Simulation, node: NodeState, chain: Chain) -> str:
    """Process a delivered chain; returns the action taken."""
    local = node.chain
    if chain.tip.digest == local.tip.digest:
        return "duplicate"
    if len(chain) < len(local):
        return "ignored_shorter"
    if len(chain) > len(local) and chain.blocks[len(local) - 1].digest == local.tip.digest:
        state = node.state.copy()
        prev = local.tip
        for block in chain.blocks[len(local):]:
            verdict = validate_header(prev, block, local.difficulty)
            if verdict.valid:
                verdict = validate_transactions(block.transactions, state)
            if not verdict.valid:
                sim.trace("dropped", node.id, f"height={block.index} reason={verdict}")
                return "dropped"
            for tx in block.transactions:
                state.apply(tx)
            prev = block
        # keep our own history: only the new blocks are taken from the sender
        grown = Chain(local.blocks + chain.blocks[len(local):], local.difficulty)
        sim._adopt(node, grown, extends=True, state=state)
        sim.trace("appended", node.id, f"height={grown.height}")
        return "appended"
    try:
        chosen = resolve_fork(local, chain)
    except InvalidRemote as exc:
        sim.trace("dropped", node.id, f"reason={exc}")
        return "dropped"
    if chosen is local:
        return "kept"
    sim._adopt(node, chain, extends=False)
    return "reorg"


def tamper_chain(chain: Chain, height: int, bit: int) -> Chain:
    """Flip bit ``bit`` (MSB-first within each byte) of the block at ``height``'s encoding."""
    from .ledger import decode_chain

    raw = bytearray(chain.blocks[height].encode())
    if not 0 <= bit < len(raw) * 8:
        raise ValueError(f"bit {bit} outside a {len(raw)}-byte block")
    raw[bit // 8] ^= 0x80 >> (bit % 8)
    (block,) = decode_chain(bytes(raw)).blocks
    blocks = list(chain.blocks)
    blocks[height] = block
    return Chain(tuple(blocks), chain.difficulty)


def common_prefix(chains: Sequence[Chain]) -> int:
    """Number of leading blocks (genesis included) shared by every chain."""
    shortest = min(len(c) for c in chains)
    for i in range(shortest):
        digest = chains[0].blocks[i].digest
        if any(c.blocks[i].digest != digest for c in chains[1:]):
            return i
    return shortest


def run_until(sim: Simulation, stop_blocks: int | None = None,
              stop_time: int | None = None, quiesce: bool = True) -> SimTrace:
    """Run until some node holds ``stop_blocks`` blocks past genesis or time
    reaches ``stop_time``; then, by default, drain deliveries."""
    if stop_blocks is None and stop_time is None:
        stop_blocks, stop_time = sim.config.run_blocks, sim.config.run_time
    if stop_blocks is None and stop_time is None:
        raise ConfigInvalid("run_until needs a block or time limit")
    if stop_blocks != 0 and stop_time != 0:
        while sim._queue:
            if stop_time is not None and sim._queue[0].time > stop_time:
                break
            sim.step()
            if stop_blocks is not None and sim.max_height() >= stop_blocks:
                break
    if stop_blocks == 0 or stop_time == 0:
        sim.mining = False
    elif quiesce:
        sim.quiesce()
    return make_trace(sim)


def make_trace(sim: Simulation) -> SimTrace:
    chains = {n.id: n.chain for n in sim.nodes}
    live = [n.chain for n in sim.nodes if n.live] or [sim.nodes[0].chain]
    prefix = common_prefix(live)
    summary = {
        "blocks_produced": sim.blocks_produced,
        "forks_observed": sim.forks_observed,
        "converged": len({c.tip.digest for c in live}) == 1,
        "common_prefix_height": prefix - 1,
        "final_heights": {str(n.id): n.chain.height for n in sim.nodes},
        "end_time": sim.now,
        "verification_rounds": sim.round,
    }
    return SimTrace(list(sim.rows), list(sim.votes), chains, summary)
