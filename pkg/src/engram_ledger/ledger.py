"""Append-only hash-linked chain with an account-balance state machine.

Blocks link to their predecessor by digest. ``verify_chain`` replays the
whole chain from genesis, so any edit to stored history surfaces as a
``CorruptAt`` verdict at the first height where something no longer adds up.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .hashing import (
    HEADER_SIZE,
    Digest,
    block_digest,
    decode_header,
    encode_header,
    hash_bytes,
)

MINT_SENDER = (1 << 64) - 1
_TXN = struct.Struct(">QQQQQ")
_COUNT = struct.Struct(">I")


class Reason(enum.Enum):
    BAD_LINK = "BadLink"
    BAD_PUZZLE = "BadPuzzle"
    BAD_PAYLOAD_DIGEST = "BadPayloadDigest"
    INSUFFICIENT_FUNDS = "InsufficientFunds"
    NONCE_CONFLICT = "NonceConflict"
    BAD_GENESIS = "BadGenesis"
    MALFORMED = "Malformed"

    def __str__(self):
        return self.value


class Order(enum.Enum):
    BEFORE = "Before"
    AFTER = "After"
    UNKNOWN = "Unknown"


class Mode(enum.Enum):
    LINKED_LIST = "LinkedList"
    ARRAY = "Array"


class RejectedInvalid(ValueError):
    pass


class InvalidRemote(ValueError):
    pass


class UnknownBlock(KeyError):
    pass


class MalformedChain(ValueError):
    def __init__(self, height: int, message: str):
        super().__init__(f"height {height}: {message}")
        self.height = height


@dataclass(frozen=True)
class Transaction:
    sender: int
    recipient: int
    amount: int
    nonce: int
    timestamp: int = 0

    def __post_init__(self):
        for name in ("sender", "recipient", "amount", "nonce", "timestamp"):
            value = getattr(self, name)
            if not 0 <= value < 1 << 64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer")

    def encode(self) -> bytes:
        return _TXN.pack(self.sender, self.recipient, self.amount,
                         self.nonce, self.timestamp)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        return cls(*_TXN.unpack(data))


def payload_digest(transactions: Iterable[Transaction]) -> Digest:
    return hash_bytes(b"".join(tx.encode() for tx in transactions))


@dataclass(frozen=True)
class Block:
    index: int
    prev_digest: Digest
    payload_digest: Digest
    timestamp: int
    puzzle_nonce: int
    transactions: tuple = ()

    def header_bytes(self) -> bytes:
        return encode_header(self.index, self.prev_digest, self.payload_digest,
                             self.timestamp, self.puzzle_nonce)

    @cached_property
    def digest(self) -> Digest:
        return block_digest(self.header_bytes())

    def encode(self) -> bytes:
        parts = [self.header_bytes(), _COUNT.pack(len(self.transactions))]
        parts.extend(tx.encode() for tx in self.transactions)
        return b"".join(parts)

    @classmethod
    def build(cls, index: int, prev_digest: Digest, timestamp: int,
              puzzle_nonce: int, transactions: Sequence[Transaction]) -> "Block":
        txs = tuple(transactions)
        return cls(index, prev_digest, payload_digest(txs), timestamp,
                   puzzle_nonce, txs)


@dataclass
class AccountState:
    balances: dict = field(default_factory=dict)
    next_nonce: dict = field(default_factory=dict)

    def copy(self) -> "AccountState":
        return AccountState(dict(self.balances), dict(self.next_nonce))

    def balance(self, account: int) -> int:
        return self.balances.get(account, 0)

    def check(self, tx: Transaction) -> Reason | None:
        """Why ``tx`` cannot apply to this state, or None if it can."""
        if tx.nonce < self.next_nonce.get(tx.sender, 0):
            return Reason.NONCE_CONFLICT
        if tx.amount > self.balance(tx.sender):
            return Reason.INSUFFICIENT_FUNDS
        return None

    def apply(self, tx: Transaction) -> None:
        reason = self.check(tx)
        if reason is not None:
            raise RejectedInvalid(f"{reason}: {tx}")
        self.balances[tx.sender] = self.balance(tx.sender) - tx.amount
        self.balances[tx.recipient] = self.balance(tx.recipient) + tx.amount
        self.next_nonce[tx.sender] = tx.nonce + 1


@dataclass(frozen=True)
class Verdict:
    """Outcome of block validation; ``reason is None`` means valid."""

    reason: Reason | None = None
    tx_index: int | None = None

    @property
    def valid(self) -> bool:
        return self.reason is None

    def __str__(self):
        if self.reason is None:
            return "Valid"
        if self.tx_index is not None:
            return f"{self.reason}(tx {self.tx_index})"
        return str(self.reason)


VALID = Verdict()


@dataclass(frozen=True)
class ChainVerdict:
    height: int | None = None
    reason: Reason | None = None

    @property
    def valid(self) -> bool:
        return self.reason is None

    def __str__(self):
        if self.reason is None:
            return "Valid"
        return f"CorruptAt({self.height}, {self.reason})"


@dataclass(frozen=True)
class Chain:
    blocks: tuple
    difficulty: int = 0

    def __len__(self):
        return len(self.blocks)

    @property
    def height(self) -> int:
        """Height of the tip; the genesis block sits at height 0."""
        return len(self.blocks) - 1

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def encode(self) -> bytes:
        return b"".join(b.encode() for b in self.blocks)


# --- genesis -------------------------------------------------------------


def make_genesis(initial_balances: Mapping[int, int] | Sequence[int] = ()) -> Block:
    """Deterministic genesis block; allocations are mint transactions.

    Accepts a mapping of account id to balance, or a sequence of balances
    for accounts 0..n-1. The simulation seed never enters the genesis.
    """
    if not isinstance(initial_balances, Mapping):
        initial_balances = dict(enumerate(initial_balances))
    mints = [Transaction(MINT_SENDER, account, amount, i, 0)
             for i, (account, amount) in enumerate(sorted(initial_balances.items()))]
    return Block.build(0, Digest.zero(), 0, 0, mints)


def genesis_state(genesis: Block) -> AccountState:
    state = AccountState()
    for tx in genesis.transactions:
        state.balances[tx.recipient] = state.balance(tx.recipient) + tx.amount
    return state


def new_chain(genesis: Block, difficulty: int = 0) -> tuple[Chain, AccountState]:
    return Chain((genesis,), difficulty), genesis_state(genesis)


def _check_genesis(block: Block) -> Reason | None:
    if block.index != 0 or block.prev_digest != Digest.zero():
        return Reason.BAD_LINK
    if block.timestamp != 0 or block.puzzle_nonce != 0:
        return Reason.BAD_GENESIS
    if block.payload_digest != payload_digest(block.transactions):
        return Reason.BAD_PAYLOAD_DIGEST
    for i, tx in enumerate(block.transactions):
        if tx.sender != MINT_SENDER or tx.nonce != i or tx.timestamp != 0:
            return Reason.BAD_GENESIS
    return None


# --- validation ----------------------------------------------------------


def validate_header(prev: Block, candidate: Block, difficulty: int) -> Verdict:
    if candidate.index != prev.index + 1 or candidate.prev_digest != prev.digest:
        return Verdict(Reason.BAD_LINK)
    if candidate.digest.leading_zero_bits() < difficulty:
        return Verdict(Reason.BAD_PUZZLE)
    if candidate.payload_digest != payload_digest(candidate.transactions):
        return Verdict(Reason.BAD_PAYLOAD_DIGEST)
    return VALID


def validate_transactions(transactions: Sequence[Transaction],
                          state: AccountState) -> Verdict:
    scratch = state.copy()
    for i, tx in enumerate(transactions):
        if tx.sender == MINT_SENDER:
            return Verdict(Reason.INSUFFICIENT_FUNDS, i)
        reason = scratch.check(tx)
        if reason is not None:
            return Verdict(reason, i)
        scratch.apply(tx)
    return VALID


def validate_block(chain: Chain, candidate: Block, state: AccountState) -> Verdict:
    """Check ``candidate`` as the next block on ``chain`` (whose tip state is ``state``)."""
    if not chain.blocks:
        raise ValueError("chain must contain the genesis block")
    verdict = validate_header(chain.tip, candidate, chain.difficulty)
    if not verdict.valid:
        return verdict
    return validate_transactions(candidate.transactions, state)


def append_block(chain: Chain, block: Block,
                 state: AccountState) -> tuple[Chain, AccountState]:
    verdict = validate_block(chain, block, state)
    if not verdict.valid:
        raise RejectedInvalid(str(verdict))
    new_state = state.copy()
    for tx in block.transactions:
        new_state.apply(tx)
    return Chain(chain.blocks + (block,), chain.difficulty), new_state


def replay(chain: Chain) -> tuple[ChainVerdict, AccountState]:
    """Re-derive the chain from genesis; returns the verdict and the state reached."""
    if not chain.blocks:
        return ChainVerdict(0, Reason.MALFORMED), AccountState()
    genesis = chain.blocks[0]
    reason = _check_genesis(genesis)
    if reason is not None:
        return ChainVerdict(0, reason), AccountState()
    state = genesis_state(genesis)
    for height in range(1, len(chain.blocks)):
        block = chain.blocks[height]
        verdict = validate_header(chain.blocks[height - 1], block, chain.difficulty)
        if verdict.valid:
            verdict = validate_transactions(block.transactions, state)
        if not verdict.valid:
            return ChainVerdict(height, verdict.reason), state
        for tx in block.transactions:
            state.apply(tx)
    return ChainVerdict(), state


def verify_chain(chain: Chain) -> ChainVerdict:
    return replay(chain)[0]


def resolve_fork(local: Chain, remote: Chain) -> Chain:
    """Longest valid chain wins; equal heights go to the smaller tip digest.

    Raises InvalidRemote when ``remote`` fails verification or does not
    share ``local``'s genesis; the caller keeps ``local`` in that case.
    """
    if remote.blocks[:1] != local.blocks[:1]:
        raise InvalidRemote("remote chain has a different genesis")
    verdict = verify_chain(remote)
    if not verdict.valid:
        raise InvalidRemote(str(verdict))
    if len(remote) != len(local):
        return remote if len(remote) > len(local) else local
    return remote if remote.tip.digest < local.tip.digest else local


# --- temporal order ------------------------------------------------------


def order_by_links(a: int, b: int, mode: Mode, disrupted: Iterable[int] = ()) -> Order:
    """Order of positions ``a`` and ``b`` in a sequence with disrupted members.

    Array mode reads the stored positions. LinkedList mode knows an order
    only when an intact run of links joins the two: a disrupted member
    severs the links on both of its sides, so any pair separated by (or
    including) one is Unknown.
    """
    if a == b:
        raise ValueError("a block has no order relative to itself")
    if mode is Mode.LINKED_LIST:
        lo, hi = min(a, b), max(a, b)
        if any(lo <= d <= hi for d in disrupted):
            return Order.UNKNOWN
    return Order.BEFORE if a < b else Order.AFTER


def relative_order(chain: Chain, block_a: int, block_b: int, mode: Mode,
                   disrupted: Iterable[int] = ()) -> Order:
    for h in (block_a, block_b):
        if not 0 <= h < len(chain):
            raise UnknownBlock(h)
    return order_by_links(block_a, block_b, mode, disrupted)


# --- chain file format ---------------------------------------------------


def decode_chain(data: bytes, difficulty: int = 0) -> Chain:
    blocks = []
    pos = 0
    while pos < len(data):
        height = len(blocks)
        if len(data) - pos < HEADER_SIZE + _COUNT.size:
            raise MalformedChain(height, "truncated header")
        index, prev, payload, timestamp, nonce = decode_header(
            data[pos:pos + HEADER_SIZE])
        pos += HEADER_SIZE
        (count,) = _COUNT.unpack_from(data, pos)
        pos += _COUNT.size
        end = pos + count * _TXN.size
        if end > len(data):
            raise MalformedChain(height, "truncated transaction list")
        txs = tuple(Transaction.decode(data[p:p + _TXN.size])
                    for p in range(pos, end, _TXN.size))
        pos = end
        blocks.append(Block(index, prev, payload, timestamp, nonce, txs))
    return Chain(tuple(blocks), difficulty)


def verify_chain_bytes(data: bytes, difficulty: int = 0) -> ChainVerdict:
    try:
        chain = decode_chain(data, difficulty)
    except MalformedChain as exc:
        return ChainVerdict(exc.height, Reason.MALFORMED)
    return verify_chain(chain)
