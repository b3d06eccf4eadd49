import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from chainkit import build_chain, mine
from engram_ledger.hashing import Digest
from engram_ledger.ledger import (MINT_SENDER, AccountState, Block, Chain, InvalidRemote,
                                  Mode, Order, Reason, RejectedInvalid, Transaction,
                                  UnknownBlock, append_block, decode_chain, make_genesis,
                                  new_chain, order_by_links, relative_order, replay,
                                  resolve_fork, validate_block, verify_chain,
                                  verify_chain_bytes)
from engram_ledger.prng import SplitMix64


@pytest.fixture(scope="module")
def mined():
    return build_chain(n_blocks=20, difficulty=4, seed=1)


def fresh(difficulty=0, balances=(100, 100, 100)):
    return new_chain(make_genesis(list(balances)), difficulty)


def test_transaction_round_trip():
    tx = Transaction(1, 2, 30, 4, 99)
    assert Transaction.decode(tx.encode()) == tx
    assert len(tx.encode()) == 40


def test_genesis_is_deterministic_and_funds_accounts():
    chain, state = fresh()
    assert chain.height == 0
    assert state.balances == {0: 100, 1: 100, 2: 100}
    assert make_genesis([100, 100, 100]) == chain.tip
    assert all(tx.sender == MINT_SENDER for tx in chain.tip.transactions)
    assert verify_chain(chain).valid


def test_append_valid_block_updates_state():
    chain, state = fresh()
    block = Block.build(1, chain.tip.digest, 1, 0, [Transaction(0, 1, 30, 0, 1)])
    chain2, state2 = append_block(chain, block, state)
    assert chain2.height == 1
    assert state2.balances[0] == 70 and state2.balances[1] == 130
    assert state.balances[0] == 100  # old state untouched


@pytest.mark.parametrize("make, reason", [
    (lambda tip: Block.build(1, Digest.zero(), 1, 0, []), Reason.BAD_LINK),
    (lambda tip: Block.build(2, tip.digest, 1, 0, []), Reason.BAD_LINK),
    (lambda tip: dataclasses.replace(Block.build(1, tip.digest, 1, 0, []),
                                     payload_digest=Digest.zero()), Reason.BAD_PAYLOAD_DIGEST),
    (lambda tip: Block.build(1, tip.digest, 1, 0, [Transaction(0, 1, 101, 0, 1)]),
     Reason.INSUFFICIENT_FUNDS),
    (lambda tip: Block.build(1, tip.digest, 1, 0, [Transaction(0, 1, 10, 0, 1),
                                                   Transaction(0, 1, 10, 0, 1)]),
     Reason.NONCE_CONFLICT),
    (lambda tip: Block.build(1, tip.digest, 1, 0, [Transaction(0, 1, 60, 0, 1),
                                                   Transaction(0, 1, 60, 1, 1)]),
     Reason.INSUFFICIENT_FUNDS),
    (lambda tip: Block.build(1, tip.digest, 1, 0, [Transaction(MINT_SENDER, 1, 5, 0, 1)]),
     Reason.INSUFFICIENT_FUNDS),
])
def test_rejections(make, reason):
    chain, state = fresh()
    block = make(chain.tip)
    assert validate_block(chain, block, state).reason is reason
    with pytest.raises(RejectedInvalid):
        append_block(chain, block, state)


def test_puzzle_is_enforced():
    chain, state = fresh(difficulty=12)
    rng = SplitMix64(0)
    nonce = next(n for n in iter(rng.next_u64, None)
                 if Block.build(1, chain.tip.digest, 1, n, []).digest.leading_zero_bits() < 12)
    assert validate_block(chain, Block.build(1, chain.tip.digest, 1, nonce, []),
                          state).reason is Reason.BAD_PUZZLE
    good = mine(chain, [], 1, rng)
    assert validate_block(chain, good, state).valid


def test_nonce_gaps_are_allowed_but_reuse_is_not():
    state = AccountState({0: 50}, {0: 3})
    assert state.check(Transaction(0, 1, 5, 7)) is None
    assert state.check(Transaction(0, 1, 5, 2)) is Reason.NONCE_CONFLICT


def test_replay_reaches_append_state(mined):
    chain, state = mined
    verdict, replayed = replay(chain)
    assert verdict.valid and str(verdict) == "Valid"
    assert replayed == state


def test_tampered_middle_block_reported_at_its_height(mined):
    chain, _ = mined
    blocks = list(chain.blocks)
    blocks[7] = dataclasses.replace(blocks[7], timestamp=blocks[7].timestamp + 1)
    verdict = verify_chain(Chain(tuple(blocks), chain.difficulty))
    assert not verdict.valid
    assert verdict.height in (7, 8)
    assert str(verdict).startswith("CorruptAt(")


def test_bad_genesis():
    g = make_genesis([10])
    chain = Chain((dataclasses.replace(g, timestamp=5),))
    assert verify_chain(chain).reason is Reason.BAD_GENESIS


def test_encode_decode_round_trip(mined):
    chain, _ = mined
    assert decode_chain(chain.encode(), chain.difficulty) == chain
    assert verify_chain_bytes(chain.encode(), chain.difficulty).valid


def test_truncated_file_is_malformed(mined):
    chain, _ = mined
    verdict = verify_chain_bytes(chain.encode()[:-3], chain.difficulty)
    assert verdict.reason is Reason.MALFORMED and verdict.height == chain.height


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_any_bit_flip_is_detected(mined, data):
    chain, _ = mined
    raw = bytearray(chain.encode())
    tip_start = len(raw) - len(chain.tip.encode())
    # bits of the tip's timestamp and nonce are guarded only by the puzzle
    guarded = range((tip_start + 72) * 8, (tip_start + 88) * 8)
    bit = data.draw(st.integers(0, len(raw) * 8 - 1).filter(lambda b: b not in guarded))
    raw[bit // 8] ^= 0x80 >> (bit % 8)
    assert not verify_chain_bytes(bytes(raw), chain.difficulty).valid


# --- forks -----------------------------------------------------------------


def grow(chain, state, n, seed, difficulty=0):
    rng = SplitMix64(seed)
    for i in range(n):
        chain, state = append_block(chain, mine(chain, [], chain.height + 1 + seed, rng), state)
    return chain, state


def test_longer_chain_wins():
    base = fresh()
    short, _ = grow(*base, 2, 1)
    long, _ = grow(*base, 3, 2)
    assert resolve_fork(short, long) is long
    assert resolve_fork(long, short) is long


def test_equal_length_tie_goes_to_smaller_tip_digest():
    base = fresh()
    a, _ = grow(*base, 2, 1)
    b, _ = grow(*base, 2, 2)
    winner = a if a.tip.digest < b.tip.digest else b
    assert resolve_fork(a, b) is winner
    assert resolve_fork(b, a) is winner


def test_invalid_or_foreign_remote_is_refused():
    base = fresh()
    local, _ = grow(*base, 1, 1)
    remote, _ = grow(*base, 3, 2)
    broken = Chain(remote.blocks[:2] + (dataclasses.replace(remote.blocks[2], index=9),)
                   + remote.blocks[3:])
    with pytest.raises(InvalidRemote):
        resolve_fork(local, broken)
    foreign, _ = grow(*fresh(balances=(5,)), 4, 3)
    with pytest.raises(InvalidRemote):
        resolve_fork(local, foreign)


# --- relative order ----------------------------------------------------------


def test_order_examples():
    assert order_by_links(2, 5, Mode.LINKED_LIST, {1, 4}) is Order.UNKNOWN
    assert order_by_links(2, 5, Mode.ARRAY, {1, 4}) is Order.BEFORE
    assert order_by_links(5, 2, Mode.LINKED_LIST) is Order.AFTER
    assert order_by_links(2, 3, Mode.LINKED_LIST, {1, 4}) is Order.BEFORE
    with pytest.raises(ValueError):
        order_by_links(3, 3, Mode.ARRAY)


@given(st.integers(0, 30), st.integers(0, 30), st.sets(st.integers(0, 30), max_size=5))
def test_order_modes(a, b, disrupted):
    if a == b:
        return
    array = order_by_links(a, b, Mode.ARRAY, disrupted)
    linked = order_by_links(a, b, Mode.LINKED_LIST, disrupted)
    assert array is (Order.BEFORE if a < b else Order.AFTER)
    severed = any(min(a, b) <= d <= max(a, b) for d in disrupted)
    assert linked is (Order.UNKNOWN if severed else array)


def test_relative_order_checks_heights(mined):
    chain, _ = mined
    assert relative_order(chain, 1, 3, Mode.ARRAY) is Order.BEFORE
    with pytest.raises(UnknownBlock):
        relative_order(chain, 1, 99, Mode.ARRAY)
