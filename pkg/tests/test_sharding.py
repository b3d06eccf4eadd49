import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from engram_ledger.hashing import hash_bytes
from engram_ledger.ledger import Transaction
from engram_ledger.sharding import (Assignment, AssignmentContext, BadSegmentSize, CostModel,
                                    MissingContext, NotEnoughNodes, PolicyKind, Segment,
                                    SelectionPolicy, assign_segments, block_accepted,
                                    conflicts, default_quorum, derive_node_set,
                                    detect_double_spend, double_spend_trials,
                                    latency_table, load_balance_run,
                                    measure_verification_latency, partition_block,
                                    rejected_transactions, uniform_detection_closed_form,
                                    window_checkers)

TEMPORAL = SelectionPolicy(PolicyKind.TEMPORAL_WINDOW, window=20)
txs = st.lists(st.builds(Transaction, st.integers(0, 9), st.integers(0, 9),
                         st.integers(0, 100), st.integers(0, 50), st.integers(0, 1000)),
               max_size=40)


@given(txs, st.integers(1, 12))
def test_partition_round_trip(block, size):
    segments = partition_block(block, size)
    assert [tx for s in segments for tx in s.transactions] == block
    assert all(1 <= len(s.transactions) <= size for s in segments)
    assert [s.segment_id for s in segments] == list(range(len(segments)))


def test_partition_examples():
    assert [len(s.transactions) for s in partition_block([Transaction(0, 1, 1, i) for i in range(2500)], 1000)] == [1000, 1000, 500]
    assert partition_block([], 1000) == []
    with pytest.raises(BadSegmentSize):
        partition_block([], 0)


def test_default_quorum():
    assert [default_quorum(r) for r in (1, 2, 3, 4, 5, 6)] == [1, 2, 2, 3, 4, 4]


def test_node_sets_are_keyed_and_distinct():
    live = list(range(30))
    a = derive_node_set(7, b"key", 5, live)
    assert a == derive_node_set(7, b"key", 5, live)
    assert len(set(a)) == 5
    assert a != derive_node_set(8, b"key", 5, live)
    with pytest.raises(NotEnoughNodes):
        derive_node_set(7, b"key", 31, live)


def test_same_window_gives_identical_sets():
    live = list(range(100))
    t1, t2 = Transaction(7, 1, 5, 0, 10), Transaction(7, 2, 5, 1, 14)
    assert window_checkers(3, t1, 20, 3, live) == window_checkers(3, t2, 20, 3, live)


def test_adjacent_windows_share_a_set():
    live = list(range(100))
    t1, t2 = Transaction(7, 1, 5, 0, 19), Transaction(7, 2, 5, 1, 21)
    shared = set(window_checkers(3, t1, 20, 3, live)) & set(window_checkers(3, t2, 20, 3, live))
    assert len(shared) >= 3


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 10**6), st.integers(0, 19),
       st.integers(0, 2**32), st.integers(4, 60), st.integers(1, 3))
def test_temporal_guarantee(seed, t1, dt, sender, n_nodes, r):
    live = list(range(n_nodes))
    tx1 = Transaction(sender, 1, 60, 0, t1)
    tx2 = Transaction(sender, 2, 60, 1, t1 + dt)
    ctx = AssignmentContext(seed, live, hash_bytes(b"blk"))
    a1 = assign_segments(TEMPORAL, partition_block([tx1], 1), ctx, r)
    a2 = assign_segments(TEMPORAL, partition_block([tx2], 1), ctx, r)
    assert a1.txn_checkers[tx1] & a2.txn_checkers[tx2]


def test_temporal_cap_keeps_full_checker_sets():
    live = list(range(100))
    block = [Transaction(s, 0, 1, 0, 5) for s in range(20)]
    ctx = AssignmentContext(1, live, hash_bytes(b"b"))
    a = assign_segments(TEMPORAL, partition_block(block, 20), ctx, 3)
    assert len(a.node_sets[0]) == 9
    assert all(len(a.txn_checkers[tx]) >= 3 for tx in block)


def test_freshness_equal_ages_is_uniform():
    live = list(range(20))
    policy = SelectionPolicy(PolicyKind.FRESHNESS_PRIORITY, tau_node=50)
    counts = np.zeros(len(live))
    for i in range(10_000):
        ctx = AssignmentContext(2, live, hash_bytes(i.to_bytes(8, "big")),
                                node_ages={n: 30.0 for n in live})
        (node,) = assign_segments(policy, [Segment(0, ())], ctx, 1).node_sets[0]
        counts[node] += 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_freshness_prefers_young_nodes():
    live = list(range(20))
    policy = SelectionPolicy(PolicyKind.FRESHNESS_PRIORITY, tau_node=10, floor=0.01)
    ages = {n: (0.0 if n < 2 else 500.0) for n in live}
    young = 0
    for i in range(500):
        ctx = AssignmentContext(2, live, hash_bytes(i.to_bytes(8, "big")), node_ages=ages)
        young += sum(n < 2 for n in assign_segments(policy, [Segment(0, ())], ctx, 1).node_sets[0])
    assert young > 400


def test_lru_picks_least_recently_used():
    live = list(range(6))
    ctx = AssignmentContext(0, live, hash_bytes(b"x"),
                            last_verified_round={0: 9, 1: 2, 2: 8, 3: 1, 4: 7, 5: 3})
    a = assign_segments(SelectionPolicy(PolicyKind.LEAST_RECENTLY_USED),
                        [Segment(0, ()), Segment(1, ())], ctx, 2)
    assert set(a.node_sets[0]) == {3, 1}
    assert set(a.node_sets[1]) == {5, 4}


def test_missing_context():
    ctx = AssignmentContext(0, list(range(5)))
    for kind in (PolicyKind.UNIFORM_RANDOM, PolicyKind.FRESHNESS_PRIORITY,
                 PolicyKind.LEAST_RECENTLY_USED):
        with pytest.raises(MissingContext):
            assign_segments(SelectionPolicy(kind), [Segment(0, ())], ctx, 2)


@given(st.integers(0, 2**64 - 1), st.sampled_from(list(PolicyKind)))
def test_assignment_is_pure(seed, kind):
    live = list(range(12))
    ctx = AssignmentContext(seed, live, hash_bytes(b"d"), {n: float(n) for n in live},
                            {n: n % 3 for n in live})
    segs = partition_block([Transaction(1, 2, 3, i, i) for i in range(4)], 2)
    a = assign_segments(SelectionPolicy(kind), segs, ctx, 3)
    assert a == assign_segments(SelectionPolicy(kind), segs, ctx, 3)
    assert all(len(set(m)) >= 3 for m in a.node_sets.values())


def test_conflict_rules():
    a = Transaction(1, 2, 60, 0, 0)
    assert conflicts(a, Transaction(1, 3, 60, 1, 1), 100)
    assert not conflicts(a, Transaction(1, 3, 30, 1, 1), 100)
    assert conflicts(a, Transaction(1, 3, 1, 0, 1), 100)
    assert not conflicts(a, Transaction(2, 3, 60, 0, 1), 100)


def test_detection_needs_a_shared_node():
    tx1, tx2 = Transaction(1, 2, 60, 0, 0), Transaction(1, 3, 60, 1, 1)
    segs = (Segment(0, (tx1,)), Segment(1, (tx2,)))
    apart = Assignment({0: (1, 2), 1: (3, 4)}, 2, segs)
    together = Assignment({0: (1, 2), 1: (2, 4)}, 2, segs)
    assert detect_double_spend(apart, {1: 100}) == set()
    flagged = detect_double_spend(together, {1: 100})
    assert flagged == {(tx1, tx2)}
    assert rejected_transactions(flagged) == {tx2}


def test_quorum_acceptance():
    a = Assignment({0: (1, 2, 3), 1: (4, 5, 6)}, 2)
    assert block_accepted(a, {0: [1, 2], 1: [5, 6]})
    assert not block_accepted(a, {0: [1, 2], 1: [5]})
    assert not block_accepted(a, {0: [1, 9], 1: [5, 6]})  # outsiders do not count


def test_latency_model():
    cost = CostModel(1, 30)
    assert measure_verification_latency(10_000, cost) == 10_000
    assert measure_verification_latency(10_000, cost, 10) == 1300
    rows = latency_table(10_000, cost, [10])
    assert rows[1]["speedup"] == pytest.approx(10_000 / 1300)


def test_uniform_closed_form():
    assert uniform_detection_closed_form(100, 3) == pytest.approx(
        1 - math.comb(97, 3) / math.comb(100, 3))
    assert round(uniform_detection_closed_form(100, 3), 4) == 0.0882


def test_detection_trials_small():
    res = double_spend_trials(TEMPORAL, 300, seed=1)
    assert res.detected == 300
    uni = double_spend_trials(SelectionPolicy(PolicyKind.UNIFORM_RANDOM), 3000, seed=1)
    assert abs(uni.rate - uni.closed_form) < 0.03


LB_KW = dict(rounds=1000, segments_per_round=80, capacity=5)
LB_FRESH = SelectionPolicy(PolicyKind.FRESHNESS_PRIORITY, tau_node=20.0, floor=4.0)


@pytest.mark.xfail(strict=True, reason="freshness priority does not beat uniform selection "
                   "on max queue length in 80% of paired runs in any regime tried")
def test_load_balance_freshness_vs_uniform():
    seeds = range(10)
    wins = sum(load_balance_run(LB_FRESH, s, **LB_KW)
               <= load_balance_run(SelectionPolicy(PolicyKind.UNIFORM_RANDOM), s, **LB_KW)
               for s in seeds)
    print(f"freshness not worse in {wins}/{len(seeds)} paired runs")
    assert wins >= 0.8 * len(seeds)
