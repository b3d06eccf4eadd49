"""Every acceptance criterion at its stated scale and tolerance.

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary. Run directly with ``python tests/test_acceptance.py``.
"""
import json
import math
import time

import numpy as np
import pytest

from acceptance_log import report
from chainkit import build_chain
from engram_ledger.adversary import (FeatureDrill, balanced_accuracy, fire_drill_train,
                                     held_out_drills, random_txn_stream, run_fast_commit)
from engram_ledger.cli import main
from engram_ledger.hashing import Digest, SeparatorParams, encode_header, hash_bytes, separate_many
from engram_ledger.ledger import AccountState, verify_chain_bytes
from engram_ledger.mnemochain import (EngramParams, MemoryParams, overlap_vs_lag, run_h1,
                                      run_h2, run_h3, slope_with_ci)
from engram_ledger.netsim import SimConfig, Simulation, run_until
from engram_ledger.prng import SplitMix64
from engram_ledger.sharding import (CostModel, PolicyKind, SelectionPolicy,
                                    double_spend_trials, measure_verification_latency,
                                    uniform_detection_closed_form)


def test_c01_tamper_detection():
    chain, _ = build_chain(n_blocks=100, difficulty=8, seed=7)
    raw = chain.encode()
    rng = SplitMix64(2024)
    started = time.perf_counter()
    detected = 0
    for _ in range(1000):
        bit = rng.randbelow(len(raw) * 8)
        flipped = bytearray(raw)
        flipped[bit // 8] ^= 0x80 >> (bit % 8)
        detected += not verify_chain_bytes(bytes(flipped), chain.difficulty).valid
    elapsed = time.perf_counter() - started
    ok = detected == 1000 and elapsed < 10
    assert report(1, "tamper detection", ok, f"{detected}/1000 flips detected in {elapsed:.2f}s")


def test_c02_sha256_vectors():
    empty = hash_bytes(b"").hex()
    abc = hash_bytes(b"abc").hex()
    ok = (empty == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
          and abc == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
    assert report(2, "SHA-256 conformance", ok, f'""={empty[:16]}... "abc"={abc[:16]}...')


def test_c03_avalanche():
    rng = np.random.default_rng(3)
    fractions = []
    for _ in range(10_000):
        header = bytearray(encode_header(int(rng.integers(2**63)), Digest(rng.bytes(32)),
                                         Digest(rng.bytes(32)), int(rng.integers(2**63)),
                                         int(rng.integers(2**63))))
        before = int.from_bytes(hash_bytes(bytes(header)).value, "big")
        bit = int(rng.integers(len(header) * 8))
        header[bit // 8] ^= 0x80 >> (bit % 8)
        after = int.from_bytes(hash_bytes(bytes(header)).value, "big")
        fractions.append(bin(before ^ after).count("1") / 256)
    mean = float(np.mean(fractions))
    assert report(3, "avalanche", 0.48 <= mean <= 0.52, f"mean flipped fraction {mean:.4f}")


def test_c04_temporal_window_detection():
    res = double_spend_trials(SelectionPolicy(PolicyKind.TEMPORAL_WINDOW, window=20),
                              10_000, n_nodes=100, r=3, seed=4)
    assert report(4, "TemporalWindow double-spend detection", res.detected == res.trials,
                  f"{res.detected}/{res.trials} flagged")


def test_c05_uniform_detection():
    res = double_spend_trials(SelectionPolicy(PolicyKind.UNIFORM_RANDOM), 10_000,
                              n_nodes=100, r=3, seed=5)
    closed = 1 - math.comb(97, 3) / math.comb(100, 3)
    assert closed == pytest.approx(uniform_detection_closed_form(100, 3))
    ok = abs(res.rate - closed) <= 0.01
    assert report(5, "UniformRandom double-spend detection", ok,
                  f"rate {res.rate:.4f} vs closed form {closed:.4f}")


def test_c06_sharded_speedup():
    cost = CostModel(per_txn=1, per_segment=30)
    speedup = measure_verification_latency(10_000, cost) / \
        measure_verification_latency(10_000, cost, 10)
    assert report(6, "sharded verification speedup", speedup >= 7, f"{speedup:.2f}x")


def test_c07_convergence():
    agreed, slowest = 0, 0.0
    for seed in range(100):
        started = time.perf_counter()
        trace = run_until(Simulation(SimConfig(n_nodes=20, run_blocks=30, seed=seed)))
        slowest = max(slowest, time.perf_counter() - started)
        agreed += trace.summary["common_prefix_height"] >= 29
    ok = agreed == 100 and slowest < 5
    assert report(7, "consensus convergence", ok,
                  f"{agreed}/100 runs share >= 29 blocks; slowest run {slowest:.2f}s")


def _outputs(directory):
    files = {}
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            data = path.read_bytes()
            if path.name == "manifest.json":
                manifest = json.loads(data)
                manifest.pop("wall_clock")
                data = json.dumps(manifest, sort_keys=True).encode()
            files[str(path.relative_to(directory))] = data
    return files


def test_c08_determinism(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "n_nodes": 6, "difficulty": 5, "run_blocks": 8, "verification": "sharded",
        "drill_interval": 20,
        "sharding": {"trials": 500, "lb_seeds": 1, "lb_rounds": 50},
        "drill": {"rounds": 20, "held_out": 200},
        "memory": {"h1_seeds": 10, "h2_probes": 100, "h3_trials": 10}}))
    runs = {
        "simulate": ["simulate"], "shard-bench": ["shard-bench"], "drill": ["drill"],
        "memory": ["memory", "--experiment", "all"],
    }
    identical = []
    for name, argv in runs.items():
        produced = []
        for copy in ("a", "b"):
            out = tmp_path / copy / name
            assert main(argv + ["--config", str(config), "--seed", "9", "--out", str(out)]) == 0
            produced.append(_outputs(out))
        identical.append(produced[0] == produced[1] and produced[0])
    chain = tmp_path / "a" / "simulate" / "chain.bin"
    verdicts = [main(["verify", str(chain), "--config", str(config)]) for _ in range(2)]
    identical.append(verdicts == [0, 0])
    ok = all(identical)
    assert report(8, "determinism", ok,
                  f"{sum(map(bool, identical))}/5 subcommands byte-identical across dual runs")


def test_c09_pattern_separation():
    params = SeparatorParams(input_dim=1024, n_total=2048, k=40)
    rng = np.random.default_rng(9)
    details, ok = [], True
    for s in (0.5, 0.6, 0.7, 0.8, 0.9, 0.95):
        x = rng.standard_normal((1000, 1024))
        z = rng.standard_normal((1000, 1024))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        z -= np.sum(z * x, axis=1, keepdims=True) * x
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = s * x + math.sqrt(1 - s * s) * z
        a, b = separate_many(params, x), separate_many(params, y)
        shared = np.array([len(set(p) & set(q)) for p, q in zip(a, b)])
        jaccard = float(np.mean(shared / (80 - shared)))
        ok &= jaccard < s - 0.05
        details.append(f"s={s}:{jaccard:.3f}")
    a = separate_many(params, rng.standard_normal((1000, 1024)))
    b = separate_many(params, rng.standard_normal((1000, 1024)))
    overlap = float(np.mean([len(set(p) & set(q)) for p, q in zip(a, b)]))
    expected = 40 * 40 / 2048
    ok &= abs(overlap - expected) <= 0.1 * expected
    details.append(f"random overlap {overlap:.3f} vs {expected:.3f}")
    assert report(9, "pattern separation", ok, "; ".join(details))


def test_c10_temporal_linking():
    params = EngramParams()
    lags = [k * params.tau_mem / 2 for k in range(1, 11)]
    x, y = overlap_vs_lag(params, 2048, lags, 200, seed=10)
    slope, lo, hi = slope_with_ci(x, y, seed=10)
    ok = len(x) == 2000 and slope < 0 and hi < 0
    assert report(10, "engram temporal linking", ok,
                  f"slope {slope:.4f} per unit lag, 95% CI [{lo:.4f}, {hi:.4f}]")


def test_c11_discriminator():
    factory = FeatureDrill()
    disc = fire_drill_train(factory, 100, seed=11)
    again = fire_drill_train(factory, 100, seed=11)
    xs, ys = held_out_drills(factory, 1000, seed=111)
    accuracy = balanced_accuracy(disc, xs, ys)
    ok = accuracy >= 0.90 and disc == again
    assert report(11, "fire-drill discriminator", ok,
                  f"held-out balanced accuracy {accuracy:.4f}; deterministic={disc == again}")


def test_c12_trust_but_verify():
    matches = 0
    for seed in range(100):
        rng = SplitMix64(seed)
        initial = AccountState({a: 50 + rng.randbelow(100) for a in range(5)})
        stream = random_txn_stream(seed)
        ledger = run_fast_commit(initial, stream, trust_threshold=1 + rng.randbelow(60),
                                 deferral=1 + rng.randbelow(6))
        oracle = initial.copy()
        for _, tx in stream:
            if oracle.check(tx) is None:
                oracle.apply(tx)
        matches += ledger.confirmed == oracle and not ledger.pending
    assert report(12, "trust-but-verify reconciliation", matches == 100,
                  f"{matches}/100 runs match the full-consensus oracle")


def test_c13_hypotheses():
    params = MemoryParams(h1_seeds=100, h2_probes=1000, h3_trials=200)
    _, h1 = run_h1(params, 13)
    _, h2 = run_h2(params, 13)
    _, h3 = run_h3(params, 13)
    ok = h1["passed"] and h2["passed"] and h3["passed"]
    detail = (f"H1 {h1['canonical_matches']}/{h1['seeds']} seeds; "
              f"H2 accuracy {h2['accuracy']:.4f} (p={h2['p_value']:.2g}); "
              f"H3 {h3['protected_flagged']}/{h3['trials']} flagged, "
              f"{h3['unprotected_siblings_ok']}/{h3['trials']} siblings intact")
    assert report(13, "hypothesis experiments", ok, detail)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
