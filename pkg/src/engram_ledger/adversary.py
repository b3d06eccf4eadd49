"""Attack injection, node-behaviour features, the fire-drill discriminator,
and the trust-but-verify fast-commit ledger."""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .hashing import hash_bytes
from .ledger import AccountState, Transaction
from .netsim import (
    Behavior,
    EventKind,
    NodeState,
    SimConfig,
    Simulation,
    SimTrace,
    VoteRecord,
)
from .prng import SplitMix64, splitmix64

log = logging.getLogger(__name__)


class BadScenario(ValueError):
    pass


class DegenerateTraining(ValueError):
    pass


# --- scenarios -----------------------------------------------------------


@dataclass(frozen=True)
class DoubleSpend:
    sender: int
    amounts: tuple = (60, 60)
    dt: int = 5
    at: int = 10
    nonce_reuse: bool = False


@dataclass(frozen=True)
class Tamper:
    node: int
    height: int
    bit: int
    at: int = 0


@dataclass(frozen=True)
class EquivocatingValidator:
    node: int
    rate: float


@dataclass(frozen=True)
class InvalidApprover:
    node: int
    rate: float


_SCENARIOS = {
    "double_spend": DoubleSpend,
    "tamper": Tamper,
    "equivocating": EquivocatingValidator,
    "invalid_approver": InvalidApprover,
}
_NAMES = {cls: name for name, cls in _SCENARIOS.items()}


def scenario_to_dict(scenario) -> dict:
    data = asdict(scenario)
    if "amounts" in data:
        data["amounts"] = list(data["amounts"])
    return {"kind": _NAMES[type(scenario)], **data}


def scenario_from_dict(data: dict):
    data = dict(data)
    try:
        cls = _SCENARIOS[data.pop("kind")]
    except KeyError as exc:
        raise BadScenario(f"unknown scenario kind {exc}") from None
    if "amounts" in data:
        data["amounts"] = tuple(data["amounts"])
    try:
        return cls(**data)
    except TypeError as exc:
        raise BadScenario(str(exc)) from None


def _scenario_seed(sim: Simulation, scenario) -> int:
    h = hash_bytes(repr(scenario_to_dict(scenario)).encode())
    return splitmix64(sim.config.seed ^ int.from_bytes(h.value[:8], "big"))


def inject_scenario(sim: Simulation, scenario) -> None:
    """Schedule a scenario's malicious events into ``sim``."""
    cfg = sim.config
    if isinstance(scenario, DoubleSpend):
        if not 0 <= scenario.sender < cfg.n_accounts:
            raise BadScenario(f"sender {scenario.sender} is not an account")
        if len(scenario.amounts) != 2 or min(scenario.amounts) < 0:
            raise BadScenario("a double spend needs two non-negative amounts")
        if scenario.dt < 0 or scenario.at < sim.now:
            raise BadScenario("double spend times must not be in the past")
        first = sim.next_nonce(scenario.sender)
        second = first if scenario.nonce_reuse else sim.next_nonce(scenario.sender)
        recipient = (scenario.sender + 1) % cfg.n_accounts
        for amount, nonce, t in ((scenario.amounts[0], first, scenario.at),
                                 (scenario.amounts[1], second, scenario.at + scenario.dt)):
            tx = Transaction(scenario.sender, recipient, amount, nonce, t)
            sim.schedule(t, EventKind.TXN_ARRIVAL, txn=tx)
    elif isinstance(scenario, Tamper):
        if not 0 <= scenario.node < cfg.n_nodes:
            raise BadScenario(f"node {scenario.node} does not exist")
        if not 0 <= scenario.height <= max(cfg.run_blocks, sim.max_height()):
            raise BadScenario(f"height {scenario.height} is never reached")
        if scenario.bit < 0 or scenario.at < sim.now:
            raise BadScenario("bad tamper bit or time")
        sim.schedule(scenario.at, EventKind.TAMPER, node=scenario.node,
                     height=scenario.height, bit=scenario.bit)
    elif isinstance(scenario, (EquivocatingValidator, InvalidApprover)):
        if not 0 <= scenario.node < cfg.n_nodes:
            raise BadScenario(f"node {scenario.node} does not exist")
        if not 0.0 <= scenario.rate <= 1.0:
            raise BadScenario("rate must be in [0, 1]")
        node = sim.nodes[scenario.node]
        seed = _scenario_seed(sim, scenario)
        node.behavior = Behavior(_NAMES[type(scenario)], scenario.rate, seed)
        node.behavior_rng = SplitMix64(seed)
    else:
        raise BadScenario(f"not a scenario: {scenario!r}")


def build_simulation(config: SimConfig) -> Simulation:
    sim = Simulation(config)
    for entry in config.adversaries:
        inject_scenario(sim, scenario_from_dict(entry) if isinstance(entry, dict) else entry)
    return sim


# --- features ------------------------------------------------------------


@dataclass(frozen=True)
class NodeBehaviorFeatures:
    invalid_approval: float = 0.0
    conflicting_votes: float = 0.0
    latency_z: float = 0.0
    window: tuple = (0, 0)

    def vector(self) -> np.ndarray:
        return np.array([self.invalid_approval, self.conflicting_votes, self.latency_z])


def extract_features(trace: SimTrace | Iterable[VoteRecord], node: int,
                     window: tuple | None = None) -> NodeBehaviorFeatures:
    """Behaviour of ``node`` over rounds ``[start, end)`` of ``window``.

    * invalid_approval: share of the node's votes on known-invalid blocks
      that approved them.
    * conflicting_votes: share of the node's votes that contradict another
      vote it cast on the same segment.
    * latency_z: the node's mean vote latency as a z-score against all
      votes in the window.

    Any zero denominator gives 0.
    """
    votes = trace.votes if isinstance(trace, SimTrace) else list(trace)
    if window is not None:
        votes = [v for v in votes if window[0] <= v.round < window[1]]
        span = tuple(window)
    else:
        span = (min((v.round for v in votes), default=0),
                max((v.round for v in votes), default=-1) + 1)
    mine = [v for v in votes if v.node == node]
    if not mine:
        return NodeBehaviorFeatures(window=span)
    on_invalid = [v for v in mine if v.known_invalid]
    f1 = sum(v.approve for v in on_invalid) / len(on_invalid) if on_invalid else 0.0
    f2 = sum(v.conflicting for v in mine) / len(mine)
    latencies = np.array([v.latency for v in votes], dtype=float)
    std = latencies.std()
    own = np.mean([v.latency for v in mine])
    f3 = float((own - latencies.mean()) / std) if std > 0 else 0.0
    return NodeBehaviorFeatures(f1, f2, f3, span)


# --- discriminator -------------------------------------------------------


class Verdict(enum.Enum):
    TRUSTED = "Trusted"
    FLAGGED = "Flagged"


@dataclass(frozen=True)
class Classification:
    verdict: Verdict
    score: float


@dataclass(frozen=True)
class Discriminator:
    weights: tuple
    bias: float
    threshold: float

    def score(self, features) -> float:
        x = features.vector() if isinstance(features, NodeBehaviorFeatures) else features
        return float(np.dot(self.weights, x) + self.bias)


def classify_node(disc: Discriminator, feats) -> Classification:
    score = disc.score(feats)
    return Classification(Verdict.FLAGGED if score > disc.threshold else Verdict.TRUSTED, score)


class DrillFactory(Protocol):
    """Produces behaviour features for one drill node.

    ``intensity`` None means an honest node; otherwise it is the attack
    intensity, drawn from ``intensity_grid``.
    """

    intensity_grid: np.ndarray

    def sample(self, intensity: float | None, rng: np.random.Generator) -> np.ndarray: ...

    def representative(self, intensity: float) -> np.ndarray: ...


@dataclass
class FeatureDrill:
    """Invalid-approver drills drawn straight at the feature level.

    Attackers approve known-invalid blocks at their rate; honest nodes show
    only |N(0, noise)| on that feature. Vote conflicts and latency are
    uninformative noise for both classes.
    """

    low: float = 0.1
    high: float = 0.6
    noise: float = 0.01
    grid_points: int = 51
    scale: float = 1.0
    attacks: bool = True

    @property
    def intensity_grid(self) -> np.ndarray:
        if not self.attacks:
            return np.empty(0)
        return np.linspace(self.low, self.high, self.grid_points)

    def sample(self, intensity, rng):
        f1 = intensity if intensity is not None else abs(rng.normal(0.0, self.noise))
        f2 = abs(rng.normal(0.0, self.noise))
        f3 = rng.normal(0.0, 1.0)
        return self.scale * np.array([min(f1, 1.0), min(f2, 1.0), f3])

    def representative(self, intensity):
        return self.scale * np.array([intensity, 0.0, 0.0])

    def describe(self, intensity) -> str:
        return "Honest" if intensity is None else f"InvalidApprover(rate={intensity:.4f})"


@dataclass
class VoteDrill:
    """Drills run as committee voting, with features extracted from the votes.

    Each round a block goes to a committee; with probability
    ``invalid_share`` it is a known-invalid drill block. The drilled node
    either behaves honestly or as an invalid approver at the given rate.
    Honest nodes slip (approve an invalid block) with probability ``slip``.
    """

    rounds: int = 60
    committee: int = 5
    invalid_share: float = 0.3
    slip: float = 0.005
    latency: tuple = (1, 5)
    low: float = 0.1
    high: float = 0.6
    grid_points: int = 51

    @property
    def intensity_grid(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.grid_points)

    def votes(self, intensity, rng) -> list[VoteRecord]:
        records = []
        for rnd in range(self.rounds):
            invalid = rng.random() < self.invalid_share
            for node in range(self.committee):
                rate = intensity if (node == 0 and intensity is not None) else self.slip
                approve = (rng.random() < rate) if invalid else True
                latency = int(rng.integers(self.latency[0], self.latency[1] + 1))
                records.append(VoteRecord(rnd, rnd, node, f"drill-{rnd}", 0, approve,
                                          invalid, False, latency))
        return records

    def sample(self, intensity, rng):
        return extract_features(self.votes(intensity, rng), 0).vector()

    def representative(self, intensity):
        return np.array([intensity, 0.0, 0.0])

    def describe(self, intensity) -> str:
        return "Honest" if intensity is None else f"InvalidApprover(rate={intensity:.4f})"


@dataclass(frozen=True)
class DrillRecord:
    round: int
    scenario: str
    detected: bool


def _weakest_decile(weights: np.ndarray, bias: float, factory) -> np.ndarray:
    grid = factory.intensity_grid
    margins = np.array([weights @ factory.representative(i) + bias for i in grid])
    count = max(1, int(np.ceil(len(grid) / 10)))
    return grid[np.argsort(margins, kind="stable")[:count]]


def fire_drill_train(factory, rounds: int, seed: int, learning_rate: float = 0.1,
                     margin: float = 0.5, per_round: int = 20,
                     history: list | None = None) -> Discriminator:
    """Train a linear discriminator against a drill generator that keeps
    attacking where detection is weakest.

    Features are first divided by their RMS over a warm-up drill sample, so
    training is unaffected by the units the features come in. Each round
    the generator probes the intensity grid, takes the decile with the
    lowest score margin and draws attacks from it; an equal number of
    honest drills is mixed in. The discriminator learns by the margin
    perceptron rule. The threshold is the midpoint of the two class score
    means on a fresh calibration set.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    rng = np.random.default_rng(seed)
    grid = factory.intensity_grid
    if len(grid) == 0:
        raise DegenerateTraining("drills produced only honest samples")

    warmup = np.array([factory.sample(float(rng.choice(grid)), rng) for _ in range(100)]
                      + [factory.sample(None, rng) for _ in range(100)])
    scales = np.sqrt(np.mean(warmup ** 2, axis=0))
    scales[scales == 0.0] = 1.0

    w = np.zeros(3)
    b = 0.0
    for rnd in range(rounds):
        weakest = _weakest_decile(w / scales, b, factory)
        batch = [(float(rng.choice(weakest)), 1.0) for _ in range(per_round)]
        batch += [(None, -1.0)] * per_round
        for idx in rng.permutation(len(batch)):
            intensity, label = batch[idx]
            x = factory.sample(intensity, rng) / scales
            score = w @ x + b
            if history is not None:
                history.append(DrillRecord(rnd, factory.describe(intensity), bool(score > 0)))
            if label * score <= margin:
                w = w + learning_rate * label * x
                b = b + learning_rate * label
    if w[0] == 0.0 and w[1] == 0.0 and w[2] == 0.0:
        raise DegenerateTraining("no update ever moved the weights")
    raw = w / scales
    attack = np.array([factory.sample(float(rng.choice(grid)), rng) for _ in range(200)])
    honest = np.array([factory.sample(None, rng) for _ in range(200)])
    theta = 0.5 * (float(np.mean(attack @ raw)) + float(np.mean(honest @ raw))) + b
    return Discriminator(tuple(float(v) for v in raw), float(b), theta)


def held_out_drills(factory, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` attack and ``n`` honest feature vectors; labels 1 = malicious."""
    rng = np.random.default_rng(seed)
    grid = factory.intensity_grid
    xs = [factory.sample(float(rng.choice(grid)), rng) for _ in range(n)]
    xs += [factory.sample(None, rng) for _ in range(n)]
    return np.array(xs), np.array([1] * n + [0] * n)


def balanced_accuracy(disc: Discriminator, features: np.ndarray, labels: np.ndarray) -> float:
    flagged = np.array([classify_node(disc, x).verdict is Verdict.FLAGGED for x in features])
    labels = np.asarray(labels).astype(bool)
    tpr = flagged[labels].mean()
    tnr = (~flagged[~labels]).mean()
    return float(0.5 * (tpr + tnr))


# --- trust but verify ----------------------------------------------------


class Decision(enum.Enum):
    PROVISIONAL = "provisional"
    FULL_CONSENSUS = "full_consensus"


class Outcome(enum.Enum):
    CONFIRMED = "confirmed"
    REVERTED = "reverted"
    ACCEPTED = "accepted"
    REJECTED = "rejected"


@dataclass
class PendingCommit:
    txn: Transaction
    commit_round: int
    deadline: int
    fast: bool


@dataclass
class FastCommitLedgerState:
    """Confirmed state plus an optimistic view that includes provisional commits.

    Every transaction, fast or not, is verified in arrival order; fast ones
    are visible in ``provisional`` before that happens.
    """

    confirmed: AccountState
    provisional: dict = field(default_factory=dict)
    pending: deque = field(default_factory=deque)
    confirmed_txns: list = field(default_factory=list)
    reverted: list = field(default_factory=list)
    log: list = field(default_factory=list)

    @classmethod
    def from_state(cls, state: AccountState) -> "FastCommitLedgerState":
        return cls(state.copy(), dict(state.balances))


def _shift(view: dict, tx: Transaction, sign: int) -> None:
    view[tx.sender] = view.get(tx.sender, 0) - sign * tx.amount
    view[tx.recipient] = view.get(tx.recipient, 0) + sign * tx.amount


def fast_commit(ledger: FastCommitLedgerState, txn: Transaction, trust_threshold: int,
                deferral: int, round_: int) -> Decision:
    """Small transactions commit provisionally now and are checked within
    ``deferral`` rounds; larger ones wait for full verification."""
    if deferral < 1:
        raise ValueError("deferral window must be at least one round")
    fast = trust_threshold > 0 and txn.amount <= trust_threshold
    if fast:
        _shift(ledger.provisional, txn, +1)
        ledger.pending.append(PendingCommit(txn, round_, round_ + deferral, True))
        return Decision.PROVISIONAL
    ledger.pending.append(PendingCommit(txn, round_, round_ + 1, False))
    return Decision.FULL_CONSENSUS


def settle(ledger: FastCommitLedgerState, round_: int) -> list[tuple[Transaction, Outcome]]:
    """Run full verification on every pending entry whose time has come.

    Entries are verified strictly in arrival order, so a large transaction
    queued behind a deferred small one waits for it.
    """
    outcomes = []
    while ledger.pending and ledger.pending[0].deadline <= round_:
        entry = ledger.pending.popleft()
        ok = ledger.confirmed.check(entry.txn) is None
        if ok:
            ledger.confirmed.apply(entry.txn)
            ledger.confirmed_txns.append(entry.txn)
        if entry.fast:
            outcome = Outcome.CONFIRMED if ok else Outcome.REVERTED
            if not ok:
                _shift(ledger.provisional, entry.txn, -1)
                ledger.reverted.append(entry.txn)
                log.info("reverted provisional commit %s", entry.txn)
        else:
            outcome = Outcome.ACCEPTED if ok else Outcome.REJECTED
            if ok:
                _shift(ledger.provisional, entry.txn, +1)
        ledger.log.append((round_, entry.txn, outcome))
        outcomes.append((entry.txn, outcome))
    return outcomes


def random_txn_stream(seed: int, n_accounts: int = 5, rounds: int = 40,
                      per_round: int = 3, max_amount: int = 80,
                      nonce_reuse: float = 0.1) -> list[tuple[int, Transaction]]:
    """(round, txn) arrivals with overdrafts and occasional nonce reuse."""
    rng = SplitMix64(splitmix64(seed))
    nonces: dict[int, int] = {}
    stream = []
    for rnd in range(rounds):
        for _ in range(per_round):
            sender = rng.randbelow(n_accounts)
            recipient = (sender + 1 + rng.randbelow(n_accounts - 1)) % n_accounts
            nonce = nonces.get(sender, 0)
            if nonce and rng.random() < nonce_reuse:
                nonce -= 1
            else:
                nonces[sender] = nonce + 1
            stream.append((rnd, Transaction(sender, recipient, 1 + rng.randbelow(max_amount),
                                            nonce, rnd)))
    return stream


def run_fast_commit(initial: AccountState, stream: Sequence[tuple[int, Transaction]],
                    trust_threshold: int, deferral: int) -> FastCommitLedgerState:
    """Feed ``stream`` through the fast-commit ledger and settle everything."""
    ledger = FastCommitLedgerState.from_state(initial)
    last = 0
    for rnd, tx in stream:
        while last < rnd:
            last += 1
            settle(ledger, last)
        fast_commit(ledger, tx, trust_threshold, deferral, rnd)
    while ledger.pending:
        last += 1
        settle(ledger, last)
    return ledger
