"""Episodic memory as a hash chain.

Each episode stores its elements, the digest of its predecessor and its own
digest over both. Neurons are recruited into an engram per episode by
excitability, and a sparse code is kept alongside. Three experiments probe
how such a memory behaves:

* h1: disrupting two episodes hides the order of those between them when
  order lives only in the links (LinkedList), but not when positions are
  stored explicitly (Array).
* h2: a false memory forks the chain; the original stays stored and can be
  probed above chance.
* h3: a single corrupted element makes integrity-checked recall of the
  whole episode fail, while unchecked recall returns the intact siblings.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .hashing import Digest, SeparatorParams, SparseCode, hash_bytes, sparse_separate
from .ledger import Mode, Order, order_by_links

log = logging.getLogger(__name__)

GENESIS_ID = 0
_LEN = struct.Struct(">I")


class PoolTooSmall(ValueError):
    pass


class EmptyEpisode(ValueError):
    pass


class CueNotFound(LookupError):
    pass


class UnknownEpisode(KeyError):
    pass


class BadIndex(IndexError):
    pass


class IntegrityMode(enum.Enum):
    PROTECTED = "Protected"
    UNPROTECTED = "Unprotected"


class RecallStatus(enum.Enum):
    OK = "Ok"
    INTEGRITY_VIOLATION = "IntegrityViolation"


# --- engrams -------------------------------------------------------------


@dataclass(frozen=True)
class EngramParams:
    engram_size: int = 40
    boost: float = 4.0
    tau_mem: float = 10.0
    floor: float = 1.0
    tau_young: float = 20.0
    young_gain: float = 2.0

    def __post_init__(self):
        if self.engram_size < 1 or self.tau_mem <= 0 or self.floor <= 0:
            raise ValueError("engram_size, tau_mem and floor must be positive")
        if self.boost < 0 or self.young_gain < 1 or self.tau_young < 0:
            raise ValueError("boost >= 0, young_gain >= 1, tau_young >= 0 required")


@dataclass(frozen=True)
class Engram:
    episode_id: int
    neurons: frozenset


class EngramPool:
    """Excitability of ``n_neurons`` cells, relaxing toward ``params.floor``."""

    def __init__(self, n_neurons: int, params: EngramParams = EngramParams(),
                 birth_times: Sequence[float] | None = None):
        if n_neurons < 1:
            raise PoolTooSmall("the pool needs at least one neuron")
        self.params = params
        self.excitability = np.full(n_neurons, params.floor)
        self.birth_time = (np.zeros(n_neurons) if birth_times is None
                           else np.asarray(birth_times, dtype=float))
        self.clock = 0.0

    @property
    def size(self) -> int:
        return len(self.excitability)

    def add_neurons(self, count: int, t: float) -> None:
        """Neurogenesis: ``count`` new cells born at time ``t``."""
        self.excitability = np.concatenate([self.excitability, np.full(count, self.params.floor)])
        self.birth_time = np.concatenate([self.birth_time, np.full(count, float(t))])

    def decay_to(self, t: float) -> None:
        if t < self.clock:
            raise ValueError("time cannot run backwards")
        factor = math.exp(-(t - self.clock) / self.params.tau_mem)
        floor = self.params.floor
        self.excitability = floor + (self.excitability - floor) * factor
        self.clock = t


def recruit_engram(pool: EngramPool, t: float, rng: np.random.Generator,
                   episode_id: int = -1) -> Engram:
    """Recruit ``engram_size`` neurons with probability proportional to excitability.

    Neurons younger than ``tau_young`` have their weight multiplied by
    ``young_gain``; unborn neurons cannot be picked. Recruits become more
    excitable by ``boost``.
    """
    p = pool.params
    pool.decay_to(t)
    age = t - pool.birth_time
    weights = pool.excitability * np.where(age < p.tau_young, p.young_gain, 1.0)
    weights[age < 0] = 0.0
    available = int(np.count_nonzero(weights))
    if p.engram_size > available:
        raise PoolTooSmall(f"need {p.engram_size} neurons, {available} available")
    picked = rng.choice(pool.size, size=p.engram_size, replace=False, p=weights / weights.sum())
    pool.excitability[picked] += p.boost
    return Engram(episode_id, frozenset(int(i) for i in picked))


def engram_overlap(a: Engram, b: Engram) -> int:
    return len(a.neurons & b.neurons)


# --- episodes ------------------------------------------------------------


def element_bytes(vector) -> bytes:
    return np.asarray(vector, dtype=">f8").tobytes()


def element_vector(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=">f8").astype(np.float64)


def episode_content(elements: Sequence[bytes]) -> bytes:
    parts = [_LEN.pack(len(elements))]
    for e in elements:
        parts.append(_LEN.pack(len(e)))
        parts.append(e)
    return b"".join(parts)


def compute_episode_digest(elements: Sequence[bytes], prev_digest: Digest) -> Digest:
    return hash_bytes(episode_content(elements) + prev_digest.value)


@dataclass
class Episode:
    episode_id: int
    elements: list
    prev_digest: Digest
    episode_digest: Digest
    encode_time: float
    parent: int | None
    engram: Engram | None = None
    code: SparseCode | None = None

    def intact(self) -> bool:
        return compute_episode_digest(self.elements, self.prev_digest) == self.episode_digest


def _genesis() -> Episode:
    zero = Digest.zero()
    return Episode(GENESIS_ID, [], zero, compute_episode_digest([], zero), 0.0, None)


@dataclass
class EpisodicChain:
    """Episodes linked by digest, possibly branching; never rewritten.

    The recall path starts at genesis and always follows the newest child.
    ``propagate_integrity`` extends integrity checks to every ancestor.
    """

    mode: Mode = Mode.LINKED_LIST
    separator: SeparatorParams = SeparatorParams()
    propagate_integrity: bool = False
    episodes: dict = field(default_factory=lambda: {GENESIS_ID: _genesis()})
    children: dict = field(default_factory=lambda: {GENESIS_ID: []})
    disrupted: frozenset = frozenset()

    def __getitem__(self, episode_id: int) -> Episode:
        try:
            return self.episodes[episode_id]
        except KeyError:
            raise UnknownEpisode(episode_id) from None

    def successor(self, episode_id: int) -> int | None:
        kids = self.children.get(episode_id, [])
        return max(kids) if kids else None

    def path(self) -> list[int]:
        ids = [GENESIS_ID]
        while (nxt := self.successor(ids[-1])) is not None:
            ids.append(nxt)
        return ids

    @property
    def tip(self) -> int:
        return self.path()[-1]

    @property
    def height(self) -> int:
        return len(self.path()) - 1

    def _add(self, episode: Episode) -> Episode:
        self.episodes[episode.episode_id] = episode
        self.children[episode.episode_id] = []
        self.children[episode.parent].append(episode.episode_id)
        return episode

    def _next_id(self) -> int:
        return max(self.episodes) + 1


def fold_elements(elements: Sequence[bytes], dim: int) -> np.ndarray:
    """Concatenate element vectors and wrap them into ``dim`` slots by summation."""
    flat = np.concatenate([element_vector(e) for e in elements]) if elements else np.zeros(0)
    folded = np.zeros(dim)
    np.add.at(folded, np.arange(len(flat)) % dim, flat)
    return folded


def encode_episode(chain: EpisodicChain, pool: EngramPool | None, elements, t: float,
                   rng: np.random.Generator | None = None) -> Episode:
    """Append an episode after the recall-path tip."""
    if len(elements) == 0:
        raise EmptyEpisode("an episode needs at least one element")
    stored = [e if isinstance(e, bytes) else element_bytes(e) for e in elements]
    parent = chain[chain.tip]
    episode = Episode(chain._next_id(), stored, parent.episode_digest,
                      compute_episode_digest(stored, parent.episode_digest), t,
                      parent.episode_id)
    if pool is not None:
        episode.engram = recruit_engram(pool, t, rng or np.random.default_rng(0),
                                        episode.episode_id)
    folded = fold_elements(stored, chain.separator.input_dim)
    if np.any(folded):
        episode.code = sparse_separate(chain.separator, folded)
    return chain._add(episode)


# --- recall --------------------------------------------------------------


@dataclass(frozen=True)
class RecallResult:
    status: RecallStatus
    episode_id: int
    elements: tuple = ()

    @property
    def ok(self) -> bool:
        return self.status is RecallStatus.OK


def _find_cue(chain: EpisodicChain, cue: bytes) -> int:
    path = chain.path()
    on_path = set(path)
    for eid in path + sorted(set(chain.episodes) - on_path):
        if cue in chain.episodes[eid].elements:
            return eid
    raise CueNotFound("no stored element matches the cue")


def _recall(chain: EpisodicChain, eid: int, mode: IntegrityMode) -> RecallResult:
    episode = chain[eid]
    if mode is IntegrityMode.PROTECTED:
        suspects = [episode]
        if chain.propagate_integrity:
            parent = episode.parent
            while parent is not None:
                suspects.append(chain[parent])
                parent = chain[parent].parent
        if not all(e.intact() for e in suspects):
            return RecallResult(RecallStatus.INTEGRITY_VIOLATION, eid)
    return RecallResult(RecallStatus.OK, eid, tuple(episode.elements))


def recall_by_cue(chain: EpisodicChain, cue, integrity_mode: IntegrityMode) -> RecallResult:
    """Recall the whole episode that contains ``cue`` (exact match)."""
    cue = cue if isinstance(cue, bytes) else element_bytes(cue)
    return _recall(chain, _find_cue(chain, cue), integrity_mode)


def recall_successor(chain: EpisodicChain, episode_id: int,
                     integrity_mode: IntegrityMode = IntegrityMode.PROTECTED) -> RecallResult:
    """Recall what followed ``episode_id`` on the preferred (newest) branch."""
    nxt = chain.successor(chain[episode_id].episode_id)
    if nxt is None:
        raise CueNotFound(f"episode {episode_id} has no successor")
    return _recall(chain, nxt, integrity_mode)


# --- manipulations -------------------------------------------------------


def disrupt_links(chain: EpisodicChain, targets) -> EpisodicChain:
    for t in targets:
        chain[t]
    return dataclasses.replace(chain, disrupted=chain.disrupted | frozenset(targets))


def episode_order(chain: EpisodicChain, a: int, b: int) -> Order:
    """Temporal order of two recall-path episodes under the chain's mode."""
    position = {eid: h for h, eid in enumerate(chain.path())}
    for eid in (a, b):
        if eid not in position:
            raise UnknownEpisode(eid)
    disrupted = [position[d] for d in chain.disrupted if d in position]
    return order_by_links(position[a], position[b], chain.mode, disrupted)


@dataclass(frozen=True)
class ForkResult:
    false_id: int
    relinked_id: int | None


def induce_false_memory(chain: EpisodicChain, episode_id: int, false_elements,
                        t: float, pool: EngramPool | None = None,
                        rng: np.random.Generator | None = None) -> ForkResult:
    """Fork a false version of ``episode_id`` off its parent.

    A copy of the original successor is re-linked onto the false episode;
    the original branch is left exactly as it was. When the episode has no
    successor the fork is still made and nothing is re-linked.
    """
    original = chain[episode_id]
    if original.parent is None:
        raise UnknownEpisode("the genesis episode cannot be replaced")
    successor = chain.successor(episode_id)
    parent = chain[original.parent]
    stored = [e if isinstance(e, bytes) else element_bytes(e) for e in false_elements]
    if not stored:
        raise EmptyEpisode("a false memory needs at least one element")
    rng = rng or np.random.default_rng(0)

    def add(elements, prev: Episode) -> Episode:
        ep = Episode(chain._next_id(), list(elements), prev.episode_digest,
                     compute_episode_digest(elements, prev.episode_digest), t, prev.episode_id)
        if pool is not None:
            ep.engram = recruit_engram(pool, t, rng, ep.episode_id)
        return chain._add(ep)

    fake = add(stored, parent)
    if successor is None:
        log.warning("episode %d has no successor; fork made without re-link", episode_id)
        return ForkResult(fake.episode_id, None)
    relinked = add(chain[successor].elements, fake)
    return ForkResult(fake.episode_id, relinked.episode_id)


def attack_element(chain: EpisodicChain, episode_id: int, index: int, bit: int = 0) -> None:
    """Flip one stored bit of an element; the stored digest is left alone."""
    episode = chain[episode_id]
    if not 0 <= index < len(episode.elements):
        raise BadIndex(f"episode {episode_id} has no element {index}")
    raw = bytearray(episode.elements[index])
    if not 0 <= bit < len(raw) * 8:
        raise BadIndex(f"bit {bit} outside a {len(raw)}-byte element")
    raw[bit // 8] ^= 0x80 >> (bit % 8)
    episode.elements[index] = bytes(raw)


def probe_original(chain: EpisodicChain, episode_id: int, rng: np.random.Generator,
                   retention: float = 0.75, alternatives: int = 4) -> bool:
    """Forced-choice recognition of an original episode among ``alternatives``.

    If the original is still stored and intact its trace is retained with
    probability ``retention``; otherwise the subject guesses.
    """
    episode = chain.episodes.get(episode_id)
    persists = episode is not None and episode.intact()
    if persists and rng.random() < retention:
        return True
    return int(rng.integers(alternatives)) == 0


# --- experiments ---------------------------------------------------------


@dataclass(frozen=True)
class MemoryParams:
    n_neurons: int = 2048
    engram: EngramParams = EngramParams()
    separator: SeparatorParams = SeparatorParams()
    elements_per_episode: int = 3
    element_dim: int = 16
    retention: float = 0.75
    alternatives: int = 4
    h1_seeds: int = 100
    h2_probes: int = 1000
    h3_trials: int = 200


def _random_elements(rng: np.random.Generator, params: MemoryParams) -> list[bytes]:
    return [element_bytes(rng.standard_normal(params.element_dim))
            for _ in range(params.elements_per_episode)]


def build_chain(rng: np.random.Generator, params: MemoryParams, length: int,
                mode: Mode = Mode.LINKED_LIST, with_pool: bool = True) -> EpisodicChain:
    chain = EpisodicChain(mode=mode, separator=params.separator)
    pool = EngramPool(params.n_neurons, params.engram) if with_pool else None
    for i in range(length):
        encode_episode(chain, pool, _random_elements(rng, params), float(i), rng)
    return chain


def run_h1(params: MemoryParams, seed: int) -> tuple[list[dict], dict]:
    """Disrupt A and D in A..F and ask for the order of B and E, per seed.

    A second, randomized sweep checks every pair on chains of random length
    with random disruptions.
    """
    rows = []
    canonical_ok = 0
    for s in range(params.h1_seeds):
        rng = np.random.default_rng([seed, s])
        base = build_chain(rng, params, 6, with_pool=False)
        a, b, d, e = 1, 2, 4, 5
        results = {}
        for mode in Mode:
            view = disrupt_links(dataclasses.replace(base, mode=mode), {a, d})
            results[mode] = episode_order(view, b, e)
            rows.append({"seed": s, "query": "B-E", "mode": mode.value,
                         "disrupted": "A;D", "result": results[mode].value})
        canonical_ok += (results[Mode.LINKED_LIST] is Order.UNKNOWN
                         and results[Mode.ARRAY] is Order.BEFORE)

    sweep_ok = True
    rng = np.random.default_rng([seed, 1 << 20])
    for _ in range(params.h1_seeds):
        length = int(rng.integers(4, 13))
        targets = set(int(x) for x in rng.choice(np.arange(1, length + 1),
                                                 size=int(rng.integers(1, 4)), replace=False))
        reachable_end = min(targets)
        for mode in Mode:
            chain = disrupt_links(EpisodicChain(mode=mode), set())
            for _ in range(length):
                chain._add(Episode(chain._next_id(), [], Digest.zero(), Digest.zero(), 0.0,
                                   chain.tip))
            chain = disrupt_links(chain, targets)
            for x in range(1, length + 1):
                for y in range(x + 1, length + 1):
                    got = episode_order(chain, x, y)
                    separated = (x < reachable_end) != (y < reachable_end) or x in targets
                    if mode is Mode.ARRAY and got is Order.UNKNOWN:
                        sweep_ok = False
                    if mode is Mode.LINKED_LIST and separated and got is not Order.UNKNOWN:
                        sweep_ok = False
    summary = {"canonical_matches": canonical_ok, "seeds": params.h1_seeds,
               "random_sweep_consistent": sweep_ok,
               "passed": canonical_ok == params.h1_seeds and sweep_ok}
    return rows, summary


def run_h2(params: MemoryParams, seed: int) -> tuple[list[dict], dict]:
    """Induce a false B' over A-B-C, check it is what gets recalled, then probe the original B."""
    rows = []
    correct = 0
    false_recalled = 0
    for probe in range(params.h2_probes):
        rng = np.random.default_rng([seed, probe])
        chain = build_chain(rng, params, 3, with_pool=False)
        a, b = 1, 2
        original = list(chain[b].elements)
        fork = induce_false_memory(chain, b, _random_elements(rng, params), 3.0)
        recalled = recall_successor(chain, a)
        is_false = recalled.episode_id == fork.false_id and \
            list(recalled.elements) == chain[fork.false_id].elements
        unchanged = chain[b].elements == original and chain[b].intact()
        hit = probe_original(chain, b, rng, params.retention, params.alternatives)
        correct += hit
        false_recalled += is_false
        rows.append({"probe": probe, "recalled_false": int(is_false),
                     "original_intact": int(unchanged), "correct": int(hit)})
    n = params.h2_probes
    chance = 1.0 / params.alternatives
    accuracy = correct / n
    predicted = params.retention + (1 - params.retention) * chance
    p_value = float(stats.binomtest(correct, n, chance, alternative="greater").pvalue) if n else 1.0
    summary = {"probes": n, "accuracy": accuracy, "chance": chance,
               "predicted": predicted, "p_value": p_value,
               "false_recalled": false_recalled,
               "passed": bool(n and p_value < 0.01 and abs(accuracy - predicted) <= 0.03
                              and false_recalled == n)}
    return rows, summary


def run_h3(params: MemoryParams, seed: int) -> tuple[list[dict], dict]:
    """Flip one bit of one element; Protected recall must refuse, Unprotected must
    return the intact siblings plus the corrupted element."""
    rows = []
    protected_flagged = 0
    siblings_ok = 0
    rng = np.random.default_rng(seed)
    for trial in range(params.h3_trials):
        chain = build_chain(rng, params, 6, with_pool=False)
        eid = int(rng.integers(1, 7))
        idx = int(rng.integers(params.elements_per_episode))
        bit = int(rng.integers(params.element_dim * 64))
        before = list(chain[eid].elements)
        attack_element(chain, eid, idx, bit)
        cue = before[(idx + 1) % len(before)]
        protected = recall_by_cue(chain, cue, IntegrityMode.PROTECTED)
        unprotected = recall_by_cue(chain, cue, IntegrityMode.UNPROTECTED)
        flagged = protected.status is RecallStatus.INTEGRITY_VIOLATION and not protected.elements
        intact = all(unprotected.elements[j] == before[j]
                     for j in range(len(before)) if j != idx)
        altered = unprotected.elements[idx] != before[idx]
        protected_flagged += flagged
        siblings_ok += intact and altered
        rows.append({"trial": trial, "episode": eid, "element": idx, "bit": bit,
                     "protected": protected.status.value,
                     "unprotected_siblings_intact": int(intact),
                     "unprotected_element_altered": int(altered)})
    n = params.h3_trials
    summary = {"trials": n, "protected_flagged": protected_flagged,
               "unprotected_siblings_ok": siblings_ok,
               "passed": protected_flagged == n and siblings_ok == n}
    return rows, summary


def overlap_vs_lag(params: EngramParams, n_neurons: int, lags: Sequence[float],
                   pairs_per_lag: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Overlap between an engram and one recruited ``lag`` later, fresh pool per pair."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for lag in lags:
        for _ in range(pairs_per_lag):
            pool = EngramPool(n_neurons, params)
            first = recruit_engram(pool, 0.0, rng)
            second = recruit_engram(pool, float(lag), rng)
            xs.append(float(lag))
            ys.append(engram_overlap(first, second))
    return np.array(xs), np.array(ys, dtype=float)


def slope_with_ci(x: np.ndarray, y: np.ndarray, seed: int, resamples: int = 1000,
                  level: float = 0.95) -> tuple[float, float, float]:
    """Least-squares slope and a percentile bootstrap interval over pairs."""
    slope = float(np.polyfit(x, y, 1)[0])
    rng = np.random.default_rng(seed)
    boots = np.empty(resamples)
    for i in range(resamples):
        idx = rng.integers(0, len(x), len(x))
        boots[i] = np.polyfit(x[idx], y[idx], 1)[0]
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(boots, [tail, 100 - tail])
    return slope, float(lo), float(hi)
