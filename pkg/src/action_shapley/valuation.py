"""Cut-off cardinality, action categorization, ranking and Action Shapley.

All functions work off a :class:`CoalitionEvaluator`, which memoizes one
outcome per distinct coalition so every downstream quantity is derived from
the same coalition values.
"""
import itertools
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .domain import ActionSet, ActionSpace, DomainError, enumerate_subsets, sample_subsets

EXACT_CAP = 20

DISPENSABLE = "dispensable"
INDISPENSABLE = "indispensable"

EPSILON_NOTE = (
    "epsilon is a stall tolerance across seeded repetitions of one coalition: "
    "repetitions stop once the best reward fails to improve by epsilon; the "
    "coalition succeeds iff any repetition reaches the threshold. Alternative "
    "reading (not used): an experiment-level bound on reward improvement "
    "between cardinalities.")

RESTRICTED_NOTE = (
    "restricted mode keeps subsets S with |S| >= cutoff - 1; each included "
    "cardinality receives equal weight, rescaled so the included weights sum "
    "to one (scale = C * n / number_of_included_cardinalities).")


@dataclass(frozen=True)
class ValuationConfig:
    epsilon: float = 1.0
    acceptable_iterations: int = 400
    mc_budget: int = 100
    failure_value: float = None
    shapley_constant: float = None
    repetitions: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not (isinstance(self.acceptable_iterations, (int, np.integer)) and self.acceptable_iterations >= 1):
            raise DomainError("acceptable_iterations must be a positive integer")
        if not (isinstance(self.mc_budget, (int, np.integer)) and self.mc_budget >= 1):
            raise DomainError("mc_budget must be a positive integer")
        if not (isinstance(self.repetitions, (int, np.integer)) and self.repetitions >= 1):
            raise DomainError("repetitions must be a positive integer")
        if self.failure_value is None:
            object.__setattr__(self, "failure_value", float(-(self.acceptable_iterations + 100)))
        if not self.failure_value < -self.acceptable_iterations:
            raise DomainError("failure_value must be below -acceptable_iterations")

    def constant_for(self, n):
        return 1.0 / n if self.shapley_constant is None else float(self.shapley_constant)


@dataclass(frozen=True)
class CoalitionOutcome:
    action_set: ActionSet
    success: bool
    value: float
    episodes: tuple = field(repr=False)

    @property
    def best(self):
        return max(self.episodes, key=lambda e: e.reward)


class CoalitionEvaluator:
    """Memoized coalition evaluation.

    Parameters
    ----------
    episode_fn : callable
        ``episode_fn(action_set, seed) -> EpisodeResult``.
    cfg : ValuationConfig
    seed : int
        Repetition ``r`` of a coalition runs with seed ``seed + r``.

    Concurrent callers asking for the same coalition share one computation;
    the first finished result is kept.
    """

    def __init__(self, episode_fn, cfg, seed=0):
        self.episode_fn = episode_fn
        self.cfg = cfg
        self.seed = int(seed)
        self._memo = {}
        self._locks = {}
        self._guard = threading.Lock()
        self.episode_count = 0

    def _key_lock(self, key):
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def evaluate(self, action_set):
        key = action_set.member_ids
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        with self._key_lock(key):
            hit = self._memo.get(key)
            if hit is not None:
                return hit
            out = self._run(action_set)
            with self._guard:
                return self._memo.setdefault(key, out)

    def _run(self, action_set):
        cfg = self.cfg
        episodes = []
        best = None
        for r in range(cfg.repetitions):
            res = self.episode_fn(action_set, self.seed + r)
            with self._guard:
                self.episode_count += 1
            episodes.append(res)
            if best is not None and res.reward < best + cfg.epsilon:
                break
            best = res.reward if best is None else max(best, res.reward)
        wins = [e.reward for e in episodes if e.success]
        value = max(wins) if wins else cfg.failure_value
        return CoalitionOutcome(action_set, bool(wins), float(value), tuple(episodes))

    def evaluate_many(self, sets, workers=1):
        sets = list(sets)
        if workers is None or workers <= 1 or len(sets) <= 1:
            return [self.evaluate(s) for s in sets]
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            return list(pool.map(self.evaluate, sets))

    def value(self, action_set):
        if len(action_set) == 0:
            return self.cfg.failure_value
        return self.evaluate(action_set).value

    def success(self, action_set):
        return len(action_set) > 0 and self.evaluate(action_set).success

    @property
    def outcomes(self):
        """Memoized outcomes keyed by member-id tuple."""
        return dict(self._memo)


def coalition_value(action_set, evaluator, cfg):
    """Episode reward on success, ``cfg.failure_value`` otherwise (and for the empty set)."""
    if len(action_set) == 0:
        return float(cfg.failure_value)
    return float(evaluator.evaluate(action_set).value)


# ---------------------------------------------------------------------------
# cut-off cardinality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffResult:
    cutoff: int
    per_cardinality_outcomes: dict
    reduction_fraction: float
    n: int
    no_viable_coalition: bool = False


def reduction_fraction(n, cutoff):
    """Share of the power set skipped by only evaluating sizes >= cutoff."""
    kept = sum(math.comb(n, k) for k in range(max(cutoff, 1), n + 1))
    return 1.0 - kept / 2 ** n


def compute_cutoff_cardinality(space, evaluator, cfg, seed=0, workers=1):
    """Scan sizes downward from n; stop at the first size where all sampled sets fail.

    Parameters
    ----------
    space : ActionSpace
    evaluator : CoalitionEvaluator
    cfg : ValuationConfig
    seed : int
        Sampling seed; size ``k`` draws with ``seed + k``.
    workers : int

    Returns
    -------
    CutoffResult
        ``cutoff = k + 1`` for that first all-fail size ``k``, 1 if none
        all-fails. If the full set already fails, ``cutoff = n + 1`` and
        ``no_viable_coalition`` is set.
    """
    n = space.n
    outcomes = {}
    cutoff = 1
    for k in range(n, 0, -1):
        sets = sample_subsets(space, k, cfg.mc_budget, seed + k)
        res = evaluator.evaluate_many(sets, workers)
        outcomes[k] = [(o.action_set, o.success) for o in res]
        if not any(o.success for o in res):
            cutoff = k + 1
            break
    return CutoffResult(cutoff, outcomes, reduction_fraction(n, cutoff), n, cutoff == n + 1)


# ---------------------------------------------------------------------------
# categorization and ranking
# ---------------------------------------------------------------------------

class CategorizationVector(dict):
    """Ordered map action id -> 'dispensable' | 'indispensable'."""

    def dispensable(self):
        return [k for k, v in self.items() if v == DISPENSABLE]

    def indispensable(self):
        return [k for k, v in self.items() if v == INDISPENSABLE]


def categorize_actions(space, evaluator, cfg, workers=1):
    """An action is indispensable iff its leave-one-out coalition fails."""
    if space.n < 2:
        raise DomainError("categorization needs at least two actions")
    loo = [space.without(i) for i in space.ids]
    res = evaluator.evaluate_many(loo, workers)
    return CategorizationVector(
        (i, DISPENSABLE if o.success else INDISPENSABLE) for i, o in zip(space.ids, res))


@dataclass(frozen=True)
class RankEntry:
    action_set: ActionSet
    reward: float = None
    rank: int = None


@dataclass(frozen=True)
class RankList:
    ranked: tuple
    failed: tuple

    @property
    def entries(self):
        return self.ranked + self.failed

    def __len__(self):
        return len(self.ranked) + len(self.failed)


def rank_coalitions(space, outcomes):
    """Sort outcomes into a RankList; ties fall back to canonical position order."""
    def ident(o):
        return tuple(space.index(i) for i in o.action_set.member_ids)

    wins = sorted((o for o in outcomes if o.success), key=lambda o: (-o.value, ident(o)))
    fails = sorted((o for o in outcomes if not o.success), key=ident)
    ranked = tuple(RankEntry(o.action_set, o.value, r) for r, o in enumerate(wins, start=1))
    return RankList(ranked, tuple(RankEntry(o.action_set) for o in fails))


def rank_dispensable(space, evaluator, cfg, cutoff, workers=1):
    """Rank every coalition of size >= cutoff by reward; failures listed unranked.

    ``cutoff`` may be a :class:`CutoffResult` or an integer.
    """
    c = cutoff.cutoff if isinstance(cutoff, CutoffResult) else int(cutoff)
    sets = []
    for k in range(max(c, 1), space.n + 1):
        sets.extend(enumerate_subsets(space, k))
    return rank_coalitions(space, evaluator.evaluate_many(sets, workers))


# ---------------------------------------------------------------------------
# Action Shapley
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapleyValues:
    values: dict
    mode: str
    constant: float
    meta: dict = field(default_factory=dict)

    def as_array(self):
        return np.array(list(self.values.values()))


def _players(space):
    if isinstance(space, ActionSpace):
        return space.ids
    ids = tuple(space)
    if len(set(ids)) != len(ids):
        raise DomainError("duplicate player ids")
    return ids


def _value_table(ids, value_fn, lo):
    n = len(ids)
    pc = _kernels.popcounts(n)
    table = np.zeros(1 << n)
    for mask in np.flatnonzero(pc >= lo).tolist():
        table[mask] = value_fn(ActionSet(tuple(ids[k] for k in range(n) if mask >> k & 1)))
    return table


def _inv_binom(n):
    return np.array([1.0 / math.comb(n - 1, s) for s in range(n)])


def action_shapley_exact(space, value_fn, C=None):
    """Action Shapley values over the full power set.

    Parameters
    ----------
    space : ActionSpace or sequence of ids
    value_fn : callable
        Total coalition value, ``value_fn(ActionSet) -> float``; called once
        per subset, including the empty one.
    C : float, optional
        Scaling constant, default ``1/n`` (the classical Shapley value).
    """
    ids = _players(space)
    n = len(ids)
    if n > EXACT_CAP:
        raise DomainError(
            f"exact mode is capped at {EXACT_CAP} actions (got {n}); "
            "use action_shapley_restricted with a cut-off cardinality")
    if n == 0:
        raise DomainError("no players")
    const = 1.0 / n if C is None else float(C)
    table = _value_table(ids, value_fn, 0)
    phi = _kernels.shapley_table(table, n, 0, _inv_binom(n), const)
    return ShapleyValues(dict(zip(ids, phi.tolist())), "exact", const,
                         {"backend": _kernels.BACKEND})


def _restricted_sparse(ids, value_fn, lo, scale):
    # combinations walk for spaces beyond the dense-table cap
    n = len(ids)
    cache = {}

    def v(members):
        if members not in cache:
            cache[members] = value_fn(ActionSet(tuple(ids[k] for k in members)))
        return cache[members]

    phi = np.zeros(n)
    for i in range(n):
        rest = [k for k in range(n) if k != i]
        acc = 0.0
        for s in range(lo, n):
            w = 1.0 / math.comb(n - 1, s)
            for sub in itertools.combinations(rest, s):
                acc += (v(tuple(sorted(sub + (i,)))) - v(sub)) * w
        phi[i] = scale * acc
    return phi


def action_shapley_restricted(space, value_fn, cutoff, C=None):
    """Action Shapley restricted to subsets at or above the cut-off.

    Only subsets ``S`` with ``|S| >= cutoff - 1`` enter the sum, so
    ``value_fn`` is never called on smaller coalitions. The equal
    per-cardinality weights are rescaled over the included cardinalities;
    ``cutoff <= 1`` reproduces exact mode. ``cutoff > n`` returns zeros with
    ``meta['cutoff_exceeds_n']`` set.
    """
    ids = _players(space)
    n = len(ids)
    if n == 0:
        raise DomainError("no players")
    cutoff = int(cutoff)
    if cutoff < 1:
        raise DomainError("cutoff must be >= 1")
    const = 1.0 / n if C is None else float(C)
    meta = {"note": RESTRICTED_NOTE, "cutoff": cutoff, "backend": _kernels.BACKEND}
    if cutoff > n:
        meta["cutoff_exceeds_n"] = True
        return ShapleyValues({i: 0.0 for i in ids}, "restricted", const, meta)
    lo = cutoff - 1
    m = n - lo
    scale = const * n / m
    meta.update(included_sizes=list(range(lo, n)), weight_scale=scale, cutoff_exceeds_n=False)
    if n <= EXACT_CAP:
        table = _value_table(ids, value_fn, lo)
        phi = _kernels.shapley_table(table, n, lo, _inv_binom(n), scale)
    else:
        phi = _restricted_sparse(ids, value_fn, lo, scale)
    return ShapleyValues(dict(zip(ids, phi.tolist())), "restricted", const, meta)
