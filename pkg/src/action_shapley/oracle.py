"""Brute-force reference evaluation over the full power set.

Deliberately shares no code with :mod:`valuation` beyond the domain types:
every coalition is evaluated directly, the cut-off is read off the complete
outcome table, and Shapley values come from averaging over permutations.
Intended for small spaces (n <= 10).
"""
import itertools
import math

import numpy as np

from .domain import DomainError

ORACLE_CAP = 10
PERMUTATION_CAP = 8


def _evaluate(episode_fn, members, seed, repetitions, epsilon, failure_value):
    rewards, wins = [], []
    for r in range(repetitions):
        e = episode_fn(members, seed + r)
        if rewards and e.reward < max(rewards) + epsilon:
            rewards.append(e.reward)
            if e.success:
                wins.append(e.reward)
            break
        rewards.append(e.reward)
        if e.success:
            wins.append(e.reward)
    return (True, max(wins)) if wins else (False, failure_value)


def brute_force(space, episode_fn, cfg, seed=0):
    """Evaluate every non-empty coalition and derive all outputs by definition.

    Returns
    -------
    dict
        ``cutoff``, ``reduction_fraction``, ``categorization`` (list of
        ``(id, category)``), ``ranking`` (list of ``(ActionSet, reward, rank)``
        with ``None`` for failures), ``shapley_exact`` and ``table``.
    """
    n = space.n
    if n > ORACLE_CAP:
        raise DomainError(f"oracle limited to {ORACLE_CAP} actions")
    ids = space.ids
    table = {}
    for k in range(1, n + 1):
        for combo in itertools.combinations(range(n), k):
            s = space.coalition(ids[c] for c in combo)
            table[combo] = _evaluate(episode_fn, s, seed, cfg.repetitions,
                                     cfg.epsilon, cfg.failure_value)

    cutoff = 1
    for k in range(n, 0, -1):
        if all(not ok for c, (ok, _) in table.items() if len(c) == k):
            cutoff = k + 1
            break
    total = sum(math.comb(n, k) for k in range(cutoff, n + 1))
    red = 1.0 - total / 2 ** n

    cats = []
    for i in range(n):
        ok = table[tuple(j for j in range(n) if j != i)][0] if n > 1 else False
        cats.append((ids[i], "dispensable" if ok else "indispensable"))

    eligible = [c for c in table if len(c) >= cutoff]
    wins = sorted((c for c in eligible if table[c][0]), key=lambda c: (-table[c][1], c))
    fails = sorted(c for c in eligible if not table[c][0])
    ranking = [(space.coalition(ids[j] for j in c), table[c][1], r + 1) for r, c in enumerate(wins)]
    ranking += [(space.coalition(ids[j] for j in c), None, None) for c in fails]

    def v(members):
        return cfg.failure_value if not members else table[tuple(sorted(members))][1]

    phi = np.zeros(n)
    if n <= PERMUTATION_CAP:
        perms = list(itertools.permutations(range(n)))
        for p in perms:
            acc = []
            for i in p:
                phi[i] += v(acc + [i]) - v(acc)
                acc.append(i)
        phi /= len(perms)
    else:
        for i in range(n):
            rest = [j for j in range(n) if j != i]
            for s in range(n):
                w = math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                for sub in itertools.combinations(rest, s):
                    phi[i] += w * (v(list(sub) + [i]) - v(list(sub)))

    return {
        "cutoff": cutoff,
        "reduction_fraction": red,
        "no_viable_coalition": cutoff == n + 1,
        "categorization": cats,
        "ranking": ranking,
        "shapley_exact": dict(zip(ids, phi.tolist())),
        "table": {"+".join(ids[j] for j in c): table[c] for c in sorted(table, key=lambda c: (len(c), c))},
    }
