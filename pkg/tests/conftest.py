import itertools
import math

import numpy as np
import pytest
from hypothesis import settings

from action_shapley.agent import EpisodeResult
from action_shapley.domain import ActionPoint, ActionSpace, Polygon, case_study_space

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


class TableEpisodes:
    """Episode stub driven by a table of (success, steps) per coalition key."""

    def __init__(self, table, max_steps=400, failure_reward=-500.0):
        self.table = table
        self.max_steps = max_steps
        self.failure_reward = failure_reward
        self.calls = []

    def __call__(self, action_set, seed):
        self.calls.append((action_set.member_ids, seed))
        ok, steps = self.table.get(action_set.member_ids, (False, self.max_steps))
        reward = -float(steps) if ok else self.failure_reward
        return EpisodeResult(ok, steps if ok else self.max_steps, reward, np.zeros((1, 3)))


def line_space(n):
    """n points on a diagonal inside a square, ids A, B, C, ..."""
    pts = tuple(ActionPoint(chr(65 + k), 1.0 + k, 1.0 + k) for k in range(n))
    return ActionSpace(pts, Polygon([(0, 0), (n + 1, 0), (n + 1, n + 1), (0, n + 1)]))


def permutation_shapley(ids, v):
    """Mean marginal contribution over all orderings; v takes a frozenset."""
    n = len(ids)
    phi = dict.fromkeys(ids, 0.0)
    for perm in itertools.permutations(ids):
        acc = frozenset()
        for i in perm:
            phi[i] += v(acc | {i}) - v(acc)
            acc = acc | {i}
    f = math.factorial(n)
    return {i: phi[i] / f for i in ids}


@pytest.fixture
def case_space():
    return case_study_space()
