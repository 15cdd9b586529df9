"""Core vocabulary: action points, coalitions and the parametric boundary."""
import itertools
import math
import numbers
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class DomainError(ValueError):
    """Invalid domain object or argument."""


@dataclass(frozen=True)
class ActionPoint:
    """One training action: a (vCPU, memory) resource pair."""

    id: str
    vcpus: float
    mem_gb: float

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DomainError("action id must be a non-empty string")
        if "+" in self.id:
            raise DomainError(f"action id {self.id!r} may not contain '+'")
        for name in ("vcpus", "mem_gb"):
            v = getattr(self, name)
            if isinstance(v, bool) or not (isinstance(v, numbers.Real) and math.isfinite(v) and v > 0):
                raise DomainError(f"{self.id}: {name} must be a positive finite number, got {v!r}")
        object.__setattr__(self, "vcpus", float(self.vcpus))
        object.__setattr__(self, "mem_gb", float(self.mem_gb))

    @property
    def xy(self):
        return (self.vcpus, self.mem_gb)


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15
                and min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2))
            or (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2)))


class Polygon:
    """Simple polygon in the (vcpus, mem_gb) plane.

    Vertices may be given in either orientation; they are stored
    counter-clockwise. Degenerate (zero-area, repeated-vertex) and
    self-intersecting inputs raise :class:`DomainError`.
    """

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise DomainError("polygon needs at least 3 (x, y) vertices")
        if not np.all(np.isfinite(v)):
            raise DomainError("polygon vertices must be finite")
        if np.any(np.hypot(*(v - np.roll(v, -1, axis=0)).T) == 0):
            raise DomainError("polygon has repeated consecutive vertices")
        area = self._signed_area(v)
        scale = max(1.0, float(np.abs(v).max()) ** 2)
        if abs(area) <= 1e-12 * scale:
            raise DomainError("degenerate polygon (zero area)")
        k = len(v)
        for i in range(k):
            for j in range(i + 1, k):
                if j == i + 1 or (i == 0 and j == k - 1):
                    continue
                if _segments_cross(v[i], v[(i + 1) % k], v[j], v[(j + 1) % k]):
                    raise DomainError("polygon is self-intersecting")
        if area < 0:
            v = v[::-1].copy()
        v.setflags(write=False)
        self._v = v

    @staticmethod
    def _signed_area(v):
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def vertices(self):
        return self._v

    @property
    def area(self):
        return self._signed_area(self._v)

    def contains(self, point):
        return point_in_polygon(point, self)

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self._v, other._v)

    def __hash__(self):
        return hash(self._v.tobytes())

    def __repr__(self):
        return f"Polygon({self._v.tolist()})"


@dataclass(frozen=True)
class ActionSet:
    """A coalition of action ids in canonical (action-space) order."""

    member_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "member_ids", tuple(self.member_ids))

    def __len__(self):
        return len(self.member_ids)

    def __iter__(self):
        return iter(self.member_ids)

    def __contains__(self, item):
        return item in self.member_ids

    @property
    def key(self):
        return "+".join(self.member_ids)


@dataclass(frozen=True)
class ActionSpace:
    """Ordered action points plus the boundary confining agent moves."""

    points: tuple
    boundary: Polygon
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple(self.points)
        if not pts:
            raise DomainError("action space needs at least one point")
        ids = [p.id for p in pts]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DomainError(f"duplicate action ids: {dup}")
        for p in pts:
            if not point_in_polygon(p.xy, self.boundary):
                raise DomainError(f"action {p.id} at {p.xy} lies outside the boundary")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_index", {i: k for k, i in enumerate(ids)})

    @property
    def n(self):
        return len(self.points)

    @property
    def ids(self):
        return tuple(p.id for p in self.points)

    def point(self, action_id):
        try:
            return self.points[self._index[action_id]]
        except KeyError:
            raise DomainError(f"unknown action id {action_id!r}") from None

    def index(self, action_id):
        try:
            return self._index[action_id]
        except KeyError:
            raise DomainError(f"unknown action id {action_id!r}") from None

    def coalition(self, ids):
        """Canonical ActionSet for an iterable of ids."""
        idx = sorted({self.index(i) for i in ids})
        return ActionSet(tuple(self.points[k].id for k in idx))

    def full(self):
        return ActionSet(self.ids)

    def without(self, action_id):
        return self.coalition(i for i in self.ids if i != action_id)

    def mask(self, action_set):
        m = 0
        for i in action_set:
            m |= 1 << self.index(i)
        return m

    def from_mask(self, mask):
        return ActionSet(tuple(p.id for k, p in enumerate(self.points) if mask >> k & 1))

    def coords(self, action_set=None):
        ids = self.ids if action_set is None else action_set.member_ids
        return np.array([self.point(i).xy for i in ids], dtype=float).reshape(-1, 2)

    def short_names(self):
        """Id -> display name, dropping a ``-suffix`` shared by every id."""
        ids = self.ids
        tails = {i.rsplit("-", 1)[1] if "-" in i else None for i in ids}
        if len(tails) == 1 and None not in tails and len(ids) > 1:
            short = [i.rsplit("-", 1)[0] for i in ids]
            if all(short) and len(set(short)) == len(short):
                return dict(zip(ids, short))
        return {i: i for i in ids}

    def label(self, action_set):
        names = self.short_names()
        return "+".join(names[i] for i in action_set.member_ids)


def enumerate_subsets(space, cardinality):
    """All coalitions of one size, in lexicographic order of member positions.

    Parameters
    ----------
    space : ActionSpace
    cardinality : int
        Between 1 and ``space.n``.

    Returns
    -------
    list of ActionSet
    """
    n = space.n
    if not isinstance(cardinality, (int, np.integer)) or not 1 <= cardinality <= n:
        raise DomainError(f"cardinality must be in [1, {n}], got {cardinality!r}")
    ids = space.ids
    return [ActionSet(tuple(ids[k] for k in c))
            for c in itertools.combinations(range(n), int(cardinality))]


def _unrank_combination(rank, n, k):
    # lexicographic unranking of k-combinations of range(n)
    out = []
    x = 0
    for slot in range(k, 0, -1):
        while True:
            c = math.comb(n - x - 1, slot - 1)
            if rank < c:
                break
            rank -= c
            x += 1
        out.append(x)
        x += 1
    return tuple(out)


def sample_subsets(space, cardinality, budget, seed):
    """Seeded uniform sample of distinct coalitions of one size.

    Falls back to :func:`enumerate_subsets` when ``budget`` covers every
    combination. Sampled coalitions are returned in lexicographic order.
    """
    n = space.n
    if not isinstance(cardinality, (int, np.integer)) or not 1 <= cardinality <= n:
        raise DomainError(f"cardinality must be in [1, {n}], got {cardinality!r}")
    if not isinstance(budget, (int, np.integer)) or budget < 1:
        raise DomainError(f"budget must be a positive integer, got {budget!r}")
    total = math.comb(n, int(cardinality))
    if budget >= total:
        return enumerate_subsets(space, cardinality)
    rng = np.random.default_rng(seed)
    if total <= 1_000_000:
        ranks = rng.choice(total, size=int(budget), replace=False)
    else:
        picked = set()
        while len(picked) < budget:
            picked.add(int(rng.integers(total)))
        ranks = list(picked)
    ids = space.ids
    return [ActionSet(tuple(ids[k] for k in _unrank_combination(int(r), n, int(cardinality))))
            for r in sorted(int(r) for r in ranks)]


def point_in_polygon(point, boundary):
    """Winding-number test; points within 1e-9 of an edge count as inside."""
    x, y = float(point[0]), float(point[1])
    return bool(_kernels.point_in_polygon(x, y, boundary.vertices))


def clip_to_polygon(point, boundary):
    """Return ``point`` if inside ``boundary``, else the nearest border point."""
    if not isinstance(boundary, Polygon):
        boundary = Polygon(boundary)
    x, y = _kernels.clip_point(float(point[0]), float(point[1]), boundary.vertices)
    return (float(x), float(y))


def case_study_space():
    """The five t3a resource pairs inside the trapezoidal boundary."""
    pts = [ActionPoint("small-t3a", 2, 2), ActionPoint("medium-t3a", 2, 4),
           ActionPoint("large-t3a", 2, 8), ActionPoint("xlarge-t3a", 4, 16),
           ActionPoint("2xlarge-t3a", 8, 32)]
    return ActionSpace(tuple(pts), Polygon([(2, 2), (2, 8), (8, 32), (8, 2)]))
