"""Hot numerical kernels.

Every kernel exists twice: an explicit-loop version compiled with
``numba.njit`` and a vectorised pure-numpy version. The public names at the
bottom of this module are bound to one of the two at import time. Set the
environment variable ``AV_NUMBA=0`` to force the numpy versions (or let it
happen automatically when numba is not importable).

Both variants are kept importable under ``*_loop`` / ``*_np`` names so the
benchmark and the tests can compare them side by side.
"""
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

BOUNDARY_TOL = 1e-9
NODE_TOL = 1e-12


def _env_wants_numba():
    flag = os.environ.get("AV_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()

if HAVE_NUMBA:
    jit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def jit(f):
        return f


# ---------------------------------------------------------------------------
# loop variants (numba)
# ---------------------------------------------------------------------------

@jit
def _seg_nearest_loop(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    den = dx * dx + dy * dy
    t = 0.0
    if den > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy) / den
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    cx = ax + t * dx
    cy = ay + t * dy
    return cx, cy, np.hypot(px - cx, py - cy)


@jit
def point_in_polygon_loop(px, py, poly):
    k = poly.shape[0]
    # boundary counts as inside
    for e in range(k):
        j = (e + 1) % k
        _, _, d = _seg_nearest_loop(px, py, poly[e, 0], poly[e, 1],
                                    poly[j, 0], poly[j, 1])
        if d <= BOUNDARY_TOL:
            return True
    wn = 0
    for e in range(k):
        j = (e + 1) % k
        ax = poly[e, 0]
        ay = poly[e, 1]
        bx = poly[j, 0]
        by = poly[j, 1]
        cross = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
        if ay <= py:
            if by > py and cross > 0.0:
                wn += 1
        elif by <= py and cross < 0.0:
            wn -= 1
    return wn != 0


@jit
def clip_point_loop(px, py, poly):
    if point_in_polygon_loop(px, py, poly):
        return px, py
    k = poly.shape[0]
    best = np.inf
    bx_ = px
    by_ = py
    for e in range(k):
        j = (e + 1) % k
        cx, cy, d = _seg_nearest_loop(px, py, poly[e, 0], poly[e, 1],
                                      poly[j, 0], poly[j, 1])
        if d < best:
            best = d
            bx_ = cx
            by_ = cy
    return bx_, by_


@jit
def idw_loop(coords, medians, qx, qy, power, sx, sy):
    num = 0.0
    den = 0.0
    for i in range(coords.shape[0]):
        d = np.hypot((coords[i, 0] - qx) * sx, (coords[i, 1] - qy) * sy)
        if d < NODE_TOL:
            return medians[i]
        w = d ** (-power)
        num += w * medians[i]
        den += w
    return num / den


@jit
def idw_many_loop(coords, medians, queries, power, sx, sy):
    out = np.empty(queries.shape[0])
    for r in range(queries.shape[0]):
        out[r] = idw_loop(coords, medians, queries[r, 0], queries[r, 1],
                          power, sx, sy)
    return out


@jit
def pid_episode_loop(coords, medians, power, sx, sy, poly, x0, y0,
                     threshold, max_steps, step_size, kp, ki, kd):
    traj = np.empty((max_steps + 1, 3))
    qx, qy = clip_point_loop(x0, y0, poly)
    pred = idw_loop(coords, medians, qx, qy, power, sx, sy)
    traj[0, 0] = qx
    traj[0, 1] = qy
    traj[0, 2] = pred
    if pred < threshold:
        return traj, True, 0
    esum = 0.0
    eprev = 0.0
    for t in range(1, max_steps + 1):
        e = pred - threshold
        esum += e
        de = 0.0
        if t > 1:
            de = e - eprev
        ctrl = kp * e + ki * esum + kd * de
        d = step_size * np.sign(ctrl)
        qx, qy = clip_point_loop(qx + d, qy + d, poly)
        pred = idw_loop(coords, medians, qx, qy, power, sx, sy)
        traj[t, 0] = qx
        traj[t, 1] = qy
        traj[t, 2] = pred
        eprev = e
        if pred < threshold:
            return traj, True, t
    return traj, False, max_steps


@jit
def _popcount(m):
    c = 0
    while m:
        m &= m - 1
        c += 1
    return c


@jit
def shapley_table_loop(values, n, lo, weights, scale):
    phi = np.zeros(n)
    full = 1 << n
    for i in range(n):
        bit = 1 << i
        acc = 0.0
        for mask in range(full):
            if mask & bit:
                continue
            s = _popcount(mask)
            if s < lo:
                continue
            acc += (values[mask | bit] - values[mask]) * weights[s]
        phi[i] = scale * acc
    return phi


# ---------------------------------------------------------------------------
# numpy variants
# ---------------------------------------------------------------------------

def _edges(poly):
    a = poly
    b = np.roll(poly, -1, axis=0)
    return a, b


def _seg_nearest_np(px, py, poly):
    a, b = _edges(poly)
    d = b - a
    den = np.einsum("ij,ij->i", d, d)
    rel = np.array([px, py]) - a
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(den > 0, np.einsum("ij,ij->i", rel, d) / den, 0.0)
    t = np.clip(t, 0.0, 1.0)
    c = a + t[:, None] * d
    dist = np.hypot(px - c[:, 0], py - c[:, 1])
    return c, dist


def point_in_polygon_np(px, py, poly):
    _, dist = _seg_nearest_np(px, py, poly)
    if np.any(dist <= BOUNDARY_TOL):
        return True
    a, b = _edges(poly)
    cross = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (px - a[:, 0]) * (b[:, 1] - a[:, 1])
    up = (a[:, 1] <= py) & (b[:, 1] > py) & (cross > 0)
    down = (a[:, 1] > py) & (b[:, 1] <= py) & (cross < 0)
    return int(up.sum()) - int(down.sum()) != 0


def clip_point_np(px, py, poly):
    if point_in_polygon_np(px, py, poly):
        return px, py
    c, dist = _seg_nearest_np(px, py, poly)
    k = int(np.argmin(dist))
    return float(c[k, 0]), float(c[k, 1])


def idw_np(coords, medians, qx, qy, power, sx, sy):
    d = np.hypot((coords[:, 0] - qx) * sx, (coords[:, 1] - qy) * sy)
    hit = np.flatnonzero(d < NODE_TOL)
    if hit.size:
        return float(medians[hit[0]])
    w = d ** (-power)
    return float(np.dot(w, medians) / w.sum())


def idw_many_np(coords, medians, queries, power, sx, sy):
    queries = np.asarray(queries, dtype=float)
    dx = (coords[None, :, 0] - queries[:, None, 0]) * sx
    dy = (coords[None, :, 1] - queries[:, None, 1]) * sy
    d = np.hypot(dx, dy)
    hit = d < NODE_TOL
    with np.errstate(divide="ignore"):
        w = np.where(hit, 0.0, d) ** (-power)
    w[hit] = 0.0
    with np.errstate(invalid="ignore"):
        out = (w @ medians) / w.sum(axis=1)
    rows = np.flatnonzero(hit.any(axis=1))
    if rows.size:
        first = hit[rows].argmax(axis=1)
        out[rows] = medians[first]
    return out


def pid_episode_np(coords, medians, power, sx, sy, poly, x0, y0,
                   threshold, max_steps, step_size, kp, ki, kd):
    traj = np.empty((max_steps + 1, 3))
    qx, qy = clip_point_np(x0, y0, poly)
    pred = idw_np(coords, medians, qx, qy, power, sx, sy)
    traj[0] = qx, qy, pred
    if pred < threshold:
        return traj, True, 0
    esum = 0.0
    eprev = 0.0
    for t in range(1, max_steps + 1):
        e = pred - threshold
        esum += e
        de = e - eprev if t > 1 else 0.0
        d = step_size * np.sign(kp * e + ki * esum + kd * de)
        qx, qy = clip_point_np(qx + d, qy + d, poly)
        pred = idw_np(coords, medians, qx, qy, power, sx, sy)
        traj[t] = qx, qy, pred
        eprev = e
        if pred < threshold:
            return traj, True, t
    return traj, False, max_steps


def popcounts(n):
    """Number of set bits for every mask in ``range(2**n)``."""
    masks = np.arange(1 << n, dtype=np.int64)
    pc = np.zeros(masks.shape, dtype=np.int64)
    for b in range(n):
        pc += (masks >> b) & 1
    return pc


def shapley_table_np(values, n, lo, weights, scale):
    masks = np.arange(1 << n, dtype=np.int64)
    pc = popcounts(n)
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        sel = masks[((masks & bit) == 0) & (pc >= lo)]
        if sel.size:
            phi[i] = scale * np.dot(values[sel | bit] - values[sel], weights[pc[sel]])
    return phi


# ---------------------------------------------------------------------------
# public bindings
# ---------------------------------------------------------------------------

if USE_NUMBA:
    point_in_polygon = point_in_polygon_loop
    clip_point = clip_point_loop
    idw = idw_loop
    idw_many = idw_many_loop
    pid_episode = pid_episode_loop
    shapley_table = shapley_table_loop
else:
    point_in_polygon = point_in_polygon_np
    clip_point = clip_point_np
    idw = idw_np
    idw_many = idw_many_np
    pid_episode = pid_episode_np
    shapley_table = shapley_table_np

BACKEND = "numba" if USE_NUMBA else "numpy"
