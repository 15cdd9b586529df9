"""Trace synthesis / ingestion and the surrogate state-action model.

The surrogate is a three-stage pipeline: PCA over the state metrics, a
per-trace autoregression on the leading component, and inverse-distance
weighting of per-trace medians over the (vcpus, mem_gb) plane. The median
interpolator is what the agent observes.
"""
import csv
import io
import json
import math
import os
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .domain import ActionSpace, DomainError

CASE_STUDY_MEDIANS = {
    "small-t3a": 95.0,
    "medium-t3a": 95.5,
    "large-t3a": 99.5,
    "xlarge-t3a": 100.0,
    "2xlarge-t3a": 72.5,
}

TRACE_COLUMNS = ("action_id", "timestamp_s", "cpu_util_pct")


class IngestionError(ValueError):
    """Malformed trace input."""


class PreconditionError(ValueError):
    """Input too small or otherwise outside an operation's domain."""


# ---------------------------------------------------------------------------
# workload and traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Workload:
    """Rectangular stress workload sampled at a fixed tick."""

    period_s: float = 600.0
    high_s: float = 500.0
    duration_s: float = 86400.0
    sample_interval_s: float = 60.0
    schedule: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def timestamps(self):
        return np.arange(self.schedule.size, dtype=float) * self.sample_interval_s

    @property
    def stressed_fraction(self):
        return float(self.schedule.mean())


def generate_workload(period_s=600.0, high_s=500.0, duration_s=86400.0, sample_interval_s=60.0):
    """Binary stress schedule: 1 during the first ``high_s`` of each period.

    A tick at time ``t`` is stressed when ``t mod period_s < high_s``.
    """
    for name, v in (("period_s", period_s), ("high_s", high_s),
                    ("duration_s", duration_s), ("sample_interval_s", sample_interval_s)):
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise DomainError(f"{name} must be a positive number, got {v!r}")
    if not high_s < period_s:
        raise DomainError("need 0 < high_s < period_s")
    if duration_s < period_s:
        raise DomainError("duration_s must cover at least one period")
    ticks = int(math.floor(duration_s / sample_interval_s + 1e-9))
    t = np.arange(ticks, dtype=float) * sample_interval_s
    sched = (np.mod(t, period_s) < high_s).astype(np.int8)
    sched.setflags(write=False)
    return Workload(float(period_s), float(high_s), float(duration_s),
                    float(sample_interval_s), sched)


@dataclass(frozen=True)
class StateTrace:
    """Timestamped CPU utilization for one action point."""

    action_id: str
    timestamps: np.ndarray
    cpu_util_pct: np.ndarray
    sample_interval_s: float = 60.0

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        u = np.asarray(self.cpu_util_pct, dtype=float)
        if t.ndim != 1 or t.shape != u.shape or t.size < 2:
            raise DomainError(f"{self.action_id}: need >= 2 matched samples")
        if np.any(np.diff(t) <= 0):
            raise DomainError(f"{self.action_id}: timestamps must be strictly increasing")
        if np.any(~np.isfinite(u)) or u.min() < 0 or u.max() > 100:
            raise DomainError(f"{self.action_id}: utilization outside [0, 100]")
        t.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "cpu_util_pct", u)

    def __len__(self):
        return self.timestamps.size

    def metrics(self):
        """State-metric matrix, one row per sample."""
        return self.cpu_util_pct[:, None]

    @property
    def median(self):
        return float(np.median(self.cpu_util_pct))

    def __eq__(self, other):
        return (isinstance(other, StateTrace) and self.action_id == other.action_id
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.cpu_util_pct, other.cpu_util_pct))

    __hash__ = None


@dataclass(frozen=True)
class Calibration:
    median_target_pct: float
    idle_pct: float = 5.0
    noise_std_pct: float = 2.0

    def __post_init__(self):
        if not 0 <= self.median_target_pct <= 100:
            raise DomainError("median_target_pct must lie in [0, 100]")
        if self.idle_pct > self.median_target_pct:
            raise DomainError("idle_pct may not exceed median_target_pct")
        if not self.noise_std_pct >= 0:
            raise DomainError("noise_std_pct must be non-negative")


class TraceCalibration(dict):
    """Mapping action id -> :class:`Calibration`."""

    @classmethod
    def from_medians(cls, medians, idle_pct=5.0, noise_std_pct=2.0):
        return cls({k: Calibration(float(v), idle_pct, noise_std_pct) for k, v in medians.items()})


def trace_rng(seed, action_id):
    """Generator for one action's trace; independent of coalition membership."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(action_id.encode())])
    return np.random.default_rng(ss)


def generate_trace(config, workload, calib, seed):
    """Synthesize a two-level noisy utilization trace for one action.

    Parameters
    ----------
    config : ActionPoint
    workload : Workload
    calib : TraceCalibration
    seed : int
        Combined with the action id, so the same seed gives the same trace
        for an action regardless of which other actions are generated.
    """
    if config.id not in calib:
        raise DomainError(f"no calibration for action {config.id!r}")
    c = calib[config.id]
    rng = trace_rng(seed, config.id)
    base = np.where(workload.schedule.astype(bool), c.median_target_pct, c.idle_pct)
    noise = rng.normal(0.0, 1.0, base.size) * c.noise_std_pct
    u = np.clip(base + noise, 0.0, 100.0)
    return StateTrace(config.id, workload.timestamps, u, workload.sample_interval_s)


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source, False
    raise IngestionError(f"unsupported trace source {type(source).__name__}")


def ingest_traces(csv_source):
    """Read ``action_id,timestamp_s,cpu_util_pct`` rows into traces.

    Errors cite the 1-based line number in the file (header is line 1).
    """
    fh, close = _open_text(csv_source)
    try:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError("empty trace file")
        missing = [c for c in TRACE_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise IngestionError(f"line 1: missing columns {missing}")
        rows = {}
        for line, rec in enumerate(reader, start=2):
            aid = (rec["action_id"] or "").strip()
            if not aid:
                raise IngestionError(f"line {line}: empty action_id")
            try:
                ts = float(rec["timestamp_s"])
                u = float(rec["cpu_util_pct"])
            except (TypeError, ValueError):
                raise IngestionError(f"line {line}: non-numeric value") from None
            if not math.isfinite(ts):
                raise IngestionError(f"line {line}: non-finite timestamp")
            if not (math.isfinite(u) and 0.0 <= u <= 100.0):
                raise IngestionError(f"line {line}: cpu_util_pct {u} outside [0, 100]")
            rows.setdefault(aid, []).append((ts, u, line))
    except csv.Error as e:
        raise IngestionError(f"malformed CSV: {e}") from None
    finally:
        if close:
            fh.close()
    if not rows:
        raise IngestionError("trace file has no data rows")
    traces = []
    for aid, recs in rows.items():
        recs.sort(key=lambda r: (r[0], r[2]))
        for a, b in zip(recs, recs[1:]):
            if b[0] == a[0]:
                raise IngestionError(f"line {b[2]}: duplicate timestamp {b[0]} for {aid}")
        if len(recs) < 2:
            raise IngestionError(f"line {recs[0][2]}: action {aid} has a single sample")
        t = np.array([r[0] for r in recs])
        u = np.array([r[1] for r in recs])
        traces.append(StateTrace(aid, t, u, float(np.median(np.diff(t)))))
    return traces


def write_traces_csv(traces, dest):
    """Write traces in the ingestion format; floats use round-trip repr."""
    fh, close = (open(dest, "w", newline="", encoding="utf-8"), True) \
        if isinstance(dest, (str, os.PathLike)) else (dest, False)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for tr in traces:
            for t, u in zip(tr.timestamps.tolist(), tr.cpu_util_pct.tolist()):
                w.writerow((tr.action_id, repr(t), repr(u)))
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# PCA and AR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PCAResult:
    components: np.ndarray          # (k, d), rows orthonormal
    explained_variance: np.ndarray  # (k,)
    mean: np.ndarray                # (d,)
    degenerate: bool = False

    def transform(self, samples):
        return (np.asarray(samples, dtype=float) - self.mean) @ self.components.T


def _fix_signs(vecs, tol=1e-12):
    out = vecs.copy()
    for r in range(out.shape[0]):
        nz = np.flatnonzero(np.abs(out[r]) > tol)
        if nz.size and out[r, nz[0]] < 0:
            out[r] = -out[r]
    return out


def fit_pca(samples, n_components=1):
    """Principal axes from the covariance eigendecomposition.

    Components are returned as rows, ordered by descending explained
    variance, with the first nonzero entry of each made positive. A
    zero-variance input returns the canonical basis and sets ``degenerate``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2:
        raise PreconditionError("PCA needs at least 2 samples")
    if not 1 <= n_components <= d:
        raise PreconditionError(f"n_components must be in [1, {d}]")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(d, d)
    if not np.any(np.abs(cov) > 0):
        warnings.warn("zero-variance input to PCA; using canonical basis", RuntimeWarning)
        return PCAResult(np.eye(d)[:n_components], np.zeros(n_components), mean, True)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:n_components]
    comps = _fix_signs(evecs[:, order].T)
    return PCAResult(comps, np.clip(evals[order], 0.0, None), mean, False)


@dataclass(frozen=True)
class ARFit:
    coeffs: np.ndarray
    intercept: float
    degenerate: bool = False

    @property
    def order(self):
        return self.coeffs.size

    def predict_next(self, history):
        """One-step forecast from the last ``order`` values of ``history``."""
        h = np.asarray(history, dtype=float)
        p = self.order
        if h.size < p:
            raise PreconditionError(f"need {p} past values")
        lags = h[::-1][:p]
        return float(self.intercept + np.dot(self.coeffs, lags))


def fit_ar(series, p=1):
    """OLS fit of ``x_t = sum_j c_j x_{t-j} + intercept``.

    Parameters
    ----------
    series : array_like
        Needs more than ``10 * p`` values.
    p : int

    Returns
    -------
    ARFit
        A constant series gives zero coefficients, ``intercept`` equal to
        the constant and ``degenerate=True``.
    """
    x = np.asarray(series, dtype=float).ravel()
    if not isinstance(p, (int, np.integer)) or p < 1:
        raise PreconditionError("AR order must be a positive integer")
    if x.size <= 10 * p:
        raise PreconditionError(f"series of length {x.size} too short for AR({p}); need > {10 * p}")
    if np.ptp(x) == 0:
        return ARFit(np.zeros(p), float(x[0]), True)
    n = x.size
    cols = [x[p - j - 1:n - j - 1] for j in range(p)]
    design = np.column_stack(cols + [np.ones(n - p)])
    beta, _, rank, _ = np.linalg.lstsq(design, x[p:], rcond=None)
    return ARFit(beta[:p].copy(), float(beta[p]), bool(rank < p + 1))


# ---------------------------------------------------------------------------
# surrogate
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """Fitted surrogate; immutable and shareable between episode runners.

    ``coord_scale`` multiplies (vcpus, mem_gb) differences before distances
    are taken; the default (1, 1) is the raw Euclidean metric.
    """

    node_ids: tuple
    node_coords: np.ndarray
    node_medians: dict
    pca_components: np.ndarray
    pca_mean: np.ndarray
    ar_order: int
    ar_coeffs: dict
    ar_intercepts: dict
    idw_power: float = 2.0
    coord_scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        coords = np.asarray(self.node_coords, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "node_coords", coords)
        object.__setattr__(self, "_med", np.array([self.node_medians[i] for i in self.node_ids], dtype=float))
        if self.idw_power <= 0:
            raise DomainError("idw_power must be positive")

    def predict(self, point):
        sx, sy = self.coord_scale
        return _kernels.idw(self.node_coords, self._med, float(point[0]), float(point[1]),
                            float(self.idw_power), float(sx), float(sy))

    def predict_many(self, points):
        sx, sy = self.coord_scale
        return _kernels.idw_many(self.node_coords, self._med, np.asarray(points, dtype=float).reshape(-1, 2),
                                 float(self.idw_power), float(sx), float(sy))

    @property
    def medians_array(self):
        return self._med

    def __eq__(self, other):
        return isinstance(other, SurrogateModel) and self.to_dict() == other.to_dict()

    __hash__ = None

    def to_dict(self):
        return {
            "node_ids": list(self.node_ids),
            "node_coords": self.node_coords.tolist(),
            "node_medians": {k: float(self.node_medians[k]) for k in self.node_ids},
            "pca_components": np.asarray(self.pca_components).tolist(),
            "pca_mean": np.asarray(self.pca_mean).tolist(),
            "ar_order": int(self.ar_order),
            "ar_coeffs": {k: np.asarray(v).tolist() for k, v in self.ar_coeffs.items()},
            "ar_intercepts": {k: float(v) for k, v in self.ar_intercepts.items()},
            "idw_power": float(self.idw_power),
            "coord_scale": [float(s) for s in self.coord_scale],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            node_ids=tuple(d["node_ids"]),
            node_coords=np.array(d["node_coords"], dtype=float),
            node_medians={k: float(v) for k, v in d["node_medians"].items()},
            pca_components=np.array(d["pca_components"], dtype=float),
            pca_mean=np.array(d["pca_mean"], dtype=float),
            ar_order=int(d["ar_order"]),
            ar_coeffs={k: np.array(v, dtype=float) for k, v in d["ar_coeffs"].items()},
            ar_intercepts={k: float(v) for k, v in d["ar_intercepts"].items()},
            idw_power=float(d["idw_power"]),
            coord_scale=tuple(float(s) for s in d.get("coord_scale", (1.0, 1.0))),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _coord_lookup(coords):
    if isinstance(coords, ActionSpace):
        return {p.id: p.xy for p in coords.points}
    return {k: (float(v[0]), float(v[1])) for k, v in coords.items()}


def build_surrogate(traces, coords, ar_order=1, idw_power=2.0, coord_scale=(1.0, 1.0)):
    """Fit PCA, per-trace AR and the median interpolator.

    Parameters
    ----------
    traces : list of StateTrace
    coords : ActionSpace or mapping id -> (vcpus, mem_gb)
        Locations of the trace nodes.
    ar_order : int
    idw_power : float
    coord_scale : (float, float)
    """
    traces = list(traces)
    if not traces:
        raise DomainError("cannot build a surrogate from zero traces")
    lookup = _coord_lookup(coords)
    ids = tuple(t.action_id for t in traces)
    if len(set(ids)) != len(ids):
        raise DomainError("one trace per action expected")
    for i in ids:
        if i not in lookup:
            raise DomainError(f"no coordinates for trace {i!r}")
    pooled = np.vstack([t.metrics() for t in traces])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pca = fit_pca(pooled, 1)
    coeffs, icpts = {}, {}
    for t in traces:
        fit = fit_ar(pca.transform(t.metrics())[:, 0], ar_order)
        coeffs[t.action_id] = fit.coeffs
        icpts[t.action_id] = fit.intercept
    return SurrogateModel(
        node_ids=ids,
        node_coords=np.array([lookup[i] for i in ids], dtype=float),
        node_medians={t.action_id: t.median for t in traces},
        pca_components=pca.components,
        pca_mean=pca.mean,
        ar_order=int(ar_order),
        ar_coeffs=coeffs,
        ar_intercepts=icpts,
        idw_power=float(idw_power),
        coord_scale=(float(coord_scale[0]), float(coord_scale[1])),
    )


def predict_median(model, action):
    """IDW estimate of median CPU % at ``action``; exact at nodes."""
    return float(model.predict(action))


class TraceModelBuilder:
    """Builds coalition surrogates from a fixed pool of traces.

    The seed is ignored; ingested data carries no randomness. Fitted models
    are cached by coalition identity.
    """

    def __init__(self, traces, space, ar_order=1, idw_power=2.0, coord_scale=(1.0, 1.0)):
        self.traces = {t.action_id: t for t in traces}
        for i in space.ids:
            if i not in self.traces:
                raise DomainError(f"no trace for action {i!r}")
        self.space = space
        self.ar_order = ar_order
        self.idw_power = idw_power
        self.coord_scale = tuple(coord_scale)
        self._cache = {}

    def traces_for(self, action_set, seed):
        return [self.traces[i] for i in action_set.member_ids]

    def __call__(self, action_set, seed=0):
        key = (action_set.member_ids, self._seed_key(seed))
        model = self._cache.get(key)
        if model is None:
            model = build_surrogate(self.traces_for(action_set, seed), self.space,
                                    self.ar_order, self.idw_power, self.coord_scale)
            model = self._cache.setdefault(key, model)
        return model

    def _seed_key(self, seed):
        return None


class SyntheticModelBuilder(TraceModelBuilder):
    """Generates seeded synthetic traces on demand, then builds surrogates."""

    def __init__(self, space, workload, calib, ar_order=1, idw_power=2.0, coord_scale=(1.0, 1.0)):
        for i in space.ids:
            if i not in calib:
                raise DomainError(f"no calibration for action {i!r}")
        self.space = space
        self.workload = workload
        self.calib = calib
        self.ar_order = ar_order
        self.idw_power = idw_power
        self.coord_scale = tuple(coord_scale)
        self._cache = {}
        self._trace_cache = {}

    def trace(self, action_id, seed):
        key = (action_id, int(seed))
        tr = self._trace_cache.get(key)
        if tr is None:
            tr = generate_trace(self.space.point(action_id), self.workload, self.calib, seed)
            tr = self._trace_cache.setdefault(key, tr)
        return tr

    def traces_for(self, action_set, seed):
        return [self.trace(i, seed) for i in action_set.member_ids]

    def _seed_key(self, seed):
        return int(seed)
