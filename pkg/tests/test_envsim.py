import io
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from action_shapley.domain import DomainError
from action_shapley.envsim import (CASE_STUDY_MEDIANS, Calibration, IngestionError, PreconditionError,
                                   StateTrace, SurrogateModel, SyntheticModelBuilder, TraceCalibration,
                                   build_surrogate, fit_ar, fit_pca, generate_trace, generate_workload,
                                   ingest_traces, predict_median, write_traces_csv)


@pytest.fixture(scope="module")
def calib():
    return TraceCalibration.from_medians(CASE_STUDY_MEDIANS)


@pytest.fixture(scope="module")
def workload():
    return generate_workload()


@pytest.fixture(scope="module")
def case_traces(workload, calib):
    from action_shapley.domain import case_study_space
    sp = case_study_space()
    return sp, [generate_trace(p, workload, calib, seed=11) for p in sp.points]


# --- workload --------------------------------------------------------------

def test_workload_case_study():
    w = generate_workload(600, 500, 86400, 60)
    assert w.schedule.size == 1440
    # 10 ticks per period; the tick starting at 480 s is the last stressed one
    assert abs(w.stressed_fraction - 5 / 6) <= 1 / 10
    assert w.schedule[:10].tolist() == [1] * 9 + [0]


def test_workload_single_period():
    w = generate_workload(600, 300, 600, 60)
    assert w.schedule.tolist() == [1] * 5 + [0] * 5


@given(st.integers(2, 50), st.integers(1, 49), st.integers(1, 6))
def test_stressed_fraction_within_one_tick(period_ticks, high_ticks_raw, periods):
    dt = 60.0
    period = period_ticks * dt
    high = min(high_ticks_raw, period_ticks - 1) * dt + 17.0
    if high >= period:
        high = period - 1.0
    w = generate_workload(period, high, periods * period, dt)
    counted = int(w.schedule.sum())
    expected = high / period * w.schedule.size
    assert abs(counted - expected) <= periods + 1e-9


@pytest.mark.parametrize("args", [(600, 600, 600, 60), (600, 0, 600, 60), (600, 500, 300, 60),
                                  (-600, 500, 600, 60), (600, 500, 600, 0)])
def test_workload_errors(args):
    with pytest.raises(DomainError):
        generate_workload(*args)


# --- traces ----------------------------------------------------------------

def test_trace_median_2xlarge(workload, calib, case_space):
    p = case_space.point("2xlarge-t3a")
    for seed in range(5):
        assert 71.5 <= generate_trace(p, workload, calib, seed).median <= 73.5


def test_trace_zero_noise_two_valued(workload, case_space):
    cal = TraceCalibration({"large-t3a": Calibration(99.5, 5.0, 0.0)})
    tr = generate_trace(case_space.point("large-t3a"), workload, cal, 0)
    assert set(np.unique(tr.cpu_util_pct).tolist()) == {5.0, 99.5}


def test_trace_xlarge_clamps_at_100(workload, calib, case_space):
    tr = generate_trace(case_space.point("xlarge-t3a"), workload, calib, 4)
    stressed = tr.cpu_util_pct[workload.schedule.astype(bool)]
    assert stressed.max() == 100.0
    # every positive-noise sample is clamped to exactly 100
    assert 0.4 < np.mean(stressed == 100.0) < 0.6
    assert abs(tr.median - 100.0) <= 1.0


def test_trace_bit_reproducible(workload, calib, case_space):
    p = case_space.point("small-t3a")
    a, b = generate_trace(p, workload, calib, 9), generate_trace(p, workload, calib, 9)
    assert a.cpu_util_pct.tobytes() == b.cpu_util_pct.tobytes()
    assert generate_trace(p, workload, calib, 10) != a


def test_trace_unknown_config(workload, case_space):
    with pytest.raises(DomainError):
        generate_trace(case_space.point("small-t3a"), workload, TraceCalibration(), 0)


def test_calibration_invariant():
    with pytest.raises(DomainError):
        Calibration(50, idle_pct=60)
    with pytest.raises(DomainError):
        Calibration(101)


def test_all_trace_values_in_range(case_traces):
    _, traces = case_traces
    for t in traces:
        assert t.cpu_util_pct.min() >= 0 and t.cpu_util_pct.max() <= 100


# --- ingestion -------------------------------------------------------------

def test_ingest_minimal():
    src = io.StringIO("action_id,timestamp_s,cpu_util_pct\na,0,10\na,60,20\na,120,30\n")
    (tr,) = ingest_traces(src)
    assert len(tr) == 3 and tr.action_id == "a"
    assert tr.sample_interval_s == 60


def test_ingest_unsorted_rows_are_sorted():
    src = io.StringIO("action_id,timestamp_s,cpu_util_pct\nb,60,5\na,60,2\nb,0,4\na,0,1\n")
    out = {t.action_id: t for t in ingest_traces(src)}
    assert out["a"].cpu_util_pct.tolist() == [1, 2]
    assert out["b"].timestamps.tolist() == [0, 60]


@pytest.mark.parametrize("body,match", [
    ("action_id,timestamp_s,cpu_util_pct\na,0,10\na,60,105\n", "line 3"),
    ("action_id,timestamp_s\na,0\n", "missing columns"),
    ("", "empty"),
    ("action_id,timestamp_s,cpu_util_pct\n", "no data"),
    ("action_id,timestamp_s,cpu_util_pct\na,0,1\na,0,2\n", "line 3: duplicate"),
    ("action_id,timestamp_s,cpu_util_pct\na,0,x\n", "line 2"),
    ("action_id,timestamp_s,cpu_util_pct\na,0,-1\na,60,1\n", "line 2"),
])
def test_ingest_errors(body, match):
    with pytest.raises(IngestionError, match=match):
        ingest_traces(io.StringIO(body))


def test_ingest_round_trip(case_traces, tmp_path):
    _, traces = case_traces
    path = tmp_path / "t.csv"
    write_traces_csv(traces, path)
    back = ingest_traces(path)
    assert back == traces
    assert all(b.sample_interval_s == 60 for b in back)


# --- PCA -------------------------------------------------------------------

def test_pca_single_metric_identity():
    res = fit_pca(np.random.default_rng(0).normal(size=(50, 1)), 1)
    assert res.components.tolist() == [[1.0]]


def test_pca_rank_one_direction():
    t = np.random.default_rng(1).normal(size=200)
    x = np.column_stack([t, t]) + 3.0
    res = fit_pca(x, 2)
    assert res.components[0] == pytest.approx([2 ** -0.5, 2 ** -0.5], abs=1e-6)
    assert res.explained_variance[1] == pytest.approx(0, abs=1e-9)


def test_pca_zero_variance_flag():
    with pytest.warns(RuntimeWarning):
        res = fit_pca(np.ones((10, 3)), 2)
    assert res.degenerate
    assert np.array_equal(res.components, np.eye(3)[:2])


def test_pca_preconditions():
    with pytest.raises(PreconditionError):
        fit_pca(np.ones((1, 2)), 1)
    with pytest.raises(PreconditionError):
        fit_pca(np.ones((5, 2)), 3)


@given(hnp.arrays(float, st.tuples(st.integers(3, 40), st.integers(1, 6)),
                  elements=st.floats(-100, 100, allow_nan=False)))
def test_pca_orthonormal_and_signed(x):
    d = x.shape[1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fit_pca(x, d)
    v = res.components
    assert np.abs(v @ v.T - np.eye(d)).max() < 1e-9
    assert np.all(np.diff(res.explained_variance) <= 1e-9 * max(1.0, res.explained_variance.max()))
    for row in v:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        assert row[nz[0]] > 0


def test_pca_matches_numpy_svd():
    x = np.random.default_rng(3).normal(size=(300, 4)) @ np.diag([5, 3, 1, 0.5])
    res = fit_pca(x, 4)
    _, s, vt = np.linalg.svd(x - x.mean(0), full_matrices=False)
    assert res.explained_variance == pytest.approx(s ** 2 / (len(x) - 1), rel=1e-9)
    assert np.abs(np.abs(res.components @ vt.T) - np.eye(4)).max() < 1e-8


# --- AR --------------------------------------------------------------------

def test_ar_constant_series():
    fit = fit_ar(np.full(30, 50.0), 1)
    assert fit.coeffs.tolist() == [0.0] and fit.intercept == 50.0 and fit.degenerate
    assert fit.predict_next([50.0]) == 50.0


def test_ar1_recovery():
    rng = np.random.default_rng(2024)
    x = np.zeros(1000)
    for t in range(1, 1000):
        x[t] = 0.8 * x[t - 1] + rng.normal()
    assert fit_ar(x, 1).coeffs[0] == pytest.approx(0.8, abs=0.02)


def test_ar_too_short():
    with pytest.raises(PreconditionError):
        fit_ar(np.arange(10.0), 1)
    with pytest.raises(PreconditionError):
        fit_ar(np.arange(30.0), 3)


@given(st.integers(1, 3), st.integers(0, 2 ** 31), st.integers(500, 900))
def test_ar_noise_free_recovery(p, seed, n):
    rng = np.random.default_rng(seed)
    # stable recurrence with persistent oscillation keeps the design well conditioned:
    # roots on (or near) the unit circle
    ang = rng.uniform(0.3, 2.5, size=2)
    roots = {1: [rng.uniform(-0.999, -0.9)],
             2: [np.exp(1j * ang[0]), np.exp(-1j * ang[0])],
             3: [np.exp(1j * ang[0]), np.exp(-1j * ang[0]), rng.uniform(0.5, 0.9)]}[p]
    poly = np.real(np.poly(roots))
    c = -poly[1:]
    icpt = rng.uniform(-5, 5)
    x = list(rng.normal(size=p) * 10)
    for _ in range(n - p):
        x.append(icpt + sum(c[j] * x[-1 - j] for j in range(p)))
    fit = fit_ar(np.array(x), p)
    assert np.abs(fit.coeffs - c).max() < 1e-6


# --- surrogate -------------------------------------------------------------

def test_surrogate_case_study_medians(case_traces):
    sp, traces = case_traces
    m = build_surrogate(traces, sp)
    for k, v in CASE_STUDY_MEDIANS.items():
        assert abs(m.node_medians[k] - v) <= 1.0
    assert np.abs(m.pca_components @ m.pca_components.T - 1).max() < 1e-9
    assert set(m.ar_coeffs) == set(CASE_STUDY_MEDIANS)


def test_surrogate_single_node(case_traces):
    sp, traces = case_traces
    m = build_surrogate(traces[:1], sp)
    for q in [(2, 2), (5, 9), (8, 30), (3.3, 4.4)]:
        assert predict_median(m, q) == m.node_medians["small-t3a"]


def test_surrogate_json_round_trip(case_traces):
    sp, traces = case_traces
    m = build_surrogate(traces, sp, ar_order=2)
    back = SurrogateModel.from_json(m.to_json())
    assert back == m
    assert back.predict((6, 14)) == m.predict((6, 14))


def test_surrogate_errors(case_traces):
    sp, traces = case_traces
    with pytest.raises(DomainError):
        build_surrogate([], sp)
    with pytest.raises(DomainError):
        build_surrogate(traces + traces[:1], sp)


def _toy_model(medians, coords, power=2.0):
    return SurrogateModel(tuple(medians), np.array(coords, float), dict(medians),
                          np.eye(1), np.zeros(1), 1, {}, {}, power)


def test_predict_exact_at_node(case_traces):
    sp, traces = case_traces
    m = build_surrogate(traces, sp)
    assert predict_median(m, (2, 8)) == m.node_medians["large-t3a"]
    exact = _toy_model({"large": 99.5, "x": 72.5}, [(2, 8), (8, 32)])
    assert predict_median(exact, (2, 8)) == 99.5
    assert predict_median(exact, (2 + 1e-13, 8)) == 99.5


def test_predict_equidistant_average():
    m = _toy_model({"a": 95.0, "b": 99.5}, [(2, 2), (2, 8)])
    assert predict_median(m, (2, 5)) == pytest.approx(97.25, abs=1e-12)
    assert predict_median(m, (7, 5)) == pytest.approx(97.25, abs=1e-12)


def test_predict_removing_node_moves_toward_neighbours(case_traces):
    sp, traces = case_traces
    full = build_surrogate(traces, sp)
    drop = build_surrogate([t for t in traces if t.action_id != "large-t3a"], sp)
    for q in [(2.0, 7.5), (2.2, 8.3), (2.5, 8.0)]:
        before, after = predict_median(full, q), predict_median(drop, q)
        # large has the highest median among the near nodes, so removal lowers the estimate
        assert after < before
        assert min(drop.node_medians.values()) <= after <= max(drop.node_medians.values())


def test_predict_brute_force(case_traces):
    sp, traces = case_traces
    m = build_surrogate(traces, sp)
    rng = np.random.default_rng(5)
    for q in rng.uniform([2, 2], [8, 32], size=(50, 2)):
        d = np.hypot(*(m.node_coords - q).T)
        w = 1 / d ** 2
        assert predict_median(m, q) == pytest.approx(float(w @ m.medians_array / w.sum()), rel=1e-12)


def test_coord_scale_extension():
    m = _toy_model({"a": 95.0, "b": 99.5}, [(2, 2), (4, 2)])
    scaled = SurrogateModel(m.node_ids, m.node_coords, m.node_medians, np.eye(1), np.zeros(1), 1, {}, {},
                            2.0, (1.0, 10.0))
    # a y-offset counts ten times as much; equidistant in x stays symmetric
    assert scaled.predict((3, 5)) == pytest.approx(97.25)
    assert scaled.predict((2.5, 2)) == pytest.approx(m.predict((2.5, 2)))


@given(st.floats(-5, 15), st.floats(-5, 40))
def test_predict_in_range_and_continuous(x, y):
    m = _toy_model({"a": 0.0, "b": 100.0, "c": 37.0}, [(2, 2), (8, 32), (4, 16)])
    v = predict_median(m, (x, y))
    assert 0.0 <= v <= 100.0
    near = predict_median(m, (x + 1e-7, y - 1e-7))
    assert abs(near - v) < 1e-2


def test_synthetic_builder_uses_only_members(case_space, workload, calib):
    b = SyntheticModelBuilder(case_space, workload, calib)
    s = case_space.coalition(["small-t3a", "large-t3a"])
    m = b(s, 3)
    assert m.node_ids == ("small-t3a", "large-t3a")
    assert b(s, 3) is m
    full = b(case_space.full(), 3)
    # same seed -> same per-action trace regardless of coalition
    assert full.node_medians["large-t3a"] == m.node_medians["large-t3a"]


def test_state_trace_invariants():
    with pytest.raises(DomainError):
        StateTrace("a", [0], [1])
    with pytest.raises(DomainError):
        StateTrace("a", [0, 0], [1, 2])
    with pytest.raises(DomainError):
        StateTrace("a", [0, 1], [1, 101])
