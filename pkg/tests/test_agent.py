import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from action_shapley import _kernels
from action_shapley.agent import (AgentConfig, pid_update, run_episode,
                                  search_step_size, write_trajectory_csv)
from action_shapley.domain import (ActionPoint, ActionSpace, DomainError, Polygon, case_study_space,
                                   point_in_polygon)
from action_shapley.envsim import (CASE_STUDY_MEDIANS, SurrogateModel, SyntheticModelBuilder,
                                   TraceCalibration, generate_workload)

CASE = case_study_space()


@pytest.fixture(scope="module")
def builder():
    return SyntheticModelBuilder(CASE, generate_workload(), TraceCalibration.from_medians(CASE_STUDY_MEDIANS))


def fixed_model(medians, coords):
    return SurrogateModel(tuple(medians), np.array(coords, float), dict(medians),
                          np.eye(1), np.zeros(1), 1, {}, {}, 2.0)


def const_builder(model):
    return lambda action_set, seed: model


SQUARE = ActionSpace((ActionPoint("lo", 0.5, 0.5), ActionPoint("hi", 10, 10)),
                     Polygon([(0, 0), (10, 0), (10, 10), (0, 10)]))
MONO = fixed_model({"lo": 100.0, "hi": 50.0}, [(0.5, 0.5), (10, 10)])


# --- pid_update --------------------------------------------------------------

def test_pid_zero_error():
    assert pid_update([0.0], (0.05, 0.0, 0.01), 0.1) == (0.0, 0.0)


def test_pid_pure_p():
    assert pid_update([10.0], (1.0, 0.0, 0.0), 0.1) == (0.1, 0.1)
    assert pid_update([-3.0], (1.0, 0.0, 0.0), 0.1) == (-0.1, -0.1)


def test_pid_pure_d_constant_error():
    assert pid_update([4.0, 4.0], (0.0, 0.0, 1.0), 0.1) == (0.0, 0.0)


def test_pid_integral_and_derivative():
    # kp*e + ki*sum + kd*de = 1*1 + 1*(-5+1) + 0 < 0
    assert pid_update([-5.0, 1.0], (1.0, 1.0, 0.0), 0.5) == (-0.5, -0.5)
    assert pid_update([9.0, 1.0], (1.0, 0.0, 1.0), 0.5) == (-0.5, -0.5)


def test_pid_empty_history():
    with pytest.raises(DomainError):
        pid_update([], (1, 0, 0), 0.1)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20),
       st.tuples(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2)), st.floats(1e-3, 2))
def test_pid_step_magnitude(errors, gains, step):
    dx, dy = pid_update(errors, gains, step)
    assert dx == dy and abs(dx) in (0.0, step)


# --- config ------------------------------------------------------------------

def test_agent_config_defaults_and_validation():
    c = AgentConfig()
    assert (c.threshold_pct, c.error_margin, c.max_steps, c.step_size) == (90.0, 0.05, 400, 0.1)
    assert c.initial_action == (6.0, 14.0) and c.pid_gains == (0.05, 0.0, 0.01)
    assert c.band_floor == pytest.approx(85.5)
    for bad in [dict(threshold_pct=0), dict(step_size=0), dict(max_steps=0), dict(pid_gains=(1, -1, 0))]:
        with pytest.raises(DomainError):
            AgentConfig(**bad)


# --- run_episode -------------------------------------------------------------

def test_immediate_success():
    m = fixed_model({"a": 50.0}, [(2, 2)])
    r = run_episode(CASE.coalition(["small-t3a"]), const_builder(m), AgentConfig(), CASE)
    assert r.success and r.steps == 0 and r.reward == 0.0
    assert r.trajectory.shape == (1, 3)


def test_failure_uses_sentinel():
    m = fixed_model({"a": 99.0}, [(2, 2)])
    r = run_episode(CASE.coalition(["small-t3a"]), const_builder(m), AgentConfig(max_steps=50), CASE)
    assert not r.success and r.steps == 50 and r.reward == -150
    r = run_episode(CASE.coalition(["small-t3a"]), const_builder(m), AgentConfig(max_steps=50), CASE,
                    failure_reward=-999)
    assert r.reward == -999


def test_empty_coalition_rejected(builder):
    with pytest.raises(DomainError):
        run_episode(CASE.coalition([]), builder, AgentConfig(), CASE)


def test_step_counting_and_trajectory():
    # prediction drops below 90 once q passes the midpoint region; check counting
    r = run_episode(SQUARE.full(), const_builder(MONO), AgentConfig(initial_action=(1, 1)), SQUARE)
    assert r.success
    assert r.trajectory.shape == (r.steps + 1, 3)
    assert r.trajectory[-1, 2] < 90 <= r.trajectory[-2, 2]
    assert np.allclose(np.diff(r.trajectory[:, 0]), 0.1)
    assert r.reward == -r.steps


def test_in_band_flag():
    r = run_episode(SQUARE.full(), const_builder(MONO), AgentConfig(initial_action=(1, 1)), SQUARE)
    assert r.in_band == (r.trajectory[-1, 2] >= 85.5)
    big = run_episode(SQUARE.full(), const_builder(MONO), AgentConfig(initial_action=(1, 1), step_size=4.0),
                      SQUARE)
    assert big.success and not big.in_band


@given(st.floats(0.01, 5.0), st.floats(0.6, 9.9), st.floats(0.6, 9.9))
def test_monotone_surrogate_always_solved(kp, x0, y0):
    cfg = AgentConfig(initial_action=(x0, y0), pid_gains=(kp, 0.0, 0.0))
    r = run_episode(SQUARE.full(), const_builder(MONO), cfg, SQUARE)
    assert r.success and r.steps <= cfg.max_steps


coalitions = st.sets(st.sampled_from(CASE.ids), min_size=1)


@given(coalitions, st.integers(0, 5))
def test_episode_invariants(builder, members, seed):
    s = CASE.coalition(members)
    cfg = AgentConfig()
    r = run_episode(s, builder, cfg, CASE, seed)
    assert r.reward <= 0
    assert (r.reward == 0) == (r.success and r.steps == 0)
    assert r.steps <= cfg.max_steps
    if r.success:
        assert r.reward == -r.steps
    else:
        assert r.steps == cfg.max_steps and r.reward == cfg.default_failure_reward
    for x, y, m in r.trajectory:
        assert point_in_polygon((x, y), CASE.boundary)
        assert 0 <= m <= 100
    assert run_episode(s, builder, cfg, CASE, seed) == r


def test_initial_action_is_clipped():
    m = fixed_model({"a": 95.0, "b": 70.0}, [(2, 2), (8, 32)])
    r = run_episode(CASE.full(), const_builder(m), AgentConfig(initial_action=(0, 0)), CASE)
    assert tuple(r.trajectory[0, :2]) == (2.0, 2.0)


# --- step-size search --------------------------------------------------------

def test_search_singleton(builder):
    assert search_step_size([0.1], CASE.full(), builder, AgentConfig(), CASE).best == 0.1


def test_search_deterministic(builder):
    a = search_step_size([0.5, 0.1, 0.2], CASE.full(), builder, AgentConfig(), CASE, trials=2, seed=4)
    b = search_step_size([0.5, 0.1, 0.2], CASE.full(), builder, AgentConfig(), CASE, trials=2, seed=4)
    assert a == b


def test_search_tie_prefers_smaller():
    m = fixed_model({"a": 50.0}, [(2, 2)])
    res = search_step_size([0.3, 0.2, 0.1], CASE.full(), const_builder(m), AgentConfig(), CASE)
    assert res.best == 0.1 and not res.all_failed


def test_search_all_fail_flag():
    m = fixed_model({"a": 99.0}, [(2, 2)])
    res = search_step_size([0.3, 0.2], CASE.full(), const_builder(m), AgentConfig(max_steps=20), CASE)
    assert res.all_failed and res.best == 0.2


@pytest.mark.xfail(strict=True, reason=(
    "reward counts steps, so the largest candidate reaches the threshold soonest "
    "under the prescribed agent; see decisions ledger"))
def test_search_case_study_prefers_point_one(builder):
    res = search_step_size([0.01, 0.1, 1.0], CASE.full(), builder, AgentConfig(), CASE, trials=3, seed=0)
    assert res.best == 0.1


# --- export ------------------------------------------------------------------

def test_trajectory_csv():
    r = run_episode(SQUARE.full(), const_builder(MONO), AgentConfig(initial_action=(1, 1)), SQUARE)
    buf = io.StringIO()
    write_trajectory_csv(r, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,vcpus,mem_gb,predicted_median_pct"
    assert len(lines) == r.steps + 2
    assert lines[1].split(",")[:3] == ["0", "1.0", "1.0"]


def test_episode_backends_agree(builder):
    m = builder(CASE.full(), 0)
    args = (m.node_coords, m.medians_array, 2.0, 1.0, 1.0, CASE.boundary.vertices, 6.0, 14.0,
            90.0, 400, 0.1, 0.05, 0.0, 0.01)
    t1, ok1, s1 = _kernels.pid_episode_loop(*args)
    t2, ok2, s2 = _kernels.pid_episode_np(*args)
    assert (ok1, s1) == (ok2, s2)
    assert np.abs(t1[:s1 + 1] - t2[:s2 + 1]).max() < 1e-9
