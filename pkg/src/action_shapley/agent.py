"""PID-controller agent walking the (vcpus, mem_gb) plane.

The agent observes the surrogate's predicted median CPU utilization and
moves both coordinates by ``step_size * sign(control)`` each step until the
prediction drops below the threshold or the step budget runs out.
"""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .domain import DomainError


@dataclass(frozen=True)
class AgentConfig:
    threshold_pct: float = 90.0
    error_margin: float = 0.05
    max_steps: int = 400
    step_size: float = 0.1
    initial_action: tuple = (6.0, 14.0)
    pid_gains: tuple = (0.05, 0.0, 0.01)

    def __post_init__(self):
        if not 0 < self.threshold_pct <= 100:
            raise DomainError("threshold_pct must lie in (0, 100]")
        if not 0 <= self.error_margin < 1:
            raise DomainError("error_margin must lie in [0, 1)")
        if not (isinstance(self.max_steps, (int, np.integer)) and self.max_steps >= 1):
            raise DomainError("max_steps must be a positive integer")
        if not self.step_size > 0:
            raise DomainError("step_size must be positive")
        if len(self.pid_gains) != 3 or any(g < 0 for g in self.pid_gains):
            raise DomainError("pid_gains must be three non-negative numbers")
        object.__setattr__(self, "initial_action", tuple(float(v) for v in self.initial_action))
        object.__setattr__(self, "pid_gains", tuple(float(g) for g in self.pid_gains))

    @property
    def band_floor(self):
        """Lower edge of the target band, threshold * (1 - margin)."""
        return self.threshold_pct * (1.0 - self.error_margin)

    @property
    def default_failure_reward(self):
        return -(self.max_steps + 100)


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one agent run.

    ``trajectory`` has one row per evaluated point, ``(vcpus, mem_gb,
    predicted_median_pct)``, starting with the initial action at step 0.
    ``in_band`` tells whether the final prediction landed in
    ``[threshold * (1 - margin), threshold)`` rather than overshooting below.
    """

    success: bool
    steps: int
    reward: float
    trajectory: np.ndarray = field(repr=False)
    in_band: bool = False

    def __eq__(self, other):
        return (isinstance(other, EpisodeResult) and self.success == other.success
                and self.steps == other.steps and self.reward == other.reward
                and np.array_equal(self.trajectory, other.trajectory))

    __hash__ = None

    def to_dict(self, trajectory=True):
        d = {"success": bool(self.success), "steps": int(self.steps),
             "reward": float(self.reward), "in_band": bool(self.in_band)}
        if trajectory:
            d["trajectory"] = self.trajectory.tolist()
        return d


def pid_update(error_history, gains, step_size):
    """Diagonal sign step from a PID control signal.

    Parameters
    ----------
    error_history : sequence of float
        ``predicted_median - threshold`` per step, oldest first.
    gains : (kp, ki, kd)
    step_size : float

    Returns
    -------
    (float, float)
        Equal moves in vcpus and mem_gb; positive means add resources.
    """
    e = np.asarray(error_history, dtype=float)
    if e.size == 0:
        raise DomainError("error_history must be non-empty")
    kp, ki, kd = gains
    de = e[-1] - e[-2] if e.size > 1 else 0.0
    control = kp * e[-1] + ki * e.sum() + kd * de
    d = float(step_size * np.sign(control))
    return (d, d)


def run_episode(action_set, model_builder, agent_cfg, space, seed=0, failure_reward=None):
    """Train-and-run the agent with a surrogate built from ``action_set``.

    Parameters
    ----------
    action_set : ActionSet
        Non-empty coalition; only its members' traces feed the surrogate.
    model_builder : callable
        ``model_builder(action_set, seed) -> SurrogateModel``.
    agent_cfg : AgentConfig
    space : ActionSpace
        Supplies the boundary polygon.
    seed : int
    failure_reward : float, optional
        Reward recorded on failure; defaults to ``-(max_steps + 100)``.
    """
    if len(action_set) == 0:
        raise DomainError("cannot run an episode on the empty coalition")
    model = model_builder(action_set, seed)
    if failure_reward is None:
        failure_reward = agent_cfg.default_failure_reward
    sx, sy = model.coord_scale
    kp, ki, kd = agent_cfg.pid_gains
    x0, y0 = agent_cfg.initial_action
    traj, ok, steps = _kernels.pid_episode(
        model.node_coords, model.medians_array, float(model.idw_power), float(sx), float(sy),
        space.boundary.vertices, x0, y0, float(agent_cfg.threshold_pct),
        int(agent_cfg.max_steps), float(agent_cfg.step_size), kp, ki, kd)
    traj = np.array(traj[:steps + 1])
    ok = bool(ok)
    final = traj[-1, 2]
    in_band = ok and final >= agent_cfg.band_floor
    reward = float(-int(steps)) if ok else float(failure_reward)
    return EpisodeResult(ok, int(steps), reward, traj, bool(in_band))


@dataclass(frozen=True)
class StepSizeSearch:
    best: float
    mean_rewards: dict
    all_failed: bool = False


def search_step_size(candidates, action_set, model_builder, agent_cfg, space, trials=1, seed=0):
    """Monte Carlo step-size selection by mean episode reward.

    Ties go to the smaller step. If every candidate fails on every trial,
    the smallest candidate is returned with ``all_failed=True``.
    """
    cands = [float(c) for c in candidates]
    if not cands or any(c <= 0 for c in cands):
        raise DomainError("candidates must be a non-empty list of positive steps")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    seeds = [int(seed) + t for t in range(int(trials))]
    means, any_ok = {}, False
    for c in cands:
        cfg = AgentConfig(agent_cfg.threshold_pct, agent_cfg.error_margin, agent_cfg.max_steps,
                          c, agent_cfg.initial_action, agent_cfg.pid_gains)
        res = [run_episode(action_set, model_builder, cfg, space, s) for s in seeds]
        any_ok |= any(r.success for r in res)
        means[c] = float(np.mean([r.reward for r in res]))
    if not any_ok:
        return StepSizeSearch(min(cands), means, True)
    best = sorted(means, key=lambda c: (-means[c], c))[0]
    return StepSizeSearch(best, means, False)


def write_trajectory_csv(result, dest):
    """Plot-ready ``step,vcpus,mem_gb,predicted_median_pct`` rows."""
    fh, close = (open(dest, "w", newline="", encoding="utf-8"), True) \
        if isinstance(dest, (str, os.PathLike)) else (dest, False)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "vcpus", "mem_gb", "predicted_median_pct"))
        for k, (x, y, m) in enumerate(result.trajectory.tolist()):
            w.writerow((k, repr(x), repr(y), repr(m)))
    finally:
        if close:
            fh.close()
