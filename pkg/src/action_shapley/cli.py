"""Experiment orchestration and the ``action-shapley`` command line.

Exit codes: 0 success (failed coalitions are data), 2 input error,
3 internal invariant violation in the emitted report.
"""
import argparse
import copy
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__
from .agent import AgentConfig, run_episode, search_step_size, write_trajectory_csv
from .domain import ActionPoint, ActionSpace, DomainError, Polygon
from .envsim import (Calibration, IngestionError, PreconditionError, SyntheticModelBuilder,
                     TraceCalibration, TraceModelBuilder, generate_workload, ingest_traces,
                     write_traces_csv)
from .oracle import brute_force
from .valuation import (DISPENSABLE, EPSILON_NOTE, CoalitionEvaluator, ValuationConfig,
                        action_shapley_exact, action_shapley_restricted, categorize_actions,
                        coalition_value, compute_cutoff_cardinality, rank_dispensable)

log = logging.getLogger("action_shapley")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3

PROFILES = ("case-study", "toy-3")
TOP_KEYS = {"name", "seed", "action_space", "workload", "calibration", "traces",
            "surrogate", "agent", "valuation", "step_size_search", "output_dir"}


class ConfigError(ValueError):
    """Unreadable or inconsistent experiment configuration."""


class ReportInvariantError(RuntimeError):
    """Report cross-check failed."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _take(d, keys, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(d) - set(keys)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return d


@dataclass
class ExperimentConfig:
    space: ActionSpace
    workload: object
    calibration: TraceCalibration
    agent: AgentConfig
    valuation: ValuationConfig
    seed: int = 0
    trace_source: str = "synthetic"
    trace_path: str = None
    ar_order: int = 1
    idw_power: float = 2.0
    coord_scale: tuple = (1.0, 1.0)
    step_search: dict = None
    output_dir: str = None
    name: str = "experiment"
    raw: dict = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        try:
            return cls._from_dict(copy.deepcopy(doc), base_dir)
        except ConfigError:
            raise
        except (DomainError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    @classmethod
    def _from_dict(cls, doc, base_dir):
        _take(doc, TOP_KEYS, "config")
        sp = _take(doc["action_space"], {"points", "boundary"}, "action_space")
        pts = tuple(ActionPoint(str(p["id"]), p["vcpus"], p["mem_gb"])
                    for p in sp["points"])
        space = ActionSpace(pts, Polygon(sp["boundary"]))

        wl = _take(doc.get("workload", {}), {"period_s", "high_s", "duration_s", "sample_interval_s"}, "workload")
        workload = generate_workload(**wl)

        src = _take(doc.get("traces", {"source": "synthetic"}), {"source", "path"}, "traces")
        source = src.get("source", "synthetic")
        if source not in ("synthetic", "csv"):
            raise ConfigError("traces.source must be 'synthetic' or 'csv'")
        if source == "csv" and not src.get("path"):
            raise ConfigError("traces.source 'csv' needs traces.path")
        if source == "synthetic" and src.get("path"):
            raise ConfigError("exactly one trace source: drop traces.path or set source to 'csv'")
        path = None
        if source == "csv":
            path = str(Path(base_dir) / src["path"])

        cal_doc = _take(doc.get("calibration", {}), {"idle_pct", "noise_std_pct", "targets"}, "calibration")
        idle = float(cal_doc.get("idle_pct", 5.0))
        noise = float(cal_doc.get("noise_std_pct", 2.0))
        cal = TraceCalibration()
        for aid, t in cal_doc.get("targets", {}).items():
            space.index(aid)
            if isinstance(t, dict):
                _take(t, {"median_target_pct", "idle_pct", "noise_std_pct"}, f"calibration.targets.{aid}")
                cal[aid] = Calibration(float(t["median_target_pct"]), float(t.get("idle_pct", idle)),
                                       float(t.get("noise_std_pct", noise)))
            else:
                cal[aid] = Calibration(float(t), idle, noise)
        if source == "synthetic":
            missing = [i for i in space.ids if i not in cal]
            if missing:
                raise ConfigError(f"calibration missing for {missing}")

        ag = _take(doc.get("agent", {}), {"threshold_pct", "error_margin", "max_steps", "step_size",
                                          "initial_action", "pid_gains"}, "agent")
        agent = AgentConfig(**ag)

        va = _take(doc.get("valuation", {}), {"epsilon", "acceptable_iterations", "mc_budget",
                                              "failure_value", "shapley_constant", "repetitions"}, "valuation")
        va = dict(va)
        va.setdefault("acceptable_iterations", agent.max_steps)
        if va["acceptable_iterations"] != agent.max_steps:
            raise ConfigError("valuation.acceptable_iterations must equal agent.max_steps")
        valuation = ValuationConfig(**va)

        su = _take(doc.get("surrogate", {}), {"ar_order", "idw_power", "coord_scale"}, "surrogate")
        scale = tuple(float(s) for s in su.get("coord_scale", (1.0, 1.0)))
        if len(scale) != 2 or min(scale) <= 0:
            raise ConfigError("surrogate.coord_scale must be two positive numbers")

        ss = doc.get("step_size_search")
        if ss is not None:
            _take(ss, {"candidates", "trials"}, "step_size_search")

        seed = int(doc.get("seed", 0))
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        raw = {k: v for k, v in doc.items() if k != "output_dir"}
        return cls(space, workload, cal, agent, valuation, seed, source, path,
                   int(su.get("ar_order", 1)), float(su.get("idw_power", 2.0)), scale, ss,
                   doc.get("output_dir"), str(doc.get("name", "experiment")), raw)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(doc, base_dir=Path(path).parent)

    @classmethod
    def profile(cls, name):
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
        text = resources.files("action_shapley").joinpath("profiles", f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    def with_seed(self, seed):
        out = copy.copy(self)
        out.seed = int(seed)
        out.raw = dict(self.raw, seed=int(seed))
        return out

    def echo(self):
        """Canonical config document (sans output dir) for the report."""
        return dict(self.raw, seed=self.seed)

    def sha256(self):
        return hashlib.sha256(json.dumps(self.echo(), sort_keys=True).encode()).hexdigest()

    def model_builder(self):
        if self.trace_source == "csv":
            try:
                traces = ingest_traces(self.trace_path)
            except OSError as e:
                raise ConfigError(f"cannot read traces {self.trace_path}: {e.strerror}") from None
            known = set(self.space.ids)
            traces = [t for t in traces if t.action_id in known]
            return TraceModelBuilder(traces, self.space, self.ar_order, self.idw_power, self.coord_scale)
        return SyntheticModelBuilder(self.space, self.workload, self.calibration,
                                     self.ar_order, self.idw_power, self.coord_scale)

    def episode_fn(self, builder=None):
        builder = builder or self.model_builder()
        agent, space, fail = self.agent, self.space, self.valuation.failure_value

        def fn(action_set, seed):
            return run_episode(action_set, builder, agent, space, seed, fail)

        return fn

    def evaluator(self, builder=None):
        return CoalitionEvaluator(self.episode_fn(builder), self.valuation, self.seed)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _num(x):
    """JSON/CSV friendly number: integral floats become ints."""
    if x is None:
        return None
    x = float(x)
    return int(x) if x.is_integer() else x


def _fmt(x):
    return "none" if x is None else repr(_num(x)) if not isinstance(_num(x), int) else str(_num(x))


@dataclass
class ValuationReport:
    config: ExperimentConfig
    cutoff: object = None
    categorization: object = None
    ranking: object = None
    shapley: object = None
    evaluator: object = None
    step_search: object = None
    oracle: dict = None

    def _set(self, s):
        return {"coalition": self.config.space.label(s), "members": list(s.member_ids)}

    def to_dict(self, timestamp=True):
        cfg = self.config
        prov = {"tool": "action-shapley", "version": __version__,
                "config_sha256": cfg.sha256(), "seed": cfg.seed}
        if timestamp:
            prov["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        doc = {"provenance": prov, "config": cfg.echo(),
               "metadata": {"epsilon_interpretation": EPSILON_NOTE,
                            "failure_value": _num(cfg.valuation.failure_value),
                            "failure_label": "none",
                            "threshold_pct": cfg.agent.threshold_pct,
                            "target_band": [cfg.agent.band_floor, cfg.agent.threshold_pct]}}
        if self.cutoff is not None:
            c = self.cutoff
            doc["cutoff"] = {
                "cutoff": c.cutoff, "reduction_fraction": c.reduction_fraction,
                "no_viable_coalition": c.no_viable_coalition,
                "per_cardinality": [
                    {"cardinality": k,
                     "coalitions": [dict(self._set(s), success=ok) for s, ok in c.per_cardinality_outcomes[k]]}
                    for k in sorted(c.per_cardinality_outcomes, reverse=True)]}
        if self.categorization is not None:
            doc["categorization"] = [{"action_id": k, "category": v} for k, v in self.categorization.items()]
        if self.ranking is not None:
            doc["ranking"] = [dict(self._set(e.action_set), reward=_num(e.reward), rank=e.rank)
                              for e in self.ranking.entries]
        if self.shapley is not None:
            sv = self.shapley
            meta = {k: v for k, v in sv.meta.items() if k != "backend"}
            doc["shapley"] = {"mode": sv.mode, "constant": sv.constant, "values": sv.values, "meta": meta}
        if self.step_search is not None:
            st = self.step_search
            doc["step_size_search"] = {"best": st.best, "all_failed": st.all_failed,
                                       "mean_rewards": [[k, _num(v)] for k, v in st.mean_rewards.items()]}
        if self.evaluator is not None:
            space = cfg.space
            eps = sorted(self.evaluator.outcomes.values(),
                         key=lambda o: (len(o.action_set), [space.index(i) for i in o.action_set]))
            doc["episodes"] = [dict(self._set(o.action_set), success=o.success, value=_num(o.value),
                                    repetitions=[e.to_dict() for e in o.episodes]) for o in eps]
        if self.oracle is not None:
            doc["oracle"] = self.oracle
        return doc

    def cross_check(self):
        """Consistency of ranking, categorization and cutoff; raises on violation."""
        space = self.config.space
        if self.cutoff is not None:
            c = self.cutoff
            if not 1 <= c.cutoff <= space.n + 1 or not 0.0 <= c.reduction_fraction <= 1.0:
                raise ReportInvariantError("cutoff out of range")
        if self.ranking is not None:
            rewards = [e.reward for e in self.ranking.ranked]
            if any(a < b for a, b in zip(rewards, rewards[1:])):
                raise ReportInvariantError("rank list rewards are not non-increasing")
            if [e.rank for e in self.ranking.ranked] != list(range(1, len(rewards) + 1)):
                raise ReportInvariantError("ranks are not contiguous from 1")
            if self.evaluator is not None:
                memo = self.evaluator.outcomes
                for e in self.ranking.entries:
                    o = memo.get(e.action_set.member_ids)
                    if o is None or o.success != (e.rank is not None):
                        raise ReportInvariantError(f"ranking disagrees with memo for {e.action_set.key}")
        if self.categorization is not None and self.evaluator is not None:
            memo = self.evaluator.outcomes
            for aid, cat in self.categorization.items():
                o = memo.get(space.without(aid).member_ids)
                if o is None or o.success != (cat == DISPENSABLE):
                    raise ReportInvariantError(f"categorization disagrees with memo for {aid}")
        if self.categorization is not None and self.ranking is not None:
            listed = {e.action_set.member_ids: e for e in self.ranking.entries}
            for aid, cat in self.categorization.items():
                e = listed.get(space.without(aid).member_ids)
                if e is not None and (e.rank is not None) != (cat == DISPENSABLE):
                    raise ReportInvariantError(f"ranking and categorization disagree on {aid}")


def report_json(report, timestamp=True):
    return json.dumps(report.to_dict(timestamp), indent=2, sort_keys=True) + "\n"


def emit_report(report, out_dir, formats="both", stem="report"):
    """Write ``<stem>.json`` and/or ``categorization.csv`` / ``ranking.csv``.

    Returns the list of written paths.
    """
    report.cross_check()
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if formats in ("json", "both"):
            p = out / f"{stem}.json"
            p.write_text(report_json(report), encoding="utf-8")
            written.append(p)
        if formats in ("csv", "both"):
            if report.categorization is not None:
                p = out / "categorization.csv"
                with open(p, "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(("action_id", "category"))
                    w.writerows(report.categorization.items())
                written.append(p)
            if report.ranking is not None:
                p = out / "ranking.csv"
                with open(p, "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(("coalition", "reward", "rank"))
                    for e in report.ranking.entries:
                        w.writerow((report.config.space.label(e.action_set), _fmt(e.reward),
                                    "none" if e.rank is None else e.rank))
                written.append(p)
            if report.evaluator is not None:
                tdir = out / "trajectories"
                tdir.mkdir(exist_ok=True)
                for o in report.evaluator.outcomes.values():
                    p = tdir / f"{report.config.space.label(o.action_set)}.csv"
                    write_trajectory_csv(o.best, p)
                    written.append(p)
    except OSError as e:
        raise ConfigError(f"cannot write to {out}: {e.strerror or e}") from None
    return written


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def run_experiment(config, workers=1, stages=("cutoff", "categorize", "rank", "shapley"),
                   exact=False):
    """Traces -> surrogates -> cut-off -> categorization -> ranking -> Shapley."""
    builder = config.model_builder()
    ev = config.evaluator(builder)
    rep = ValuationReport(config, evaluator=ev)
    space, vcfg = config.space, config.valuation
    need_cut = any(s in stages for s in ("cutoff", "rank", "shapley"))
    if need_cut:
        rep.cutoff = compute_cutoff_cardinality(space, ev, vcfg, config.seed, workers)
        log.info("cutoff %d (reduction %.4f)", rep.cutoff.cutoff, rep.cutoff.reduction_fraction)
    if "categorize" in stages:
        rep.categorization = categorize_actions(space, ev, vcfg, workers)
    if "rank" in stages:
        rep.ranking = rank_dispensable(space, ev, vcfg, rep.cutoff, workers)
    if "shapley" in stages:
        def value_fn(s):
            return coalition_value(s, ev, vcfg)

        C = vcfg.shapley_constant
        if exact:
            rep.shapley = action_shapley_exact(space, value_fn, C)
        else:
            rep.shapley = action_shapley_restricted(space, value_fn, rep.cutoff.cutoff, C)
    if config.step_search:
        ss = config.step_search
        rep.step_search = search_step_size(ss.get("candidates", [0.01, 0.1, 1.0]), space.full(), builder,
                                           config.agent, space, int(ss.get("trials", 1)), config.seed)
    return rep


def run_oracle(config):
    res = brute_force(config.space, config.episode_fn(), config.valuation, config.seed)
    sp = config.space
    return {
        "cutoff": res["cutoff"],
        "reduction_fraction": res["reduction_fraction"],
        "no_viable_coalition": res["no_viable_coalition"],
        "categorization": [{"action_id": i, "category": c} for i, c in res["categorization"]],
        "ranking": [{"coalition": sp.label(s), "members": list(s.member_ids), "reward": _num(r), "rank": k}
                    for s, r, k in res["ranking"]],
        "shapley_exact": res["shapley_exact"],
        "table": {k: {"success": ok, "value": _num(v)} for k, (ok, v) in res["table"].items()},
    }


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _setup_logging():
    level = os.environ.get("AV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="experiment config JSON")
    src.add_argument("--profile", choices=PROFILES, help="shipped profile (default case-study)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="coalition evaluation threads")
    common.add_argument("--format", choices=("json", "csv", "both"), default="both")

    p = argparse.ArgumentParser(prog="action-shapley",
                                description="Value, categorize and rank RL training action sets.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="emit synthetic traces and the full surrogate")
    sub.add_parser("cutoff", parents=[common], help="cut-off cardinality")
    sub.add_parser("categorize", parents=[common], help="dispensable / indispensable actions")
    sub.add_parser("rank", parents=[common], help="rank coalitions at or above the cut-off")
    sh = sub.add_parser("shapley", parents=[common], help="Action Shapley values")
    sh.add_argument("--exact", action="store_true", help="full power set instead of the cut-off restriction")
    sub.add_parser("run", parents=[common], help="full pipeline")
    sub.add_parser("oracle", parents=[common], help="brute-force power-set evaluation (n <= 10)")
    return p


def _load(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.profile(args.profile or "case-study")
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("seed must be a u64")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _print_summary(rep):
    sp = rep.config.space
    if rep.cutoff is not None:
        print(f"cutoff: {rep.cutoff.cutoff}  reduction_fraction: {rep.cutoff.reduction_fraction}"
              + ("  (no viable coalition)" if rep.cutoff.no_viable_coalition else ""))
    if rep.categorization is not None:
        for k, v in rep.categorization.items():
            print(f"  {k}: {v}")
    if rep.ranking is not None:
        for e in rep.ranking.entries:
            print(f"  {sp.label(e.action_set)}  reward={_fmt(e.reward)}  rank={e.rank if e.rank else 'none'}")
    if rep.shapley is not None:
        for k, v in rep.shapley.values.items():
            print(f"  phi[{k}] = {v:.6g}")


def _cmd_simulate(cfg, args, out):
    builder = cfg.model_builder()
    traces = builder.traces_for(cfg.space.full(), cfg.seed)
    model = builder(cfg.space.full(), cfg.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_traces_csv(traces, out / "traces.csv")
        (out / "surrogate.json").write_text(model.to_json() + "\n", encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot write to {out}: {e.strerror or e}") from None
    for i in model.node_ids:
        print(f"  {i}: median {model.node_medians[i]:.3f}%")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        out = Path(args.out or cfg.output_dir or "av-out")
        cmd = args.command
        if cmd == "simulate":
            _cmd_simulate(cfg, args, out)
            return EXIT_OK
        if cmd == "oracle":
            doc = run_oracle(cfg)
            try:
                out.mkdir(parents=True, exist_ok=True)
                (out / "oracle.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            except OSError as e:
                raise ConfigError(f"cannot write to {out}: {e.strerror or e}") from None
            print(f"cutoff: {doc['cutoff']}  reduction_fraction: {doc['reduction_fraction']}")
            return EXIT_OK
        stages = {"cutoff": ("cutoff",), "categorize": ("categorize",), "rank": ("rank",),
                  "shapley": ("shapley",), "run": ("cutoff", "categorize", "rank", "shapley")}[cmd]
        rep = run_experiment(cfg, args.workers, stages, exact=getattr(args, "exact", False))
        emit_report(rep, out, args.format, stem="report" if cmd == "run" else cmd)
        _print_summary(rep)
        return EXIT_OK
    except (ConfigError, IngestionError, PreconditionError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ReportInvariantError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
