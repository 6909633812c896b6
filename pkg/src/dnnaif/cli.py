"""Experiment front end: JSON configs, batch runs, metrics on disk.

A config names a problem and a method; ``run`` executes ``runs``
independent seeded repetitions and writes per-run traces, an aggregate
table, and a manifest into the output directory.  Evaluation batches
fan out over threads; set DNNAIF_EVAL_THREADS to pin the count (single
thread reproduces byte-identical traces).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import cdg
from .blackbox import (
    EVAL_THREADS_ENV,
    Ledger,
    NoiseSpec,
    Objective,
    noisy_wrap,
    rosenbrock,
    rosenbrock_objective,
)
from .errors import BudgetExhausted, IoError, ParseError, ValidationError
from .optimize import (
    DNNAIFConfig,
    ExplorationSchedule,
    IFConfig,
    IterationTrace,
    dnn_only,
    dnnaif,
    implicit_filtering,
)
from .surrogate import Architecture, TrainingConfig

PROBLEMS = ("rosenbrock-noisy", "rosenbrock-clean", "cdg-toy")
METHODS = ("if", "dnn-only", "dnnaif", "dirichlet")
DIRECTION_KINDS = ("coordinate", "sphere-uniform", "rademacher")

ROSENBROCK_START = (-6.0, 6.0)
ROSENBROCK_OPTIMUM = 0.0
GAP_FLOOR = 1e-16

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_BUDGET = 4
EXIT_IO = 5

_TOP_KEYS = frozenset(
    ("problem", "method", "runs", "seed", "budget", "output_dir",
     "noise_sigma", "search", "surrogate", "cdg")
)
_SEARCH_KEYS = frozenset(
    ("h0", "h_min", "tau_tr", "points", "direction_kind", "iterations")
)
_SURROGATE_KEYS = frozenset(
    ("hidden_dim", "depth", "alpha", "descent_steps", "filter_candidates",
     "retrain_every", "training_iterations", "batch_size", "learning_rate",
     "exploration_initial", "exploration_final",
     "exploration_decay_iterations")
)
_CDG_KEYS = frozenset(("n_cycles", "threshold", "epsilon", "alpha"))


@dataclass(frozen=True)
class SearchSettings:
    """Direct-search knobs shared by every engine-backed method.

    ``points`` is the evaluation budget of one full iteration: the whole
    stencil for plain filtering, the try point plus the sampling round
    for the surrogate methods.
    """

    h0: float
    h_min: float
    tau_tr: float
    points: int
    direction_kind: str
    iterations: int


@dataclass(frozen=True)
class SurrogateSettings:
    """Network shape, training loop, and sampling-split knobs."""

    hidden_dim: int
    depth: int
    alpha: float
    descent_steps: int
    filter_candidates: int
    retrain_every: int
    training_iterations: int
    batch_size: int
    learning_rate: float
    exploration_initial: float
    exploration_final: float
    exploration_decay_iterations: int


@dataclass(frozen=True)
class CdgSettings:
    """Simulator fidelity and coverage bookkeeping."""

    n_cycles: int
    threshold: float
    epsilon: float
    alpha: tuple | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description.

    Instances always carry every field that applies to their problem and
    method, with defaults filled in, so equal configs hash equally no
    matter which keys the file spelled out.
    """

    problem: str
    method: str
    runs: int
    seed: int
    budget: int
    output_dir: str
    noise_sigma: float | None
    search: SearchSettings | None
    surrogate: SurrogateSettings | None
    cdg: CdgSettings | None

    def to_dict(self) -> dict:
        """JSON-ready mapping; omits sections that do not apply."""
        out: dict = {
            "problem": self.problem,
            "method": self.method,
            "runs": self.runs,
            "seed": self.seed,
            "budget": self.budget,
            "output_dir": self.output_dir,
        }
        if self.noise_sigma is not None:
            out["noise_sigma"] = self.noise_sigma
        if self.search is not None:
            s = self.search
            out["search"] = {
                "h0": s.h0, "h_min": s.h_min, "tau_tr": s.tau_tr,
                "points": s.points, "direction_kind": s.direction_kind,
                "iterations": s.iterations,
            }
        if self.surrogate is not None:
            g = self.surrogate
            out["surrogate"] = {
                "hidden_dim": g.hidden_dim, "depth": g.depth,
                "alpha": g.alpha, "descent_steps": g.descent_steps,
                "filter_candidates": g.filter_candidates,
                "retrain_every": g.retrain_every,
                "training_iterations": g.training_iterations,
                "batch_size": g.batch_size,
                "learning_rate": g.learning_rate,
                "exploration_initial": g.exploration_initial,
                "exploration_final": g.exploration_final,
                "exploration_decay_iterations": g.exploration_decay_iterations,
            }
        if self.cdg is not None:
            c = self.cdg
            section: dict = {
                "n_cycles": c.n_cycles, "threshold": c.threshold,
                "epsilon": c.epsilon,
            }
            if c.alpha is not None:
                section["alpha"] = list(c.alpha)
            out["cdg"] = section
        return out


def _require(mapping: dict, allowed: frozenset, where: str) -> None:
    # unknown keys are rejected before any value is interpreted
    for key in mapping:
        if key not in allowed:
            raise ParseError(f"unknown key {key!r} in {where}")


def _as_int(raw: dict, key: str, where: str, minimum: int | None = None) -> int:
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}{key} must be an integer")
    if minimum is not None and value < minimum:
        raise ValidationError(f"{where}{key} must be at least {minimum}")
    return value


def _as_float(raw: dict, key: str, where: str) -> float:
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}{key} must be a number")
    return float(value)


def _as_choice(raw: dict, key: str, where: str, choices: tuple) -> str:
    value = raw[key]
    if not isinstance(value, str) or value not in choices:
        raise ValidationError(
            f"{where}{key} must be one of {', '.join(choices)}"
        )
    return value


def _default_search(problem: str, method: str) -> dict:
    if problem == "cdg-toy":
        return {"h0": 1.0, "h_min": 1e-4, "tau_tr": 0.97, "points": 21,
                "direction_kind": "coordinate", "iterations": 250}
    return {"h0": 30.0, "h_min": 1e-12, "tau_tr": 0.9, "points": 11,
            "direction_kind": "sphere-uniform", "iterations": 10}


def _default_surrogate(problem: str) -> dict:
    if problem == "cdg-toy":
        # constant half/half split: ten exploration plus ten filtered
        return {"hidden_dim": 48, "depth": 4, "alpha": 1.0,
                "descent_steps": 5, "filter_candidates": 60,
                "retrain_every": 1, "training_iterations": 400,
                "batch_size": 32, "learning_rate": 0.01,
                "exploration_initial": 0.5, "exploration_final": 0.5,
                "exploration_decay_iterations": 1}
    return {"hidden_dim": 16, "depth": 4, "alpha": 1.0,
            "descent_steps": 5, "filter_candidates": 30,
            "retrain_every": 1, "training_iterations": 150,
            "batch_size": 16, "learning_rate": 0.01,
            "exploration_initial": 1.0, "exploration_final": 1.0,
            "exploration_decay_iterations": 1}


def _resolve_search(raw: dict | None, problem: str, method: str) -> SearchSettings:
    merged = _default_search(problem, method)
    if raw is not None:
        _require(raw, _SEARCH_KEYS, "search")
        merged.update(raw)
    raw = merged
    h0 = _as_float(raw, "h0", "search.")
    h_min = _as_float(raw, "h_min", "search.")
    tau_tr = _as_float(raw, "tau_tr", "search.")
    points = _as_int(raw, "points", "search.", minimum=1)
    kind = _as_choice(raw, "direction_kind", "search.", DIRECTION_KINDS)
    iterations = _as_int(raw, "iterations", "search.", minimum=0)
    if not 0.0 < tau_tr < 1.0:
        raise ValidationError("search.tau_tr must lie in (0, 1)")
    if h_min < 0.0 or not h0 > h_min:
        raise ValidationError("search requires h0 > h_min >= 0")
    if method in ("dnnaif", "dnn-only") and points < 2:
        raise ValidationError(
            "search.points must be at least 2 for surrogate methods"
        )
    return SearchSettings(h0, h_min, tau_tr, points, kind, iterations)


def _resolve_surrogate(raw: dict | None, problem: str) -> SurrogateSettings:
    merged = _default_surrogate(problem)
    if raw is not None:
        _require(raw, _SURROGATE_KEYS, "surrogate")
        merged.update(raw)
    raw = merged
    cfg = SurrogateSettings(
        hidden_dim=_as_int(raw, "hidden_dim", "surrogate.", minimum=1),
        depth=_as_int(raw, "depth", "surrogate.", minimum=2),
        alpha=_as_float(raw, "alpha", "surrogate."),
        descent_steps=_as_int(raw, "descent_steps", "surrogate.", minimum=1),
        filter_candidates=_as_int(raw, "filter_candidates", "surrogate.", minimum=1),
        retrain_every=_as_int(raw, "retrain_every", "surrogate.", minimum=1),
        training_iterations=_as_int(raw, "training_iterations", "surrogate.", minimum=0),
        batch_size=_as_int(raw, "batch_size", "surrogate.", minimum=1),
        learning_rate=_as_float(raw, "learning_rate", "surrogate."),
        exploration_initial=_as_float(raw, "exploration_initial", "surrogate."),
        exploration_final=_as_float(raw, "exploration_final", "surrogate."),
        exploration_decay_iterations=_as_int(
            raw, "exploration_decay_iterations", "surrogate.", minimum=1),
    )
    if cfg.alpha <= 0:
        raise ValidationError("surrogate.alpha must be positive")
    if cfg.learning_rate <= 0:
        raise ValidationError("surrogate.learning_rate must be positive")
    if not 0.0 <= cfg.exploration_initial <= 1.0:
        raise ValidationError("surrogate.exploration_initial must lie in [0, 1]")
    if not 0.0 < cfg.exploration_final <= 1.0:
        raise ValidationError("surrogate.exploration_final must lie in (0, 1]")
    return cfg


def _resolve_cdg(raw: dict | None, method: str) -> CdgSettings:
    merged = {"n_cycles": cdg.DEFAULT_CYCLES, "threshold": cdg.DEFAULT_THRESHOLD,
              "epsilon": cdg.DEFAULT_EPSILON}
    if raw is not None:
        _require(raw, _CDG_KEYS, "cdg")
        merged.update(raw)
    raw = merged
    n_cycles = _as_int(raw, "n_cycles", "cdg.", minimum=1)
    threshold = _as_float(raw, "threshold", "cdg.")
    epsilon = _as_float(raw, "epsilon", "cdg.")
    if not 0.0 < threshold < 1.0:
        raise ValidationError("cdg.threshold must lie in (0, 1)")
    if epsilon <= 0:
        raise ValidationError("cdg.epsilon must be positive")
    alpha = None
    if "alpha" in raw:
        if method != "dirichlet":
            raise ValidationError(
                "cdg.alpha only applies to the dirichlet baseline"
            )
        value = raw["alpha"]
        if (not isinstance(value, list) or len(value) != 5
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       for v in value)):
            raise ValidationError("cdg.alpha must be a list of 5 numbers")
        alpha = tuple(float(v) for v in value)
        if any(a <= 0 for a in alpha):
            raise ValidationError("cdg.alpha entries must be positive")
    return CdgSettings(n_cycles, threshold, epsilon, alpha)


def resolve_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed mapping and fill defaults.

    Raises ParseError for keys the schema does not know and
    ValidationError for values that break an invariant; the message
    names the offending field.
    """
    if not isinstance(raw, dict):
        raise ParseError("config root must be a JSON object")
    _require(raw, _TOP_KEYS, "config")
    for key in ("problem", "method"):
        if key not in raw:
            raise ValidationError(f"config requires the {key!r} key")
    problem = _as_choice(raw, "problem", "", PROBLEMS)
    method = _as_choice(raw, "method", "", METHODS)
    if method == "dirichlet" and problem != "cdg-toy":
        raise ValidationError("the dirichlet baseline requires problem cdg-toy")

    defaults = {
        "runs": 5 if problem == "cdg-toy" else 10,
        "seed": 0,
        "budget": 3500 if problem == "cdg-toy" else 10_000,
        "output_dir": "results",
    }
    merged = {**defaults, **{k: raw[k] for k in raw
                             if k in ("runs", "seed", "budget", "output_dir")}}
    runs = _as_int(merged, "runs", "", minimum=0)
    seed = _as_int(merged, "seed", "", minimum=0)
    if seed >= 2 ** 64:
        raise ValidationError("seed must fit in 64 bits")
    budget = _as_int(merged, "budget", "", minimum=1)
    output_dir = merged["output_dir"]
    if not isinstance(output_dir, str) or not output_dir:
        raise ValidationError("output_dir must be a nonempty string")

    noise_sigma = None
    if problem == "rosenbrock-noisy":
        noise_sigma = 1.0
        if "noise_sigma" in raw:
            noise_sigma = _as_float(raw, "noise_sigma", "")
            if noise_sigma < 0:
                raise ValidationError("noise_sigma must be nonnegative")
    elif "noise_sigma" in raw:
        raise ValidationError("noise_sigma only applies to rosenbrock-noisy")

    search = None
    if method == "dirichlet":
        if "search" in raw:
            raise ValidationError("search does not apply to the dirichlet baseline")
        if "surrogate" in raw:
            raise ValidationError("surrogate does not apply to the dirichlet baseline")
    else:
        search = _resolve_search(raw.get("search"), problem, method)

    surrogate = None
    if method in ("dnnaif", "dnn-only"):
        surrogate = _resolve_surrogate(raw.get("surrogate"), problem)
    elif "surrogate" in raw and method == "if":
        raise ValidationError("surrogate only applies to dnnaif and dnn-only")

    cdg_settings = None
    if problem == "cdg-toy":
        cdg_settings = _resolve_cdg(raw.get("cdg"), method)
    elif "cdg" in raw:
        raise ValidationError("the cdg section only applies to cdg-toy")

    return ExperimentConfig(
        problem=problem, method=method, runs=runs, seed=seed, budget=budget,
        output_dir=output_dir, noise_sigma=noise_sigma, search=search,
        surrogate=surrogate, cdg=cdg_settings,
    )


def parse_config(path: str) -> ExperimentConfig:
    """Load and resolve a JSON config file.

    Unreadable files raise IoError, malformed JSON raises ParseError
    with the line and column, and bad values raise ValidationError.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config {path!r}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"config is not valid JSON: {exc.msg} "
            f"(line {exc.lineno}, column {exc.colno})"
        ) from exc
    return resolve_config(raw)


def write_config(cfg: ExperimentConfig, path: str) -> None:
    """Serialize a resolved config; parse_config inverts this exactly."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write config {path!r}: {exc}") from exc


def config_hash(cfg: ExperimentConfig) -> str:
    """Hex digest over every semantically meaningful field.

    The output directory names where results land, not what they are,
    so it stays out of the hash.
    """
    payload = cfg.to_dict()
    payload.pop("output_dir")
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class RunResult:
    """Everything one seeded repetition produced."""

    seed: int
    traces: list
    unhit_curve: np.ndarray | None
    evals_used: int
    wall_seconds: float
    final_gap: float | None
    final_unhit: int | None


@dataclass
class ExperimentReport:
    """A config together with its per-run results."""

    config: ExperimentConfig
    results: list


def _build_objective(cfg: ExperimentConfig, run_seed: int,
                     p_log: list | None) -> tuple[Objective, np.ndarray]:
    if cfg.problem == "cdg-toy":
        obj = cdg.make_cdg_objective(
            n_cycles=cfg.cdg.n_cycles, seed=run_seed,
            epsilon=cfg.cdg.epsilon, p_log=p_log,
        )
        return obj, cdg.neutral_input()
    base = rosenbrock_objective()
    x0 = np.array(ROSENBROCK_START)
    if cfg.problem == "rosenbrock-noisy":
        spec = NoiseSpec("additive-gaussian", cfg.noise_sigma, run_seed)
        return noisy_wrap(base, spec), x0
    return base, x0


def _engine_configs(cfg: ExperimentConfig, dim: int,
                    run_seed: int) -> tuple[IFConfig, DNNAIFConfig | None]:
    s = cfg.search
    if_cfg = IFConfig(
        h0=s.h0, h_min=s.h_min, tau_tr=s.tau_tr, n_s=s.points,
        direction_kind=s.direction_kind, max_iterations=s.iterations,
        seed=run_seed,
    )
    if cfg.surrogate is None:
        return if_cfg, None
    g = cfg.surrogate
    dnn_cfg = DNNAIFConfig(
        if_cfg=if_cfg,
        s=g.descent_steps,
        # one evaluation of the round budget is spent on the try point
        schedule=ExplorationSchedule(
            n_total=s.points - 1,
            initial_fraction=g.exploration_initial,
            final_fraction=g.exploration_final,
            decay_iterations=g.exploration_decay_iterations,
        ),
        n_s_filter=g.filter_candidates,
        training=TrainingConfig(
            iterations=g.training_iterations, batch_size=g.batch_size,
            learning_rate=g.learning_rate, seed=run_seed,
        ),
        retrain_every=g.retrain_every,
        arch=Architecture(input_dim=dim, hidden_dim=g.hidden_dim,
                          depth=g.depth, alpha=g.alpha),
    )
    return if_cfg, dnn_cfg


def _run_one(cfg: ExperimentConfig, run_seed: int) -> RunResult:
    t0 = time.perf_counter()
    if cfg.method == "dirichlet":
        curve = cdg.dirichlet_baseline(
            budget=cfg.budget, alpha=cfg.cdg.alpha,
            n_cycles=cfg.cdg.n_cycles, seed=run_seed,
            threshold=cfg.cdg.threshold,
        )
        return RunResult(
            seed=run_seed, traces=[], unhit_curve=curve,
            evals_used=int(len(curve)),
            wall_seconds=time.perf_counter() - t0,
            final_gap=None,
            final_unhit=int(curve[-1]) if len(curve) else cdg.N_EVENTS,
        )

    p_log: list | None = [] if cfg.problem == "cdg-toy" else None
    obj, x0 = _build_objective(cfg, run_seed, p_log)
    if_cfg, dnn_cfg = _engine_configs(cfg, obj.dimension, run_seed)
    ledger = Ledger(budget=cfg.budget)
    if cfg.method == "if":
        state, traces = implicit_filtering(obj, x0, if_cfg, ledger)
    elif cfg.method == "dnnaif":
        state, traces, _ = dnnaif(obj, x0, dnn_cfg, ledger)
    else:
        state, traces, _ = dnn_only(obj, x0, dnn_cfg, ledger)

    curve = None
    final_gap = None
    final_unhit = None
    if cfg.problem == "cdg-toy":
        curve = cdg.coverage_curve(p_log, threshold=cfg.cdg.threshold)
        final_unhit = int(curve[-1]) if len(curve) else cdg.N_EVENTS
    else:
        final_gap = max(rosenbrock(state.x) - ROSENBROCK_OPTIMUM, GAP_FLOOR)
    return RunResult(
        seed=run_seed, traces=traces, unhit_curve=curve,
        evals_used=ledger.count, wall_seconds=time.perf_counter() - t0,
        final_gap=final_gap, final_unhit=final_unhit,
    )


def run_experiment(cfg: ExperimentConfig, on_run=None) -> ExperimentReport:
    """Execute every repetition; run i is seeded with seed + i.

    ``on_run(index, result)`` fires as each repetition finishes, so a
    caller can persist partial results while later runs are still going.
    """
    results = []
    for i in range(cfg.runs):
        result = _run_one(cfg, cfg.seed + i)
        results.append(result)
        if on_run is not None:
            on_run(i, result)
    return ExperimentReport(config=cfg, results=results)


def _trace_line(t: IterationTrace) -> str:
    payload = {
        "iteration": t.iteration,
        "h": t.h,
        "best_f": t.best_f,
        "best_f_true": t.best_f_true,
        "evals_cumulative": t.evals_cumulative,
        "accepted_origin": t.accepted_origin,
        "try_point_accepted": t.try_point_accepted,
        "x": [float(v) for v in t.x],
    }
    return json.dumps(payload, sort_keys=True)


def _trace_path(out_dir: str, index: int) -> str:
    return os.path.join(out_dir, f"run{index:03d}_trace.jsonl")


def _coverage_path(out_dir: str, index: int) -> str:
    return os.path.join(out_dir, f"run{index:03d}_coverage.csv")


def write_run_files(out_dir: str, index: int, result: RunResult,
                    problem: str) -> list:
    """Persist one repetition; returns the file names written."""
    names = []
    try:
        path = _trace_path(out_dir, index)
        with open(path, "w", encoding="utf-8") as fh:
            for t in result.traces:
                fh.write(_trace_line(t) + "\n")
        names.append(os.path.basename(path))
        if problem == "cdg-toy":
            path = _coverage_path(out_dir, index)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["test", "unhit"])
                curve = result.unhit_curve
                for t in range(len(curve)):
                    writer.writerow([t + 1, int(curve[t])])
            names.append(os.path.basename(path))
    except OSError as exc:
        raise IoError(f"cannot write run files in {out_dir!r}: {exc}") from exc
    return names


def aggregate_gap_table(runs: list) -> list:
    """Per-iteration mean/std of the floored log10 optimality gap.

    ``runs`` holds one trace list per repetition.  Shorter runs carry
    their last row forward so every iteration averages over all
    repetitions; empty runs contribute nothing.
    """
    runs = [r for r in runs if len(r)]
    if not runs:
        return []
    length = max(len(r) for r in runs)
    rows = []
    for k in range(length):
        hs, gaps, evals = [], [], []
        for r in runs:
            t = r[min(k, len(r) - 1)]
            hs.append(t.h)
            gaps.append(np.log10(max(t.best_f_true, GAP_FLOOR)))
            evals.append(t.evals_cumulative)
        rows.append((k, float(np.mean(hs)), float(np.mean(gaps)),
                     float(np.std(gaps)), float(np.mean(evals))))
    return rows


def aggregate_coverage_table(curves: list) -> list:
    """Per-test mean/std of the unhit count across repetitions.

    Exhausted runs keep their final count, matching how coverage
    persists after a run stops testing.
    """
    curves = [np.asarray(c) for c in curves if c is not None and len(c)]
    if not curves:
        return []
    length = max(len(c) for c in curves)
    rows = []
    for t in range(length):
        vals = [float(c[min(t, len(c) - 1)]) for c in curves]
        rows.append((t + 1, float(np.mean(vals)), float(np.std(vals))))
    return rows


def emit_metrics(report: ExperimentReport, out_dir: str) -> dict:
    """Write traces, the aggregate table, and the manifest.

    Returns the manifest mapping.  With zero repetitions the aggregate
    file still appears, header only.
    """
    cfg = report.config
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output dir {out_dir!r}: {exc}") from exc

    files: dict = {"traces": [], "aggregate": "aggregate.csv"}
    if cfg.problem == "cdg-toy":
        files["coverage"] = []
    for i, result in enumerate(report.results):
        names = write_run_files(out_dir, i, result, cfg.problem)
        files["traces"].append(names[0])
        if cfg.problem == "cdg-toy":
            files["coverage"].append(names[1])

    agg_path = os.path.join(out_dir, "aggregate.csv")
    try:
        with open(agg_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            if cfg.problem == "cdg-toy":
                writer.writerow(["tests", "mean_unhit", "std_unhit"])
                table = aggregate_coverage_table(
                    [r.unhit_curve for r in report.results])
                for tests, mean, std in table:
                    writer.writerow([tests, repr(mean), repr(std)])
            else:
                writer.writerow(["iter", "h", "mean_log10_gap",
                                 "std_log10_gap", "mean_evals"])
                table = aggregate_gap_table(
                    [r.traces for r in report.results])
                for k, h, mean, std, evals in table:
                    writer.writerow([k, repr(h), repr(mean), repr(std),
                                     repr(evals)])
    except OSError as exc:
        raise IoError(f"cannot write {agg_path!r}: {exc}") from exc

    manifest = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "problem": cfg.problem,
        "method": cfg.method,
        "runs": cfg.runs,
        "run_seeds": [r.seed for r in report.results],
        "evals_used": [r.evals_used for r in report.results],
        "wall_clock_seconds": [r.wall_seconds for r in report.results],
        "files": files,
    }
    if cfg.problem == "cdg-toy":
        manifest["final_unhit"] = [r.final_unhit for r in report.results]
    else:
        manifest["final_gap"] = [r.final_gap for r in report.results]
    manifest_path = os.path.join(out_dir, "manifest.json")
    try:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {manifest_path!r}: {exc}") from exc
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dnnaif",
        description="Run benchmark experiments from a JSON config.",
        epilog=(f"Set {EVAL_THREADS_ENV} to control evaluation-batch "
                "threads (default: all cores)."),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute an experiment")
    run.add_argument("--config", required=True, help="JSON config path")
    run.add_argument("--output", help="override output_dir")
    run.add_argument("--seed", type=int, help="override base seed")
    run.add_argument("--runs", type=int, help="override repetition count")
    check = sub.add_parser("validate", help="parse a config and stop")
    check.add_argument("--config", required=True, help="JSON config path")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.output is not None:
        if not args.output:
            raise ValidationError("output_dir must be a nonempty string")
        cfg = replace(cfg, output_dir=args.output)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ValidationError("seed must fit in 64 bits")
        cfg = replace(cfg, seed=args.seed)
    if args.runs is not None:
        if args.runs < 0:
            raise ValidationError("runs must be a nonnegative integer")
        cfg = replace(cfg, runs=args.runs)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.command == "validate":
            print(f"config ok: {cfg.problem}/{cfg.method} runs={cfg.runs} "
                  f"seed={cfg.seed} hash={config_hash(cfg)[:12]}")
            return EXIT_OK
        cfg = _apply_overrides(cfg, args)
        try:
            os.makedirs(cfg.output_dir, exist_ok=True)
        except OSError as exc:
            raise IoError(
                f"cannot create output dir {cfg.output_dir!r}: {exc}"
            ) from exc

        def persist(index: int, result: RunResult) -> None:
            # keep finished runs on disk even if a later one dies
            write_run_files(cfg.output_dir, index, result, cfg.problem)

        report = run_experiment(cfg, on_run=persist)
        manifest = emit_metrics(report, cfg.output_dir)
        print(f"{cfg.problem}/{cfg.method}: {cfg.runs} runs -> "
              f"{cfg.output_dir} (hash {manifest['config_hash'][:12]})")
        if cfg.problem == "cdg-toy":
            unhit = manifest["final_unhit"]
            if unhit:
                print(f"final unhit events per run: {unhit}")
        else:
            gaps = manifest["final_gap"]
            if gaps:
                mean = float(np.mean([np.log10(g) for g in gaps]))
                print(f"mean final log10 gap: {mean:.3f}")
        return EXIT_OK
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
