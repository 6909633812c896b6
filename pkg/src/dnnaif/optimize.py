"""Optimization engines: trust-region direct search, surrogate descent,
surrogate-filtered sampling, and the surrogate-accelerated orchestrator.

Design conventions shared by the engines:
  - Acceptance is strict (f_try < f_k); ties count as failures.
  - On a failed round the radius is recomputed as h0 * tau_tr**failures,
    which keeps the geometric-shrink invariant exact in floating point.
  - Each trace row records the radius that was USED during the iteration
    (pre-shrink), the incumbent after the iteration, and the cumulative
    ledger count, so accounting can be audited from traces alone.
  - Direction draws come from dedicated RNG substreams derived from the
    config seed; reruns with the same seed reproduce identical traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blackbox import (
    Ledger,
    Objective,
    evaluate,
    evaluate_batch,
    history_snapshot,
    true_value,
)
from .errors import BudgetExhausted, DimensionMismatch
from .stencil import DirectionSet, coordinate_directions, stencil_points
from .stencil import rademacher_directions, sphere_directions
from .surrogate import (
    Architecture,
    NetworkParams,
    TrainingConfig,
    grad_x,
    init_network,
    surrogate_value,
    surrogate_values,
    train,
)

STENCIL_FAILURE = "stencil-failure"


@dataclass(frozen=True)
class IFConfig:
    """Trust-region direct-search hyperparameters."""

    h0: float = 30.0
    h_min: float = 0.03
    tau_tr: float = 0.9
    n_s: int = 11
    direction_kind: str = "sphere-uniform"
    max_iterations: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.tau_tr < 1):
            raise ValueError("tau_tr must lie in (0, 1)")
        if not (self.h0 > self.h_min >= 0):
            raise ValueError("need h0 > h_min >= 0")
        if self.n_s < 1 or self.max_iterations < 0:
            raise ValueError("n_s must be positive, max_iterations nonnegative")
        if self.direction_kind not in ("coordinate", "sphere-uniform", "rademacher"):
            raise ValueError(f"unknown direction kind: {self.direction_kind!r}")


@dataclass(frozen=True)
class ExplorationSchedule:
    """Linear decay of the exploration share of each sampling round."""

    n_total: int = 10
    initial_fraction: float = 1.0
    final_fraction: float = 0.2
    decay_iterations: int = 10

    def __post_init__(self) -> None:
        if self.n_total < 1:
            raise ValueError("n_total must be positive")
        if not (0 < self.final_fraction <= 1):
            raise ValueError("final_fraction must lie in (0, 1]")
        if not (0 <= self.initial_fraction <= 1):
            raise ValueError("initial_fraction must lie in [0, 1]")
        if self.decay_iterations < 0:
            raise ValueError("decay_iterations must be nonnegative")


@dataclass(frozen=True)
class DNNAIFConfig:
    """Orchestrator configuration: direct search plus surrogate plumbing."""

    if_cfg: IFConfig = field(default_factory=IFConfig)
    s: int = 5
    schedule: ExplorationSchedule = field(default_factory=ExplorationSchedule)
    n_s_filter: int = 30
    training: TrainingConfig = field(default_factory=TrainingConfig)
    retrain_every: int = 1
    arch: Architecture | None = None  # default derived from the problem dimension

    def __post_init__(self) -> None:
        if self.s < 1:
            raise ValueError("s must be at least 1")
        if self.n_s_filter < 1 or self.retrain_every < 1:
            raise ValueError("n_s_filter and retrain_every must be positive")


@dataclass
class OptimizerState:
    """Incumbent point and trust-region bookkeeping."""

    x: np.ndarray
    f: float
    h: float
    iteration: int = 0
    stencil_failures: int = 0
    truncated: bool = False


@dataclass
class IterationTrace:
    """One engine iteration, as written to run traces.

    h is the radius in force while the iteration sampled (pre-shrink);
    best_f_true is the noiseless metric value of the incumbent, None for
    objectives without a noiseless form.
    """

    iteration: int
    h: float
    best_f: float
    best_f_true: float | None
    evals_cumulative: int
    accepted_origin: str
    try_point_accepted: bool
    x: np.ndarray


def _draw_directions(kind: str, n: int, count: int, rng: np.random.Generator,
                     start: int = 0) -> DirectionSet:
    """count directions of the configured kind.

    Coordinate kind enumerates e_1..e_n, -e_1..-e_n cyclically from
    ``start``; random kinds draw fresh from rng.
    """
    if count < 1:
        return DirectionSet(np.empty((0, n)), kind)
    if kind == "coordinate":
        base = coordinate_directions(n).directions
        idx = [(start + i) % base.shape[0] for i in range(count)]
        return DirectionSet(base[idx], "coordinate")
    if kind == "sphere-uniform":
        return sphere_directions(n, count, rng)
    return rademacher_directions(n, count, rng)


class _DirectionSource:
    """Per-engine direction stream.

    Keeps the coordinate cycle position across rounds so that short rounds
    still sweep every +/-e_i over consecutive iterations (the positive
    spanning property then holds across rounds, not only within one).
    """

    def __init__(self, kind: str, n: int):
        self.kind = kind
        self.n = n
        self._cursor = 0

    def __call__(self, count: int, rng: np.random.Generator) -> DirectionSet:
        out = _draw_directions(self.kind, self.n, count, rng, start=self._cursor)
        if self.kind == "coordinate" and count > 0:
            self._cursor = (self._cursor + count) % (2 * self.n)
        return out


def _true_or_none(obj: Objective, x: np.ndarray) -> float | None:
    v = true_value(obj, x)
    return None if math.isnan(v) else v


def implicit_filtering(
    obj: Objective, x0: np.ndarray, cfg: IFConfig, ledger: Ledger
) -> tuple[OptimizerState, list[IterationTrace]]:
    """Trust-region direct search: sample a stencil, move to a strict
    improvement or shrink the radius; stop at h <= h_min, the iteration
    cap, or an exhausted budget (state flagged truncated)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (obj.dimension,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, objective wants ({obj.dimension},)")
    rng = np.random.default_rng([cfg.seed, 1])
    source = _DirectionSource(cfg.direction_kind, obj.dimension)
    f0 = evaluate(obj, x0, ledger, 0, "initial")
    state = OptimizerState(x=x0.copy(), f=f0, h=cfg.h0)
    traces: list[IterationTrace] = []
    for k in range(cfg.max_iterations):
        if state.h <= cfg.h_min:
            break
        W = source(cfg.n_s, rng)
        points = stencil_points(state.x, state.h, W)
        if ledger.remaining() < len(points):
            state.truncated = True
            break
        values = evaluate_batch(obj, list(points), ledger, k, "exploration")
        h_used = state.h
        j = int(np.argmin(values))
        if values[j] < state.f:
            state.x = points[j].copy()
            state.f = values[j]
            origin = "exploration"
        else:
            state.stencil_failures += 1
            state.h = cfg.h0 * cfg.tau_tr ** state.stencil_failures
            origin = STENCIL_FAILURE
        state.iteration = k + 1
        traces.append(
            IterationTrace(
                iteration=k,
                h=h_used,
                best_f=state.f,
                best_f_true=_true_or_none(obj, state.x),
                evals_cumulative=ledger.count,
                accepted_origin=origin,
                try_point_accepted=False,
                x=state.x.copy(),
            )
        )
    return state, traces


def armijo_search(
    value_fn,
    x: np.ndarray,
    g: np.ndarray,
    mu0: float = 1.0,
    c: float = 1e-4,
    backtrack: float = 0.5,
    max_backtracks: int = 30,
) -> tuple[float, bool]:
    """Backtracking step size: largest mu in {mu0 * backtrack^i} meeting
    value_fn(x - mu g) <= value_fn(x) - c mu ||g||^2, else (0, False)."""
    gg = float(g @ g)
    if gg == 0.0:
        return 0.0, False
    fx = float(value_fn(x))
    mu = mu0
    for _ in range(max_backtracks + 1):
        if float(value_fn(x - mu * g)) <= fx - c * mu * gg:
            return mu, True
        mu *= backtrack
    return 0.0, False


def surrogate_descent(
    x_k: np.ndarray, theta: NetworkParams, s: int, h: float
) -> np.ndarray:
    """Up to s Armijo gradient steps on the surrogate, never leaving the
    radius-h ball around x_k: an overshooting step is rejected and the
    last in-region iterate returned."""
    x = np.asarray(x_k, dtype=float).copy()
    value_fn = lambda z: surrogate_value(theta, z)
    # far-field probes can overflow the net; Armijo treats NaN as failure
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(s):
            g = grad_x(theta, x)
            if not np.all(np.isfinite(g)) or not np.any(g):
                break
            mu, ok = armijo_search(value_fn, x, g)
            if not ok:
                break
            candidate = x - mu * g
            if np.linalg.norm(candidate - x_k) > h:
                break
            x = candidate
    return x


def filtered_sampling(
    x_k: np.ndarray,
    f_k: float,
    h: float,
    theta: NetworkParams,
    n_f: int,
    n_s: int,
    direction_source,
    rng: np.random.Generator,
    log: list | None = None,
) -> list[np.ndarray]:
    """Candidate points at radius h whose surrogate value does not exceed
    the incumbent's observed value.

    Draws up to n_s candidates from direction_source and keeps the first
    n_f with f_hat(candidate) <= f_k, in draw order.  n_f = 0 returns
    immediately with no draws and no surrogate queries.
    """
    if n_f <= 0:
        return []
    if n_s < n_f:
        raise ValueError("n_s must be at least n_f")
    W = direction_source(n_s, rng)
    candidates = stencil_points(np.asarray(x_k, dtype=float), h, W)
    fhat = surrogate_values(theta, candidates)
    accepted: list[np.ndarray] = []
    for point, value in zip(candidates, fhat):
        if value <= f_k:
            accepted.append(point.copy())
            if log is not None:
                log.append({"f_k": float(f_k), "surrogate_value": float(value), "x": point.copy()})
            if len(accepted) >= n_f:
                break
    return accepted


def exploration_schedule(
    k: int, n_total: int, sched: ExplorationSchedule
) -> tuple[int, int]:
    """Split a sampling round into (exploration, filtered) counts at
    iteration k, interpolating the exploration fraction linearly."""
    if n_total < 1:
        raise ValueError("n_total must be positive")
    if sched.decay_iterations == 0:
        fraction = sched.final_fraction
    else:
        t = min(k / sched.decay_iterations, 1.0)
        fraction = sched.initial_fraction + (sched.final_fraction - sched.initial_fraction) * t
    n_e = int(math.floor(fraction * n_total + 0.5))
    if fraction > 0:
        n_e = max(1, n_e)
    n_e = min(n_e, n_total)
    return n_e, n_total - n_e


def _default_arch(n: int) -> Architecture:
    return Architecture(input_dim=n, hidden_dim=16, depth=4)


def _train_on_history(
    theta: NetworkParams, ledger: Ledger, cfg: TrainingConfig
) -> NetworkParams:
    X, f = history_snapshot(ledger)
    return train(theta, X, f, cfg)


def dnnaif(
    obj: Objective,
    x0: np.ndarray,
    cfg: DNNAIFConfig,
    ledger: Ledger,
    filter_log: list | None = None,
) -> tuple[OptimizerState, list[IterationTrace], NetworkParams]:
    """Surrogate-accelerated direct search.

    Per iteration: propose a try point by surrogate descent and evaluate
    it; on strict improvement accept it and skip sampling, otherwise
    evaluate a round of exploration plus surrogate-filtered points and
    accept the round minimizer if it strictly improves (else shrink).
    A filter shortfall is topped up with extra exploration draws, so a
    full sampling round always evaluates schedule.n_total points.  The
    surrogate retrains on the full evaluation history with warm starts.
    A diverged surrogate demotes the iteration to pure exploration.

    filter_log, when given, collects one entry per filter-accepted
    candidate with the surrogate value and incumbent value at filter time.
    """
    ifc = cfg.if_cfg
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (obj.dimension,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, objective wants ({obj.dimension},)")
    arch = cfg.arch if cfg.arch is not None else _default_arch(obj.dimension)
    if arch.input_dim != obj.dimension:
        raise DimensionMismatch("surrogate input width must match the objective")
    rng_dirs = np.random.default_rng([ifc.seed, 1])
    rng_filter = np.random.default_rng([ifc.seed, 2])
    source_explore = _DirectionSource(ifc.direction_kind, obj.dimension)
    source_filter = _DirectionSource(ifc.direction_kind, obj.dimension)

    f0 = evaluate(obj, x0, ledger, 0, "initial")
    state = OptimizerState(x=x0.copy(), f=f0, h=ifc.h0)
    theta = _train_on_history(init_network(arch, cfg.training.seed), ledger, cfg.training)
    traces: list[IterationTrace] = []

    for k in range(ifc.max_iterations):
        if state.h <= ifc.h_min:
            break
        h_used = state.h
        if theta.diverged:
            x_try = state.x.copy()
        else:
            x_try = surrogate_descent(state.x, theta, cfg.s, state.h)
        if ledger.remaining() < 1:
            state.truncated = True
            break
        f_try = evaluate(obj, x_try, ledger, k, "try-point")
        if f_try < state.f:
            state.x = x_try.copy()
            state.f = f_try
            origin, try_accepted = "try-point", True
        else:
            n_e, n_f = exploration_schedule(k, cfg.schedule.n_total, cfg.schedule)
            if theta.diverged:
                n_e, n_f = cfg.schedule.n_total, 0
            W = source_explore(n_e, rng_dirs)
            X_e = stencil_points(state.x, state.h, W) if n_e > 0 else np.empty((0, obj.dimension))
            iter_log: list = []
            X_f = filtered_sampling(
                state.x, state.f, state.h, theta, n_f, cfg.n_s_filter,
                source_filter, rng_filter, log=iter_log,
            )
            if len(X_f) < n_f:
                # a filter shortfall must not shrink the round, or a
                # pessimistic surrogate starves the search of samples
                W_fill = source_explore(n_f - len(X_f), rng_dirs)
                X_fill = stencil_points(state.x, state.h, W_fill)
                X_e = np.vstack([X_e, X_fill]) if len(X_e) else X_fill
            if ledger.remaining() < len(X_e) + len(X_f):
                state.truncated = True
                break
            vals_e = evaluate_batch(obj, list(X_e), ledger, k, "exploration")
            vals_f = evaluate_batch(obj, X_f, ledger, k, "exploitation")
            if filter_log is not None:
                for entry in iter_log:
                    entry["iteration"] = k
                    filter_log.append(entry)
            candidates = [x_try] + list(X_e) + list(X_f)
            values = [f_try] + vals_e + vals_f
            j = int(np.argmin(values))
            if values[j] < state.f:
                state.x = candidates[j].copy()
                state.f = values[j]
                try_accepted = j == 0
                if j == 0:
                    origin = "try-point"
                elif j <= len(vals_e):
                    origin = "exploration"
                else:
                    origin = "exploitation"
            else:
                state.stencil_failures += 1
                state.h = ifc.h0 * ifc.tau_tr ** state.stencil_failures
                origin, try_accepted = STENCIL_FAILURE, False
        state.iteration = k + 1
        if (k + 1) % cfg.retrain_every == 0:
            theta = _train_on_history(theta, ledger, replace(cfg.training, warm_start=True))
        traces.append(
            IterationTrace(
                iteration=k,
                h=h_used,
                best_f=state.f,
                best_f_true=_true_or_none(obj, state.x),
                evals_cumulative=ledger.count,
                accepted_origin=origin,
                try_point_accepted=try_accepted,
                x=state.x.copy(),
            )
        )
    return state, traces, theta


def dnn_only(
    obj: Objective,
    x0: np.ndarray,
    cfg: DNNAIFConfig,
    ledger: Ledger,
) -> tuple[OptimizerState, list[IterationTrace], NetworkParams]:
    """Surrogate-led baseline with no trust region.

    Per iteration: descend the surrogate without the shrinking-radius cap
    and evaluate the proposal, which is accepted on strict improvement;
    then refresh the training pool with a round of points at the fixed
    initial radius around the start point.  Pool points only feed
    training, they are never candidate incumbents, so progress rests
    entirely on the surrogate's proposals.  The pool never moves or
    shrinks; only the iteration cap or the budget stops the loop.

    Descent displacement is still bounded by 50*h0 per iteration: without
    any bound, each retraining inflates the target scale and the proposals
    escalate until float overflow.  At 50 times the search radius the cap
    never binds as a trust region at desk scale.
    """
    ifc = cfg.if_cfg
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (obj.dimension,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, objective wants ({obj.dimension},)")
    arch = cfg.arch if cfg.arch is not None else _default_arch(obj.dimension)
    rng_dirs = np.random.default_rng([ifc.seed, 1])
    source = _DirectionSource(ifc.direction_kind, obj.dimension)
    f0 = evaluate(obj, x0, ledger, 0, "initial")
    state = OptimizerState(x=x0.copy(), f=f0, h=ifc.h0)
    theta = _train_on_history(init_network(arch, cfg.training.seed), ledger, cfg.training)
    traces: list[IterationTrace] = []
    for k in range(ifc.max_iterations):
        if theta.diverged:
            x_try = state.x.copy()
        else:
            x_try = surrogate_descent(state.x, theta, cfg.s, 50.0 * ifc.h0)
        if ledger.remaining() < 1:
            state.truncated = True
            break
        f_try = evaluate(obj, x_try, ledger, k, "try-point")
        W = source(cfg.schedule.n_total, rng_dirs)
        pool = stencil_points(x0, ifc.h0, W)
        if ledger.remaining() < len(pool):
            state.truncated = True
            break
        evaluate_batch(obj, list(pool), ledger, k, "training-pool")
        if f_try < state.f:
            state.x = x_try.copy()
            state.f = f_try
            origin, try_accepted = "try-point", True
        else:
            origin, try_accepted = STENCIL_FAILURE, False
        state.iteration = k + 1
        theta = _train_on_history(theta, ledger, replace(cfg.training, warm_start=True))
        traces.append(
            IterationTrace(
                iteration=k,
                h=ifc.h0,
                best_f=state.f,
                best_f_true=_true_or_none(obj, state.x),
                evals_cumulative=ledger.count,
                accepted_origin=origin,
                try_point_accepted=try_accepted,
                x=state.x.copy(),
            )
        )
    return state, traces, theta
