"""Expensive noisy objectives, noise wrappers, and the evaluation ledger.

Every true-function call made by an optimizer goes through :func:`evaluate`
or :func:`evaluate_batch`, which charge a shared :class:`Ledger`.  The ledger
is the single source of truth for "number of true function evaluations" and
doubles as the training history for the surrogate.
"""

from __future__ import annotations

import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BudgetExhausted,
    DimensionMismatch,
    EvaluationFailed,
    EmptyInput,
    NegativeGap,
)

ORIGINS = ("initial", "try-point", "exploration", "exploitation", "training-pool")

#: Environment variable controlling evaluate_batch fan-out (thread count).
EVAL_THREADS_ENV = "DNNAIF_EVAL_THREADS"


@dataclass
class Objective:
    """A scalar black-box function of a fixed-dimension real vector.

    ``evaluator`` is the plain callable form.  ``indexed_evaluator``, when
    set, receives the global evaluation index alongside ``x``; stochastic
    wrappers use it to key their noise stream so serial and concurrent
    batches observe identical values.  ``noiseless`` exposes the underlying
    smooth function for reporting; optimizers never call it.
    """

    dimension: int
    evaluator: Callable[[np.ndarray], float]
    descriptor: str = ""
    indexed_evaluator: Callable[[np.ndarray, int], float] | None = None
    noiseless: Callable[[np.ndarray], float] | None = None
    serial_only: bool = False

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError("objective dimension must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise description for :func:`noisy_wrap`."""

    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "additive-gaussian"):
            raise ValueError(f"unknown noise kind: {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True)
class EvaluationRecord:
    """One charged sample of the true function."""

    x: np.ndarray
    f: float
    iteration: int
    origin: str

    def __post_init__(self) -> None:
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin tag: {self.origin!r}")
        if not math.isfinite(self.f):
            raise ValueError("record value must be finite")


class Ledger:
    """Append-only record of true-function evaluations with a hard budget.

    ``budget=None`` means unbounded.  Appends are atomic; the record order
    is the charge order.
    """

    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 0:
            raise ValueError("budget must be nonnegative or None")
        self.budget = budget
        self._records: list[EvaluationRecord] = []
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[EvaluationRecord, ...]:
        return tuple(self._records)

    def remaining(self) -> float:
        if self.budget is None:
            return math.inf
        return self.budget - self.count

    def _append(self, record: EvaluationRecord) -> None:
        with self._lock:
            if self.budget is not None and len(self._records) >= self.budget:
                raise BudgetExhausted(
                    f"budget of {self.budget} evaluations exhausted"
                )
            self._records.append(record)

    def _append_many(self, records: Sequence[EvaluationRecord]) -> None:
        with self._lock:
            if self.budget is not None and (
                len(self._records) + len(records) > self.budget
            ):
                raise BudgetExhausted(
                    f"batch of {len(records)} exceeds remaining budget "
                    f"{self.budget - len(self._records)}"
                )
            self._records.extend(records)


def _check_dimension(obj: Objective, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (obj.dimension,):
        raise DimensionMismatch(
            f"expected vector of length {obj.dimension}, got shape {x.shape}"
        )
    return x


def _raw_value(obj: Objective, x: np.ndarray, index: int) -> float:
    if obj.indexed_evaluator is not None:
        return float(obj.indexed_evaluator(x, index))
    return float(obj.evaluator(x))


def _thread_count() -> int:
    raw = os.environ.get(EVAL_THREADS_ENV, "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(
                f"{EVAL_THREADS_ENV} must be an integer, got {raw!r}"
            ) from None
        return max(1, n)
    return os.cpu_count() or 1


def evaluate(
    obj: Objective,
    x: np.ndarray,
    ledger: Ledger,
    iteration: int,
    origin: str,
) -> float:
    """Evaluate the objective once, charging the ledger.

    Raises BudgetExhausted before calling the evaluator if no budget is
    left, DimensionMismatch on a wrong-length input, and EvaluationFailed
    if the evaluator raises it or returns a non-finite value.
    """
    x = _check_dimension(obj, x)
    if ledger.remaining() < 1:
        raise BudgetExhausted("no evaluation budget left")
    value = _raw_value(obj, x, ledger.count)
    if not math.isfinite(value):
        raise EvaluationFailed(f"evaluator returned non-finite value {value!r}")
    ledger._append(EvaluationRecord(x=x.copy(), f=value, iteration=iteration, origin=origin))
    return value


def evaluate_batch(
    obj: Objective,
    X: Sequence[np.ndarray],
    ledger: Ledger,
    iteration: int,
    origin: str,
) -> list[float]:
    """Evaluate a batch of points in input order; all-or-nothing commit.

    If the remaining budget is smaller than the batch, BudgetExhausted is
    raised and nothing is charged.  Evaluations may fan out over threads
    (``DNNAIF_EVAL_THREADS``); the noise substream of each point is keyed
    by its ledger index, so serial and concurrent execution return
    identical values in identical order.
    """
    points = [_check_dimension(obj, x) for x in X]
    if not points:
        return []
    if ledger.remaining() < len(points):
        raise BudgetExhausted(
            f"batch of {len(points)} exceeds remaining budget {ledger.remaining()}"
        )
    base = ledger.count
    threads = _thread_count()
    if threads > 1 and len(points) > 1 and not obj.serial_only:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(
                pool.map(lambda ix: _raw_value(obj, ix[1], base + ix[0]), enumerate(points))
            )
    else:
        values = [_raw_value(obj, x, base + i) for i, x in enumerate(points)]
    for v in values:
        if not math.isfinite(v):
            raise EvaluationFailed(f"evaluator returned non-finite value {v!r}")
    ledger._append_many(
        [
            EvaluationRecord(x=x.copy(), f=v, iteration=iteration, origin=origin)
            for x, v in zip(points, values)
        ]
    )
    return values


def rosenbrock(x: np.ndarray, a: float = 1.0, b: float = 100.0) -> float:
    """Banana-valley test function (a - x1)^2 + b (x2 - x1^2)^2."""
    x = np.asarray(x, dtype=float)
    return float((a - x[0]) ** 2 + b * (x[1] - x[0] ** 2) ** 2)


def rosenbrock_objective(a: float = 1.0, b: float = 100.0) -> Objective:
    """Noiseless 2-d banana objective; its own evaluator is the truth."""

    def f(x: np.ndarray) -> float:
        return rosenbrock(x, a, b)

    return Objective(dimension=2, evaluator=f, descriptor=f"rosenbrock(a={a},b={b})", noiseless=f)


class _GaussianNoiseEvaluator:
    """Adds one N(0, sigma^2) draw per evaluation, keyed by evaluation index.

    The indexed path is a pure function of (seed, index), so any execution
    order reproduces the same values.  The plain-call path keeps its own
    counter for use outside a ledger.
    """

    def __init__(self, base: Callable[[np.ndarray], float], sigma: float, seed: int):
        self._base = base
        self._sigma = sigma
        self._seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0
        self._lock = threading.Lock()

    def noise(self, index: int) -> float:
        bits = np.random.Philox(key=[self._seed, index & 0xFFFFFFFFFFFFFFFF])
        return self._sigma * float(np.random.Generator(bits).standard_normal())

    def indexed(self, x: np.ndarray, index: int) -> float:
        return float(self._base(x)) + self.noise(index)

    def __call__(self, x: np.ndarray) -> float:
        with self._lock:
            index = self._counter
            self._counter += 1
        return self.indexed(x, index)


def noisy_wrap(obj: Objective, spec: NoiseSpec) -> Objective:
    """Wrap an objective with additive noise per the spec'd noise kind.

    The returned objective keeps the smooth function reachable through
    ``noiseless`` so metrics can query the truth without charging the
    ledger.
    """
    truth = obj.noiseless if obj.noiseless is not None else obj.evaluator
    if spec.kind == "none":
        return Objective(
            dimension=obj.dimension,
            evaluator=obj.evaluator,
            descriptor=obj.descriptor,
            indexed_evaluator=obj.indexed_evaluator,
            noiseless=truth,
            serial_only=obj.serial_only,
        )
    noisy = _GaussianNoiseEvaluator(obj.evaluator, spec.sigma, spec.seed)
    return Objective(
        dimension=obj.dimension,
        evaluator=noisy,
        descriptor=f"{obj.descriptor}+gaussian(sigma={spec.sigma})",
        indexed_evaluator=noisy.indexed,
        noiseless=truth,
        serial_only=obj.serial_only,
    )


def true_value(obj: Objective, x: np.ndarray) -> float:
    """Noiseless metric value at x; falls back to the evaluator itself.

    Never charged to a ledger.  Objectives without a noiseless form (the
    inherently stochastic ones) return NaN, and callers substitute the
    observed value.
    """
    if obj.noiseless is None:
        return float("nan")
    return float(obj.noiseless(np.asarray(x, dtype=float)))


def history_snapshot(ledger: Ledger) -> tuple[np.ndarray, np.ndarray]:
    """All recorded (inputs, values) as aligned arrays, insertion order."""
    records = ledger.records
    if not records:
        return np.empty((0, 0)), np.empty(0)
    X = np.stack([r.x for r in records])
    f = np.array([r.f for r in records])
    return X, f


def optimality_gap(f_best_true: float, f_star: float, tolerance: float = 1e-9) -> float:
    """Distance of the best found true value above the known optimum."""
    gap = f_best_true - f_star
    if gap < -tolerance:
        raise NegativeGap(
            f"best value {f_best_true} is below the optimum {f_star} "
            f"by more than {tolerance}"
        )
    return gap


def save_history(ledger: Ledger, path: str | os.PathLike) -> None:
    """Write the ledger as line-delimited JSON, one record per line.

    Floats are serialized with shortest-exact repr, so a reload reproduces
    every double bit-for-bit.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for r in ledger.records:
            fh.write(
                json.dumps(
                    {"iter": r.iteration, "origin": r.origin, "x": list(r.x), "f": r.f}
                )
            )
            fh.write("\n")


def load_history(path: str | os.PathLike, budget: int | None = None) -> Ledger:
    """Rebuild a ledger from a history file written by :func:`save_history`."""
    ledger = Ledger(budget=budget)
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            ledger._append(
                EvaluationRecord(
                    x=np.asarray(raw["x"], dtype=float),
                    f=float(raw["f"]),
                    iteration=int(raw["iter"]),
                    origin=str(raw["origin"]),
                )
            )
    return ledger


def noise_samples(spec: NoiseSpec, count: int) -> np.ndarray:
    """The first ``count`` noise draws of a spec's stream (diagnostics only)."""
    if count < 0:
        raise EmptyInput("count must be nonnegative")
    gen = _GaussianNoiseEvaluator(lambda x: 0.0, spec.sigma, spec.seed)
    return np.array([gen.noise(i) for i in range(count)])
