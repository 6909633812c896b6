"""Objective evaluation, noise determinism, and ledger accounting."""

import math
import os

import numpy as np
import pytest

from dnnaif.blackbox import (
    EVAL_THREADS_ENV,
    EvaluationRecord,
    Ledger,
    NoiseSpec,
    Objective,
    evaluate,
    evaluate_batch,
    history_snapshot,
    load_history,
    noise_samples,
    noisy_wrap,
    optimality_gap,
    rosenbrock,
    rosenbrock_objective,
    save_history,
    true_value,
)
from dnnaif.errors import (
    BudgetExhausted,
    DimensionMismatch,
    EvaluationFailed,
    NegativeGap,
)


class TestRosenbrock:
    def test_global_minimum(self):
        assert rosenbrock(np.array([1.0, 1.0])) == 0.0

    def test_origin(self):
        assert rosenbrock(np.array([0.0, 0.0])) == 1.0

    def test_far_corner(self):
        # (1-(-6))^2 + 100*(6-36)^2 = 49 + 90000
        assert rosenbrock(np.array([-6.0, 6.0])) == 90049.0

    def test_parameter_override(self):
        assert rosenbrock(np.array([2.0, 4.0]), a=2.0, b=7.0) == 0.0


class TestLedger:
    def test_empty_budget_blocks_first_eval(self):
        obj = rosenbrock_objective()
        ledger = Ledger(budget=0)
        with pytest.raises(BudgetExhausted):
            evaluate(obj, np.array([0.0, 0.0]), ledger, 0, "initial")
        assert ledger.count == 0

    def test_budget_counts_down(self):
        obj = rosenbrock_objective()
        ledger = Ledger(budget=2)
        evaluate(obj, np.array([0.0, 0.0]), ledger, 0, "initial")
        evaluate(obj, np.array([1.0, 1.0]), ledger, 0, "try-point")
        assert ledger.remaining() == 0
        with pytest.raises(BudgetExhausted):
            evaluate(obj, np.array([0.5, 0.5]), ledger, 1, "exploration")

    def test_unbounded_budget(self):
        ledger = Ledger()
        assert ledger.remaining() == math.inf

    def test_append_only_prefix(self):
        """Earlier records are never mutated by later appends."""
        obj = rosenbrock_objective()
        ledger = Ledger()
        rng = np.random.default_rng(7)
        seen = []
        for k in range(20):
            x = rng.uniform(-2, 2, size=2)
            evaluate(obj, x, ledger, k, "exploration")
            seen.append((x.copy(), rosenbrock(x)))
            for i, (xi, fi) in enumerate(seen):
                assert np.array_equal(ledger.records[i].x, xi)
                assert ledger.records[i].f == fi

    def test_record_origin_validated(self):
        with pytest.raises(ValueError):
            EvaluationRecord(x=np.zeros(2), f=0.0, iteration=0, origin="bogus")

    def test_dimension_mismatch(self):
        obj = rosenbrock_objective()
        ledger = Ledger()
        with pytest.raises(DimensionMismatch):
            evaluate(obj, np.zeros(3), ledger, 0, "initial")
        assert ledger.count == 0

    def test_nonfinite_value_rejected_and_not_charged(self):
        obj = Objective(dimension=1, evaluator=lambda x: float("nan"))
        ledger = Ledger()
        with pytest.raises(EvaluationFailed):
            evaluate(obj, np.zeros(1), ledger, 0, "initial")
        assert ledger.count == 0


class TestEvaluateBatch:
    def test_all_or_nothing(self):
        obj = rosenbrock_objective()
        ledger = Ledger(budget=3)
        X = [np.array([float(i), 0.0]) for i in range(4)]
        with pytest.raises(BudgetExhausted):
            evaluate_batch(obj, X, ledger, 0, "exploration")
        assert ledger.count == 0
        # A batch that fits is charged in full, in order.
        evaluate_batch(obj, X[:3], ledger, 0, "exploration")
        assert ledger.count == 3
        assert [tuple(r.x) for r in ledger.records] == [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]

    def test_empty_batch_is_noop(self):
        obj = rosenbrock_objective()
        ledger = Ledger(budget=0)
        assert evaluate_batch(obj, [], ledger, 0, "exploration") == []

    def test_failed_batch_charges_nothing(self):
        def f(x):
            return float("inf") if x[0] > 1.5 else float(x[0])

        obj = Objective(dimension=1, evaluator=f)
        ledger = Ledger()
        with pytest.raises(EvaluationFailed):
            evaluate_batch(obj, [np.array([1.0]), np.array([2.0])], ledger, 0, "exploration")
        assert ledger.count == 0

    def test_serial_and_threaded_agree(self, monkeypatch):
        """Same seed gives byte-identical values regardless of thread count."""
        X = [np.array([float(i) / 7, 0.5]) for i in range(12)]

        def run(threads):
            monkeypatch.setenv(EVAL_THREADS_ENV, str(threads))
            obj = noisy_wrap(rosenbrock_objective(), NoiseSpec("additive-gaussian", 1.0, 99))
            ledger = Ledger()
            return evaluate_batch(obj, X, ledger, 0, "exploration")

        assert run(1) == run(4)

    def test_batch_matches_singles(self, monkeypatch):
        """Batch fan-out returns the same stream a serial loop would."""
        monkeypatch.setenv(EVAL_THREADS_ENV, "4")
        X = [np.array([float(i), 1.0]) for i in range(6)]
        obj1 = noisy_wrap(rosenbrock_objective(), NoiseSpec("additive-gaussian", 0.5, 3))
        obj2 = noisy_wrap(rosenbrock_objective(), NoiseSpec("additive-gaussian", 0.5, 3))
        l1, l2 = Ledger(), Ledger()
        batch = evaluate_batch(obj1, X, l1, 0, "exploration")
        singles = [evaluate(obj2, x, l2, 0, "exploration") for x in X]
        assert batch == singles


class TestNoise:
    def test_none_kind_is_identity(self):
        obj = noisy_wrap(rosenbrock_objective(), NoiseSpec("none"))
        ledger = Ledger()
        v = evaluate(obj, np.array([0.3, -0.2]), ledger, 0, "initial")
        assert v == rosenbrock(np.array([0.3, -0.2]))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec("multiplicative")

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec("additive-gaussian", -1.0)

    def test_noise_statistics(self):
        """Mean and variance of the keyed stream match N(0, sigma^2)."""
        draws = noise_samples(NoiseSpec("additive-gaussian", 2.0, 123), 4000)
        assert abs(float(np.mean(draws))) < 0.1
        assert abs(float(np.std(draws)) - 2.0) < 0.1

    def test_same_seed_same_stream(self):
        a = noise_samples(NoiseSpec("additive-gaussian", 1.0, 5), 64)
        b = noise_samples(NoiseSpec("additive-gaussian", 1.0, 5), 64)
        assert np.array_equal(a, b)

    def test_different_seed_different_stream(self):
        a = noise_samples(NoiseSpec("additive-gaussian", 1.0, 5), 64)
        b = noise_samples(NoiseSpec("additive-gaussian", 1.0, 6), 64)
        assert not np.array_equal(a, b)

    def test_true_value_bypasses_noise(self):
        obj = noisy_wrap(rosenbrock_objective(), NoiseSpec("additive-gaussian", 10.0, 0))
        x = np.array([2.0, 2.0])
        assert true_value(obj, x) == rosenbrock(x)

    def test_repeat_evaluations_differ(self):
        """The same point drawn twice sees two distinct noise values."""
        obj = noisy_wrap(rosenbrock_objective(), NoiseSpec("additive-gaussian", 1.0, 11))
        ledger = Ledger()
        x = np.array([1.0, 1.0])
        v1 = evaluate(obj, x, ledger, 0, "initial")
        v2 = evaluate(obj, x, ledger, 0, "try-point")
        assert v1 != v2


class TestHistory:
    def test_snapshot_shapes(self):
        obj = rosenbrock_objective()
        ledger = Ledger()
        X0, f0 = history_snapshot(ledger)
        assert X0.size == 0 and f0.size == 0
        for i in range(5):
            evaluate(obj, np.array([float(i), 0.0]), ledger, 0, "exploration")
        X, f = history_snapshot(ledger)
        assert X.shape == (5, 2)
        assert f.shape == (5,)
        assert f[3] == rosenbrock(np.array([3.0, 0.0]))

    def test_save_load_roundtrip(self, tmp_path):
        obj = noisy_wrap(rosenbrock_objective(), NoiseSpec("additive-gaussian", 1.0, 42))
        ledger = Ledger()
        rng = np.random.default_rng(0)
        for k in range(10):
            evaluate(obj, rng.uniform(-3, 3, size=2), ledger, k, "exploration")
        path = tmp_path / "hist.jsonl"
        save_history(ledger, path)
        loaded = load_history(path)
        assert loaded.count == ledger.count
        for a, b in zip(loaded.records, ledger.records):
            assert np.array_equal(a.x, b.x)
            assert a.f == b.f  # bit-exact round trip
            assert a.iteration == b.iteration
            assert a.origin == b.origin


class TestOptimalityGap:
    def test_plain_gap(self):
        assert optimality_gap(3.5, 1.0) == 2.5

    def test_tiny_undershoot_clamped_by_tolerance(self):
        assert optimality_gap(1.0 - 1e-12, 1.0) == pytest.approx(-1e-12)

    def test_large_undershoot_raises(self):
        with pytest.raises(NegativeGap):
            optimality_gap(0.5, 1.0)
