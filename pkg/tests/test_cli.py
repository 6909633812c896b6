"""Config parsing, experiment running, and metrics emission."""

import csv
import dataclasses
import json
import math
import os

import numpy as np
import pytest

from dnnaif import cli
from dnnaif.errors import IoError, ParseError, ValidationError


def write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def minimal(problem="rosenbrock-noisy", method="if", **extra):
    payload = {"problem": problem, "method": method}
    payload.update(extra)
    return payload


class TestParseConfig:
    def test_defaults_filled_for_rosenbrock(self, tmp_path):
        cfg = cli.parse_config(write(tmp_path, minimal()))
        assert cfg.runs == 10
        assert cfg.seed == 0
        assert cfg.noise_sigma == 1.0
        assert cfg.search.h0 == 30.0
        assert cfg.search.tau_tr == 0.9
        assert cfg.search.points == 11
        assert cfg.search.iterations == 10
        assert cfg.search.direction_kind == "sphere-uniform"
        assert cfg.surrogate is None
        assert cfg.cdg is None

    def test_defaults_filled_for_cdg(self, tmp_path):
        cfg = cli.parse_config(
            write(tmp_path, minimal("cdg-toy", "dnnaif")))
        assert cfg.cdg.n_cycles >= 1
        assert cfg.cdg.threshold == 0.05
        assert cfg.search.points == 21
        assert cfg.surrogate.exploration_initial == 0.5
        assert cfg.surrogate.exploration_final == 0.5
        assert cfg.noise_sigma is None

    def test_explicit_values_override_defaults(self, tmp_path):
        payload = minimal(runs=3, seed=42, budget=500,
                          search={"h0": 5.0, "points": 7})
        cfg = cli.parse_config(write(tmp_path, payload))
        assert (cfg.runs, cfg.seed, cfg.budget) == (3, 42, 500)
        assert cfg.search.h0 == 5.0
        assert cfg.search.points == 7
        # untouched keys keep their defaults
        assert cfg.search.tau_tr == 0.9

    def test_unknown_top_level_key_is_parse_error(self, tmp_path):
        path = write(tmp_path, minimal(bogus=1))
        with pytest.raises(ParseError, match="bogus"):
            cli.parse_config(path)

    def test_unknown_section_key_is_parse_error(self, tmp_path):
        path = write(tmp_path, minimal(search={"h00": 1.0}))
        with pytest.raises(ParseError, match="h00"):
            cli.parse_config(path)

    def test_malformed_json_names_the_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"problem": }')
        with pytest.raises(ParseError, match="line 1"):
            cli.parse_config(str(path))

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            cli.parse_config(str(tmp_path / "absent.json"))

    def test_missing_problem_key(self, tmp_path):
        path = write(tmp_path, {"method": "if"})
        with pytest.raises(ValidationError, match="problem"):
            cli.parse_config(path)

    def test_unknown_problem_and_method(self, tmp_path):
        with pytest.raises(ValidationError, match="problem"):
            cli.parse_config(write(tmp_path, minimal(problem="sphere")))
        with pytest.raises(ValidationError, match="method"):
            cli.parse_config(write(tmp_path, minimal(method="adam")))

    def test_dirichlet_requires_cdg_problem(self, tmp_path):
        path = write(tmp_path, minimal("rosenbrock-noisy", "dirichlet"))
        with pytest.raises(ValidationError, match="dirichlet"):
            cli.parse_config(path)

    def test_tau_out_of_range_names_invariant(self, tmp_path):
        path = write(tmp_path, minimal(search={"tau_tr": 1.0}))
        with pytest.raises(ValidationError, match=r"tau_tr must lie in \(0, 1\)"):
            cli.parse_config(path)

    def test_h_min_above_h0_rejected(self, tmp_path):
        path = write(tmp_path, minimal(search={"h0": 1.0, "h_min": 2.0}))
        with pytest.raises(ValidationError, match="h0 > h_min"):
            cli.parse_config(path)

    def test_noise_sigma_only_for_noisy_problem(self, tmp_path):
        path = write(tmp_path, minimal("rosenbrock-clean", noise_sigma=1.0))
        with pytest.raises(ValidationError, match="noise_sigma"):
            cli.parse_config(path)

    def test_cdg_section_only_for_cdg_problem(self, tmp_path):
        path = write(tmp_path, minimal(cdg={"n_cycles": 100}))
        with pytest.raises(ValidationError, match="cdg"):
            cli.parse_config(path)

    def test_surrogate_section_rejected_for_plain_if(self, tmp_path):
        path = write(tmp_path, minimal(surrogate={"depth": 3}))
        with pytest.raises(ValidationError, match="surrogate"):
            cli.parse_config(path)

    def test_dirichlet_rejects_search_section(self, tmp_path):
        path = write(tmp_path, minimal("cdg-toy", "dirichlet",
                                       search={"h0": 1.0}))
        with pytest.raises(ValidationError, match="search"):
            cli.parse_config(path)

    def test_alpha_requires_dirichlet(self, tmp_path):
        path = write(tmp_path, minimal("cdg-toy", "if",
                                       cdg={"alpha": [1, 1, 1, 1, 1]}))
        with pytest.raises(ValidationError, match="alpha"):
            cli.parse_config(path)

    def test_alpha_shape_checked(self, tmp_path):
        path = write(tmp_path, minimal("cdg-toy", "dirichlet",
                                       cdg={"alpha": [1, 1]}))
        with pytest.raises(ValidationError, match="5 numbers"):
            cli.parse_config(path)

    def test_bool_is_not_an_integer(self, tmp_path):
        path = write(tmp_path, minimal(runs=True))
        with pytest.raises(ValidationError, match="runs"):
            cli.parse_config(path)

    def test_negative_runs_rejected(self, tmp_path):
        path = write(tmp_path, minimal(runs=-1))
        with pytest.raises(ValidationError, match="runs"):
            cli.parse_config(path)

    def test_seed_must_fit_64_bits(self, tmp_path):
        path = write(tmp_path, minimal(seed=2 ** 64))
        with pytest.raises(ValidationError, match="64 bits"):
            cli.parse_config(path)

    def test_surrogate_points_lower_bound(self, tmp_path):
        path = write(tmp_path, minimal(method="dnnaif",
                                       search={"points": 1}))
        with pytest.raises(ValidationError, match="points"):
            cli.parse_config(path)

    def test_round_trip_is_identity(self, tmp_path):
        payload = minimal("cdg-toy", "dirichlet", runs=2, budget=50,
                          cdg={"alpha": [2, 1, 1, 1, 3], "n_cycles": 200})
        cfg = cli.parse_config(write(tmp_path, payload))
        out = str(tmp_path / "resolved.json")
        cli.write_config(cfg, out)
        assert cli.parse_config(out) == cfg

    def test_round_trip_surrogate_config(self, tmp_path):
        payload = minimal("rosenbrock-noisy", "dnnaif", seed=7,
                          surrogate={"depth": 3, "hidden_dim": 8})
        cfg = cli.parse_config(write(tmp_path, payload))
        out = str(tmp_path / "resolved.json")
        cli.write_config(cfg, out)
        assert cli.parse_config(out) == cfg


class TestConfigHash:
    def base(self, tmp_path):
        return cli.parse_config(write(tmp_path, minimal()))

    def test_spelling_out_a_default_keeps_the_hash(self, tmp_path):
        implicit = cli.parse_config(write(tmp_path, minimal(), "a.json"))
        explicit = cli.parse_config(
            write(tmp_path, minimal(runs=10, seed=0), "b.json"))
        assert cli.config_hash(implicit) == cli.config_hash(explicit)

    def test_output_dir_does_not_change_the_hash(self, tmp_path):
        cfg = self.base(tmp_path)
        moved = dataclasses.replace(cfg, output_dir="elsewhere")
        assert cli.config_hash(cfg) == cli.config_hash(moved)

    def test_each_semantic_field_changes_the_hash(self, tmp_path):
        cfg = self.base(tmp_path)
        href = cli.config_hash(cfg)
        variants = [
            dataclasses.replace(cfg, runs=11),
            dataclasses.replace(cfg, seed=1),
            dataclasses.replace(cfg, budget=cfg.budget + 1),
            dataclasses.replace(cfg, noise_sigma=2.0),
            dataclasses.replace(
                cfg, search=dataclasses.replace(cfg.search, h0=29.0)),
            dataclasses.replace(
                cfg, search=dataclasses.replace(cfg.search, points=12)),
            dataclasses.replace(cfg, method="dnn-only"),
        ]
        hashes = {cli.config_hash(v) for v in variants}
        assert href not in hashes
        assert len(hashes) == len(variants)


class TestRunExperiment:
    def test_clean_zero_iterations_reports_start_gap(self, tmp_path):
        payload = minimal("rosenbrock-clean", runs=1,
                          search={"iterations": 0})
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        assert len(report.results) == 1
        assert report.results[0].final_gap == pytest.approx(90049.0)
        assert report.results[0].traces == []

    def test_run_seeds_are_base_plus_index(self, tmp_path):
        payload = minimal("rosenbrock-clean", runs=3, seed=50,
                          search={"iterations": 1})
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        assert [r.seed for r in report.results] == [50, 51, 52]

    def test_runs_are_independent_of_batch_position(self, tmp_path):
        # run seeded s gives the same trace whether it is run 0 or run 2
        late = cli.parse_config(write(
            tmp_path, minimal(runs=3, seed=5, search={"iterations": 3}),
            "late.json"))
        alone = cli.parse_config(write(
            tmp_path, minimal(runs=1, seed=7, search={"iterations": 3}),
            "alone.json"))
        trace_late = cli.run_experiment(late).results[2].traces
        trace_alone = cli.run_experiment(alone).results[0].traces
        assert len(trace_late) == len(trace_alone)
        for a, b in zip(trace_late, trace_alone):
            assert a.best_f == b.best_f
            assert np.array_equal(a.x, b.x)

    def test_noisy_if_improves_from_start(self, tmp_path):
        payload = minimal(runs=2, seed=3)
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        for result in report.results:
            assert result.final_gap < 90049.0
            assert result.evals_used <= cfg.budget

    def test_dirichlet_produces_curves_not_traces(self, tmp_path):
        payload = minimal("cdg-toy", "dirichlet", runs=2, budget=30,
                          cdg={"n_cycles": 200})
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        for result in report.results:
            assert result.traces == []
            assert len(result.unhit_curve) == 30
            assert result.final_unhit == result.unhit_curve[-1]

    def test_cdg_engine_curve_matches_evals(self, tmp_path):
        payload = minimal("cdg-toy", "if", runs=1, budget=60,
                          search={"iterations": 2, "points": 10},
                          cdg={"n_cycles": 150})
        cfg = cli.parse_config(write(tmp_path, payload))
        result = cli.run_experiment(cfg).results[0]
        assert len(result.unhit_curve) == result.evals_used
        diffs = np.diff(result.unhit_curve)
        assert np.all(diffs <= 0)

    def test_on_run_callback_sees_every_run(self, tmp_path):
        payload = minimal("rosenbrock-clean", runs=3,
                          search={"iterations": 1})
        cfg = cli.parse_config(write(tmp_path, payload))
        seen = []
        cli.run_experiment(cfg, on_run=lambda i, r: seen.append(i))
        assert seen == [0, 1, 2]


class TestEmitMetrics:
    def run_small(self, tmp_path, **extra):
        payload = minimal(runs=2, seed=9, search={"iterations": 4}, **extra)
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        out = str(tmp_path / "out")
        manifest = cli.emit_metrics(report, out)
        return cfg, report, out, manifest

    def test_files_exist_and_manifest_lists_them(self, tmp_path):
        cfg, report, out, manifest = self.run_small(tmp_path)
        for name in manifest["files"]["traces"]:
            assert os.path.exists(os.path.join(out, name))
        assert os.path.exists(os.path.join(out, "aggregate.csv"))
        assert os.path.exists(os.path.join(out, "manifest.json"))
        assert manifest["run_seeds"] == [9, 10]
        assert manifest["config_hash"] == cli.config_hash(cfg)

    def test_trace_lines_parse_back_to_iterations(self, tmp_path):
        cfg, report, out, manifest = self.run_small(tmp_path)
        path = os.path.join(out, manifest["files"]["traces"][0])
        lines = [json.loads(line) for line in open(path)]
        assert len(lines) == len(report.results[0].traces)
        for row, t in zip(lines, report.results[0].traces):
            assert row["iteration"] == t.iteration
            assert row["best_f"] == t.best_f
            assert row["x"] == [float(v) for v in t.x]

    def test_aggregate_recomputable_from_traces(self, tmp_path):
        cfg, report, out, manifest = self.run_small(tmp_path)
        runs = []
        for name in manifest["files"]["traces"]:
            rows = [json.loads(line)
                    for line in open(os.path.join(out, name))]
            runs.append(rows)
        with open(os.path.join(out, "aggregate.csv")) as fh:
            table = list(csv.DictReader(fh))
        length = max(len(r) for r in runs)
        assert len(table) == length
        for k, row in enumerate(table):
            gaps = [math.log10(max(r[min(k, len(r) - 1)]["best_f_true"],
                                   cli.GAP_FLOOR)) for r in runs]
            assert float(row["mean_log10_gap"]) == float(np.mean(gaps))
            assert float(row["std_log10_gap"]) == float(np.std(gaps))

    def test_zero_runs_leaves_header_only_files(self, tmp_path):
        payload = minimal(runs=0)
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        out = str(tmp_path / "empty")
        manifest = cli.emit_metrics(report, out)
        lines = open(os.path.join(out, "aggregate.csv")).read().splitlines()
        assert lines == ["iter,h,mean_log10_gap,std_log10_gap,mean_evals"]
        assert manifest["files"]["traces"] == []

    def test_cdg_aggregate_schema_and_padding(self, tmp_path):
        payload = minimal("cdg-toy", "dirichlet", runs=2, budget=20,
                          cdg={"n_cycles": 150})
        cfg = cli.parse_config(write(tmp_path, payload))
        report = cli.run_experiment(cfg)
        out = str(tmp_path / "cdgout")
        manifest = cli.emit_metrics(report, out)
        with open(os.path.join(out, "aggregate.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0].keys()) == ["tests", "mean_unhit", "std_unhit"]
        assert len(rows) == 20
        curves = [r.unhit_curve for r in report.results]
        want = float(np.mean([c[4] for c in curves]))
        assert float(rows[4]["mean_unhit"]) == want
        for name in manifest["files"]["coverage"]:
            with open(os.path.join(out, name)) as fh:
                cov = list(csv.DictReader(fh))
            assert len(cov) == 20

    def test_emit_is_deterministic_bytes(self, tmp_path):
        cfg, report, out, manifest = self.run_small(tmp_path)
        first = {}
        for name in manifest["files"]["traces"] + ["aggregate.csv"]:
            first[name] = open(os.path.join(out, name), "rb").read()
        cli.emit_metrics(report, out)
        for name, blob in first.items():
            assert open(os.path.join(out, name), "rb").read() == blob

    def test_unwritable_output_dir_is_io_error(self, tmp_path):
        cfg, report, out, manifest = self.run_small(tmp_path)
        blocked = tmp_path / "blocked"
        blocked.write_text("a file, not a directory")
        with pytest.raises(IoError):
            cli.emit_metrics(report, str(blocked))


class TestAggregateTables:
    def trace(self, iteration, true_value, h=1.0, evals=5):
        from dnnaif.optimize import IterationTrace
        return IterationTrace(
            iteration=iteration, h=h, best_f=true_value,
            best_f_true=true_value, evals_cumulative=evals,
            accepted_origin="exploration", try_point_accepted=False,
            x=np.zeros(2),
        )

    def test_gap_floor_applies(self):
        rows = cli.aggregate_gap_table([[self.trace(0, 0.0)]])
        assert rows[0][2] == pytest.approx(-16.0)

    def test_short_runs_carry_last_row_forward(self):
        short = [self.trace(0, 100.0, evals=3)]
        long = [self.trace(0, 100.0, evals=3),
                self.trace(1, 1.0, evals=6)]
        rows = cli.aggregate_gap_table([short, long])
        assert len(rows) == 2
        # the short run still contributes log10(100) at iteration 1
        assert rows[1][2] == pytest.approx((2.0 + 0.0) / 2)
        assert rows[1][4] == pytest.approx((3 + 6) / 2)

    def test_empty_input_gives_empty_table(self):
        assert cli.aggregate_gap_table([]) == []
        assert cli.aggregate_gap_table([[]]) == []
        assert cli.aggregate_coverage_table([]) == []

    def test_coverage_padding_carries_final_count(self):
        rows = cli.aggregate_coverage_table(
            [np.array([5, 3]), np.array([6, 4, 2, 1])])
        assert len(rows) == 4
        assert rows[3][1] == pytest.approx((3 + 1) / 2)


class TestMainEntry:
    def config_path(self, tmp_path, payload):
        return write(tmp_path, payload)

    def test_run_writes_outputs_and_exits_zero(self, tmp_path, capsys):
        path = self.config_path(
            tmp_path, minimal("rosenbrock-clean", runs=1,
                              search={"iterations": 2}))
        out = str(tmp_path / "res")
        code = cli.main(["run", "--config", path, "--output", out])
        assert code == 0
        assert os.path.exists(os.path.join(out, "manifest.json"))
        assert "rosenbrock-clean/if" in capsys.readouterr().out

    def test_flag_overrides_win(self, tmp_path):
        path = self.config_path(
            tmp_path, minimal("rosenbrock-clean", runs=5, seed=0,
                              search={"iterations": 1}))
        out = str(tmp_path / "res2")
        code = cli.main(["run", "--config", path, "--output", out,
                         "--runs", "2", "--seed", "77"])
        assert code == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["runs"] == 2
        assert manifest["run_seeds"] == [77, 78]
        # the hash follows the overridden config, not the file
        assert manifest["config"]["seed"] == 77

    def test_validate_exits_zero_and_prints_hash(self, tmp_path, capsys):
        path = self.config_path(tmp_path, minimal())
        assert cli.main(["validate", "--config", path]) == 0
        assert "config ok" in capsys.readouterr().out

    def test_parse_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert cli.main(["validate", "--config", str(bad)]) == cli.EXIT_PARSE
        assert "parse error" in capsys.readouterr().err

    def test_validation_error_exit_code(self, tmp_path, capsys):
        path = self.config_path(
            tmp_path, minimal("rosenbrock-noisy", "dirichlet"))
        assert cli.main(["validate", "--config", path]) == cli.EXIT_VALIDATION
        assert "invalid config" in capsys.readouterr().err

    def test_io_error_exit_code(self, tmp_path, capsys):
        missing = str(tmp_path / "none.json")
        assert cli.main(["validate", "--config", missing]) == cli.EXIT_IO
        assert "io error" in capsys.readouterr().err

    def test_exit_codes_are_distinct(self):
        codes = {cli.EXIT_OK, cli.EXIT_PARSE, cli.EXIT_VALIDATION,
                 cli.EXIT_BUDGET, cli.EXIT_IO}
        assert len(codes) == 5

    def test_partial_results_persist_per_run(self, tmp_path):
        path = self.config_path(
            tmp_path, minimal("rosenbrock-clean", runs=2,
                              search={"iterations": 1}))
        out = str(tmp_path / "res3")
        assert cli.main(["run", "--config", path, "--output", out]) == 0
        assert os.path.exists(os.path.join(out, "run000_trace.jsonl"))
        assert os.path.exists(os.path.join(out, "run001_trace.jsonl"))
