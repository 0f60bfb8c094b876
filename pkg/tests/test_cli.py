"""Command line interface: config layering, subcommands, exit codes."""

import csv
import json
from pathlib import Path

import pytest

from attbench.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    OUTPUT_DIR_ENV,
    ConfigError,
    RunConfig,
    _config_from_sources,
    build_cells,
    build_parser,
    main,
)
from attbench.errors import PartialGridError
from attbench.harness import aggregate_cell, read_records_csv


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def parse_run(*flags):
    return build_parser().parse_args(["run", *flags])


class TestConfigLayering:
    def test_defaults_give_full_design(self):
        cells = build_cells(RunConfig())
        assert len(cells) == 90
        assert len({c.name for c in cells}) == 90
        assert sum(c.null_effect for c in cells) == 45

    def test_subset_flags(self):
        cfg = _config_from_sources(
            parse_run("--scenarios", "2", "--settings", "1,3", "--prevalences", "0.20", "--arms", "effect")
        )
        cells = build_cells(cfg)
        assert [c.name for c in cells] == ["s2t1p020_effect", "s2t3p020_effect"]

    def test_flags_override_config_file(self, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"n_reps": 50, "master_seed": 7, "scenarios": [3]}))
        cfg = _config_from_sources(parse_run("--config", str(config), "--n-reps", "7"))
        assert cfg.n_reps == 7
        assert cfg.master_seed == 7
        assert cfg.scenarios == (3,)

    def test_output_dir_precedence(self, tmp_path, monkeypatch):
        assert _config_from_sources(parse_run()).output_dir == "attbench-out"
        monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
        assert _config_from_sources(parse_run()).output_dir == "from-env"
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"output_dir": "from-config"}))
        assert _config_from_sources(parse_run("--config", str(config))).output_dir == "from-config"
        assert (
            _config_from_sources(
                parse_run("--config", str(config), "--output-dir", "from-flag")
            ).output_dir
            == "from-flag"
        )

    def test_prevalence_values_normalize_to_labels(self):
        cfg = _config_from_sources(parse_run("--prevalences", "0.3333333333333333,0.05"))
        assert cfg.prevalences == ("0.33", "0.05")

    @pytest.mark.parametrize(
        "flags",
        [
            ("--scenarios", "4"),
            ("--settings", "0"),
            ("--prevalences", "0.17"),
            ("--arms", "effect,placebo"),
            ("--methods", "OLS"),
            ("--n-reps", "1"),
            ("--parallelism", "0"),
            ("--master-seed", "-1"),
            ("--truth-n", "10"),
        ],
    )
    def test_invalid_values_rejected(self, flags):
        with pytest.raises(ConfigError):
            _config_from_sources(parse_run(*flags))

    def test_config_file_problems_rejected(self, tmp_path):
        missing = tmp_path / "nope.json"
        with pytest.raises(ConfigError, match="cannot read"):
            _config_from_sources(parse_run("--config", str(missing)))
        bad_json = tmp_path / "bad.json"
        bad_json.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            _config_from_sources(parse_run("--config", str(bad_json)))
        non_object = tmp_path / "list.json"
        non_object.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            _config_from_sources(parse_run("--config", str(non_object)))
        unknown = tmp_path / "unknown.json"
        unknown.write_text(json.dumps({"replications": 5}))
        with pytest.raises(ConfigError, match="unknown config keys"):
            _config_from_sources(parse_run("--config", str(unknown)))


SMOKE_FLAGS = (
    "--scenarios", "1",
    "--settings", "1",
    "--prevalences", "0.50",
    "--arms", "effect",
    "--methods", "LR,IPW",
    "--n-reps", "2",
    "--calibration-n", "100000",
    "--truth-n", "1000",
    "--quiet",
)


class TestCmdRun:
    def test_smoke_run_writes_store(self, tmp_path, capsys):
        code = main(["run", *SMOKE_FLAGS, "--output-dir", str(tmp_path / "store")])
        assert code == EXIT_OK
        manifest = json.loads((tmp_path / "store" / "manifest.json").read_text())
        assert manifest["methods"] == ["LR", "IPW"]
        assert set(manifest["cells"]) == {"s1t1p050_effect"}
        assert "store written" in capsys.readouterr().err

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env-store"))
        assert main(["run", *SMOKE_FLAGS]) == EXIT_OK
        assert (tmp_path / "env-store" / "manifest.json").exists()

    def test_config_error_exit_code(self, capsys):
        assert main(["run", "--scenarios", "8"]) == EXIT_CONFIG
        assert "error:" in capsys.readouterr().err

    def test_partial_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        def partial(*args, **kwargs):
            raise PartialGridError({"s1t1p050_effect": ValueError("boom")})

        monkeypatch.setattr("attbench.cli.run_grid", partial)
        code = main(["run", *SMOKE_FLAGS, "--output-dir", str(tmp_path)])
        assert code == EXIT_PARTIAL
        assert "run incomplete" in capsys.readouterr().err

    def test_missing_command_is_usage_error(self):
        with pytest.raises(SystemExit):
            main([])


class TestCmdCalibrate:
    def test_default_design_yields_15_intercepts(self, tmp_path, capsys):
        outdir = tmp_path / "cal"
        code = main(["calibrate", "--oracle-n", "50000", "--output-dir", str(outdir)])
        assert code == EXIT_OK
        lines = (outdir / "calibration.csv").read_text().splitlines()
        assert lines[0] == "scenario,prevalence,oracle_seed,oracle_n,alpha0"
        assert len(lines) == 16
        table = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert len(table) == 16  # header + one row per (scenario, prevalence)
        alphas = {}
        for line in lines[1:]:
            scenario, label, seed, n, alpha = line.split(",")
            assert (seed, n) == ("42", "50000")
            alphas[(int(scenario), label)] = float(alpha)
        # Prevalence rises with the intercept, scenario by scenario.
        for scenario in (1, 2, 3):
            ordered = [alphas[(scenario, p)] for p in ("0.05", "0.10", "0.20", "0.33", "0.50")]
            assert ordered == sorted(ordered)

    def test_idempotent(self, tmp_path):
        args = ["calibrate", "--scenarios", "1", "--prevalences", "0.20",
                "--oracle-n", "50000", "--output-dir", str(tmp_path)]
        assert main(args) == EXIT_OK
        first = (tmp_path / "calibration.csv").read_bytes()
        assert main(args) == EXIT_OK
        assert (tmp_path / "calibration.csv").read_bytes() == first

    def test_seed_sensitivity_is_oracle_noise_sized(self, tmp_path):
        alphas = []
        for seed in ("42", "43"):
            outdir = tmp_path / seed
            main(["calibrate", "--scenarios", "1", "--prevalences", "0.20",
                  "--oracle-seed", seed, "--oracle-n", "100000", "--output-dir", str(outdir)])
            line = (outdir / "calibration.csv").read_text().splitlines()[1]
            alphas.append(float(line.split(",")[4]))
        # Binomial oracle noise, delta-method through the mean logistic
        # density (~0.14 at this design point): about 0.009 per run at
        # n = 1e5, so three standard errors on the difference plus the
        # bisection tolerance stays well under 0.06.
        assert alphas[0] != alphas[1]
        assert abs(alphas[0] - alphas[1]) < 0.06

    def test_invalid_scenario_exit_code(self, capsys):
        assert main(["calibrate", "--scenarios", "7"]) == EXIT_CONFIG
        assert "error:" in capsys.readouterr().err


def read_hist(path: Path):
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    return [(float(r["bin_lo"]), float(r["bin_hi"]), int(r["count"])) for r in rows]


def tail_mass_from(stdout: str) -> float:
    for line in stdout.splitlines():
        if line.startswith("mass outside"):
            return float(line.split(":")[1])
    raise AssertionError("tail mass line missing")


class TestCmdPsHist:
    def hist(self, tmp_path, capsys, scenario):
        code = main(["ps-hist", "--scenario", str(scenario), "--n", "50000",
                     "--oracle-n", "100000", "--output-dir", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_hist(tmp_path / f"ps_hist_s{scenario}_p020.csv")
        return rows, tail_mass_from(capsys.readouterr().out)

    def test_moderate_design_keeps_mass_central(self, tmp_path, capsys):
        rows, tail = self.hist(tmp_path, capsys, scenario=1)
        assert len(rows) == 20
        assert sum(count for _, _, count in rows) == 50000
        assert tail < 0.01

    def test_strong_design_spills_into_extreme_bins(self, tmp_path, capsys):
        rows, tail = self.hist(tmp_path, capsys, scenario=2)
        assert sum(count for _, _, count in rows) == 50000
        assert tail > 0.05
        assert rows[0][2] > 0 and rows[-1][2] > 0

    def test_bad_arguments_exit_code(self, capsys):
        assert main(["ps-hist", "--scenario", "5"]) == EXIT_CONFIG
        assert main(["ps-hist", "--scenario", "1", "--bins", "1"]) == EXIT_CONFIG
        capsys.readouterr()


REPORT_COLUMNS = (
    "scenario,setting,prevalence,method,n_valid,bias,empirical_sd,"
    "avg_theoretical_sd,mse,type1_rate,failure_rate"
)


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    path = tmp_path_factory.mktemp("report-store")
    code = main(["run",
                 "--scenarios", "1", "--settings", "1",
                 "--prevalences", "0.50", "--arms", "effect,null",
                 "--methods", "LR,IPW", "--n-reps", "3",
                 "--calibration-n", "100000", "--truth-n", "1000",
                 "--quiet", "--output-dir", str(path)])
    assert code == EXIT_OK
    return path


class TestCmdReport:
    def test_missing_store_exit_code(self, tmp_path, capsys):
        assert main(["report", "--store", str(tmp_path / "void")]) == EXIT_CONFIG
        assert "no manifest" in capsys.readouterr().err

    def test_store_without_completed_cells(self, tmp_path, capsys):
        (tmp_path / "manifest.json").write_text(json.dumps({"cells": {}}))
        assert main(["report", "--store", str(tmp_path)]) == EXIT_CONFIG
        assert "no completed cells" in capsys.readouterr().err

    def test_report_merges_arms_per_method(self, store, capsys):
        assert main(["report", "--store", str(store)]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[0].split() == REPORT_COLUMNS.split(",")
        assert len(out) == 3  # header + LR + IPW
        lines = (store / "report.csv").read_text().splitlines()
        assert lines[0] == REPORT_COLUMNS
        assert [l.split(",")[3] for l in lines[1:]] == ["LR", "IPW"]
        for line in lines[1:]:
            parts = line.split(",")
            assert "nan" not in parts[5:]

    def test_report_matches_raw_record_recomputation(self, store, capsys):
        assert main(["report", "--store", str(store)]) == EXIT_OK
        capsys.readouterr()
        manifest = json.loads((store / "manifest.json").read_text())
        expected = {}
        for name, entry in manifest["cells"].items():
            records = read_records_csv(store / "cells" / f"{name}_records.csv")
            metrics = aggregate_cell(records, entry["truth"], entry["n_reps"])
            for m in metrics:
                slot = expected.setdefault(m.method, {})
                if entry["null_effect"]:
                    slot["type1_rate"] = m.type1_rate
                else:
                    slot["bias"], slot["mse"] = m.bias, m.mse
        for line in (store / "report.csv").read_text().splitlines()[1:]:
            parts = line.split(",")
            method = parts[3]
            assert parts[5] == repr(expected[method]["bias"])
            assert parts[8] == repr(expected[method]["mse"])
            assert parts[9] == repr(expected[method]["type1_rate"])

    def test_report_is_deterministic(self, store, capsys):
        assert main(["report", "--store", str(store)]) == EXIT_OK
        first_out = capsys.readouterr().out
        first_csv = (store / "report.csv").read_bytes()
        assert main(["report", "--store", str(store)]) == EXIT_OK
        assert capsys.readouterr().out == first_out
        assert (store / "report.csv").read_bytes() == first_csv
