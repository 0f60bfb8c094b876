"""Command line front end.

Four subcommands: ``calibrate`` writes the golden intercept table,
``run`` executes a simulation grid into a result store, ``ps-hist``
summarizes the true propensity distribution of a scenario, and
``report`` condenses a store into one table merging effect and null
cells.

Configuration is declarative: ``run`` reads an optional JSON config file
and any command line flag overrides the corresponding config key.  The
default output directory comes from ``ATTBENCH_OUTPUT_DIR`` when set.
Exit codes: 0 on success, 2 for configuration problems, 3 when a run
finished only partially (completed cells are on disk and a rerun will
resume).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dgp import (
    PREVALENCE_LABELS,
    SCENARIOS,
    SETTING_IDS,
    CellConfig,
    calibrate_intercept,
    prevalence_label_for,
    treatment_logit_terms,
    _draw_treatment_covariates,
)
from .errors import EstimationError, PartialGridError
from .harness import (
    METHODS,
    aggregate_cell,
    read_records_csv,
    run_grid,
    write_calibration_csv,
)
from .numeric import PURPOSE_CALIBRATION, PURPOSE_PS_HIST, substream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
OUTPUT_DIR_ENV = "ATTBENCH_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "attbench-out"
ARMS = ("effect", "null")


class ConfigError(Exception):
    """Bad configuration file or flag values."""


@dataclass
class RunConfig:
    """Everything a grid run needs; defaults reproduce the full design."""

    scenarios: tuple[int, ...] = (1, 2, 3)
    settings: tuple[int, ...] = (1, 2, 3)
    prevalences: tuple[str, ...] = PREVALENCE_LABELS
    arms: tuple[str, ...] = ARMS
    methods: tuple[str, ...] | None = None
    n_reps: int = 200
    master_seed: int = 42
    oracle_seed: int = 42
    calibration_n: int = 10**6
    truth_n: int = 10**7
    parallelism: int = 1
    output_dir: str = DEFAULT_OUTPUT_DIR


def _validate_run_config(cfg: RunConfig) -> RunConfig:
    bad_scenarios = set(cfg.scenarios) - set(SCENARIOS)
    if not cfg.scenarios or bad_scenarios:
        raise ConfigError(f"scenarios must be a non-empty subset of {sorted(SCENARIOS)}")
    bad_settings = set(cfg.settings) - set(SETTING_IDS)
    if not cfg.settings or bad_settings:
        raise ConfigError(f"settings must be a non-empty subset of {list(SETTING_IDS)}")
    try:
        prevalences = tuple(prevalence_label_for(p) for p in cfg.prevalences)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not prevalences:
        raise ConfigError("prevalences must be non-empty")
    bad_arms = set(cfg.arms) - set(ARMS)
    if not cfg.arms or bad_arms:
        raise ConfigError(f"arms must be a non-empty subset of {list(ARMS)}")
    if cfg.methods is not None:
        bad_methods = set(cfg.methods) - set(METHODS)
        if not cfg.methods or bad_methods:
            raise ConfigError(f"methods must be a non-empty subset of {list(METHODS)}")
    if cfg.n_reps < 2:
        raise ConfigError("n_reps must be at least 2")
    if cfg.parallelism < 1:
        raise ConfigError("parallelism must be at least 1")
    for name in ("master_seed", "oracle_seed"):
        if not 0 <= getattr(cfg, name) < 2**32:
            raise ConfigError(f"{name} must lie in [0, 2**32)")
    if cfg.calibration_n < 1000 or cfg.truth_n < 1000:
        raise ConfigError("oracle sample sizes below 1000 are meaningless")
    cfg.prevalences = prevalences
    return cfg


def _config_from_sources(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = os.environ[OUTPUT_DIR_ENV]
    known = {f.name for f in fields(RunConfig)}
    if args.config is not None:
        try:
            with open(args.config) as handle:
                loaded = json.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in loaded.items():
            if isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)
    # Flags win over the config file.
    for name in known:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            setattr(cfg, name, flag_value)
    return _validate_run_config(cfg)


def build_cells(cfg: RunConfig) -> list[CellConfig]:
    cells = []
    for scenario in cfg.scenarios:
        for setting in cfg.settings:
            for label in cfg.prevalences:
                for arm in cfg.arms:
                    cells.append(
                        CellConfig(
                            scenario=scenario,
                            setting=setting,
                            prevalence_label=label,
                            null_effect=(arm == "null"),
                            n_reps=cfg.n_reps,
                            master_seed=cfg.master_seed,
                        )
                    )
    return cells


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_sources(args)
    cells = build_cells(cfg)
    try:
        run_grid(
            cells,
            cfg.output_dir,
            parallelism=cfg.parallelism,
            oracle_seed=cfg.oracle_seed,
            calibration_n=cfg.calibration_n,
            truth_n=cfg.truth_n,
            methods=cfg.methods,
            log=_log if not args.quiet else None,
        )
    except PartialGridError as exc:
        _log(f"run incomplete: {exc}")
        return EXIT_PARTIAL
    except EstimationError as exc:
        _log(f"run failed: {exc}")
        return EXIT_CONFIG
    _log(f"store written to {cfg.output_dir}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    scenarios = args.scenarios or (1, 2, 3)
    if set(scenarios) - set(SCENARIOS):
        raise ConfigError(f"scenarios must be a subset of {sorted(SCENARIOS)}")
    try:
        labels = tuple(prevalence_label_for(p) for p in (args.prevalences or PREVALENCE_LABELS))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    outdir = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))
    outdir.mkdir(parents=True, exist_ok=True)

    intercepts: dict[tuple[int, str], float] = {}
    for scenario in scenarios:
        for label in labels:
            prev_index = PREVALENCE_LABELS.index(label)
            rng = substream(
                args.oracle_seed, cell_code=scenario, replicate=prev_index, purpose=PURPOSE_CALIBRATION
            )
            value = 1.0 / 3.0 if label == "0.33" else float(label)
            intercepts[(scenario, label)] = calibrate_intercept(
                SCENARIOS[scenario], value, rng, oracle_n=args.oracle_n
            )
    path = outdir / "calibration.csv"
    write_calibration_csv(path, args.oracle_seed, args.oracle_n, intercepts)
    print(f"{'scenario':>8} {'prevalence':>10} {'alpha0':>12}")
    for (scenario, label), alpha in sorted(intercepts.items()):
        print(f"{scenario:>8} {label:>10} {alpha:>12.6f}")
    _log(f"calibration table written to {path}")
    return EXIT_OK


def cmd_ps_hist(args: argparse.Namespace) -> int:
    if args.scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {sorted(SCENARIOS)}")
    try:
        label = prevalence_label_for(args.prevalence)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.bins < 2 or args.n < 100:
        raise ConfigError("need at least 2 bins and 100 draws")
    spec = SCENARIOS[args.scenario]
    prev_index = PREVALENCE_LABELS.index(label)
    value = 1.0 / 3.0 if label == "0.33" else float(label)
    cal_rng = substream(
        args.oracle_seed, cell_code=args.scenario, replicate=prev_index, purpose=PURPOSE_CALIBRATION
    )
    alpha0 = calibrate_intercept(spec, value, cal_rng, oracle_n=args.oracle_n)
    draw_rng = substream(
        args.oracle_seed, cell_code=args.scenario, replicate=prev_index, purpose=PURPOSE_PS_HIST
    )
    x1, x2, x4 = _draw_treatment_covariates(spec, args.n, draw_rng)
    scores = expit(alpha0 + treatment_logit_terms(spec, x1, x2, x4))
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    counts, _ = np.histogram(scores, bins=edges)

    outdir = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"ps_hist_s{args.scenario}_p{label.replace('.', '')}.csv"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for i in range(args.bins):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(counts[i])])
    tail_mass = float(np.mean((scores < 0.05) | (scores > 0.95)))
    print(f"scenario {args.scenario}, prevalence {label}, n {args.n}")
    print(f"alpha0 {alpha0:.6f}")
    print(f"mass outside [0.05, 0.95]: {tail_mass:.4f}")
    _log(f"histogram written to {path}")
    return EXIT_OK


def _report_rows(store: Path) -> list[dict]:
    manifest_path = store / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest in {store}")
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    cells = {
        name: entry for name, entry in manifest.get("cells", {}).items() if entry.get("complete")
    }
    if not cells:
        raise ConfigError(f"store {store} has no completed cells")

    groups: dict[tuple[int, int, str], dict[str, dict]] = {}
    for name, entry in cells.items():
        key = (entry["scenario"], entry["setting"], entry["prevalence"])
        arm = "null" if entry["null_effect"] else "effect"
        records = read_records_csv(store / "cells" / f"{name}_records.csv")
        metrics = aggregate_cell(records, entry["truth"], entry["n_reps"])
        groups.setdefault(key, {})[arm] = {m.method: m for m in metrics}

    rows = []
    for key in sorted(groups):
        scenario, setting, prevalence = key
        arms = groups[key]
        methods_present = [
            m for m in METHODS if m in arms.get("effect", {}) or m in arms.get("null", {})
        ]
        for method in methods_present:
            effect = arms.get("effect", {}).get(method)
            null = arms.get("null", {}).get(method)
            rows.append(
                {
                    "scenario": scenario,
                    "setting": setting,
                    "prevalence": prevalence,
                    "method": method,
                    "n_valid": effect.n_valid if effect else (null.n_valid if null else 0),
                    "bias": effect.bias if effect else math.nan,
                    "empirical_sd": effect.empirical_sd if effect else math.nan,
                    "avg_theoretical_sd": effect.avg_theoretical_sd if effect else math.nan,
                    "mse": effect.mse if effect else math.nan,
                    "type1_rate": null.type1_rate if null else math.nan,
                    "failure_rate": effect.failure_rate if effect else (null.failure_rate if null else math.nan),
                }
            )
    return rows


def cmd_report(args: argparse.Namespace) -> int:
    store = Path(args.store or os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))
    rows = _report_rows(store)
    columns = (
        "scenario",
        "setting",
        "prevalence",
        "method",
        "n_valid",
        "bias",
        "empirical_sd",
        "avg_theoretical_sd",
        "mse",
        "type1_rate",
        "failure_rate",
    )
    path = store / "report.csv"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [
                    row[c] if c in ("scenario", "setting", "prevalence", "method", "n_valid")
                    else repr(float(row[c]))
                    for c in columns
                ]
            )

    def cell_text(value) -> str:
        if isinstance(value, float):
            return "-" if math.isnan(value) else f"{value:.4f}"
        return str(value)

    widths = {c: max(len(c), max((len(cell_text(r[c])) for r in rows), default=0)) for c in columns}
    print("  ".join(c.rjust(widths[c]) for c in columns))
    for row in rows:
        print("  ".join(cell_text(row[c]).rjust(widths[c]) for c in columns))
    _log(f"report written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulation grid into a result store")
    run.add_argument("--config", help="JSON config file; flags override its keys")
    run.add_argument("--scenarios", type=_int_list, default=None, help="e.g. 1,2,3")
    run.add_argument("--settings", type=_int_list, default=None, help="e.g. 1,2,3")
    run.add_argument("--prevalences", type=_str_list, default=None, help="e.g. 0.05,0.20")
    run.add_argument("--arms", type=_str_list, default=None, help="subset of effect,null")
    run.add_argument("--methods", type=_str_list, default=None, help=f"subset of {','.join(METHODS)}")
    run.add_argument("--n-reps", dest="n_reps", type=int, default=None)
    run.add_argument("--master-seed", dest="master_seed", type=int, default=None)
    run.add_argument("--oracle-seed", dest="oracle_seed", type=int, default=None)
    run.add_argument("--calibration-n", dest="calibration_n", type=int, default=None)
    run.add_argument("--truth-n", dest="truth_n", type=int, default=None)
    run.add_argument("--parallelism", type=int, default=None)
    run.add_argument("--output-dir", dest="output_dir", default=None)
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    calibrate = sub.add_parser("calibrate", help="write the golden intercept table")
    calibrate.add_argument("--scenarios", type=_int_list, default=None)
    calibrate.add_argument("--prevalences", type=_str_list, default=None)
    calibrate.add_argument("--oracle-seed", dest="oracle_seed", type=int, default=42)
    calibrate.add_argument("--oracle-n", dest="oracle_n", type=int, default=10**6)
    calibrate.add_argument("--output-dir", dest="output_dir", default=None)
    calibrate.set_defaults(func=cmd_calibrate)

    ps_hist = sub.add_parser("ps-hist", help="histogram the true propensity distribution")
    ps_hist.add_argument("--scenario", type=int, required=True)
    ps_hist.add_argument("--prevalence", default="0.20")
    ps_hist.add_argument("--n", type=int, default=100_000)
    ps_hist.add_argument("--bins", type=int, default=20)
    ps_hist.add_argument("--oracle-seed", dest="oracle_seed", type=int, default=42)
    ps_hist.add_argument("--oracle-n", dest="oracle_n", type=int, default=10**6)
    ps_hist.add_argument("--output-dir", dest="output_dir", default=None)
    ps_hist.set_defaults(func=cmd_ps_hist)

    report = sub.add_parser("report", help="summarize a result store")
    report.add_argument("--store", default=None, help="result store directory")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
