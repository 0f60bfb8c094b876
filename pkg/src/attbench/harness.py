"""Replicate execution, cell aggregation, and the on-disk result store.

One replicate draws a cohort and runs every requested estimator on it.
Estimators share expensive intermediates (the logistic propensity fit,
the stacked propensity and outcome fits) through a memo that also caches
failures, so two methods consuming the same broken input report the same
failure.  A failed method still emits a record, flagged
``failed:<ErrorType>``, never a silent gap.

Cells are independent given the master seed, so the grid parallelizes
over cells with each worker deriving its streams from stable
coordinates.  The store is written deterministically: fixed column
orders, shortest-round-trip float formatting, sorted JSON keys, and no
timestamps, so equal configurations produce byte-identical files at any
worker count.  A manifest tracks completed cells and lets an interrupted
grid resume without recomputation.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dgp import (
    SCENARIOS,
    CellConfig,
    calibrate_intercept,
    generate_replicate,
    true_att,
)
from .errors import EstimationError, InsufficientReplicatesError, PartialGridError
from .glm import fit_ols, ols_wald_test
from .matching import cem_att, cem_match, matched_att, mdm_match, psm_match
from .numeric import (
    PURPOSE_CALIBRATION,
    PURPOSE_OUTCOME_FOLDS,
    PURPOSE_PS_FOLDS,
    PURPOSE_TRUTH,
    substream,
)
from .propensity import estimate_ps, trim_ps, truncate_ps
from .tmle import tmle_att
from .weighting import aipw_att, fit_outcome_models, ipw_att

METHODS = ("LR", "CEM2", "CEM5", "MDM", "PSM", "PSM_1:2", "IPW", "AIPW", "AIPW_SL", "TMLE_SL")
ALPHA = 0.05
DEFAULT_ORACLE_SEED = 42
FAILED_PREFIX = "failed:"

RECORD_COLUMNS = ("method", "replicate", "att", "theoretical_se", "p_value", "n_discarded", "flags")
METRIC_COLUMNS = (
    "method",
    "n_valid",
    "bias",
    "empirical_sd",
    "avg_theoretical_sd",
    "mse",
    "type1_rate",
    "failure_rate",
)
MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EstimateRecord:
    """One method's result on one replicate."""

    method: str
    replicate: int
    att: float
    theoretical_se: float
    p_value: float
    n_discarded: int
    flags: tuple[str, ...]

    @property
    def failed(self) -> bool:
        return any(f.startswith(FAILED_PREFIX) for f in self.flags)


@dataclass(frozen=True)
class MethodMetrics:
    """Cell-level summary of one method over its valid replicates."""

    method: str
    n_valid: int
    bias: float
    empirical_sd: float
    avg_theoretical_sd: float
    mse: float
    type1_rate: float
    failure_rate: float


def run_replicate(
    cfg: CellConfig, alpha0: float, replicate: int, methods: tuple[str, ...] | None = None
) -> list[EstimateRecord]:
    """Run the requested estimators on one simulated cohort.

    Shared inputs are computed once: PSM, MDM, IPW, and AIPW all consume
    the same logistic propensity fit, and the two stacked methods share
    one propensity ensemble and one outcome ensemble.  The ensembles'
    fold draws live on their own substreams keyed by the attempt that
    produced the cohort, so they are reproducible unit by unit.
    """
    method_list = METHODS if methods is None else tuple(methods)
    unknown = set(method_list) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")

    ds, attempt = generate_replicate(cfg, alpha0, replicate)
    x = ds.observed_covariates
    z = ds.z
    y = ds.y
    base_flags = ("redrawn",) if attempt > 0 else ()

    cache: dict[str, tuple[str, object]] = {}

    def shared(key, builder):
        entry = cache.get(key)
        if entry is None:
            try:
                entry = ("ok", builder())
            except EstimationError as exc:
                entry = ("error", exc)
            cache[key] = entry
        tag, value = entry
        if tag == "error":
            raise value
        return value

    def fold_rng(purpose: int):
        return substream(
            cfg.master_seed,
            cell_code=cfg.cell_code,
            replicate=replicate,
            attempt=attempt,
            purpose=purpose,
        )

    def ps_logistic():
        return shared("ps_logistic", lambda: estimate_ps(x, z, "logistic"))

    def ps_trimmed():
        return shared("ps_trimmed", lambda: trim_ps(ps_logistic()))

    def outcome_ols():
        return shared("outcome_ols", lambda: fit_outcome_models(x, y, z, "ols"))

    def ps_ensemble():
        return shared(
            "ps_ensemble",
            lambda: estimate_ps(x, z, "ensemble", rng=fold_rng(PURPOSE_PS_FOLDS)),
        )

    def ps_truncated():
        return shared("ps_truncated", lambda: truncate_ps(ps_ensemble(), ds.n))

    def outcome_ensemble():
        return shared(
            "outcome_ensemble",
            lambda: fit_outcome_models(x, y, z, "ensemble", rng=fold_rng(PURPOSE_OUTCOME_FOLDS)),
        )

    def ps_flags(ps) -> tuple[str, ...]:
        return ("nonconverged",) if ps.separated else ()

    def run_lr():
        design = np.hstack([np.ones((ds.n, 1)), x, z[:, None].astype(np.float64)])
        fit = fit_ols(design, y)
        z_index = design.shape[1] - 1
        _, p_value = ols_wald_test(fit, z_index)
        att = float(fit.coefficients[z_index])
        return att, float(fit.standard_errors[z_index]), p_value, 0, ()

    def run_cem(n_bins: int):
        strata = cem_match(x, z, n_bins)
        est = cem_att(y, z, strata)
        n_disc = int(((z == 1) & ~strata.retained).sum())
        return est.att, est.theoretical_se, est.p_value, n_disc, ()

    def run_psm(ratio: int):
        ps = ps_logistic()
        matches = psm_match(ps, z, ratio)
        est = matched_att(y, matches)
        return est.att, est.theoretical_se, est.p_value, len(matches.discarded_treated), ps_flags(ps)

    def run_mdm():
        ps = ps_logistic()
        matches = mdm_match(x, z, ps)
        est = matched_att(y, matches)
        return est.att, est.theoretical_se, est.p_value, len(matches.discarded_treated), ps_flags(ps)

    def run_ipw():
        trimmed = ps_trimmed()
        est = ipw_att(y, z, trimmed)
        flags = ps_flags(trimmed) + (("trimmed",) if trimmed.n_dropped else ())
        return est.att, est.theoretical_se, est.p_value, trimmed.n_dropped, flags

    def run_aipw():
        trimmed = ps_trimmed()
        q1, q0 = outcome_ols()
        est = aipw_att(y, z, trimmed, q1, q0)
        flags = ps_flags(trimmed) + (("trimmed",) if trimmed.n_dropped else ())
        return est.att, est.theoretical_se, est.p_value, trimmed.n_dropped, flags

    def run_aipw_sl():
        truncated = ps_truncated()
        q1, q0 = outcome_ensemble()
        est = aipw_att(y, z, truncated, q1, q0)
        return est.att, est.theoretical_se, est.p_value, 0, ps_flags(truncated)

    def run_tmle_sl():
        truncated = ps_truncated()
        q1, q0 = outcome_ensemble()
        fit = tmle_att(y, z, x, q1, q0, truncated)
        flags = ps_flags(truncated)
        if not fit.targeting_converged:
            flags = flags + ("nonconverged",)
        return fit.att, fit.theoretical_se, fit.p_value, 0, flags

    runners = {
        "LR": run_lr,
        "CEM2": lambda: run_cem(2),
        "CEM5": lambda: run_cem(5),
        "MDM": run_mdm,
        "PSM": lambda: run_psm(1),
        "PSM_1:2": lambda: run_psm(2),
        "IPW": run_ipw,
        "AIPW": run_aipw,
        "AIPW_SL": run_aipw_sl,
        "TMLE_SL": run_tmle_sl,
    }

    records = []
    for method in method_list:
        try:
            att, se, p_value, n_disc, extra = runners[method]()
            flags = tuple(sorted(set(base_flags) | set(extra)))
            records.append(EstimateRecord(method, replicate, att, se, p_value, n_disc, flags))
        except EstimationError as exc:
            flags = tuple(sorted(set(base_flags) | {FAILED_PREFIX + type(exc).__name__}))
            records.append(
                EstimateRecord(method, replicate, float("nan"), float("nan"), float("nan"), 0, flags)
            )
    return records


def aggregate_cell(
    records: list[EstimateRecord], truth: float, n_reps: int
) -> list[MethodMetrics]:
    """Summarize a cell's records method by method.

    Flagged failures are excluded from every moment and counted in
    ``failure_rate``.  A method with fewer than two valid replicates gets
    NaN moments rather than sinking the whole cell; an empty or
    single-replicate cell is unaggregatable and raises.
    """
    if not records or n_reps < 2:
        raise InsufficientReplicatesError(f"{len(records)} records over {n_reps} replicates")
    present = [m for m in METHODS if any(r.method == m for r in records)]
    out = []
    for method in present:
        recs = [r for r in records if r.method == method]
        valid = [r for r in recs if not r.failed]
        failure_rate = 1.0 - len(valid) / len(recs)
        if len(valid) < 2:
            out.append(
                MethodMetrics(
                    method, len(valid), np.nan, np.nan, np.nan, np.nan, np.nan, failure_rate
                )
            )
            continue
        atts = np.array([r.att for r in valid])
        ses = np.array([r.theoretical_se for r in valid])
        p_values = np.array([r.p_value for r in valid])
        bias = float(atts.mean()) - truth
        empirical_sd = float(atts.std(ddof=1))
        avg_theoretical_sd = float(ses.mean())
        mse = float(((atts - truth) ** 2).mean())
        observed_p = p_values[~np.isnan(p_values)]
        type1_rate = float((observed_p < ALPHA).mean()) if observed_p.size else float("nan")
        out.append(
            MethodMetrics(
                method, len(valid), bias, empirical_sd, avg_theoretical_sd, mse, type1_rate, failure_rate
            )
        )
    return out


def _fmt(value: float) -> str:
    return repr(float(value))


def write_records_csv(path: Path, records: list[EstimateRecord]) -> None:
    method_order = {m: i for i, m in enumerate(METHODS)}
    ordered = sorted(records, key=lambda r: (r.replicate, method_order[r.method]))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in ordered:
            writer.writerow(
                [
                    r.method,
                    r.replicate,
                    _fmt(r.att),
                    _fmt(r.theoretical_se),
                    _fmt(r.p_value),
                    r.n_discarded,
                    ";".join(r.flags),
                ]
            )


def read_records_csv(path: Path) -> list[EstimateRecord]:
    records = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"unexpected record columns in {path}: {reader.fieldnames}")
        for row in reader:
            flags = tuple(row["flags"].split(";")) if row["flags"] else ()
            records.append(
                EstimateRecord(
                    row["method"],
                    int(row["replicate"]),
                    float(row["att"]),
                    float(row["theoretical_se"]),
                    float(row["p_value"]),
                    int(row["n_discarded"]),
                    flags,
                )
            )
    return records


def write_metrics_csv(path: Path, metrics: list[MethodMetrics]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for m in metrics:
            writer.writerow(
                [
                    m.method,
                    m.n_valid,
                    _fmt(m.bias),
                    _fmt(m.empirical_sd),
                    _fmt(m.avg_theoretical_sd),
                    _fmt(m.mse),
                    _fmt(m.type1_rate),
                    _fmt(m.failure_rate),
                ]
            )


def _package_version() -> str:
    from attbench import __version__

    return __version__


def _write_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    os.replace(tmp, path)


def _cell_worker(args: tuple[CellConfig, float, tuple[str, ...]]) -> tuple[str, list[EstimateRecord]]:
    cfg, alpha0, methods = args
    records = []
    for replicate in range(cfg.n_reps):
        records.extend(run_replicate(cfg, alpha0, replicate, methods))
    return cfg.name, records


def run_grid(
    cells: list[CellConfig],
    output_dir: str | Path,
    parallelism: int = 1,
    oracle_seed: int = DEFAULT_ORACLE_SEED,
    calibration_n: int = 10**6,
    truth_n: int = 10**7,
    methods: tuple[str, ...] | None = None,
    log=None,
) -> dict[str, tuple[CellConfig, list[EstimateRecord], list[MethodMetrics]]]:
    """Run a batch of cells and persist a deterministic result store.

    Calibrated intercepts and true ATT values are computed once per
    (scenario, prevalence) on oracle streams derived from
    ``oracle_seed``, then reused by every cell that needs them.  Cells
    already marked complete in the store's manifest are loaded from disk
    instead of recomputed, which is what makes an interrupted grid
    resumable.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("no cells to run")
    if len({c.name for c in cells}) != len(cells):
        raise ValueError("duplicate cells in the grid")
    master_seeds = {c.master_seed for c in cells}
    if len(master_seeds) != 1:
        raise ValueError("all cells in a grid must share a master seed")
    method_list = METHODS if methods is None else tuple(methods)

    outdir = Path(output_dir)
    cells_dir = outdir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    def say(message: str) -> None:
        if log is not None:
            log(message)

    intercepts: dict[tuple[int, str], float] = {}
    for cfg in cells:
        key = (cfg.scenario, cfg.prevalence_label)
        if key in intercepts:
            continue
        say(f"calibrating scenario {cfg.scenario} at prevalence {cfg.prevalence_label}")
        rng = substream(
            oracle_seed,
            cell_code=cfg.scenario,
            replicate=cfg.prevalence_index,
            purpose=PURPOSE_CALIBRATION,
        )
        intercepts[key] = calibrate_intercept(
            SCENARIOS[cfg.scenario], cfg.prevalence, rng, oracle_n=calibration_n
        )

    truths: dict[tuple[int, int, str, bool], tuple[float, float]] = {}
    for cfg in cells:
        key = (cfg.scenario, cfg.setting, cfg.prevalence_label, cfg.null_effect)
        if key in truths:
            continue
        if not cfg.null_effect and cfg.setting == 3:
            say(f"computing setting-3 truth for scenario {cfg.scenario}, prevalence {cfg.prevalence_label}")
        rng = substream(
            oracle_seed,
            cell_code=cfg.scenario,
            replicate=cfg.prevalence_index,
            purpose=PURPOSE_TRUTH,
        )
        truths[key] = true_att(
            SCENARIOS[cfg.scenario],
            cfg.setting,
            intercepts[(cfg.scenario, cfg.prevalence_label)],
            rng,
            oracle_n=truth_n,
            null_effect=cfg.null_effect,
        )

    _write_goldens(outdir, oracle_seed, calibration_n, truth_n, intercepts, truths)

    manifest_path = outdir / MANIFEST_NAME
    if manifest_path.exists():
        with open(manifest_path) as handle:
            manifest = json.load(handle)
        if manifest.get("master_seed") != cells[0].master_seed:
            raise ValueError("existing store was built with a different master seed")
    else:
        manifest = {}
    manifest.update(
        {
            "schema_version": SCHEMA_VERSION,
            "package_version": _package_version(),
            "master_seed": cells[0].master_seed,
            "oracle_seed": oracle_seed,
            "calibration_n": calibration_n,
            "truth_n": truth_n,
            "methods": list(method_list),
            "decisions": {
                "caliper_sd_factor": 0.2,
                "effect_and_null_streams_independent": True,
                "ensemble_k_folds": 10,
                "matching_order": "descending propensity, ties by index",
                "noise_variance": 2.0,
                "outcome_model_plain": "ols main effects plus treatment",
                "ps_model_plain": "logistic main effects",
                "ps_refit_after_trimming": False,
                "trim_delta": 0.05,
                "truncation_rule": "5 / (sqrt(n) ln n)",
            },
            "intercepts": {f"s{s}_p{p}": a for (s, p), a in sorted(intercepts.items())},
            "truths": {
                f"s{s}_t{t}_p{p}_{'null' if null else 'effect'}": {"value": v, "oracle_se": se}
                for (s, t, p, null), (v, se) in sorted(truths.items())
            },
        }
    )
    manifest.setdefault("cells", {})

    def truth_for(cfg: CellConfig) -> tuple[float, float]:
        return truths[(cfg.scenario, cfg.setting, cfg.prevalence_label, cfg.null_effect)]

    results: dict[str, tuple[CellConfig, list[EstimateRecord], list[MethodMetrics]]] = {}
    pending: list[CellConfig] = []
    for cfg in cells:
        entry = manifest["cells"].get(cfg.name)
        records_path = cells_dir / f"{cfg.name}_records.csv"
        reusable = (
            entry is not None
            and entry.get("complete")
            and entry.get("n_reps") == cfg.n_reps
            and entry.get("methods") == list(method_list)
            and records_path.exists()
        )
        if reusable:
            say(f"reusing completed cell {cfg.name}")
            records = read_records_csv(records_path)
            metrics = aggregate_cell(records, truth_for(cfg)[0], cfg.n_reps)
            write_metrics_csv(cells_dir / f"{cfg.name}_metrics.csv", metrics)
            results[cfg.name] = (cfg, records, metrics)
        else:
            pending.append(cfg)

    def finish(cfg: CellConfig, records: list[EstimateRecord]) -> None:
        truth, truth_se = truth_for(cfg)
        metrics = aggregate_cell(records, truth, cfg.n_reps)
        write_records_csv(cells_dir / f"{cfg.name}_records.csv", records)
        write_metrics_csv(cells_dir / f"{cfg.name}_metrics.csv", metrics)
        manifest["cells"][cfg.name] = {
            "alpha0": intercepts[(cfg.scenario, cfg.prevalence_label)],
            "cell_code": cfg.cell_code,
            "complete": True,
            "methods": list(method_list),
            "n": cfg.n,
            "n_reps": cfg.n_reps,
            "null_effect": cfg.null_effect,
            "prevalence": cfg.prevalence_label,
            "scenario": cfg.scenario,
            "setting": cfg.setting,
            "truth": truth,
            "truth_oracle_se": truth_se,
        }
        _write_manifest(manifest_path, manifest)
        results[cfg.name] = (cfg, records, metrics)
        say(f"finished cell {cfg.name}")

    jobs = [
        (cfg, intercepts[(cfg.scenario, cfg.prevalence_label)], method_list) for cfg in pending
    ]
    failed: dict[str, str] = {}
    if parallelism <= 1 or len(jobs) <= 1:
        for job in jobs:
            try:
                _, records = _cell_worker(job)
                finish(job[0], records)
            except EstimationError as exc:
                failed[job[0].name] = str(exc)
    else:
        by_name = {cfg.name: cfg for cfg in pending}
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = {pool.submit(_cell_worker, job): job[0].name for job in jobs}
            for future in as_completed(futures):
                try:
                    name, records = future.result()
                    finish(by_name[name], records)
                except EstimationError as exc:
                    failed[futures[future]] = str(exc)

    _write_manifest(manifest_path, manifest)
    if failed:
        raise PartialGridError(failed)
    return results


def write_calibration_csv(
    path: Path, oracle_seed: int, oracle_n: int, intercepts: dict[tuple[int, str], float]
) -> None:
    """Golden intercept table keyed by (scenario, prevalence)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["scenario", "prevalence", "oracle_seed", "oracle_n", "alpha0"])
        for (scenario, label), alpha in sorted(intercepts.items()):
            writer.writerow([scenario, label, oracle_seed, oracle_n, _fmt(alpha)])


def write_truths_csv(
    path: Path,
    oracle_seed: int,
    oracle_n: int,
    truths: dict[tuple[int, int, str, bool], tuple[float, float]],
) -> None:
    """Golden true-ATT table keyed by (scenario, setting, prevalence, arm)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["scenario", "setting", "prevalence", "arm", "oracle_seed", "oracle_n", "truth", "oracle_se"]
        )
        for (scenario, setting, label, null), (value, se) in sorted(truths.items()):
            arm = "null" if null else "effect"
            writer.writerow([scenario, setting, label, arm, oracle_seed, oracle_n, _fmt(value), _fmt(se)])


def _write_goldens(
    outdir: Path,
    oracle_seed: int,
    calibration_n: int,
    truth_n: int,
    intercepts: dict[tuple[int, str], float],
    truths: dict[tuple[int, int, str, bool], tuple[float, float]],
) -> None:
    write_calibration_csv(outdir / "calibration.csv", oracle_seed, calibration_n, intercepts)
    write_truths_csv(outdir / "truths.csv", oracle_seed, truth_n, truths)
