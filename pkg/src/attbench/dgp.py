"""Simulated cohorts with quadratic treatment assignment.

Three confounding scenarios share one skeleton: covariates are iid
standard normal, treatment is Bernoulli with a logit quadratic in (x1,
x2), and the outcome is linear in (x1, x3) with additive N(0, 2) noise.
Scenario 2 amplifies the treatment coefficients to induce strong
separation between arms; scenario 3 adds a covariate x4 to both the
treatment and outcome models and then hides it from every estimator.

Outcome settings vary the response surface: setting 1 is homogeneous,
setting 2 adds a quadratic term in x1 that estimation models omit, and
setting 3 makes the treatment effect heterogeneous in x1 so the ATT
depends on who gets treated.  A null variant zeroes every term involving
Z, which is what the type-I-error cells run on.

The treatment intercept is calibrated by bisection against a large Monte
Carlo sample so each configuration hits its target prevalence; sample
sizes are chosen to keep the expected treated count at 50.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import BracketFailureError, DegenerateDrawError
from .numeric import (
    PURPOSE_DATASET,
    RngStream,
    sample_bernoulli,
    sample_std_normal,
    substream,
)

NOISE_SD = float(np.sqrt(2.0))
CALIBRATION_TOL = 1e-3
_BISECTION_BRACKET = (-20.0, 20.0)
_BISECTION_X_TOL = 1e-10
_ORACLE_CHUNK = 10**6
_MAX_REDRAWS = 64

PREVALENCE_LABELS = ("0.05", "0.10", "0.20", "0.33", "0.50")
# 0.33 is shorthand for one third, keeping the expected treated count at
# exactly 50 for every prevalence.
PREVALENCE_VALUES = (0.05, 0.10, 0.20, 1.0 / 3.0, 0.50)
SAMPLE_SIZES = (1000, 500, 250, 150, 100)
EXPECTED_TREATED = 50


@dataclass(frozen=True)
class ScenarioSpec:
    """Treatment-assignment model: logit P(Z=1|X) = alpha0 + f(X)."""

    scenario_id: int
    coef_x1: float
    coef_x2: float
    coef_x1_sq: float
    coef_x2_sq: float
    coef_x1_x2: float
    coef_x4: float = 0.0
    coef_x4_sq: float = 0.0
    includes_x4: bool = False

    @property
    def n_covariates(self) -> int:
        return 4 if self.includes_x4 else 3

    @property
    def hidden_columns(self) -> tuple[int, ...]:
        return (3,) if self.includes_x4 else ()


SCENARIOS: dict[int, ScenarioSpec] = {
    1: ScenarioSpec(1, 0.1, 0.1, 0.05, 0.02, 0.02),
    2: ScenarioSpec(2, 1.25, 1.0, 0.5, 0.5, 0.75),
    3: ScenarioSpec(3, 0.1, 0.1, 0.05, 0.02, 0.02, 0.05, 0.02, includes_x4=True),
}

SETTING_IDS = (1, 2, 3)


def treatment_logit_terms(
    spec: ScenarioSpec, x1: np.ndarray, x2: np.ndarray, x4: np.ndarray | None = None
) -> np.ndarray:
    """The covariate part f(X) of the treatment logit (no intercept)."""
    terms = (
        spec.coef_x1 * x1
        + spec.coef_x2 * x2
        + spec.coef_x1_sq * x1**2
        + spec.coef_x2_sq * x2**2
        + spec.coef_x1_x2 * x1 * x2
    )
    if spec.includes_x4:
        if x4 is None:
            raise ValueError("scenario includes x4 but none was given")
        terms = terms + spec.coef_x4 * x4 + spec.coef_x4_sq * x4**2
    return terms


def outcome_mean(
    spec: ScenarioSpec, setting: int, x: np.ndarray, z: np.ndarray, null_effect: bool
) -> np.ndarray:
    """Systematic part of the outcome, before noise.

    ``null_effect`` zeroes every Z-bearing term (the main effect and, in
    setting 3, the interaction), leaving the confounding structure
    intact.
    """
    if setting not in SETTING_IDS:
        raise ValueError(f"unknown setting: {setting}")
    x1 = x[:, 0]
    x3 = x[:, 2]
    mean = 1.5 * x1 + 0.75 * x3
    if spec.includes_x4:
        mean = mean + 5.0 * x[:, 3]
    if setting == 2:
        mean = mean + 1.75 * x1**2
    if not null_effect:
        mean = mean + z
        if setting == 3:
            mean = mean + 1.5 * x1 * z
    return mean


@dataclass(frozen=True)
class Dataset:
    """One simulated cohort; ``x`` holds all covariates, hidden included."""

    x: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    hidden_columns: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def observed_covariates(self) -> np.ndarray:
        visible = [j for j in range(self.x.shape[1]) if j not in self.hidden_columns]
        return self.x[:, visible]


@dataclass(frozen=True)
class CellConfig:
    """One simulation cell: scenario x setting x prevalence x effect/null."""

    scenario: int
    setting: int
    prevalence_label: str
    null_effect: bool
    n_reps: int
    master_seed: int

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario: {self.scenario}")
        if self.setting not in SETTING_IDS:
            raise ValueError(f"unknown setting: {self.setting}")
        if self.prevalence_label not in PREVALENCE_LABELS:
            raise ValueError(f"unknown prevalence label: {self.prevalence_label}")
        if self.n_reps < 1:
            raise ValueError(f"n_reps must be positive: {self.n_reps}")

    @property
    def prevalence_index(self) -> int:
        return PREVALENCE_LABELS.index(self.prevalence_label)

    @property
    def prevalence(self) -> float:
        return PREVALENCE_VALUES[self.prevalence_index]

    @property
    def n(self) -> int:
        return SAMPLE_SIZES[self.prevalence_index]

    @property
    def cell_code(self) -> int:
        """Stable integer identity used to derive the cell's rng streams."""
        return (
            self.scenario * 1000
            + self.setting * 100
            + self.prevalence_index * 10
            + int(self.null_effect)
        )

    @property
    def name(self) -> str:
        arm = "null" if self.null_effect else "effect"
        return f"s{self.scenario}t{self.setting}p{self.prevalence_label.replace('.', '')}_{arm}"


def prevalence_label_for(value: float | str) -> str:
    """Canonical label for a prevalence given as float or string."""
    if isinstance(value, str):
        if value in PREVALENCE_LABELS:
            return value
        value = float(value)
    for label, v in zip(PREVALENCE_LABELS, PREVALENCE_VALUES):
        if abs(value - v) < 5e-3:
            return label
    raise ValueError(f"prevalence {value} is not in the design: {PREVALENCE_LABELS}")


def _draw_treatment_covariates(spec: ScenarioSpec, n: int, rng: RngStream) -> tuple[np.ndarray, ...]:
    k = 3 if spec.includes_x4 else 2
    draws = sample_std_normal(rng, n * k).reshape(n, k)
    if spec.includes_x4:
        return draws[:, 0], draws[:, 1], draws[:, 2]
    return draws[:, 0], draws[:, 1], None


def calibrate_intercept(
    spec: ScenarioSpec,
    prevalence: float,
    rng: RngStream,
    oracle_n: int = 10**6,
    tol: float = CALIBRATION_TOL,
) -> float:
    """Bisection for the intercept hitting the target prevalence.

    The Monte Carlo sample of covariate terms is drawn once and held
    fixed; marginal prevalence is then monotone in the intercept, so
    bisection on the bracket converges to the root of the empirical
    moment condition.  Raises :class:`BracketFailureError` if the bracket
    does not straddle the target or the achieved prevalence misses it by
    more than ``tol``.
    """
    if not 0.0 < prevalence < 1.0:
        raise ValueError(f"prevalence must lie in (0, 1): {prevalence}")
    x1, x2, x4 = _draw_treatment_covariates(spec, oracle_n, rng)
    terms = treatment_logit_terms(spec, x1, x2, x4)

    def gap(alpha: float) -> float:
        return float(np.mean(expit(alpha + terms))) - prevalence

    lo, hi = _BISECTION_BRACKET
    if gap(lo) > 0.0 or gap(hi) < 0.0:
        raise BracketFailureError(f"bracket {_BISECTION_BRACKET} does not straddle {prevalence}")
    while hi - lo > _BISECTION_X_TOL:
        mid = (lo + hi) / 2.0
        if gap(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    alpha = (lo + hi) / 2.0
    if abs(gap(alpha)) > tol:
        raise BracketFailureError(f"calibration missed target by {gap(alpha):.2e}")
    return float(alpha)


def generate_dataset(cfg: CellConfig, alpha0: float, rng: RngStream) -> Dataset:
    """Draw one cohort from a single stream.

    Draw order is fixed (covariate matrix, then treatment uniforms, then
    outcome noise) so the stream fully determines the data.  A draw with
    fewer than two units in either arm raises
    :class:`DegenerateDrawError`; redrawing is the caller's job because
    it changes the stream.
    """
    spec = SCENARIOS[cfg.scenario]
    n = cfg.n
    d = spec.n_covariates
    x = sample_std_normal(rng, n * d).reshape(n, d)
    x4 = x[:, 3] if spec.includes_x4 else None
    p_treat = expit(alpha0 + treatment_logit_terms(spec, x[:, 0], x[:, 1], x4))
    z = sample_bernoulli(rng, p_treat)
    noise = NOISE_SD * sample_std_normal(rng, n)
    n_treated = int(z.sum())
    if n_treated < 2 or n - n_treated < 2:
        raise DegenerateDrawError(f"{n_treated} treated of {n}")
    y = outcome_mean(spec, cfg.setting, x, z, cfg.null_effect) + noise
    return Dataset(x, z, y, spec.hidden_columns)


def generate_replicate(cfg: CellConfig, alpha0: float, replicate: int) -> tuple[Dataset, int]:
    """Draw a replicate, redrawing degenerate cohorts on fresh substreams.

    Returns the dataset and the attempt index that produced it (0 for a
    clean first draw).  Every attempt consumes its own substream, so a
    redraw in one replicate cannot shift any other replicate's data.
    """
    for attempt in range(_MAX_REDRAWS):
        rng = substream(
            cfg.master_seed,
            cell_code=cfg.cell_code,
            replicate=replicate,
            attempt=attempt,
            purpose=PURPOSE_DATASET,
        )
        try:
            return generate_dataset(cfg, alpha0, rng), attempt
        except DegenerateDrawError:
            continue
    raise DegenerateDrawError(f"no viable draw in {_MAX_REDRAWS} attempts for replicate {replicate}")


def true_att(
    spec: ScenarioSpec,
    setting: int,
    alpha0: float,
    rng: RngStream,
    oracle_n: int = 10**7,
    null_effect: bool = False,
) -> tuple[float, float]:
    """Population ATT and the Monte Carlo error of its computation.

    Settings 1 and 2 have a homogeneous effect, so the ATT is exactly 1
    (0 under the null) with zero oracle error.  Setting 3's ATT is
    ``1 + 1.5 * E[x1 | Z=1]``, estimated by importance-weighting x1 by
    the treatment probability over a large fixed-chunk Monte Carlo
    sample, with a delta-method standard error for the weighted mean.
    """
    if setting not in SETTING_IDS:
        raise ValueError(f"unknown setting: {setting}")
    if null_effect:
        return 0.0, 0.0
    if setting in (1, 2):
        return 1.0, 0.0

    s_w = s_wx = s_w2 = s_w2x = s_w2x2 = 0.0
    remaining = oracle_n
    while remaining > 0:
        chunk = min(_ORACLE_CHUNK, remaining)
        x1, x2, x4 = _draw_treatment_covariates(spec, chunk, rng)
        w = expit(alpha0 + treatment_logit_terms(spec, x1, x2, x4))
        s_w += float(w.sum())
        s_wx += float((w * x1).sum())
        w2 = w * w
        s_w2 += float(w2.sum())
        s_w2x += float((w2 * x1).sum())
        s_w2x2 += float((w2 * x1 * x1).sum())
        remaining -= chunk
    mean_x1_treated = s_wx / s_w
    # Delta method for the ratio estimator: Var = E[w^2 (x - m)^2] / (n E[w]^2).
    e_w = s_w / oracle_n
    e_w2_dev = (s_w2x2 - 2.0 * mean_x1_treated * s_w2x + mean_x1_treated**2 * s_w2) / oracle_n
    se_mean = float(np.sqrt(e_w2_dev / (e_w**2) / oracle_n))
    return 1.0 + 1.5 * mean_x1_treated, 1.5 * se_mean
