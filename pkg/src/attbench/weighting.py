"""Inverse-probability and augmented weighting estimators of the ATT.

Both estimators are built from ratio-of-sums terms with the treated-
oriented weight ``w_i = 1`` for treated and ``ps_i / (1 - ps_i)`` for
controls.  Standard errors come from the empirical influence function of
the ratio terms; each term ``T = sum(w a) / sum(w)`` contributes
``w (a - T) / mean(w)`` and the per-unit contributions sum across terms.
When the incoming :class:`PsVector` carries the score columns of the
model that produced it, the component of the influence values explained
by those columns is removed before squaring: weights fitted by maximum
likelihood on the analysis sample absorb part of its noise, which
shrinks the estimator's sampling variance below the known-weights
formula by the variance of exactly that projection.  Scores without a
basis (externally supplied or ensemble-estimated) get the known-weights
variance.  P-values are two-sided normal.

Trimming is honored through the ``kept_mask`` of the incoming
:class:`PsVector`: dropped units appear in no sum and no influence
contribution, and ``n`` is the kept count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import AllTrimmedError, DegenerateWeightsError, ZeroSeError
from .glm import fit_ols, predict_ols
from .numeric import RngStream
from .propensity import PsVector
from .superlearner import fit_superlearner, predict_ensemble

OUTCOME_METHODS = ("ols", "ensemble")


@dataclass(frozen=True)
class WeightedAttEstimate:
    att: float
    theoretical_se: float
    p_value: float
    n_used: int


def _att_weights(z: np.ndarray, ps: np.ndarray) -> np.ndarray:
    return np.where(z == 1, 1.0, ps / (1.0 - ps))


def _kept_arrays(ps: PsVector, *arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    kept = ps.kept_mask
    z = arrays[0]
    zk = z[kept]
    if zk.size == 0 or zk.min() == zk.max():
        raise AllTrimmedError("trimming left no treated or no control units")
    return (ps.values[kept],) + tuple(a[kept] for a in arrays)


def _ratio_term(w: np.ndarray, a: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and influence contributions of ``sum(w * a) / sum(w)``."""
    denom = float(w.sum())
    if denom == 0.0:
        raise DegenerateWeightsError("weighted-mean denominator is zero")
    value = float((w * a).sum()) / denom
    phi = w * (a - value) / w.mean()
    return value, phi


def _kept_basis(ps: PsVector) -> np.ndarray | None:
    return None if ps.score_basis is None else ps.score_basis[ps.kept_mask]


def _finish(
    att: float, phi: np.ndarray, basis: np.ndarray | None = None
) -> WeightedAttEstimate:
    n = phi.size
    if basis is not None and n > basis.shape[1]:
        coef, *_ = np.linalg.lstsq(basis, phi, rcond=None)
        phi = phi - basis @ coef
    se = float(np.sqrt((phi**2).mean() / n))
    if se == 0.0:
        raise ZeroSeError("influence function is identically zero")
    p_value = 2.0 * float(stats.norm.sf(abs(att) / se))
    return WeightedAttEstimate(att, se, p_value, n)


def ipw_att(y: np.ndarray, z: np.ndarray, ps: PsVector) -> WeightedAttEstimate:
    """Weighted difference of treated and control outcome means.

    The treated term reduces to the plain treated mean (unit weights);
    the control term reweights controls by the odds of treatment,
    standardizing them to the treated covariate distribution.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z)
    psk, zk, yk = _kept_arrays(ps, z, y)
    w = _att_weights(zk, psk)
    mu_treat, phi_treat = _ratio_term(w * (zk == 1), yk)
    mu_ctrl, phi_ctrl = _ratio_term(w * (zk == 0), yk)
    return _finish(mu_treat - mu_ctrl, phi_treat - phi_ctrl, _kept_basis(ps))


def aipw_att(
    y: np.ndarray, z: np.ndarray, ps: PsVector, q1: np.ndarray, q0: np.ndarray
) -> WeightedAttEstimate:
    """Doubly robust ATT: regression contrast plus weighted residual terms.

    The first term averages ``q1 - q0`` over the treated covariate
    distribution via propensity weights; the residual terms correct it
    with treated and reweighted-control outcome residuals.  Consistency
    survives misspecification of either the outcome model or the
    propensity model, but not both.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z)
    q1 = np.asarray(q1, dtype=np.float64)
    q0 = np.asarray(q0, dtype=np.float64)
    if q1.shape != y.shape or q0.shape != y.shape:
        raise ValueError("q1 and q0 must match y in length")
    psk, zk, yk, q1k, q0k = _kept_arrays(ps, z, y, q1, q0)
    w = _att_weights(zk, psk)
    contrast, phi_contrast = _ratio_term(psk, q1k - q0k)
    resid_treat, phi_rt = _ratio_term(w * (zk == 1), yk - q1k)
    resid_ctrl, phi_rc = _ratio_term(w * (zk == 0), yk - q0k)
    att = contrast + resid_treat - resid_ctrl
    return _finish(att, phi_contrast + phi_rt - phi_rc, _kept_basis(ps))


def fit_outcome_models(
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    method: str = "ols",
    rng: RngStream | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit E[Y | X, Z] on the full sample and predict both arms.

    Returns ``(q1, q0)``, the predicted outcome for every unit with its
    treatment set to 1 and to 0.  ``method="ols"`` fits a single linear
    model with Z as a main effect; ``method="ensemble"`` stacks the
    cross-validated library on ``[X, Z]``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if method not in OUTCOME_METHODS:
        raise ValueError(f"unknown method: {method}")
    n = x.shape[0]
    ones = np.ones(n)
    zeros = np.zeros(n)
    if method == "ols":
        design = np.hstack([ones[:, None], x, z[:, None]])
        fit = fit_ols(design, y)
        q1 = predict_ols(fit, np.hstack([ones[:, None], x, ones[:, None]]))
        q0 = predict_ols(fit, np.hstack([ones[:, None], x, zeros[:, None]]))
    else:
        features = np.hstack([x, z[:, None]])
        fit = fit_superlearner(features, y, "gaussian", rng=rng)
        q1 = predict_ensemble(fit, np.hstack([x, ones[:, None]]))
        q0 = predict_ensemble(fit, np.hstack([x, zeros[:, None]]))
    return q1, q0
