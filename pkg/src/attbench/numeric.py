"""Deterministic random streams and small dense linear algebra.

All simulation randomness flows through :class:`RngStream`, a thin wrapper
around numpy's PCG64 generator seeded through ``SeedSequence`` spawn keys.
A stream is identified by ``(master_seed, stream_id)`` alone, so any unit
of work that derives its id from stable coordinates reproduces bit-for-bit
regardless of scheduling or worker count.

The linear-algebra helpers are deliberately small: an explicit Cholesky
factorization with a hard positive-pivot check, triangular solves, and a
two-pass covariance.  Estimators depend on these instead of calling into
general-purpose decompositions so that failure modes (non-SPD systems,
zero-variance covariates) surface as typed errors rather than warnings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateCovarianceError, NonSpdError

# Absolute floor for Cholesky pivots.  The matrices seen here (normal
# equations, sample covariances of standardized draws) have O(1) or larger
# diagonals, so anything at or below this is rank deficiency, not scale.
CHOLESKY_PIVOT_TOL = 1e-12

_MAX_UINT64 = 2**64

# Substream purpose codes.  Packed into the low bits of a stream id so a
# replicate's dataset draw, PS ensemble folds, and outcome ensemble folds
# never share a stream.
PURPOSE_DATASET = 0
PURPOSE_PS_FOLDS = 1
PURPOSE_OUTCOME_FOLDS = 2
PURPOSE_CALIBRATION = 3
PURPOSE_TRUTH = 4
PURPOSE_PS_HIST = 5


class RngStream:
    """A single-owner random stream.

    Parameters
    ----------
    master_seed : int
        Top-level experiment seed, in ``[0, 2**64)``.
    stream_id : int
        Identifies this stream among all streams derived from the master
        seed.  Equal ids reproduce equal draw sequences; distinct ids give
        statistically independent sequences via SeedSequence spawning.

    Notes
    -----
    The stream is stateful and must not be shared across concurrent
    consumers.  Normal variates come from the generator's ziggurat
    sampler; uniforms from its 53-bit doubles.  Both are fixed algorithms
    in numpy, which is what makes golden outputs stable across platforms.
    """

    __slots__ = ("master_seed", "stream_id", "generator")

    def __init__(self, master_seed: int, stream_id: int = 0):
        if not 0 <= master_seed < _MAX_UINT64:
            raise ValueError(f"master_seed out of range: {master_seed}")
        if not 0 <= stream_id < _MAX_UINT64:
            raise ValueError(f"stream_id out of range: {stream_id}")
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id})"


def pack_stream_id(cell_code: int, replicate: int, attempt: int, purpose: int) -> int:
    """Pack work-unit coordinates into a unique stream id.

    Layout (low to high): 4 bits purpose, 8 bits attempt, 16 bits
    replicate, then the cell code.  Collisions are impossible within the
    stated ranges, so every (cell, replicate, attempt, purpose) tuple owns
    a distinct substream of the master seed.
    """
    if not 0 <= purpose < 16:
        raise ValueError(f"purpose out of range: {purpose}")
    if not 0 <= attempt < 256:
        raise ValueError(f"attempt out of range: {attempt}")
    if not 0 <= replicate < 65536:
        raise ValueError(f"replicate out of range: {replicate}")
    if cell_code < 0:
        raise ValueError(f"cell_code must be non-negative: {cell_code}")
    return (((cell_code << 16 | replicate) << 8 | attempt) << 4) | purpose


def substream(
    master_seed: int, *, cell_code: int, replicate: int = 0, attempt: int = 0, purpose: int = PURPOSE_DATASET
) -> RngStream:
    """Construct the stream owned by one unit of work."""
    return RngStream(master_seed, pack_stream_id(cell_code, replicate, attempt, purpose))


def sample_std_normal(rng: RngStream, n: int) -> np.ndarray:
    """Draw ``n`` independent standard normal variates."""
    if n < 1:
        raise ValueError(f"n must be positive: {n}")
    return rng.generator.standard_normal(n)


def sample_bernoulli(rng: RngStream, p: np.ndarray) -> np.ndarray:
    """Draw one Bernoulli variate per probability.

    Implemented as a uniform-threshold comparison (``u < p``) so the
    draw consumes exactly one uniform per element regardless of p.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p must be a vector")
    if p.size == 0:
        raise ValueError("p must be non-empty")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    u = rng.generator.random(p.size)
    return (u < p).astype(np.int64)


@dataclass(frozen=True)
class SpdMatrix:
    """A square matrix asserted symmetric at construction.

    Positive definiteness is not checked here; it is established by the
    first factorization, which raises :class:`NonSpdError` on failure.
    """

    dimension: int
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if self.dimension < 1:
            raise ValueError(f"dimension must be positive: {self.dimension}")
        if entries.shape != (self.dimension, self.dimension):
            raise ValueError(f"expected shape {(self.dimension, self.dimension)}, got {entries.shape}")
        if not np.array_equal(entries, entries.T):
            raise ValueError("matrix is not exactly symmetric")
        object.__setattr__(self, "entries", entries)


def cholesky_factor(matrix: SpdMatrix) -> np.ndarray:
    """Lower-triangular Cholesky factor of an SPD matrix.

    Column-by-column outer-product form.  A pivot at or below
    ``CHOLESKY_PIVOT_TOL`` raises :class:`NonSpdError` instead of
    producing a factor contaminated by a near-zero sqrt.
    """
    a = matrix.entries
    n = matrix.dimension
    lower = np.zeros((n, n), dtype=np.float64)
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= CHOLESKY_PIVOT_TOL:
            raise NonSpdError(f"pivot {pivot:.3e} at column {j}")
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def cholesky_solve(matrix: SpdMatrix, rhs: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for SPD ``A`` via its Cholesky factor."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != matrix.dimension:
        raise ValueError(f"rhs length {rhs.shape[0]} != dimension {matrix.dimension}")
    lower = cholesky_factor(matrix)
    return solve_from_factor(lower, rhs)


def solve_from_factor(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve using a precomputed lower Cholesky factor."""
    y = solve_triangular(lower, rhs, lower=True, check_finite=False)
    return solve_triangular(lower.T, y, lower=False, check_finite=False)


def sample_covariance(x: np.ndarray) -> SpdMatrix:
    """Two-pass sample covariance (denominator ``n - 1``).

    The product is symmetrized exactly so the result passes the strict
    symmetry check in :class:`SpdMatrix` written independently of float
    summation order.  A zero-variance column raises
    :class:`DegenerateCovarianceError` because every downstream use
    (Mahalanobis metric, whitening) needs an invertible matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be a matrix")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    if np.any(np.diag(cov) == 0.0):
        raise DegenerateCovarianceError("a covariate has zero variance")
    return SpdMatrix(d, cov)
