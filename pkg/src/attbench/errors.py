"""Exception types shared across the estimation modules.

Every failure the simulation harness is expected to survive derives from
:class:`EstimationError`, so a replicate can be flagged and the grid can
keep running.  Anything else escaping an estimator is a genuine bug and
propagates.
"""


class EstimationError(Exception):
    """Base class for recoverable estimation failures."""


class NonSpdError(EstimationError):
    """Cholesky factorization hit a non-positive pivot."""


class DegenerateCovarianceError(EstimationError):
    """A covariate has zero variance, so its covariance matrix is singular."""


class RankDeficientError(EstimationError):
    """Design matrix is rank deficient (normal equations are not SPD)."""


class OneClassError(EstimationError):
    """Binary response contains a single class."""


class ZeroSeError(EstimationError):
    """A standard error of exactly zero makes the test statistic undefined."""


class AllTrimmedError(EstimationError):
    """Propensity trimming removed every unit, or a whole treatment arm."""


class NoMatchesError(EstimationError):
    """Every treated unit was discarded by the matching algorithm."""


class TooFewPairsError(EstimationError):
    """Fewer than two matched sets; the paired t-test is undefined."""


class ZeroVarianceError(EstimationError):
    """Matched differences have zero spread; the paired t-test is undefined."""


class DegenerateWeightsError(EstimationError):
    """A weighted-mean denominator is zero."""


class FlatOutcomeError(EstimationError):
    """Outcome has zero range; min-max scaling is undefined."""


class DegenerateDrawError(EstimationError):
    """A simulated dataset has fewer than two treated or two control units."""


class BracketFailureError(EstimationError):
    """Bisection bracket does not straddle the calibration target."""


class InsufficientReplicatesError(EstimationError):
    """Too few replicates to aggregate a simulation cell."""


class PartialGridError(EstimationError):
    """Some cells of a grid run failed; completed cells are on disk."""

    def __init__(self, failed_cells: dict):
        super().__init__(f"{len(failed_cells)} cells failed: {sorted(failed_cells)}")
        self.failed_cells = failed_cells
