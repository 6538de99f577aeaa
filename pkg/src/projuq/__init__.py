"""Probabilistic projection methods for linear systems with calibrated uncertainty."""
__version__ = "0.1.0"

from .errors import (
    BreakdownAt,
    DegenerateSample,
    DimensionMismatch,
    IllPosedConditioning,
    IllPosedProjection,
    ImproperPosterior,
    MatrixMarketError,
    NotSpd,
    OutOfRange,
    ProjUQError,
    RankDeficient,
)
from .linalg import CovarianceFactor, MatrixHandle, OrthonormalBasis, SpdEnsembleSpec, as_matrix, random_spd
from .distributions import DegenerateGaussian, DegenerateStudent, ScalePosterior, kde, l1_distance
from .projection import (
    ProjectionPair,
    StructuredPrior,
    cg,
    general_posterior,
    krylov_pair,
    make_p1,
    make_p2,
    petrov_galerkin_solve,
)
from .calibration import CalibrationResult, calibrate_by_observation, calibrate_cheap, reid_covariance
from .assessment import AssessmentSpec, StatisticSeries, discrepancy, run_assessment, z_statistic
from .problems import biharmonic_matrix, fem_assemble, fem_rhs, pde_loss, pde_uncertainty_band, read_matrix_market
