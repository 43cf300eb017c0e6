"""Sparse-in-space, smooth-in-time source reconstruction for MEG/EEG inverse problems."""

from .errors import (
    ConfigError,
    ConvergenceFailure,
    DimensionMismatch,
    IoFailure,
    MatrixFormatError,
    NumericalError,
    TwrError,
)
from .metrics import energy, energy_table, evaluate, mse, peak_distance, sparsity_level
from .model_io import DipoleGeometry, ProblemInstance, read_matrix, write_matrix
from .penalty import PenaltyOperator, quad_form, second_diff_penalty
from .simulate import ScenarioSpec, SourceWaveformSpec, desk_scenario, simulate
from .solver import (
    DecompositionState,
    SolverOptions,
    orthonormalize,
    soft_threshold,
    sowr_solve,
    towr_solve,
    twr_solve,
    update_A,
    update_G,
)
from .stage1 import raw_estimate, raw_estimate_ridge
from .tuning import CvSpec, GcvSpec, auto_tune, gcv_mu2, kfold_cv_mu1

__version__ = "0.1.0"
