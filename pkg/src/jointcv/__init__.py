"""Doubly-stochastic black-box variational inference with a joint control variate."""

from .core import GradientVector, RngStream, VariationalParams, draw_standard_normal, trace_variance
from .objective import OracleCounter, ReparamObjective, entropy
from .estimators import (
    CVEstimator,
    EnsembleEstimator,
    IncEstimator,
    JointSagaEstimator,
    JointSvrgEstimator,
    NaiveEstimator,
    ParamTable,
    init_table,
    make_estimator,
)

__version__ = "0.1.0"
