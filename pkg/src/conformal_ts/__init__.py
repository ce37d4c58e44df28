"""Adaptive per-dimension, per-horizon confidence intervals for multivariate forecasts."""

from .calibrator import (
    Calibrator,
    CalibratorConfig,
    IntervalRecord,
    Method,
    Trace,
    build_interval,
    mace_bound_rhs,
    run,
    theorem1_bound,
)
from .metrics import MetricsReport, evaluate, sigma_fit
from .panel import PanelDataset, PanelDims, align_targets, compute_errors, read_tensor, write_tensor
from .quantile_net import NetConfig, QuantileNet, constant_quantile_model, pinball_loss, train
from .synth import OracleConfig, Regime, generate

__version__ = "0.1.0"
