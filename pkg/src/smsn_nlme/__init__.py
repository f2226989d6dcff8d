"""Nonlinear mixed-effects models with scale mixtures of skew-normal distributions."""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, BootstrapResult, run_bootstrap
from .curves import CurveParams, GeneralizedLogisticCurve, LinearCurve
from .data_io import PreparedPanel, build_panel, read_panel, read_series, write_panel
from .estimation import FitConfig, FitResult, Theta, fit, model_selection
from .prediction import cumulative_forecast, forecast_table, predict_future
from .smsn_dist import MixingLaw, SmsnParams

__all__ = [
    "BootstrapConfig", "BootstrapResult", "CurveParams", "FitConfig", "FitResult", "GeneralizedLogisticCurve",
    "LinearCurve", "MixingLaw", "PreparedPanel", "SmsnParams", "Theta", "build_panel", "cumulative_forecast",
    "fit", "forecast_table", "model_selection", "predict_future", "read_panel", "read_series", "run_bootstrap",
    "write_panel",
]
