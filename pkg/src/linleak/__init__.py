"""Linear-layer leakage attacks on federated learning under secure aggregation.

Simulates the malicious-module attack (sparse and dense variants plus dense
and trap-weight baselines), the honest client update, pairwise-mask secure
aggregation, server-side reconstruction and leakage/resource metrics.
"""

from .errors import (BudgetExceeded, ConfigError, DataFormatError, DegenerateCalibration,
                     LayoutMismatch, LayoutOverflow, LinleakError, ShapeMismatch)
from .kernels import BACKEND
from .model import VARIANTS, AttackConfig, build_model

__all__ = [
    "AttackConfig", "BACKEND", "BudgetExceeded", "ConfigError", "DataFormatError",
    "DegenerateCalibration", "LayoutMismatch", "LayoutOverflow", "LinleakError", "ShapeMismatch",
    "VARIANTS", "build_model",
]
__version__ = "0.1.0"
