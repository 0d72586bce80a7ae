"""Market risk monitoring engine."""

from ._core import (
    ValidationError,
    backtest_windows,
    generate_csv,
    optimal_threshold,
    posterior,
    roc_auc,
    run,
)

__all__ = [
    "ValidationError",
    "backtest_windows",
    "generate_csv",
    "optimal_threshold",
    "posterior",
    "roc_auc",
    "run",
]
