"""Prediction error metrics."""

from __future__ import annotations

from typing import Optional

import numpy as np

from mixed_trees.errors import DataError, LengthMismatch


def mae(predictions, actual) -> float:
    """Mean absolute error."""
    p = np.asarray(predictions, dtype=float).reshape(-1)
    a = np.asarray(actual, dtype=float).reshape(-1)
    if p.shape != a.shape:
        raise LengthMismatch(p.shape[0], a.shape[0])
    if p.size == 0:
        raise DataError("MAE needs at least one prediction")
    return float(np.mean(np.abs(p - a)))


def improvement_pct(baseline_mae: float, model_mae: float) -> Optional[float]:
    """Relative MAE reduction against the baseline, in percent.

    Undefined (None) when the baseline has zero error and the model does not.
    """
    if baseline_mae == 0.0:
        return 0.0 if model_mae == 0.0 else None
    return 100.0 * (baseline_mae - model_mae) / baseline_mae


def format_improvement(pct: Optional[float]) -> str:
    if pct is None:
        return "n/a"
    return f"{int(round(pct))}%"
