"""Pytest configuration for mixed_trees."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

_REPO_ROOT = Path(__file__).resolve().parents[2]
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from mixed_trees.config import CONFIG
from mixed_trees.data.dataset import PanelDataset


def replications(full: int, reduced: int) -> int:
    """Full replication count when MIXED_TREES_RUN_SLOW is set, else the reduced one."""
    return full if CONFIG.run_slow_tests else reduced


def require_slow() -> None:
    if not CONFIG.run_slow_tests:
        pytest.skip("MIXED_TREES_RUN_SLOW not set.")


def make_panel(
    subjects,
    waves,
    response,
    X=None,
    names=("x1",),
) -> PanelDataset:
    n = len(response)
    if X is None:
        X = np.zeros((n, len(names)))
    return PanelDataset(
        subject_ids=np.asarray(subjects, dtype=str),
        waves=np.asarray(waves, dtype=np.int64),
        response=np.asarray(response, dtype=float),
        X=np.asarray(X, dtype=float).reshape(n, len(names)),
        variable_names=tuple(names),
    )


def random_intercept_panel(
    m: int, T: int, sigma_b: float, sigma: float, seed: int, beta=(2.0, 1.0)
) -> PanelDataset:
    """y = beta0 + beta1 * x1 + b_i + e on a balanced m x T panel."""
    rng = np.random.default_rng(seed)
    subjects = np.repeat([f"S{i:03d}" for i in range(m)], T)
    waves = np.tile(np.arange(T), m)
    x1 = rng.normal(size=m * T)
    b = np.repeat(rng.normal(0.0, sigma_b, m), T)
    y = beta[0] + beta[1] * x1 + b + rng.normal(0.0, sigma, m * T)
    return make_panel(subjects, waves, y, x1[:, None], ("x1",))


@pytest.fixture
def small_panel() -> PanelDataset:
    return make_panel(
        subjects=["B", "A", "A", "B", "C", "C", "C"],
        waves=[1, 1, 0, 0, 0, 1, 2],
        response=[4.0, 2.0, 1.0, 3.0, 5.0, 6.0, 7.0],
        X=[[1.0, 10.0], [0.5, np.nan], [0.0, 8.0], [1.5, 9.0], [2.0, 7.0], [2.5, 6.0], [3.0, np.nan]],
        names=("x1", "x2"),
    )
