"""Process-level configuration for mixed_trees."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from utils.env_loader import load_env_recursive


REPO_ROOT = Path(__file__).resolve().parents[1]
load_env_recursive(REPO_ROOT)


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"{name} must be an integer, got {raw!r}") from exc


@dataclass(frozen=True)
class MixedTreesConfig:
    seed: int = field(default_factory=lambda: _env_int("MIXED_TREES_SEED", 42))
    output_dir: Path = field(default_factory=lambda: Path(os.getenv("MIXED_TREES_OUTPUT_DIR", "runs")))
    n_jobs: int = field(default_factory=lambda: _env_int("MIXED_TREES_N_JOBS", 1))
    log_level: str = field(default_factory=lambda: os.getenv("MIXED_TREES_LOG_LEVEL", "INFO").upper())
    cv_k: int = field(default_factory=lambda: _env_int("MIXED_TREES_CV_K", 10))

    subject_col: str = field(default_factory=lambda: os.getenv("MIXED_TREES_SUBJECT_COL", "subject"))
    wave_col: str = field(default_factory=lambda: os.getenv("MIXED_TREES_WAVE_COL", "wave"))
    response_col: str = field(default_factory=lambda: os.getenv("MIXED_TREES_RESPONSE_COL", "BDI"))
    missing_marker: str = field(default_factory=lambda: os.getenv("MIXED_TREES_MISSING_MARKER", "NA"))

    run_slow_tests: bool = field(
        default_factory=lambda: os.getenv("MIXED_TREES_RUN_SLOW", "").lower() in {"1", "true", "yes"}
    )


def load_config() -> MixedTreesConfig:
    """Re-read the environment; ``CONFIG`` is the snapshot taken at import."""
    return MixedTreesConfig()


CONFIG = MixedTreesConfig()
