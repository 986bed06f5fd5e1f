from __future__ import annotations

import os

import pytest

from mixed_trees.config import load_config
from utils.env_loader import load_env_recursive


def test_env_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("MIXED_TREES_SEED", "7")
    monkeypatch.setenv("MIXED_TREES_LOG_LEVEL", "debug")
    monkeypatch.setenv("MIXED_TREES_RUN_SLOW", "yes")
    monkeypatch.setenv("MIXED_TREES_OUTPUT_DIR", str(tmp_path))
    cfg = load_config()
    assert cfg.seed == 7
    assert cfg.log_level == "DEBUG"
    assert cfg.run_slow_tests
    assert cfg.output_dir == tmp_path


def test_blank_integer_uses_default(monkeypatch):
    monkeypatch.setenv("MIXED_TREES_CV_K", " ")
    assert load_config().cv_k == 10


def test_bad_integer(monkeypatch):
    monkeypatch.setenv("MIXED_TREES_N_JOBS", "many")
    with pytest.raises(ValueError, match="MIXED_TREES_N_JOBS"):
        load_config()


def test_dotenv_does_not_override_process_env(monkeypatch, tmp_path):
    (tmp_path / ".env").write_text("MIXED_TREES_CV_K=5\nMIXED_TREES_WAVE_COL=visit\n", encoding="utf-8")
    monkeypatch.setenv("MIXED_TREES_CV_K", "4")
    monkeypatch.delenv("MIXED_TREES_WAVE_COL", raising=False)

    try:
        assert load_env_recursive(tmp_path) == (tmp_path / ".env").resolve()
        cfg = load_config()
        assert cfg.cv_k == 4
        assert cfg.wave_col == "visit"
    finally:
        os.environ.pop("MIXED_TREES_WAVE_COL", None)


def test_missing_dotenv(tmp_path):
    assert load_env_recursive(tmp_path) is None
