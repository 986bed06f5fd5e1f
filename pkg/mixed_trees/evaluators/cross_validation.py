"""Grouped k-fold cross-validation and cross-model comparison."""

from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from tabulate import tabulate

from mixed_trees.config import CONFIG
from mixed_trees.data.dataset import FoldAssignment, PanelDataset
from mixed_trees.errors import FoldMismatch, LeakageError
from mixed_trees.evaluators.metrics import format_improvement, improvement_pct, mae
from mixed_trees.models import LoglikKind, ModelSpec, fit_spec, spec_label

logger = logging.getLogger(__name__)

LOGLIK_KIND: Dict[str, LoglikKind] = {"lmm": "ml", "reem": "ml", "merf": "plug_in", "cart": "pseudo"}


class FoldResult(BaseModel):
    fold: int
    n_test: int
    mae: Optional[float] = None
    n_unseen: int = 0
    error: Optional[str] = None


class CvReport(BaseModel):
    """Per-fold test MAE plus the log-likelihood of one fit on all rows."""

    label: str
    family: str
    params: Dict[str, Any]
    fold_mode: str
    k: int
    seed: int
    dataset_fingerprint: str
    folds_fingerprint: str
    n_rows: int
    n_dropped: int = 0
    folds: List[FoldResult]
    mean_mae: Optional[float] = None
    loglik_full: Optional[float] = None
    loglik_kind: LoglikKind
    complete: bool
    errors: List[Dict[str, Any]] = Field(default_factory=list)


def _audit_leakage(ds: PanelDataset, row_folds: np.ndarray, k: int) -> None:
    for fold in range(k):
        test = row_folds == fold
        shared = set(ds.subject_ids[test].tolist()) & set(ds.subject_ids[~test].tolist())
        if shared:
            raise LeakageError(f"fold {fold} shares subjects with its training rows: {sorted(shared)[:5]}")


def _run_fold(
    ds: PanelDataset, spec: ModelSpec, row_folds: np.ndarray, fold: int, n_jobs: int
) -> FoldResult:
    test = row_folds == fold
    n_test = int(test.sum())
    try:
        fitted = fit_spec(ds.subset(~test), spec, n_jobs=n_jobs)
        held_out = ds.subset(test)
        pred = fitted.predict(held_out)
        return FoldResult(
            fold=fold,
            n_test=n_test,
            mae=mae(pred.values, held_out.response),
            n_unseen=pred.n_unseen,
        )
    except Exception as e:
        logger.warning(f"Fold {fold} failed for {spec_label(spec)}: {type(e).__name__}: {e}")
        return FoldResult(fold=fold, n_test=n_test, error=f"{type(e).__name__}: {e}")


def cross_validate(
    ds: PanelDataset,
    spec: ModelSpec,
    folds: FoldAssignment,
    n_jobs: Optional[int] = None,
    n_dropped: int = 0,
    full_fit: bool = True,
) -> CvReport:
    """Fit on each fold's training rows and score MAE on its test rows.

    Subject-grouped folds leave the test subjects unseen, so their predictions
    are population-level. Failed folds are recorded and the report is marked
    incomplete. ``full_fit=False`` skips the all-rows fit and leaves
    ``loglik_full`` empty.
    """
    row_folds = folds.row_folds(ds)
    if folds.mode == "subject":
        _audit_leakage(ds, row_folds, folds.k)

    label = spec_label(spec)
    jobs = CONFIG.n_jobs if n_jobs is None else n_jobs
    logger.info(f"Cross-validating {label} with {folds.k} {folds.mode}-grouped folds on {ds.n_rows} rows")
    results = Parallel(n_jobs=jobs)(
        delayed(_run_fold)(ds, spec, row_folds, fold, 1) for fold in range(folds.k)
    )

    errors = [{"fold": r.fold, "error": r.error} for r in results if r.error is not None]
    scored = [r for r in results if r.mae is not None]
    mean_mae = None
    if scored:
        weights = np.array([r.n_test for r in scored], dtype=float)
        mean_mae = float(np.sum(weights * np.array([r.mae for r in scored])) / weights.sum())

    loglik_full = None
    if full_fit:
        try:
            loglik_full = fit_spec(ds, spec, n_jobs=jobs).loglik
        except Exception as e:
            logger.warning(f"Full-data fit failed for {label}: {type(e).__name__}: {e}")
            errors.append({"fold": None, "error": f"{type(e).__name__}: {e}"})

    return CvReport(
        label=label,
        family=spec.family,
        params=spec.model_dump(mode="json"),
        fold_mode=folds.mode,
        k=folds.k,
        seed=folds.seed,
        dataset_fingerprint=ds.fingerprint(),
        folds_fingerprint=folds.fingerprint(),
        n_rows=ds.n_rows,
        n_dropped=n_dropped,
        folds=list(results),
        mean_mae=mean_mae,
        loglik_full=loglik_full,
        loglik_kind=LOGLIK_KIND[spec.family],
        complete=not errors,
        errors=errors,
    )


# --- comparison -------------------------------------------------------------


class ComparisonRow(BaseModel):
    label: str
    family: str
    mean_mae: Optional[float]
    loglik: Optional[float]
    loglik_kind: str
    improvement_pct: Optional[float]
    is_baseline: bool
    complete: bool


class ComparisonTable(BaseModel):
    baseline: str
    rows: List[ComparisonRow]

    @property
    def complete(self) -> bool:
        return all(row.complete for row in self.rows)

    def to_text(self) -> str:
        body = [
            [
                row.label + (" (baseline)" if row.is_baseline else ""),
                row.family,
                "n/a" if row.mean_mae is None else f"{row.mean_mae:.4f}",
                "n/a" if row.loglik is None else f"{row.loglik:.2f}" + ("*" if row.loglik_kind == "pseudo" else ""),
                format_improvement(row.improvement_pct),
            ]
            for row in self.rows
        ]
        table = tabulate(body, headers=["Model", "Family", "MAE", "Log-likelihood", "Improvement"], tablefmt="github")
        notes = []
        if any(row.loglik_kind == "pseudo" for row in self.rows):
            notes.append("* Gaussian pseudo-likelihood with plug-in residual variance")
        if not self.complete:
            notes.append("Some folds failed; see the per-model reports")
        return "\n".join([table, *notes]) + "\n"


def compare(reports: Sequence[CvReport], baseline: str = "lmm") -> ComparisonTable:
    """Improvement of each model's CV MAE over the baseline's.

    ``baseline`` matches a report label first, then a family.
    """
    if not reports:
        return ComparisonTable(baseline=baseline, rows=[])
    first = reports[0]
    for report in reports[1:]:
        if report.dataset_fingerprint != first.dataset_fingerprint:
            raise FoldMismatch(f"{report.label} was evaluated on a different dataset than {first.label}")
        if report.folds_fingerprint != first.folds_fingerprint:
            raise FoldMismatch(f"{report.label} used different folds than {first.label}")

    base = next((r for r in reports if r.label == baseline), None)
    if base is None:
        base = next((r for r in reports if r.family == baseline), None)
    if base is None:
        logger.warning(f"Baseline {baseline!r} is not among the compared models")

    rows = []
    for report in reports:
        is_baseline = report is base
        pct = None
        if is_baseline:
            pct = 0.0
        elif base is not None and base.mean_mae is not None and report.mean_mae is not None:
            pct = improvement_pct(base.mean_mae, report.mean_mae)
        rows.append(
            ComparisonRow(
                label=report.label,
                family=report.family,
                mean_mae=report.mean_mae,
                loglik=report.loglik_full,
                loglik_kind=report.loglik_kind,
                improvement_pct=pct,
                is_baseline=is_baseline,
                complete=report.complete,
            )
        )
    return ComparisonTable(baseline=baseline if base is None else base.label, rows=rows)
