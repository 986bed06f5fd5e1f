"""Long-format panel data: loading, validation, transforms, folds and summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Hashable, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sklearn.model_selection import KFold

from mixed_trees.config import CONFIG
from mixed_trees.errors import (
    DataError,
    DuplicateSubjectWave,
    FoldMismatch,
    InvalidWave,
    MissingColumn,
    NonNumericResponse,
    TooFewUnits,
    UnknownVariable,
)
from mixed_trees.utils.io import atomic_write_text, stable_hash

logger = logging.getLogger(__name__)

FoldMode = Literal["subject", "observation"]


class ColumnSchema(BaseModel):
    """Column roles for a long-format CSV."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    subject: str = Field(default_factory=lambda: CONFIG.subject_col)
    wave: str = Field(default_factory=lambda: CONFIG.wave_col)
    response: str = Field(default_factory=lambda: CONFIG.response_col)
    predictors: Optional[List[str]] = None
    delimiter: str = ","
    missing_marker: str = Field(default_factory=lambda: CONFIG.missing_marker)


@dataclass(frozen=True)
class Observation:
    subject: str
    wave: int
    response: float
    predictors: Tuple[float, ...]


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Immutable long-format panel, one row per (subject, wave).

    Rows are sorted by (subject, wave) on construction. Missing predictor
    values are stored as NaN. The response is finite unless
    ``response_optional`` is set, in which case missing responses are NaN;
    such panels can be predicted but not fitted.
    """

    subject_ids: np.ndarray
    waves: np.ndarray
    response: np.ndarray
    X: np.ndarray
    variable_names: Tuple[str, ...]
    response_name: str = "BDI"
    time_name: str = "wave"
    subject_name: str = "subject"
    response_optional: bool = False

    def __post_init__(self) -> None:
        subject_ids = np.asarray(self.subject_ids).astype(str)
        waves = np.asarray(self.waves)
        response = np.asarray(self.response, dtype=float)
        names = tuple(str(name) for name in self.variable_names)
        n = subject_ids.shape[0]
        X = np.asarray(self.X, dtype=float).reshape(n, len(names)) if n else np.zeros((0, len(names)))

        if waves.shape != (n,) or response.shape != (n,):
            raise DataError("subject, wave and response columns must have equal lengths")
        if len(set(names)) != len(names):
            raise DataError(f"Predictor names must be unique: {list(names)}")
        reserved = {self.response_name, self.time_name, self.subject_name}
        clash = reserved.intersection(names)
        if clash:
            raise DataError(f"Predictor names collide with role columns: {sorted(clash)}")
        usable = np.isfinite(response)
        if self.response_optional:
            usable |= np.isnan(response)
        if n and not usable.all():
            raise DataError("response values must be finite")
        if n and (np.any(np.asarray(waves, dtype=float) != np.round(np.asarray(waves, dtype=float)))):
            raise DataError("wave indices must be integers")
        waves = waves.astype(np.int64)
        if n and waves.min() < 0:
            raise DataError("wave indices must be >= 0")

        X = np.where(np.isfinite(X), X, np.nan)
        order = (
            pd.DataFrame({"s": subject_ids, "w": waves}).sort_values(["s", "w"], kind="mergesort").index.to_numpy()
        )
        subject_ids, waves, response, X = subject_ids[order], waves[order], response[order], X[order]
        dup = np.flatnonzero((subject_ids[1:] == subject_ids[:-1]) & (waves[1:] == waves[:-1]))
        if dup.size:
            i = int(dup[0])
            raise DuplicateSubjectWave(str(subject_ids[i]), int(waves[i]))

        for arr in (subject_ids, waves, response, X):
            arr.setflags(write=False)
        object.__setattr__(self, "subject_ids", subject_ids)
        object.__setattr__(self, "waves", waves)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "variable_names", names)

    # --- shape -------------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return int(self.response.shape[0])

    def __len__(self) -> int:
        return self.n_rows

    @cached_property
    def subjects(self) -> Tuple[str, ...]:
        return tuple(str(s) for s in np.unique(self.subject_ids))

    @cached_property
    def cluster_index(self) -> np.ndarray:
        """Row -> position of its subject in ``subjects``."""
        _, codes = np.unique(self.subject_ids, return_inverse=True)
        return codes.reshape(-1)

    @property
    def rows(self) -> Iterator[Observation]:
        for i in range(self.n_rows):
            yield Observation(
                subject=str(self.subject_ids[i]),
                wave=int(self.waves[i]),
                response=float(self.response[i]),
                predictors=tuple(float(v) for v in self.X[i]),
            )

    # --- column access -----------------------------------------------------

    def _index(self, name: str) -> int:
        try:
            return self.variable_names.index(name)
        except ValueError:
            raise UnknownVariable(name) from None

    def column(self, name: str) -> np.ndarray:
        if name == self.response_name:
            return self.response
        if name == self.time_name:
            return self.waves.astype(float)
        return self.X[:, self._index(name)]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Predictor columns in the requested order, shape (n, len(names))."""
        idx = [self._index(name) for name in names]
        return self.X[:, idx]

    # --- derived datasets --------------------------------------------------

    def subset(self, rows: np.ndarray) -> "PanelDataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return replace(
            self,
            subject_ids=self.subject_ids[rows],
            waves=self.waves[rows],
            response=self.response[rows],
            X=self.X[rows],
        )

    def with_response(self, response: np.ndarray) -> "PanelDataset":
        return replace(self, response=np.asarray(response, dtype=float))

    def with_predictors(self, X: np.ndarray, names: Optional[Sequence[str]] = None) -> "PanelDataset":
        return replace(self, X=np.asarray(X, dtype=float), variable_names=tuple(names or self.variable_names))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                self.subject_name: self.subject_ids,
                self.time_name: self.waves,
                self.response_name: self.response,
            }
        )
        for j, name in enumerate(self.variable_names):
            frame[name] = self.X[:, j]
        return frame

    def fingerprint(self) -> str:
        X = self.X.astype(object)
        X[np.isnan(self.X)] = None
        payload = {
            "names": [self.subject_name, self.time_name, self.response_name, *self.variable_names],
            "subject": self.subject_ids.tolist(),
            "wave": self.waves.tolist(),
            "response": self.response.tolist(),
            "X": X.tolist(),
        }
        return stable_hash(payload)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.variable_names == other.variable_names
            and (self.response_name, self.time_name, self.subject_name)
            == (other.response_name, other.time_name, other.subject_name)
            and np.array_equal(self.subject_ids, other.subject_ids)
            and np.array_equal(self.waves, other.waves)
            and np.array_equal(self.response, other.response, equal_nan=True)
            and np.array_equal(self.X, other.X, equal_nan=True)
        )

    __hash__ = None  # type: ignore[assignment]


def fingerprint(ds: PanelDataset) -> str:
    return ds.fingerprint()


# --- CSV --------------------------------------------------------------------


def load_csv(
    path: Path | str,
    schema: Optional[ColumnSchema] = None,
    require_response: bool = True,
) -> PanelDataset:
    """Read a long-format CSV.

    Unparseable or missing predictor cells become NaN. Rows with a missing
    response are dropped with a warning; a present but non-numeric response
    raises ``NonNumericResponse``. With ``require_response=False`` the
    response column may be absent and missing responses are kept as NaN, so
    every row can be predicted.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Data file not found: {path}")

    frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    frame.columns = [str(c).strip() for c in frame.columns]
    if not require_response and schema.response not in frame.columns:
        frame[schema.response] = ""
    for col in (schema.subject, schema.wave, schema.response):
        if col not in frame.columns:
            raise MissingColumn(col, str(path))
    roles = {schema.subject, schema.wave, schema.response}
    if schema.predictors is not None:
        for col in schema.predictors:
            if col not in frame.columns:
                raise MissingColumn(col, str(path))
        predictors = list(schema.predictors)
    else:
        predictors = [c for c in frame.columns if c not in roles]
    if not predictors:
        raise MissingColumn("<predictor>", str(path))

    markers = {"", schema.missing_marker}
    cells = frame.apply(lambda col: col.str.strip())
    line_numbers = np.arange(len(cells)) + 2  # header is line 1

    missing_response = cells[schema.response].isin(markers).to_numpy()
    if require_response:
        if missing_response.any():
            logger.warning(f"Dropping {int(missing_response.sum())} rows with a missing response in {path}")
        cells = cells.loc[~missing_response]
        line_numbers = line_numbers[~missing_response]
        missing_response = np.zeros(len(cells), dtype=bool)

    response = pd.to_numeric(cells[schema.response].mask(missing_response), errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(response) & ~missing_response)
    if bad.size:
        i = int(bad[0])
        raise NonNumericResponse(int(line_numbers[i]), cells[schema.response].iloc[i])

    wave_values = pd.to_numeric(cells[schema.wave], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(wave_values) | (wave_values < 0) | (wave_values != np.round(wave_values)))
    if bad.size:
        i = int(bad[0])
        raise InvalidWave(int(line_numbers[i]), cells[schema.wave].iloc[i])

    subjects = cells[schema.subject].to_numpy(dtype=str)
    if np.any(subjects == ""):
        raise DataError(f"Empty subject id in {path}")

    X = np.column_stack(
        [
            pd.to_numeric(cells[name].mask(cells[name].isin(markers)), errors="coerce").to_numpy(dtype=float)
            for name in predictors
        ]
    ) if len(cells) else np.zeros((0, len(predictors)))

    return PanelDataset(
        subject_ids=subjects,
        waves=wave_values.astype(np.int64),
        response=response,
        X=X,
        variable_names=tuple(predictors),
        response_name=schema.response,
        time_name=schema.wave,
        subject_name=schema.subject,
        response_optional=not require_response,
    )


def write_csv(
    ds: PanelDataset,
    path: Path | str,
    delimiter: str = ",",
    missing_marker: Optional[str] = None,
) -> Path:
    marker = CONFIG.missing_marker if missing_marker is None else missing_marker
    text = ds.to_frame().to_csv(index=False, sep=delimiter, na_rep=marker, lineterminator="\n")
    return atomic_write_text(path, text)


# --- transforms -------------------------------------------------------------


def person_mean_center(ds: PanelDataset, vars: Sequence[str]) -> PanelDataset:
    """Subtract each subject's own mean (over non-missing waves) from ``vars``."""
    idx = [ds._index(name) for name in vars]
    if not idx:
        return ds
    block = pd.DataFrame(ds.X[:, idx])
    means = block.groupby(ds.subject_ids).transform("mean").to_numpy(dtype=float)
    X = ds.X.copy()
    X[:, idx] = ds.X[:, idx] - means
    return ds.with_predictors(X)


class DroppedRow(BaseModel):
    subject: str
    wave: int


class DropReport(BaseModel):
    variables: List[str]
    dropped: List[DroppedRow] = Field(default_factory=list)
    removed_subjects: List[str] = Field(default_factory=list)

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


def drop_missing(ds: PanelDataset, vars: Sequence[str]) -> Tuple[PanelDataset, DropReport]:
    """Listwise deletion of rows missing any of ``vars``."""
    names = list(dict.fromkeys(vars))
    idx = [ds._index(name) for name in names]
    if not idx:
        return ds, DropReport(variables=names)
    missing = np.isnan(ds.X[:, idx]).any(axis=1)
    if not missing.any():
        return ds, DropReport(variables=names)

    kept = ds.subset(~missing)
    removed = sorted(set(ds.subjects) - set(kept.subjects))
    report = DropReport(
        variables=names,
        dropped=[
            DroppedRow(subject=str(ds.subject_ids[i]), wave=int(ds.waves[i])) for i in np.flatnonzero(missing)
        ],
        removed_subjects=removed,
    )
    logger.info(f"drop_missing removed {report.n_dropped} rows and {len(removed)} subjects")
    return kept, report


def prospective(ds: PanelDataset) -> PanelDataset:
    """Pair each row's predictors with the same subject's response at the next observed wave."""
    if ds.n_rows < 2:
        return ds.subset(np.zeros(0, dtype=int))
    has_next = np.flatnonzero(ds.subject_ids[1:] == ds.subject_ids[:-1])
    shifted = ds.subset(has_next)
    return shifted.with_response(ds.response[has_next + 1])


# --- folds ------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of units (subjects, or (subject, wave) rows) into k folds."""

    k: int
    mode: FoldMode
    seed: int
    assignment: Dict[Hashable, int] = field(default_factory=dict)

    def unit_of(self, subject: str, wave: int) -> Hashable:
        return subject if self.mode == "subject" else (subject, wave)

    def row_folds(self, ds: PanelDataset) -> np.ndarray:
        """Fold index for every row of ``ds``."""
        out = np.empty(ds.n_rows, dtype=np.int64)
        for i, (subject, wave) in enumerate(zip(ds.subject_ids.tolist(), ds.waves.tolist())):
            unit = self.unit_of(subject, wave)
            try:
                out[i] = self.assignment[unit]
            except KeyError:
                raise FoldMismatch(f"Row ({subject}, {wave}) has no fold in this assignment") from None
        return out

    def fold_sizes(self) -> List[int]:
        return np.bincount(np.fromiter(self.assignment.values(), dtype=np.int64), minlength=self.k).tolist()

    def to_dict(self) -> dict:
        items = sorted(
            ([list(unit) if isinstance(unit, tuple) else unit, fold] for unit, fold in self.assignment.items()),
            key=lambda item: str(item[0]),
        )
        return {"k": self.k, "mode": self.mode, "seed": self.seed, "assignment": items}

    def fingerprint(self) -> str:
        return stable_hash(self.to_dict())


def make_folds(ds: PanelDataset, k: int, mode: FoldMode = "subject", seed: int = 0) -> FoldAssignment:
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    if mode == "subject":
        units: List[Hashable] = list(ds.subjects)
    elif mode == "observation":
        units = list(zip(ds.subject_ids.tolist(), ds.waves.tolist()))
    else:
        raise DataError(f"Unknown fold mode {mode!r}")
    if k > len(units):
        raise TooFewUnits(k, len(units))

    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    assignment: Dict[Hashable, int] = {}
    for fold, (_, test_idx) in enumerate(splitter.split(np.arange(len(units)))):
        for i in test_idx:
            assignment[units[i]] = fold
    return FoldAssignment(k=k, mode=mode, seed=seed, assignment=assignment)


# --- descriptive statistics -------------------------------------------------


class VariableStats(BaseModel):
    name: str
    n: int
    n_missing: int
    defined: bool
    min: Optional[float] = None
    max: Optional[float] = None
    mean: Optional[float] = None
    sd: Optional[float] = None


class DescriptiveStats(BaseModel):
    variables: List[VariableStats]
    wave_counts: Dict[int, int]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.variables])

    def get(self, name: str) -> VariableStats:
        for row in self.variables:
            if row.name == name:
                return row
        raise UnknownVariable(name)


def _describe(name: str, values: np.ndarray) -> VariableStats:
    present = values[~np.isnan(values)]
    n = int(present.size)
    if n == 0:
        return VariableStats(name=name, n=0, n_missing=int(values.size), defined=False)
    return VariableStats(
        name=name,
        n=n,
        n_missing=int(values.size - n),
        defined=True,
        min=float(present.min()),
        max=float(present.max()),
        mean=float(np.clip(present.mean(), present.min(), present.max())),
        sd=float(present.std(ddof=1)) if n > 1 else None,
    )


def summarize(ds: PanelDataset) -> DescriptiveStats:
    rows = [_describe(ds.response_name, ds.response)]
    rows += [_describe(name, ds.X[:, j]) for j, name in enumerate(ds.variable_names)]
    waves, counts = np.unique(ds.waves, return_counts=True)
    return DescriptiveStats(
        variables=rows,
        wave_counts={int(w): int(c) for w, c in zip(waves, counts)},
    )
