"""Bagged regression forest with observation-level bootstrap and out-of-bag bookkeeping."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from mixed_trees.config import CONFIG
from mixed_trees.errors import DataError, MalformedModel
from mixed_trees.schemas import ForestParams
from mixed_trees.trees import cart
from mixed_trees.trees.cart import LEAF, Tree, TreeDocument

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Forest:
    trees: Tuple[Tree, ...]
    inbag: np.ndarray  # (n_trees, n_train) bootstrap multiplicities
    params: ForestParams
    variable_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        inbag = np.asarray(self.inbag, dtype=np.int64)
        if inbag.ndim != 2 or inbag.shape[0] != len(self.trees):
            raise DataError(f"inbag shape {inbag.shape} does not match {len(self.trees)} trees")
        inbag.setflags(write=False)
        object.__setattr__(self, "inbag", inbag)
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "variable_names", tuple(self.variable_names))

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_train(self) -> int:
        return int(self.inbag.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Forest):
            return NotImplemented
        return (
            self.params == other.params
            and self.variable_names == other.variable_names
            and np.array_equal(self.inbag, other.inbag)
            and len(self.trees) == len(other.trees)
            and all(a == b for a, b in zip(self.trees, other.trees))
        )

    __hash__ = None  # type: ignore[assignment]


def member_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for tree ``index``; fitting order cannot change it."""
    return np.random.default_rng([seed, index])


def _grow_member(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    names: Tuple[str, ...],
    mtry: int,
    index: int,
) -> Tuple[Tree, np.ndarray]:
    rng = member_rng(params.seed, index)
    n = y.shape[0]
    if params.bootstrap:
        sample = np.sort(rng.integers(0, n, size=n))
    else:
        sample = np.arange(n)
    counts = np.bincount(sample, minlength=n)
    tree = cart.grow(X, y, params.tree_params(), names, rows=sample, mtry=mtry, rng=rng)
    return tree, counts


def fit(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    variable_names: Optional[Sequence[str]] = None,
    n_jobs: Optional[int] = None,
) -> Forest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < 2:
        raise DataError(f"forest needs at least 2 rows, got {n}")
    names = tuple(variable_names) if variable_names is not None else tuple(f"x{j}" for j in range(p))
    mtry = params.mtry if params.mtry is not None else p
    if mtry > p:
        raise DataError(f"mtry={mtry} exceeds the {p} available predictors")

    jobs = CONFIG.n_jobs if n_jobs is None else n_jobs
    members = Parallel(n_jobs=jobs)(
        delayed(_grow_member)(X, y, params, names, mtry, index) for index in range(params.n_trees)
    )
    trees = tuple(tree for tree, _ in members)
    inbag = np.vstack([counts for _, counts in members])
    logger.debug(f"Fitted forest of {len(trees)} trees on {n} rows (mtry={mtry})")
    return Forest(trees=trees, inbag=inbag, params=params, variable_names=names)


def member_predictions(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Per-tree predictions, shape (n_trees, n_rows)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.vstack([cart.predict(tree, X) for tree in forest.trees])


def predict(forest: Forest, X: np.ndarray) -> np.ndarray:
    return member_predictions(forest, X).mean(axis=0)


def predict_row(forest: Forest, row: Sequence[float]) -> float:
    return float(predict(forest, np.asarray(row, dtype=float)[None, :])[0])


class OobReport(BaseModel):
    n_rows: int
    n_fallback: int
    fallback_rows: List[int] = Field(default_factory=list)
    mean_oob_trees: float


def oob_predict(forest: Forest, X: np.ndarray) -> Tuple[np.ndarray, OobReport]:
    """Mean over trees whose bag excludes each row.

    Rows that are in every bag fall back to the full-forest prediction and are
    listed in the report.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != forest.n_train:
        raise DataError(f"oob_predict needs the {forest.n_train} training rows, got {X.shape[0]}")
    preds = member_predictions(forest, X)
    oob = forest.inbag == 0
    n_oob = oob.sum(axis=0)
    sums = np.where(oob, preds, 0.0).sum(axis=0)
    fallback = n_oob == 0
    values = np.where(fallback, preds.mean(axis=0), sums / np.maximum(n_oob, 1))
    if fallback.any():
        logger.debug(f"{int(fallback.sum())} rows were in-bag for every tree; using full-forest predictions")
    report = OobReport(
        n_rows=int(X.shape[0]),
        n_fallback=int(fallback.sum()),
        fallback_rows=np.flatnonzero(fallback).tolist(),
        mean_oob_trees=float(n_oob.mean()),
    )
    return values, report


def importance(forest: Forest) -> List[Tuple[str, float]]:
    """Impurity importance: summed SSE reductions per variable, normalized to 1."""
    p = len(forest.variable_names)
    totals = np.zeros(p)
    for tree in forest.trees:
        internal = tree.feature != LEAF
        np.add.at(totals, tree.feature[internal], tree.improvement[internal])
    total = totals.sum()
    scores = totals / total if total > 0 else np.zeros(p)
    order = sorted(range(p), key=lambda j: (-scores[j], j))
    return [(forest.variable_names[j], float(scores[j])) for j in order]


# --- serialization ----------------------------------------------------------


class ForestDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = "forest/v1"
    params: ForestParams
    variable_names: List[str]
    inbag: List[List[int]]
    trees: List[TreeDocument] = Field(min_length=1)


def to_document(forest: Forest) -> ForestDocument:
    return ForestDocument(
        params=forest.params,
        variable_names=list(forest.variable_names),
        inbag=forest.inbag.tolist(),
        trees=[cart.to_document(tree) for tree in forest.trees],
    )


def from_document(doc: ForestDocument) -> Forest:
    if doc.format != "forest/v1":
        raise MalformedModel(f"Expected format 'forest/v1', got {doc.format!r}")
    trees = tuple(cart.from_document(tree) for tree in doc.trees)
    for tree in trees:
        if list(tree.variable_names) != list(doc.variable_names):
            raise MalformedModel("forest member variable names differ from the forest's")
    try:
        return Forest(trees=trees, inbag=np.asarray(doc.inbag), params=doc.params, variable_names=doc.variable_names)
    except DataError as exc:
        raise MalformedModel(str(exc)) from exc


def export_json(forest: Forest) -> str:
    return to_document(forest).model_dump_json(indent=2)


def import_json(text: str) -> Forest:
    try:
        doc = ForestDocument.model_validate_json(text)
    except ValidationError as exc:
        raise MalformedModel(f"Invalid forest document: {exc.error_count()} validation errors") from exc
    return from_document(doc)
