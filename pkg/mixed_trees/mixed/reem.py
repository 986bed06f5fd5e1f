"""RE-EM trees: a regression tree for the fixed part, random effects from an LMM.

Each iteration grows a tree on the response adjusted by the current random
effects, then fits an LMM whose fixed effects are the tree's leaf indicators.
The LMM coefficients replace the leaf means and its BLUPs become the next
random effects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from mixed_trees.data.dataset import PanelDataset, make_folds
from mixed_trees.errors import DataError, MalformedModel
from mixed_trees.mixed import lmm
from mixed_trees.mixed.blocks import random_design
from mixed_trees.mixed.lmm import LmmDocument, LmmFit, LrtResult
from mixed_trees.schemas import Predictions, RandomSpec, ReemParams
from mixed_trees.trees import cart
from mixed_trees.trees.cart import CpTable, Tree, TreeDocument

logger = logging.getLogger(__name__)

AR1_ALPHA = 0.05


@dataclass(frozen=True, eq=False)
class ReemModel:
    tree: Tree
    lmm: LmmFit
    params: ReemParams
    response_name: str
    predictors: Tuple[str, ...]
    n_iter: int
    converged: bool
    trace: Tuple[float, ...]
    b_change: Tuple[float, ...]
    cp_table: Optional[CpTable] = None

    @property
    def vc(self) -> lmm.VarianceComponents:
        return self.lmm.vc

    @property
    def b(self):
        return self.lmm.b

    @property
    def loglik(self) -> float:
        return self.lmm.loglik


def _inputs(
    ds: PanelDataset, response: Optional[str], predictors: Optional[Sequence[str]]
) -> Tuple[np.ndarray, np.ndarray, Tuple[str, ...], str]:
    names = tuple(predictors) if predictors is not None else ds.variable_names
    response_name = response or ds.response_name
    y = ds.column(response_name)
    X = ds.matrix(names)
    if np.isnan(X).any():
        raise DataError("RE-EM needs complete predictor rows; run drop_missing first")
    if len(ds.subjects) < 2:
        raise DataError(f"at least 2 clusters are required, got {len(ds.subjects)}")
    return y, X, names, response_name


def leaf_design(tree: Tree, X: np.ndarray) -> Tuple[np.ndarray, List[str]]:
    """Indicator matrix of leaf membership, columns ordered like ``tree.leaf_ids``."""
    leaves = cart.apply(tree, X)
    ids = tree.leaf_ids
    L = (leaves[:, None] == ids[None, :]).astype(float)
    return L, [f"leaf_{i}" for i in ids]


def _leaf_lmm(
    tree: Tree,
    X: np.ndarray,
    y: np.ndarray,
    ds: PanelDataset,
    params: ReemParams,
    random: RandomSpec,
    start: Optional[lmm.VarianceComponents] = None,
) -> Tuple[Tree, LmmFit]:
    L, names = leaf_design(tree, X)
    fit = lmm.fit_arrays(
        y,
        L,
        ds.subject_ids,
        ds.waves,
        random=random,
        term_names=names,
        tol=params.lmm_tol,
        max_iter=params.lmm_max_iter,
        d_fixed_zero=params.constrain_d_zero,
        start=start,
    )
    return cart.with_leaf_values(tree, fit.beta), fit


def _grow_pruned(
    X: np.ndarray,
    y_star: np.ndarray,
    names: Tuple[str, ...],
    params: ReemParams,
    folds: Optional[np.ndarray],
) -> Tuple[Tree, Optional[CpTable]]:
    tree = cart.grow(X, y_star, params.tree, names)
    if folds is None:
        return tree, None
    table = cart.cp_table(tree, X, y_star, folds=folds)
    return cart.prune_one_se(tree, table), table


def fit(
    ds: PanelDataset,
    response: Optional[str] = None,
    predictors: Optional[Sequence[str]] = None,
    params: Optional[ReemParams] = None,
) -> ReemModel:
    params = params or ReemParams()
    y, X, names, response_name = _inputs(ds, response, predictors)
    random = params.random
    Z = random_design(ds.waves, random)
    codes = ds.cluster_index
    folds = make_folds(ds, params.cv_k, "subject", params.seed).row_folds(ds) if params.prune else None
    per_iteration_folds = folds if params.prune_mode == "per_iteration" else None

    logger.info(
        f"Fitting RE-EM tree on {ds.n_rows} rows, {len(ds.subjects)} clusters "
        f"(correlation={random.correlation}, prune={params.prune_mode if params.prune else 'off'})"
    )
    b = np.zeros((len(ds.subjects), random.q))
    trace: List[float] = []
    b_change: List[float] = []
    prev_tree: Optional[Tree] = None
    start: Optional[lmm.VarianceComponents] = None
    converged = False
    table: Optional[CpTable] = None
    n_iter = 0
    for n_iter in range(1, params.max_iter + 1):
        y_star = y - np.einsum("nq,nq->n", Z, b[codes])
        tree, table = _grow_pruned(X, y_star, names, params, per_iteration_folds)
        tree, fit_ = _leaf_lmm(tree, X, y, ds, params, random, start)
        b_new = fit_.b_matrix
        trace.append(fit_.loglik)
        b_change.append(float(np.linalg.norm(b_new - b)))
        logger.debug(
            f"RE-EM iteration {n_iter}: leaves={tree.n_leaves} loglik={fit_.loglik:.6f} b_change={b_change[-1]:.3g}"
        )
        same_tree = prev_tree is not None and tree.same_structure(prev_tree)
        b, start, prev_tree = b_new, fit_.vc, tree
        if len(trace) > 1 and (abs(trace[-1] - trace[-2]) < params.tol or same_tree):
            converged = True
            break

    if params.prune and params.prune_mode == "final":
        y_star = y - np.einsum("nq,nq->n", Z, b[codes])
        tree = cart.grow(X, y_star, params.tree, names)
        table = cart.cp_table(tree, X, y_star, folds=folds)
        tree, fit_ = _leaf_lmm(cart.prune_one_se(tree, table), X, y, ds, params, random, start)
        trace.append(fit_.loglik)
        b_change.append(float(np.linalg.norm(fit_.b_matrix - b)))

    if not converged:
        logger.warning(f"RE-EM did not converge in {params.max_iter} iterations")
    logger.info(f"RE-EM finished after {n_iter} iterations: {tree.n_leaves} leaves, loglik {fit_.loglik:.4f}")
    return ReemModel(
        tree=tree,
        lmm=fit_,
        params=params,
        response_name=response_name,
        predictors=names,
        n_iter=n_iter,
        converged=converged,
        trace=tuple(trace),
        b_change=tuple(b_change),
        cp_table=table,
    )


def predict(model: ReemModel, ds: PanelDataset, use_random: bool = True) -> Predictions:
    """Re-estimated leaf means plus the cluster's random effect when it was seen in training."""
    values = cart.predict(model.tree, ds.matrix(model.predictors))
    extra, seen = lmm.random_part(model.lmm, ds)
    if use_random:
        values = values + extra
    return Predictions(values=values, seen=seen)


def loglik_test_ar1(
    ds: PanelDataset,
    response: Optional[str] = None,
    predictors: Optional[Sequence[str]] = None,
    params: Optional[ReemParams] = None,
    alpha: float = AR1_ALPHA,
) -> Tuple[ReemModel, LrtResult]:
    """Likelihood-ratio test for AR(1) errors on the final leaf structure.

    The independent model is kept unless the test rejects at ``alpha``.
    """
    params = params or ReemParams()
    independent = params.model_copy(update={"random": RandomSpec(effects=params.random.effects)})
    base = fit(ds, response, predictors, independent)

    y, X, _, _ = _inputs(ds, response, predictors)
    L, names = leaf_design(base.tree, X)
    ar1_random = RandomSpec(effects=params.random.effects, correlation="ar1")
    alt = lmm.fit_arrays(
        y,
        L,
        ds.subject_ids,
        ds.waves,
        random=ar1_random,
        term_names=names,
        tol=params.lmm_tol,
        max_iter=params.lmm_max_iter,
        d_fixed_zero=params.constrain_d_zero,
        start=base.lmm.vc,
    )
    test = lmm.lr_test(base.lmm, alt, df=1)
    logger.info(f"AR(1) likelihood-ratio test: stat={test.stat:.3f} p={test.p:.4f}")
    if test.p < alpha:
        return fit(ds, response, predictors, params.model_copy(update={"random": ar1_random})), test
    return base, test


# --- serialization ----------------------------------------------------------


class ReemDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = "reem/v1"
    params: ReemParams
    response_name: str
    predictors: List[str]
    tree: TreeDocument
    lmm: LmmDocument
    n_iter: int
    converged: bool
    trace: List[float]
    b_change: List[float]


def export_json(model: ReemModel) -> str:
    doc = ReemDocument(
        params=model.params,
        response_name=model.response_name,
        predictors=list(model.predictors),
        tree=cart.to_document(model.tree),
        lmm=lmm.to_document(model.lmm),
        n_iter=model.n_iter,
        converged=model.converged,
        trace=list(model.trace),
        b_change=list(model.b_change),
    )
    return doc.model_dump_json(indent=2)


def import_json(text: str) -> ReemModel:
    try:
        doc = ReemDocument.model_validate_json(text)
    except ValidationError as exc:
        raise MalformedModel(f"Invalid reem document: {exc.error_count()} validation errors") from exc
    if doc.format != "reem/v1":
        raise MalformedModel(f"Expected format 'reem/v1', got {doc.format!r}")
    tree = cart.from_document(doc.tree)
    fit_ = lmm.from_document(doc.lmm)
    if len(fit_.beta) != tree.n_leaves:
        raise MalformedModel("leaf count does not match the leaf-indicator coefficients")
    return ReemModel(
        tree=tree,
        lmm=fit_,
        params=doc.params,
        response_name=doc.response_name,
        predictors=tuple(doc.predictors),
        n_iter=doc.n_iter,
        converged=doc.converged,
        trace=tuple(doc.trace),
        b_change=tuple(doc.b_change),
    )
