"""Mixed effects random forests.

The fixed part is a bagged forest fitted to the response minus the current
random effects. Random effects, D and sigma2 are then updated in closed form
from the forest's out-of-bag predictions, and a generalized log-likelihood
(GLL) tracks convergence.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from mixed_trees.data.dataset import PanelDataset, make_folds
from mixed_trees.errors import DataError, MalformedModel, UnknownCluster
from mixed_trees.mixed.blocks import ClusterBlocks, gaussian_loglik, random_design
from mixed_trees.mixed.lmm import VarianceComponents
from mixed_trees.schemas import MerfParams, Predictions
from mixed_trees.trees import forest as forest_mod
from mixed_trees.trees.cart import Tree
from mixed_trees.trees.forest import Forest, ForestDocument

logger = logging.getLogger(__name__)

_RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class MerfModel:
    forest: Forest
    vc: VarianceComponents
    clusters: Tuple[str, ...]
    b_matrix: np.ndarray
    gll_trace: Tuple[float, ...]
    n_iter_run: int
    converged: bool
    params: MerfParams
    response_name: str
    predictors: Tuple[str, ...]
    loglik: float
    oob_fallbacks: int = 0
    # training predictors, kept in memory only
    train_X: Optional[np.ndarray] = None

    @property
    def b(self) -> Dict[str, np.ndarray]:
        return {c: self.b_matrix[i] for i, c in enumerate(self.clusters)}

    def effect(self, cluster: str) -> np.ndarray:
        try:
            return self.b_matrix[self.clusters.index(cluster)]
        except ValueError:
            raise UnknownCluster(cluster) from None


def iteration_seed(seed: int, iteration: int) -> int:
    """Forest seed for outer iteration ``iteration``; the first iteration uses ``seed`` itself."""
    if iteration == 0:
        return int(seed)
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _stabilize(D: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(D)
        return D
    except np.linalg.LinAlgError:
        logger.warning(f"Random-effect covariance lost rank; adding {_RIDGE:g} to its diagonal")
        return D + _RIDGE * np.eye(D.shape[0])


def _gll(eps: np.ndarray, b: np.ndarray, D: np.ndarray, sigma2: float, n: int, with_d: bool) -> float:
    value = float(np.einsum("mt,mt->", eps, eps)) / sigma2 + n * np.log(sigma2)
    if with_d:
        _, logdet = np.linalg.slogdet(D)
        value += float(np.einsum("mq,qk,mk->", b, np.linalg.inv(D), b)) + b.shape[0] * logdet
    return value


def fit(
    ds: PanelDataset,
    response: Optional[str] = None,
    predictors: Optional[Sequence[str]] = None,
    params: Optional[MerfParams] = None,
    n_jobs: Optional[int] = None,
) -> MerfModel:
    params = params or MerfParams()
    names = tuple(predictors) if predictors is not None else ds.variable_names
    response_name = response or ds.response_name
    y = ds.column(response_name)
    X = ds.matrix(names)
    if np.isnan(X).any():
        raise DataError("MERF needs complete predictor rows; run drop_missing first")
    if len(ds.subjects) < 2:
        raise DataError(f"at least 2 clusters are required, got {len(ds.subjects)}")

    random = params.random
    q = random.q
    blocks = ClusterBlocks(ds.subject_ids, ds.waves, random_design(ds.waves, random))
    Zb = blocks.Z
    n, m = blocks.n, blocks.m
    total_var = float(np.var(y))
    scale = total_var if total_var > 0 else 1e-8
    sigma2_floor = 1e-10 * scale
    fixed_d = params.freeze_b or params.constrain_d_zero
    D = np.zeros((q, q)) if params.constrain_d_zero else np.eye(q) * scale / 2.0
    sigma2 = scale / 2.0
    b = np.zeros((m, q))
    y_blocked = blocks.block(y)

    logger.info(
        f"Fitting MERF on {n} rows, {m} clusters: {params.forest.n_trees} trees, "
        f"depth {params.forest.max_depth}, up to {params.n_iter} iterations"
    )
    gll_trace: List[float] = []
    converged = False
    fitted: Optional[Forest] = None
    f_hat = np.zeros(n)
    fallbacks = 0
    for r in range(params.n_iter):
        y_star = y - blocks.unblock(np.einsum("mtq,mq->mt", Zb, b))
        forest_params = params.forest.model_copy(update={"seed": iteration_seed(params.seed, r)})
        fitted = forest_mod.fit(X, y_star, forest_params, names, n_jobs=n_jobs)
        f_hat, report = forest_mod.oob_predict(fitted, X)
        fallbacks = report.n_fallback

        resid = y_blocked - blocks.block(f_hat)
        Vinv = np.linalg.inv(blocks.covariance(D, sigma2, 0.0))
        if params.freeze_b or params.constrain_d_zero:
            b_new = np.zeros((m, q))
        else:
            ZtVi = np.einsum("mtq,mts->mqs", Zb, Vinv)
            b_new = np.einsum("qk,mks,ms->mq", D, ZtVi, resid)
        eps = resid - np.einsum("mtq,mq->mt", Zb, b_new)
        trace_vinv = float(np.einsum("mtt,mt->", Vinv, blocks.mask))
        sigma2_new = max(
            (float(np.einsum("mt,mt->", eps, eps)) + sigma2 * (n - sigma2 * trace_vinv)) / n,
            sigma2_floor,
        )
        if fixed_d:
            D_new = D
        else:
            ZtViZ = np.einsum("mqs,msk->mqk", ZtVi, Zb)
            conditional = D[None, :, :] - np.einsum("qa,mab,bk->mqk", D, ZtViZ, D)
            D_new = _stabilize((np.einsum("mq,mk->qk", b_new, b_new) + conditional.sum(axis=0)) / m)

        b, sigma2, D = b_new, sigma2_new, D_new
        gll = _gll(eps, b, D, sigma2, n, with_d=not params.constrain_d_zero and not params.freeze_b)
        gll_trace.append(gll)
        logger.debug(f"MERF iteration {r + 1}: GLL={gll:.6f} sigma2={sigma2:.4g} D={np.diag(D)}")
        if len(gll_trace) > 1:
            prev = gll_trace[-2]
            if abs(gll - prev) / (1.0 + abs(prev)) < params.gll_tol:
                converged = True
                break

    if not converged and params.n_iter > 1:
        logger.warning(f"MERF GLL did not stabilize within {params.n_iter} iterations")
    assert fitted is not None

    resid = y_blocked - blocks.block(f_hat)
    loglik = gaussian_loglik(blocks, resid, blocks.covariance(D, sigma2, 0.0))
    logger.info(f"MERF finished after {len(gll_trace)} iterations: sigma2={sigma2:.4g}, loglik={loglik:.4f}")
    return MerfModel(
        forest=fitted,
        vc=VarianceComponents(D=D, sigma2=sigma2, phi=0.0),
        clusters=blocks.clusters,
        b_matrix=b,
        gll_trace=tuple(gll_trace),
        n_iter_run=len(gll_trace),
        converged=converged,
        params=params,
        response_name=response_name,
        predictors=names,
        loglik=float(loglik),
        oob_fallbacks=fallbacks,
        train_X=np.array(X),
    )


def predict(model: MerfModel, ds: PanelDataset, use_random: bool = True) -> Predictions:
    """Full-forest prediction plus Z b for clusters seen in training."""
    values = forest_mod.predict(model.forest, ds.matrix(model.predictors))
    index = {c: i for i, c in enumerate(model.clusters)}
    seen = np.array([s in index for s in ds.subject_ids.tolist()], dtype=bool)
    if use_random and seen.any():
        rows = np.flatnonzero(seen)
        Z = random_design(ds.waves[rows], model.params.random)
        effects = model.b_matrix[[index[s] for s in ds.subject_ids[rows].tolist()]]
        values = values.copy()
        values[rows] += np.einsum("nq,nq->n", Z, effects)
    return Predictions(values=values, seen=seen)


def importance(model: MerfModel) -> List[Tuple[str, float]]:
    return forest_mod.importance(model.forest)


def representative_tree(model: MerfModel, X: Optional[np.ndarray] = None) -> Tree:
    """Forest member whose predictions deviate least (mean absolute) from the forest's."""
    X = model.train_X if X is None else np.asarray(X, dtype=float)
    if X is None:
        raise DataError("representative_tree needs the training predictors of an imported model")
    members = forest_mod.member_predictions(model.forest, X)
    deviation = np.abs(members - members.mean(axis=0)).mean(axis=1)
    return model.forest.trees[int(np.argmin(deviation))]


# --- grid search ------------------------------------------------------------


class MerfGrid(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_trees: List[int] = Field(default_factory=lambda: [300], min_length=1)
    max_depth: List[int] = Field(default_factory=lambda: [3], min_length=1)
    n_iter: List[int] = Field(default_factory=lambda: [100], min_length=1)


class GridRow(BaseModel):
    n_trees: int
    max_depth: int
    n_iter: int
    mae: Optional[float]
    complete: bool


def grid_search(
    ds: PanelDataset,
    response: Optional[str] = None,
    predictors: Optional[Sequence[str]] = None,
    grid: Optional[MerfGrid] = None,
    k: int = 10,
    seed: int = 0,
    base: Optional[MerfParams] = None,
) -> Tuple[MerfParams, List[GridRow]]:
    """Subject-grouped k-fold CV MAE for every grid cell.

    Ties go to fewer trees, then smaller depth, then fewer iterations.
    """
    from mixed_trees.evaluators.cross_validation import cross_validate
    from mixed_trees.models import MerfSpec

    grid = grid or MerfGrid()
    base = base or MerfParams()
    if response is not None and response != ds.response_name:
        ds = ds.with_response(ds.column(response))
    folds = make_folds(ds, k, "subject", seed)

    candidates: List[Tuple[GridRow, MerfParams]] = []
    for n_trees, depth, n_iter in itertools.product(
        sorted(set(grid.n_trees)), sorted(set(grid.max_depth)), sorted(set(grid.n_iter))
    ):
        params = base.model_copy(
            update={
                "forest": base.forest.model_copy(update={"n_trees": n_trees, "max_depth": depth}),
                "n_iter": n_iter,
                "seed": seed,
            }
        )
        spec = MerfSpec(predictors=list(predictors) if predictors is not None else None, params=params)
        report = cross_validate(ds, spec, folds, full_fit=False)
        row = GridRow(n_trees=n_trees, max_depth=depth, n_iter=n_iter, mae=report.mean_mae, complete=report.complete)
        logger.info(f"MERF grid cell trees={n_trees} depth={depth} iterations={n_iter}: MAE={report.mean_mae}")
        candidates.append((row, params))

    scored = [(row, params) for row, params in candidates if row.mae is not None]
    if not scored:
        raise DataError("every MERF grid cell failed")
    _, best_params = min(
        scored, key=lambda item: (item[0].mae, item[0].n_trees, item[0].max_depth, item[0].n_iter)
    )
    return best_params, [row for row, _ in candidates]


# --- serialization ----------------------------------------------------------


class MerfDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = "merf/v1"
    params: MerfParams
    response_name: str
    predictors: List[str]
    forest: ForestDocument
    D: List[List[float]]
    sigma2: float
    clusters: List[str]
    b: List[List[float]]
    gll_trace: List[float]
    n_iter_run: int
    converged: bool
    loglik: float
    oob_fallbacks: int = 0


def export_json(model: MerfModel) -> str:
    doc = MerfDocument(
        params=model.params,
        response_name=model.response_name,
        predictors=list(model.predictors),
        forest=forest_mod.to_document(model.forest),
        D=model.vc.D.tolist(),
        sigma2=model.vc.sigma2,
        clusters=list(model.clusters),
        b=model.b_matrix.tolist(),
        gll_trace=list(model.gll_trace),
        n_iter_run=model.n_iter_run,
        converged=model.converged,
        loglik=model.loglik,
        oob_fallbacks=model.oob_fallbacks,
    )
    return doc.model_dump_json(indent=2)


def import_json(text: str) -> MerfModel:
    try:
        doc = MerfDocument.model_validate_json(text)
    except ValidationError as exc:
        raise MalformedModel(f"Invalid merf document: {exc.error_count()} validation errors") from exc
    if doc.format != "merf/v1":
        raise MalformedModel(f"Expected format 'merf/v1', got {doc.format!r}")
    q = doc.params.random.q
    try:
        vc = VarianceComponents(D=np.asarray(doc.D, dtype=float).reshape(q, q), sigma2=doc.sigma2)
        b = np.asarray(doc.b, dtype=float).reshape(len(doc.clusters), q)
    except ValueError as exc:
        raise MalformedModel(str(exc)) from exc
    return MerfModel(
        forest=forest_mod.from_document(doc.forest),
        vc=vc,
        clusters=tuple(doc.clusters),
        b_matrix=b,
        gll_trace=tuple(doc.gll_trace),
        n_iter_run=doc.n_iter_run,
        converged=doc.converged,
        params=doc.params,
        response_name=doc.response_name,
        predictors=tuple(doc.predictors),
        loglik=doc.loglik,
        oob_fallbacks=doc.oob_fallbacks,
    )
