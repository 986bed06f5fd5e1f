"""Linear mixed models fitted by maximum likelihood.

The model is y_i = X_i beta + Z_i b_i + e_i with b_i ~ N(0, D) and
e_i ~ N(0, sigma2 * R_i(phi)), where R_i is an AR(1) correlation over wave
indices (the identity when errors are independent). Estimation alternates a
GLS step for beta, an EM step for (D, sigma2) and, for AR(1) errors, a
bounded one-dimensional search for phi. Every step can only raise the
likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.optimize import minimize_scalar
from scipy.stats import chi2, norm

from mixed_trees.data.dataset import PanelDataset
from mixed_trees.errors import (
    DataError,
    IncompatibleFits,
    MalformedModel,
    NegativeStatBeyondTolerance,
    SingularDesign,
    UnknownCluster,
)
from mixed_trees.mixed.blocks import ClusterBlocks, gaussian_loglik, random_design
from mixed_trees.schemas import FixedSpec, Predictions, RandomSpec

logger = logging.getLogger(__name__)

PHI_BOUNDS = (-0.95, 0.95)
_STAT_TOLERANCE = 1e-6
_BOUNDARY_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    D: np.ndarray
    sigma2: float
    phi: float = 0.0

    def __post_init__(self) -> None:
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if D.shape[0] != D.shape[1]:
            raise DataError(f"D must be square, got {D.shape}")
        D = 0.5 * (D + D.T)
        D.setflags(write=False)
        object.__setattr__(self, "D", D)
        if not self.sigma2 > 0:
            raise DataError(f"sigma2 must be positive, got {self.sigma2}")
        if not abs(self.phi) < 1:
            raise DataError(f"phi must lie in (-1, 1), got {self.phi}")

    @property
    def q(self) -> int:
        return int(self.D.shape[0])

    def is_zero(self) -> bool:
        return not np.any(self.D)


@dataclass(frozen=True, eq=False)
class LmmFit:
    term_names: Tuple[str, ...]
    beta: np.ndarray
    vc: VarianceComponents
    clusters: Tuple[str, ...]
    b_matrix: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    trace: Tuple[float, ...]
    cov_beta: np.ndarray
    random: RandomSpec
    n_obs: int
    fixed: Optional[FixedSpec] = None
    boundary: bool = False
    _index: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.clusters)})

    @property
    def b(self) -> Dict[str, np.ndarray]:
        return {c: self.b_matrix[i] for c, i in self._index.items()}

    def knows(self, cluster: str) -> bool:
        return cluster in self._index

    def effect(self, cluster: str) -> np.ndarray:
        try:
            return self.b_matrix[self._index[cluster]]
        except KeyError:
            raise UnknownCluster(cluster) from None


# --- design -----------------------------------------------------------------


def design_matrix(ds: PanelDataset, fixed: FixedSpec) -> Tuple[np.ndarray, List[str]]:
    """Intercept, main effects and pairwise products named ``"a * b"``."""
    cols = [np.ones(ds.n_rows)]
    for term in fixed.terms:
        cols.append(ds.column(term))
    for a, b in fixed.interactions:
        cols.append(ds.column(a) * ds.column(b))
    X = np.column_stack(cols)
    if np.isnan(X).any():
        raise DataError("fixed-effect design has missing values; run drop_missing on the model variables first")
    return X, fixed.term_names


# --- EM ---------------------------------------------------------------------


@dataclass
class _EmResult:
    beta: np.ndarray
    D: np.ndarray
    sigma2: float
    phi: float
    loglik: float
    n_iter: int
    converged: bool
    trace: List[float]


class _Problem:
    def __init__(self, y: np.ndarray, X: np.ndarray, blocks: ClusterBlocks, random: RandomSpec) -> None:
        self.blocks = blocks
        self.random = random
        self.y = blocks.block(y)
        self.X = blocks.block(X)
        self.N = blocks.n
        self.m = blocks.m

    def residual(self, beta: np.ndarray) -> np.ndarray:
        return self.y - self.X @ beta

    def gls(self, Vinv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        XtVi = np.einsum("mtp,mts->mps", self.X, Vinv)
        A = np.einsum("mps,msk->pk", XtVi, self.X)
        c = np.einsum("mps,ms->p", XtVi, self.y)
        return np.linalg.solve(A, c), A

    def loglik(self, beta: np.ndarray, D: np.ndarray, sigma2: float, phi: float) -> float:
        return gaussian_loglik(self.blocks, self.residual(beta), self.blocks.covariance(D, sigma2, phi))

    def blups(self, beta: np.ndarray, D: np.ndarray, Vinv: np.ndarray) -> np.ndarray:
        ZtVi = np.einsum("mtq,mts->mqs", self.blocks.Z, Vinv)
        return np.einsum("qk,mks,ms->mq", D, ZtVi, self.residual(beta))


def _project_psd(D: np.ndarray) -> np.ndarray:
    D = 0.5 * (D + D.T)
    w, v = np.linalg.eigh(D)
    if w.min() >= 0:
        return D
    return (v * np.clip(w, 0.0, None)) @ v.T


def _relative_change(old: Sequence[np.ndarray], new: Sequence[np.ndarray]) -> float:
    return max(float(np.max(np.abs(b - a) / (1.0 + np.abs(a)))) for a, b in zip(old, new))


def _profile_phi(problem: _Problem, beta: np.ndarray, D: np.ndarray, sigma2: float, phi: float) -> float:
    current = problem.loglik(beta, D, sigma2, phi)
    result = minimize_scalar(
        lambda value: -problem.loglik(beta, D, sigma2, value),
        bounds=PHI_BOUNDS,
        method="bounded",
        options={"xatol": 1e-8},
    )
    if np.isfinite(result.fun) and -result.fun > current:
        return float(result.x)
    return phi


def _em(
    problem: _Problem,
    D: np.ndarray,
    sigma2: float,
    phi: float,
    tol: float,
    max_iter: int,
    param_tol: float,
    d_fixed_zero: bool,
    sigma2_floor: float,
) -> _EmResult:
    blocks = problem.blocks
    ar1 = problem.random.correlation == "ar1"
    if d_fixed_zero:
        D = np.zeros_like(D)

    beta, _ = problem.gls(np.linalg.inv(blocks.covariance(D, sigma2, phi)))
    ll = problem.loglik(beta, D, sigma2, phi)
    trace = [ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        R = blocks.correlation(phi)
        Vinv = np.linalg.inv(blocks.covariance(D, sigma2, phi))
        beta_new, _ = problem.gls(Vinv)
        r = problem.residual(beta_new)

        if d_fixed_zero:
            b = np.zeros((blocks.m, D.shape[0]))
            D_new = D
        else:
            ZtVi = np.einsum("mtq,mts->mqs", blocks.Z, Vinv)
            b = np.einsum("qk,mks,ms->mq", D, ZtVi, r)
            ZtViZ = np.einsum("mqs,msk->mqk", ZtVi, blocks.Z)
            conditional = D[None, :, :] - np.einsum("qa,mab,bk->mqk", D, ZtViZ, D)
            D_new = _project_psd((np.einsum("mq,mk->qk", b, b) + conditional.sum(axis=0)) / blocks.m)

        eps = r - np.einsum("mtq,mq->mt", blocks.Z, b)
        Rinv = np.linalg.inv(R + blocks.padding)
        quad = float(np.einsum("mt,mts,ms->", eps, Rinv, eps))
        trace_vr = float(np.einsum("mts,mst->", Vinv, R))
        sigma2_new = max((quad + sigma2 * problem.N - sigma2 * sigma2 * trace_vr) / problem.N, sigma2_floor)

        phi_new = _profile_phi(problem, beta_new, D_new, sigma2_new, phi) if ar1 else phi
        ll_new = problem.loglik(beta_new, D_new, sigma2_new, phi_new)
        change = _relative_change(
            [beta, D, np.array([sigma2]), np.array([phi])],
            [beta_new, D_new, np.array([sigma2_new]), np.array([phi_new])],
        )
        if ll_new < ll - 1e-8 * max(1.0, abs(ll)):
            logger.debug(f"EM step {n_iter} lowered loglik by {ll - ll_new:.3g}")
        beta, D, sigma2, phi = beta_new, D_new, sigma2_new, phi_new
        delta = ll_new - ll
        ll = ll_new
        trace.append(ll)
        if abs(delta) < tol and change < param_tol:
            converged = True
            break

    # final GLS pass so beta matches the reported variance components
    beta, _ = problem.gls(np.linalg.inv(blocks.covariance(D, sigma2, phi)))
    final = problem.loglik(beta, D, sigma2, phi)
    if final > trace[-1]:
        trace[-1] = final
    return _EmResult(beta, D, sigma2, phi, trace[-1], n_iter, converged, trace)


def fit_arrays(
    y: np.ndarray,
    X: np.ndarray,
    groups: np.ndarray,
    waves: np.ndarray,
    random: Optional[RandomSpec] = None,
    term_names: Optional[Sequence[str]] = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    d_fixed_zero: bool = False,
    param_tol: float = 1e-7,
    start: Optional[VarianceComponents] = None,
    fixed: Optional[FixedSpec] = None,
) -> LmmFit:
    """ML fit of a linear mixed model from arrays.

    ``groups`` holds the cluster id of each row. The EM solution is compared
    with the fit at D = 0 and the boundary fit is returned when it is at
    least as likely.
    """
    random = random or RandomSpec()
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    if y.shape != (n,):
        raise DataError(f"response has shape {y.shape}, design has {n} rows")
    names = tuple(term_names) if term_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise DataError(f"{len(names)} term names for {p} design columns")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise DataError("LMM inputs must be finite")
    if p > n or np.linalg.matrix_rank(X) < p:
        raise SingularDesign(f"fixed-effect design of {p} columns is rank deficient on {n} rows")

    Z = random_design(waves, random)
    blocks = ClusterBlocks(groups, waves, Z)
    if blocks.m < 2:
        raise DataError(f"at least 2 clusters are required, got {blocks.m}")
    problem = _Problem(y, X, blocks, random)

    beta_ols = np.linalg.lstsq(X, y, rcond=None)[0]
    resid = y - X @ beta_ols
    total_var = float(np.var(y))
    sigma2_floor = 1e-10 * total_var if total_var > 0 else 1e-12
    s2 = max(float(resid @ resid) / n, sigma2_floor)

    if not d_fixed_zero and blocks.sizes.max() < 2:
        logger.warning("No cluster has more than one row; random-effect variance is fixed at 0")
        d_fixed_zero = True

    q = random.q
    if start is not None and start.q == q and not start.is_zero():
        D0, s20, phi0 = np.array(start.D), max(start.sigma2, sigma2_floor), start.phi
    else:
        D0, s20, phi0 = np.eye(q) * s2 / 2.0, s2 / 2.0, 0.0
    if random.correlation == "independent":
        phi0 = 0.0

    common = dict(tol=tol, max_iter=max_iter, param_tol=param_tol, sigma2_floor=sigma2_floor)
    zero = _em(problem, np.zeros((q, q)), s2, phi0, d_fixed_zero=True, **common)
    result, boundary = zero, True
    if not d_fixed_zero:
        free = _em(problem, D0, s20, phi0, d_fixed_zero=False, **common)
        if zero.loglik < free.loglik - _BOUNDARY_TOLERANCE * max(1.0, abs(free.loglik)):
            result, boundary = free, False
        else:
            logger.info("Random-effect covariance estimate is on the boundary; using D = 0")

    if not result.converged:
        logger.warning(f"LMM EM did not converge in {max_iter} iterations (last loglik {result.loglik:.6f})")

    V = blocks.covariance(result.D, result.sigma2, result.phi)
    Vinv = np.linalg.inv(V)
    _, A = problem.gls(Vinv)
    b = problem.blups(result.beta, result.D, Vinv) if not boundary else np.zeros((blocks.m, q))
    logger.debug(
        f"LMM fit: loglik={result.loglik:.4f} sigma2={result.sigma2:.4g} phi={result.phi:.3f} "
        f"iterations={result.n_iter}"
    )
    return LmmFit(
        term_names=names,
        beta=result.beta,
        vc=VarianceComponents(D=result.D, sigma2=result.sigma2, phi=result.phi),
        clusters=blocks.clusters,
        b_matrix=b,
        loglik=float(result.loglik),
        n_iter=result.n_iter,
        converged=result.converged,
        trace=tuple(result.trace),
        cov_beta=np.linalg.inv(A),
        random=random,
        n_obs=n,
        fixed=fixed,
        boundary=boundary,
    )


def fit_ml(
    ds: PanelDataset,
    fixed: FixedSpec,
    random: Optional[RandomSpec] = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    d_fixed_zero: bool = False,
    start: Optional[VarianceComponents] = None,
) -> LmmFit:
    X, names = design_matrix(ds, fixed)
    logger.info(f"Fitting LMM with {len(names)} fixed terms on {ds.n_rows} rows, {len(ds.subjects)} clusters")
    return fit_arrays(
        ds.response,
        X,
        ds.subject_ids,
        ds.waves,
        random=random,
        term_names=names,
        tol=tol,
        max_iter=max_iter,
        d_fixed_zero=d_fixed_zero,
        start=start,
        fixed=fixed,
    )


# --- prediction and likelihood on data ----------------------------------------


def _require_fixed(fit: LmmFit) -> FixedSpec:
    if fit.fixed is None:
        raise DataError("this fit was built from arrays and has no fixed-effect spec to rebuild its design")
    return fit.fixed


def random_part(fit: LmmFit, ds: PanelDataset) -> Tuple[np.ndarray, np.ndarray]:
    """Z b for rows of clusters seen in training (0 elsewhere), and the seen flags."""
    Z = random_design(ds.waves, fit.random)
    seen = np.array([fit.knows(s) for s in ds.subject_ids.tolist()], dtype=bool)
    out = np.zeros(ds.n_rows)
    if seen.any():
        rows = np.flatnonzero(seen)
        effects = np.vstack([fit.effect(s) for s in ds.subject_ids[rows].tolist()])
        out[rows] = np.einsum("nq,nq->n", Z[rows], effects)
    return out, seen


def predict(fit: LmmFit, ds: PanelDataset, use_random: bool = True) -> Predictions:
    X, _ = design_matrix(ds, _require_fixed(fit))
    values = X @ fit.beta
    extra, seen = random_part(fit, ds)
    if use_random:
        values = values + extra
    return Predictions(values=values, seen=seen)


def loglik_arrays(fit: LmmFit, y: np.ndarray, X: np.ndarray, groups: np.ndarray, waves: np.ndarray) -> float:
    blocks = ClusterBlocks(groups, waves, random_design(waves, fit.random))
    resid = blocks.block(np.asarray(y, dtype=float) - np.asarray(X, dtype=float) @ fit.beta)
    return gaussian_loglik(blocks, resid, blocks.covariance(fit.vc.D, fit.vc.sigma2, fit.vc.phi))


def loglik(fit: LmmFit, ds: PanelDataset) -> float:
    X, _ = design_matrix(ds, _require_fixed(fit))
    return loglik_arrays(fit, ds.response, X, ds.subject_ids, ds.waves)


def blup(fit: LmmFit, cluster: str, rows: Optional[PanelDataset] = None) -> np.ndarray:
    """BLUP D Z' V^-1 (y - X beta) for ``cluster``.

    Without ``rows`` the stored training BLUP is returned.
    """
    if rows is None:
        return np.array(fit.effect(cluster))
    own = rows.subset(rows.subject_ids == cluster)
    if own.n_rows == 0:
        raise UnknownCluster(cluster)
    X, _ = design_matrix(own, _require_fixed(fit))
    Z = random_design(own.waves, fit.random)
    lag = np.abs(own.waves[:, None] - own.waves[None, :]).astype(float)
    V = Z @ fit.vc.D @ Z.T + fit.vc.sigma2 * np.power(fit.vc.phi, lag)
    return fit.vc.D @ Z.T @ np.linalg.solve(V, own.response - X @ fit.beta)


# --- inference --------------------------------------------------------------


class LrtResult(BaseModel):
    stat: float = Field(ge=0.0)
    df: int = Field(ge=1)
    p: float = Field(ge=0.0, le=1.0)
    loglik_null: float
    loglik_alt: float


def lr_test(fit_null: LmmFit, fit_alt: LmmFit, df: int = 1) -> LrtResult:
    if fit_null.n_obs != fit_alt.n_obs:
        raise IncompatibleFits(f"fits use {fit_null.n_obs} and {fit_alt.n_obs} rows")
    return lr_test_values(fit_null.loglik, fit_alt.loglik, df)


def lr_test_values(loglik_null: float, loglik_alt: float, df: int = 1) -> LrtResult:
    stat = 2.0 * (loglik_alt - loglik_null)
    if stat < -_STAT_TOLERANCE:
        raise NegativeStatBeyondTolerance(stat)
    stat = max(stat, 0.0)
    return LrtResult(
        stat=stat,
        df=df,
        p=float(chi2.sf(stat, df)),
        loglik_null=loglik_null,
        loglik_alt=loglik_alt,
    )


class WaldRow(BaseModel):
    term: str
    b: float
    se: float = Field(gt=0.0)
    t: float
    p: float = Field(ge=0.0, le=1.0)


def wald_table(fit: LmmFit) -> List[WaldRow]:
    """Coefficient table with normal-reference two-sided p-values."""
    se = np.sqrt(np.diag(fit.cov_beta))
    rows = []
    for name, b, s in zip(fit.term_names, fit.beta, se):
        t = float(b / s)
        rows.append(WaldRow(term=name, b=float(b), se=float(s), t=t, p=float(2.0 * norm.sf(abs(t)))))
    return rows


def wald_frame(fit: LmmFit) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in wald_table(fit)], columns=["term", "b", "se", "t", "p"])


# --- serialization ----------------------------------------------------------


class LmmDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = "lmm/v1"
    term_names: List[str]
    beta: List[float]
    cov_beta: List[List[float]]
    D: List[List[float]]
    sigma2: float
    phi: float
    random: RandomSpec
    fixed: Optional[FixedSpec] = None
    clusters: List[str]
    b: List[List[float]]
    loglik: float
    n_iter: int
    converged: bool
    boundary: bool
    n_obs: int
    trace: List[float]
    p_value_reference: str = "normal"


def to_document(fit: LmmFit) -> LmmDocument:
    return LmmDocument(
        term_names=list(fit.term_names),
        beta=fit.beta.tolist(),
        cov_beta=fit.cov_beta.tolist(),
        D=fit.vc.D.tolist(),
        sigma2=fit.vc.sigma2,
        phi=fit.vc.phi,
        random=fit.random,
        fixed=fit.fixed,
        clusters=list(fit.clusters),
        b=fit.b_matrix.tolist(),
        loglik=fit.loglik,
        n_iter=fit.n_iter,
        converged=fit.converged,
        boundary=fit.boundary,
        n_obs=fit.n_obs,
        trace=list(fit.trace),
    )


def from_document(doc: LmmDocument) -> LmmFit:
    if doc.format != "lmm/v1":
        raise MalformedModel(f"Expected format 'lmm/v1', got {doc.format!r}")
    q = doc.random.q
    b = np.asarray(doc.b, dtype=float).reshape(len(doc.clusters), q)
    if len(doc.beta) != len(doc.term_names):
        raise MalformedModel("beta and term_names differ in length")
    if doc.fixed is not None and doc.fixed.term_names != doc.term_names:
        raise MalformedModel("term_names do not match the fixed-effect spec")
    try:
        vc = VarianceComponents(D=np.asarray(doc.D, dtype=float).reshape(q, q), sigma2=doc.sigma2, phi=doc.phi)
    except (DataError, ValueError) as exc:
        raise MalformedModel(str(exc)) from exc
    return LmmFit(
        term_names=tuple(doc.term_names),
        beta=np.asarray(doc.beta, dtype=float),
        vc=vc,
        clusters=tuple(doc.clusters),
        b_matrix=b,
        loglik=doc.loglik,
        n_iter=doc.n_iter,
        converged=doc.converged,
        trace=tuple(doc.trace),
        cov_beta=np.asarray(doc.cov_beta, dtype=float),
        random=doc.random,
        n_obs=doc.n_obs,
        fixed=doc.fixed,
        boundary=doc.boundary,
    )


def export_json(fit: LmmFit) -> str:
    return to_document(fit).model_dump_json(indent=2)


def import_json(text: str) -> LmmFit:
    try:
        doc = LmmDocument.model_validate_json(text)
    except ValidationError as exc:
        raise MalformedModel(f"Invalid lmm document: {exc.error_count()} validation errors") from exc
    try:
        return from_document(doc)
    except ValueError as exc:
        if isinstance(exc, MalformedModel):
            raise
        raise MalformedModel(str(exc)) from exc
