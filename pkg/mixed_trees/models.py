"""Model families behind one spec type: lmm, cart, reem and merf.

A ``ModelSpec`` is what a run config lists under ``models``. ``fit_spec`` turns
it into a ``FittedModel`` that predicts on new rows and carries the
log-likelihood reported next to CV error.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mixed_trees.data.dataset import PanelDataset
from mixed_trees.errors import DataError, MalformedModel
from mixed_trees.mixed import lmm, merf, reem
from mixed_trees.mixed.blocks import LOG_2PI
from mixed_trees.schemas import FixedSpec, MerfParams, Predictions, RandomSpec, ReemParams, TreeParams
from mixed_trees.trees import cart

logger = logging.getLogger(__name__)

Family = Literal["lmm", "cart", "reem", "merf"]
LoglikKind = Literal["ml", "plug_in", "pseudo"]


class _SpecBase(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    label: Optional[str] = None


class LmmSpec(_SpecBase):
    family: Literal["lmm"] = "lmm"
    fixed: FixedSpec = Field(default_factory=FixedSpec)
    random: RandomSpec = Field(default_factory=RandomSpec)
    tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=500, ge=1)


class CartSpec(_SpecBase):
    family: Literal["cart"] = "cart"
    predictors: Optional[List[str]] = None
    tree: TreeParams = Field(default_factory=TreeParams)
    prune: bool = True
    cv_k: int = Field(default=10, ge=2)
    seed: int = Field(default=0, ge=0)


class ReemSpec(_SpecBase):
    family: Literal["reem"] = "reem"
    predictors: Optional[List[str]] = None
    params: ReemParams = Field(default_factory=ReemParams)
    # Keep AR(1) errors only when the likelihood-ratio test rejects independence.
    test_ar1: bool = False


class MerfSpec(_SpecBase):
    family: Literal["merf"] = "merf"
    predictors: Optional[List[str]] = None
    params: MerfParams = Field(default_factory=MerfParams)


ModelSpec = Annotated[Union[LmmSpec, CartSpec, ReemSpec, MerfSpec], Field(discriminator="family")]


def spec_label(spec: ModelSpec) -> str:
    return spec.label or spec.family


def used_variables(spec: ModelSpec, ds: PanelDataset) -> List[str]:
    """Predictors ``spec`` reads; rows missing any of them cannot be used."""
    if isinstance(spec, LmmSpec):
        return list(spec.fixed.terms)
    return list(spec.predictors) if spec.predictors is not None else list(ds.variable_names)


def with_seed(spec: ModelSpec, seed: int) -> ModelSpec:
    """Copy of ``spec`` whose stochastic parts draw from ``seed``."""
    if isinstance(spec, CartSpec):
        return spec.model_copy(update={"seed": seed})
    if isinstance(spec, ReemSpec):
        return spec.model_copy(update={"params": spec.params.model_copy(update={"seed": seed})})
    if isinstance(spec, MerfSpec):
        return spec.model_copy(update={"params": spec.params.model_copy(update={"seed": seed})})
    return spec


@dataclass(frozen=True, eq=False)
class FittedModel:
    family: Family
    label: str
    model: Any
    loglik: Optional[float]
    loglik_kind: LoglikKind
    extras: Dict[str, Any] = field(default_factory=dict)

    def predict(self, ds: PanelDataset, use_random: bool = True) -> Predictions:
        if self.family == "lmm":
            return lmm.predict(self.model, ds, use_random)
        if self.family == "reem":
            return reem.predict(self.model, ds, use_random)
        if self.family == "merf":
            return merf.predict(self.model, ds, use_random)
        tree = self.model
        values = cart.predict(tree, ds.matrix(tree.variable_names))
        return Predictions(values=values, seen=np.zeros(ds.n_rows, dtype=bool))

    @property
    def tree(self) -> Optional[cart.Tree]:
        """The displayable tree for tree families."""
        if self.family == "cart":
            return self.model
        if self.family == "reem":
            return self.model.tree
        if self.family == "merf":
            return merf.representative_tree(self.model) if self.model.train_X is not None else None
        return None


def pseudo_loglik(resid: np.ndarray) -> float:
    """Gaussian log-likelihood of residuals with the plug-in variance mean(resid**2)."""
    n = resid.shape[0]
    sigma2 = max(float(np.mean(resid**2)), 1e-12)
    return -0.5 * n * (LOG_2PI + np.log(sigma2) + 1.0)


def _fit_cart(ds: PanelDataset, spec: CartSpec) -> FittedModel:
    names = used_variables(spec, ds)
    X = ds.matrix(names)
    if np.isnan(X).any():
        raise DataError("CART needs complete predictor rows; run drop_missing first")
    tree = cart.grow(X, ds.response, spec.tree, names)
    extras: Dict[str, Any] = {}
    if spec.prune:
        table = cart.cp_table(tree, X, ds.response, k=spec.cv_k, seed=spec.seed)
        tree = cart.prune_one_se(tree, table)
        extras["cp_table"] = table
    resid = ds.response - cart.predict(tree, X)
    logger.info(f"Fitted CART with {tree.n_leaves} leaves on {ds.n_rows} rows")
    return FittedModel("cart", spec_label(spec), tree, pseudo_loglik(resid), "pseudo", extras)


def fit_spec(ds: PanelDataset, spec: ModelSpec, n_jobs: Optional[int] = None) -> FittedModel:
    label = spec_label(spec)
    if isinstance(spec, LmmSpec):
        fit = lmm.fit_ml(ds, spec.fixed, spec.random, tol=spec.tol, max_iter=spec.max_iter)
        return FittedModel("lmm", label, fit, fit.loglik, "ml")
    if isinstance(spec, CartSpec):
        return _fit_cart(ds, spec)
    if isinstance(spec, ReemSpec):
        if spec.test_ar1:
            model, test = reem.loglik_test_ar1(ds, predictors=spec.predictors, params=spec.params)
            extras: Dict[str, Any] = {"ar1_test": test, "cp_table": model.cp_table}
        else:
            model = reem.fit(ds, predictors=spec.predictors, params=spec.params)
            extras = {"cp_table": model.cp_table}
        return FittedModel("reem", label, model, model.loglik, "ml", extras)
    if isinstance(spec, MerfSpec):
        model = merf.fit(ds, predictors=spec.predictors, params=spec.params, n_jobs=n_jobs)
        return FittedModel("merf", label, model, model.loglik, "plug_in")
    raise DataError(f"Unknown model family {getattr(spec, 'family', spec)!r}")


# --- model files ------------------------------------------------------------


def dump_model(fitted: FittedModel) -> str:
    if fitted.family == "lmm":
        return lmm.export_json(fitted.model)
    if fitted.family == "cart":
        return cart.export_json(fitted.model)
    if fitted.family == "reem":
        return reem.export_json(fitted.model)
    return merf.export_json(fitted.model)


def load_model(text: str) -> FittedModel:
    """Read any model document, dispatching on its ``format`` key."""
    try:
        fmt = json.loads(text).get("format")
    except (json.JSONDecodeError, AttributeError) as exc:
        raise MalformedModel(f"Model file is not a JSON object: {exc}") from exc
    if fmt == "lmm/v1":
        fit = lmm.import_json(text)
        return FittedModel("lmm", "lmm", fit, fit.loglik, "ml")
    if fmt == "tree/v1":
        return FittedModel("cart", "cart", cart.import_json(text), None, "pseudo")
    if fmt == "reem/v1":
        model = reem.import_json(text)
        return FittedModel("reem", "reem", model, model.loglik, "ml")
    if fmt == "merf/v1":
        model = merf.import_json(text)
        return FittedModel("merf", "merf", model, model.loglik, "plug_in")
    raise MalformedModel(f"Unknown model format {fmt!r}")
