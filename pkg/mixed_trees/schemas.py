"""Hyperparameter and model-term schemas shared across estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TreeParams(_Frozen):
    """Growth controls for a single regression tree.

    A node is splittable when it holds at least ``min_split`` rows, so the
    default of 21 means "more than 20". A split is kept only if it reduces the
    node SSE by more than ``cp`` times the root SSE.
    """

    cp: float = Field(default=0.001, ge=0.0)
    min_split: int = Field(default=21, ge=2)
    min_leaf: int = Field(default=7, ge=1)
    max_depth: Optional[int] = Field(default=None, ge=0)


class ForestParams(_Frozen):
    n_trees: int = Field(default=300, ge=1)
    max_depth: Optional[int] = Field(default=3, ge=0)
    mtry: Optional[int] = Field(default=None, ge=1)
    min_leaf: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    # Disabling the bootstrap turns the ensemble into plain CART; used by tests.
    bootstrap: bool = True

    def tree_params(self) -> TreeParams:
        return TreeParams(cp=0.0, min_split=2, min_leaf=self.min_leaf, max_depth=self.max_depth)


class RandomSpec(_Frozen):
    effects: List[Literal["intercept", "wave"]] = Field(default_factory=lambda: ["intercept"])
    correlation: Literal["independent", "ar1"] = "independent"

    @field_validator("effects")
    @classmethod
    def _intercept_first(cls, value: List[str]) -> List[str]:
        if "intercept" not in value:
            raise ValueError("a random intercept is required")
        if len(set(value)) != len(value):
            raise ValueError("random effects must not repeat")
        return sorted(value, key=lambda name: 0 if name == "intercept" else 1)

    @property
    def q(self) -> int:
        return len(self.effects)

    @property
    def has_slope(self) -> bool:
        return "wave" in self.effects


class FixedSpec(_Frozen):
    """Fixed-effect terms: main effects plus pairwise products.

    The intercept is always included.
    """

    terms: List[str] = Field(default_factory=list)
    interactions: List[Tuple[str, str]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _products_reference_mains(self) -> "FixedSpec":
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("fixed terms must not repeat")
        declared = set(self.terms)
        for a, b in self.interactions:
            missing = [name for name in (a, b) if name not in declared]
            if missing:
                raise ValueError(f"interaction {a} * {b} references undeclared main effects {missing}")
            if a == b:
                raise ValueError(f"interaction {a} * {b} is not a pairwise product")
        return self

    @property
    def variables(self) -> List[str]:
        return list(self.terms)

    @property
    def term_names(self) -> List[str]:
        return ["(Intercept)", *self.terms, *(f"{a} * {b}" for a, b in self.interactions)]


class ReemParams(_Frozen):
    tree: TreeParams = Field(default_factory=TreeParams)
    random: RandomSpec = Field(default_factory=RandomSpec)
    tol: float = Field(default=1e-6, gt=0.0)
    max_iter: int = Field(default=100, ge=1)
    prune: bool = True
    prune_mode: Literal["per_iteration", "final"] = "per_iteration"
    cv_k: int = Field(default=10, ge=2)
    seed: int = Field(default=0, ge=0)
    constrain_d_zero: bool = False
    lmm_tol: float = Field(default=1e-8, gt=0.0)
    lmm_max_iter: int = Field(default=500, ge=1)


class MerfParams(_Frozen):
    forest: ForestParams = Field(default_factory=ForestParams)
    n_iter: int = Field(default=100, ge=1)
    gll_tol: float = Field(default=1e-4, gt=0.0)
    random: RandomSpec = Field(default_factory=RandomSpec)
    seed: int = Field(default=0, ge=0)
    # Test hooks: keep b at zero, or keep D at zero, for the whole fit.
    freeze_b: bool = False
    constrain_d_zero: bool = False

    @field_validator("random")
    @classmethod
    def _independent_only(cls, value: RandomSpec) -> RandomSpec:
        if value.correlation != "independent":
            raise ValueError("MERF supports independent errors only")
        return value


@dataclass(frozen=True, eq=False)
class Predictions:
    """Point predictions with a per-row flag for clusters seen in training."""

    values: np.ndarray
    seen: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_unseen(self) -> int:
        return int((~self.seen).sum())
