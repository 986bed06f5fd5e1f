"""Synthetic longitudinal panels from fully specified data-generating processes.

A ``DgpSpec`` fixes everything: covariate distributions, the fixed part
(linear with pairwise products, or a split-rule tree), random intercepts and
slopes, AR(1) noise and monotone wave dropout. ``generate`` returns the
dataset and the realized truth, so every estimator can be checked against it.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import Annotated, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.optimize import brentq
from scipy.stats import truncnorm

from mixed_trees.data.dataset import PanelDataset
from mixed_trees.errors import InvalidSpec, UnknownPreset

logger = logging.getLogger(__name__)


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CovariateSpec(_Frozen):
    """One predictor. Normals with ``low``/``high`` are truncated to that range
    with the location solved so the truncated mean equals ``mean``."""

    name: str
    dist: Literal["normal", "uniform", "binary"] = "normal"
    mean: float = 0.0
    sd: float = Field(default=1.0, gt=0.0)
    low: Optional[float] = None
    high: Optional[float] = None
    p: float = Field(default=0.5, ge=0.0, le=1.0)
    time_varying: bool = False

    @model_validator(mode="after")
    def _bounds(self) -> "CovariateSpec":
        if self.dist == "uniform" and (self.low is None or self.high is None):
            raise ValueError(f"uniform covariate {self.name} needs low and high")
        if self.low is not None and self.high is not None and not self.low < self.high:
            raise ValueError(f"covariate {self.name}: low must be below high")
        if self.dist == "normal" and self.low is not None and self.high is not None:
            if not self.low < self.mean < self.high:
                raise ValueError(f"covariate {self.name}: mean must lie inside [low, high]")
        return self

    @property
    def center(self) -> float:
        if self.dist == "uniform":
            return (float(self.low) + float(self.high)) / 2.0
        if self.dist == "binary":
            return self.p
        return self.mean


class Interaction(_Frozen):
    a: str
    b: str
    coef: float


class LinearPart(_Frozen):
    kind: Literal["linear"] = "linear"
    intercept: float = 0.0
    coefficients: Dict[str, float] = Field(default_factory=dict)
    interactions: List[Interaction] = Field(default_factory=list)
    # subtract each covariate's nominal center before applying coefficients
    center: bool = False

    @property
    def variables(self) -> List[str]:
        names = list(self.coefficients)
        for term in self.interactions:
            names += [term.a, term.b]
        return names


class TreeNodeSpec(_Frozen):
    """Leaf when ``value`` is set; otherwise rows with ``variable < threshold`` go left."""

    value: Optional[float] = None
    variable: Optional[str] = None
    threshold: Optional[float] = None
    left: Optional["TreeNodeSpec"] = None
    right: Optional["TreeNodeSpec"] = None

    @model_validator(mode="after")
    def _leaf_or_split(self) -> "TreeNodeSpec":
        split = (self.variable, self.threshold, self.left, self.right)
        if self.value is not None:
            if any(part is not None for part in split):
                raise ValueError("a leaf cannot also carry a split")
        elif any(part is None for part in split):
            raise ValueError("a split needs variable, threshold, left and right")
        return self

    @property
    def variables(self) -> List[str]:
        if self.value is not None:
            return []
        return [self.variable, *self.left.variables, *self.right.variables]

    @property
    def leaf_values(self) -> List[float]:
        if self.value is not None:
            return [self.value]
        return self.left.leaf_values + self.right.leaf_values


class TreePart(_Frozen):
    kind: Literal["tree"] = "tree"
    root: TreeNodeSpec

    @property
    def variables(self) -> List[str]:
        return self.root.variables


FixedPart = Annotated[Union[LinearPart, TreePart], Field(discriminator="kind")]


class DgpSpec(_Frozen):
    m: int = Field(default=100, ge=1)
    waves: int = Field(default=5, ge=1)
    # subjects present at each wave; monotone dropout
    retention: Optional[List[int]] = None
    # per-wave probability that a still-present subject leaves, used without retention
    dropout_prob: float = Field(default=0.0, ge=0.0, lt=1.0)
    covariates: List[CovariateSpec] = Field(default_factory=list)
    fixed_part: FixedPart = Field(default_factory=LinearPart)
    sigma_b: float = Field(default=1.0, ge=0.0)
    sigma_slope: float = Field(default=0.0, ge=0.0)
    phi: float = Field(default=0.0, gt=-1.0, lt=1.0)
    sigma: float = Field(default=1.0, ge=0.0)
    response_name: str = "BDI"
    seed: int = Field(default=0, ge=0)
    notes: str = ""


class DgpTruth(BaseModel):
    spec: DgpSpec
    subjects: List[str]
    random_intercepts: List[float]
    random_slopes: Optional[List[float]] = None
    row_subjects: List[str]
    row_waves: List[int]
    fixed: List[float]


# --- validation -------------------------------------------------------------


def check_spec(spec: DgpSpec) -> None:
    """Cross-field checks that pydantic field constraints cannot express."""
    names = [c.name for c in spec.covariates]
    if len(set(names)) != len(names):
        raise InvalidSpec(f"covariate names must be unique: {names}")
    if spec.response_name in names or spec.response_name in {"subject", "wave"}:
        raise InvalidSpec(f"response name {spec.response_name!r} collides with a column")
    unknown = sorted(set(spec.fixed_part.variables) - set(names))
    if unknown:
        raise InvalidSpec(f"fixed part references undeclared covariates {unknown}")
    if spec.retention is not None:
        r = spec.retention
        if len(r) != spec.waves:
            raise InvalidSpec(f"retention has {len(r)} entries for {spec.waves} waves")
        if r[0] != spec.m:
            raise InvalidSpec(f"retention must start at m={spec.m}, got {r[0]}")
        if any(b > a for a, b in zip(r, r[1:])) or r[-1] < 1:
            raise InvalidSpec(f"retention counts must be non-increasing and positive: {r}")


def parse_spec(payload: dict) -> DgpSpec:
    try:
        spec = DgpSpec.model_validate(payload)
    except ValidationError as exc:
        raise InvalidSpec(f"Invalid DGP spec: {exc}") from exc
    check_spec(spec)
    return spec


# --- sampling ---------------------------------------------------------------


@lru_cache(maxsize=256)
def _truncated_loc(mean: float, sd: float, low: float, high: float) -> float:
    """Location whose normal, truncated to [low, high], has mean ``mean``."""

    def gap(loc: float) -> float:
        return float(truncnorm.mean((low - loc) / sd, (high - loc) / sd, loc=loc, scale=sd)) - mean

    span = high - low
    return float(brentq(gap, low - span, high + span, xtol=1e-10))


def _draw(cov: CovariateSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    if cov.dist == "binary":
        return (rng.random(size) < cov.p).astype(float)
    if cov.dist == "uniform":
        return rng.uniform(cov.low, cov.high, size)
    if cov.low is None and cov.high is None:
        return rng.normal(cov.mean, cov.sd, size)
    low = -np.inf if cov.low is None else cov.low
    high = np.inf if cov.high is None else cov.high
    loc = cov.mean
    if np.isfinite(low) and np.isfinite(high):
        loc = _truncated_loc(cov.mean, cov.sd, low, high)
    a, b = (low - loc) / cov.sd, (high - loc) / cov.sd
    return truncnorm.rvs(a, b, loc=loc, scale=cov.sd, size=size, random_state=rng)


def _presence(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    """(m, waves) mask; once absent a subject never returns."""
    if spec.retention is not None:
        rank = rng.permutation(spec.m)
        return rank[:, None] < np.asarray(spec.retention)[None, :]
    leave = rng.random((spec.m, spec.waves)) < spec.dropout_prob
    leave[:, 0] = False
    return np.cumsum(leave, axis=1) == 0


def _eval_tree(node: TreeNodeSpec, columns: Dict[str, np.ndarray], rows: np.ndarray) -> np.ndarray:
    out = np.empty(rows.shape[0])
    if node.value is not None:
        out[:] = node.value
        return out
    go_left = columns[node.variable][rows] < node.threshold
    out[go_left] = _eval_tree(node.left, columns, rows[go_left])
    out[~go_left] = _eval_tree(node.right, columns, rows[~go_left])
    return out


def fixed_part_values(spec: DgpSpec, columns: Dict[str, np.ndarray], n: int) -> np.ndarray:
    """Noiseless fixed part f(x) for ``n`` rows of ``columns``."""
    part = spec.fixed_part
    if isinstance(part, TreePart):
        return _eval_tree(part.root, columns, np.arange(n))
    centers = {c.name: c.center if part.center else 0.0 for c in spec.covariates}
    f = np.full(n, part.intercept)
    for name, coef in part.coefficients.items():
        f += coef * (columns[name] - centers[name])
    for term in part.interactions:
        f += term.coef * (columns[term.a] - centers[term.a]) * (columns[term.b] - centers[term.b])
    return f


def _ar1_noise(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) series per subject with innovation sd ``sigma``.

    The first wave is drawn from the stationary marginal N(0, sigma^2 / (1 - phi^2)).
    """
    eta = spec.sigma * rng.standard_normal((spec.m, spec.waves))
    e = np.empty_like(eta)
    e[:, 0] = eta[:, 0] / np.sqrt(1.0 - spec.phi**2)
    for t in range(1, spec.waves):
        e[:, t] = spec.phi * e[:, t - 1] + eta[:, t]
    return e


def generate(spec: DgpSpec) -> Tuple[PanelDataset, DgpTruth]:
    """Draw one panel: y = f(x) + b_i (+ slope_i * wave) + AR(1) noise."""
    check_spec(spec)
    rng = np.random.default_rng(spec.seed)
    m, T = spec.m, spec.waves
    width = max(4, len(str(m)))
    subjects = [f"S{i + 1:0{width}d}" for i in range(m)]

    present = _presence(spec, rng)
    full: Dict[str, np.ndarray] = {}
    for cov in spec.covariates:
        if cov.time_varying:
            full[cov.name] = _draw(cov, m * T, rng).reshape(m, T)
        else:
            full[cov.name] = np.repeat(_draw(cov, m, rng)[:, None], T, axis=1)
    intercepts = rng.normal(0.0, 1.0, m) * spec.sigma_b
    slopes = rng.normal(0.0, 1.0, m) * spec.sigma_slope if spec.sigma_slope > 0 else None
    noise = _ar1_noise(spec, rng)

    subj_idx, wave_idx = np.nonzero(present)
    columns = {name: values[subj_idx, wave_idx] for name, values in full.items()}
    fixed = fixed_part_values(spec, columns, subj_idx.shape[0])
    y = fixed + intercepts[subj_idx] + noise[subj_idx, wave_idx]
    if slopes is not None:
        y = y + slopes[subj_idx] * wave_idx

    names = tuple(c.name for c in spec.covariates)
    X = np.column_stack([columns[name] for name in names]) if names else np.zeros((y.shape[0], 0))
    row_subjects = [subjects[i] for i in subj_idx.tolist()]
    ds = PanelDataset(
        subject_ids=np.array(row_subjects),
        waves=wave_idx.astype(np.int64),
        response=y,
        X=X,
        variable_names=names,
        response_name=spec.response_name,
    )
    truth = DgpTruth(
        spec=spec,
        subjects=subjects,
        random_intercepts=intercepts.tolist(),
        random_slopes=None if slopes is None else slopes.tolist(),
        row_subjects=row_subjects,
        row_waves=wave_idx.tolist(),
        fixed=fixed.tolist(),
    )
    logger.info(f"Generated {ds.n_rows} rows for {m} subjects over {T} waves (seed {spec.seed})")
    return ds, truth


# --- presets ----------------------------------------------------------------

# (range low, range high, mean, sd) of each predictor in the depression cohort
_COHORT_MOMENTS: Dict[str, Tuple[float, float, float, float]] = {
    "Age": (18, 50, 22.05, 5.80),
    "CFIPerceivedAlternatives": (0, 84, 64.65, 10.46),
    "CFIPerceivedControl": (15, 52, 37.47, 7.04),
    "ProblemFocusedCopingFlexibility": (0, 3, 0.78, 0.42),
    "EmotionFocusedCopingFlexibility": (0, 2, 0.47, 0.36),
    "Reappraisal": (0, 42, 29.39, 7.32),
    "Suppression": (0, 28, 14.68, 5.48),
    "NegativeLifeEvents": (0, 43, 8.64, 6.87),
    "Worry": (16, 80, 41.95, 13.62),
    "Brooding": (5, 20, 10.22, 3.78),
    "Pondering": (5, 20, 10.54, 4.06),
    "CopingFlexibility": (0, 1, 0.54, 0.27),
    "NegativeCognitiveStyles": (1, 6.55, 3.34, 0.92),
}
_TIME_VARYING = {"Worry", "Brooding", "Pondering", "NegativeLifeEvents"}
_COHORT_RETENTION = [185, 150, 137, 122, 113]

_COHORT_COEFFICIENTS = {
    "Age": 0.008,
    "CFIPerceivedAlternatives": -0.06,
    "CFIPerceivedControl": -0.1,
    "ProblemFocusedCopingFlexibility": -1.49,
    "EmotionFocusedCopingFlexibility": -0.19,
    "CopingFlexibility": -0.11,
    "NegativeCognitiveStyles": 1.41,
    "Reappraisal": -0.14,
    "Suppression": 0.12,
    "NegativeLifeEvents": 0.42,
    "Worry": 0.01,
    "Brooding": 0.26,
    "Pondering": 0.15,
}


def _cohort_covariate(name: str) -> CovariateSpec:
    low, high, mean, sd = _COHORT_MOMENTS[name]
    return CovariateSpec(name=name, mean=mean, sd=sd, low=low, high=high, time_varying=name in _TIME_VARYING)


def _cohort_shape() -> DgpSpec:
    return DgpSpec(
        m=185,
        waves=5,
        retention=list(_COHORT_RETENTION),
        covariates=[_cohort_covariate(name) for name in _COHORT_MOMENTS],
        fixed_part=LinearPart(
            intercept=6.9,
            coefficients=dict(_COHORT_COEFFICIENTS),
            interactions=[
                Interaction(a="Brooding", b="NegativeLifeEvents", coef=0.08),
                Interaction(a="Pondering", b="NegativeLifeEvents", coef=-0.07),
            ],
            center=True,
        ),
        sigma_b=4.0,
        sigma=3.5,
        notes="Cohort-shaped panel: independent truncated-normal covariates with the cohort's "
        "ranges, means and sds; rumination, worry and life events vary by wave, the rest are "
        "fixed at baseline. Sex is not simulated.",
    )


def _tree_2split() -> DgpSpec:
    def leaf(value: float) -> TreeNodeSpec:
        return TreeNodeSpec(value=value)

    root = TreeNodeSpec(
        variable="Brooding",
        threshold=13.0,
        left=TreeNodeSpec(variable="NegativeLifeEvents", threshold=14.0, left=leaf(5.2), right=leaf(9.6)),
        right=TreeNodeSpec(variable="CFIPerceivedControl", threshold=36.0, left=leaf(13.4), right=leaf(8.1)),
    )
    names = ["Brooding", "NegativeLifeEvents", "CFIPerceivedControl", "NegativeCognitiveStyles", "Worry"]
    return DgpSpec(
        m=100,
        waves=5,
        covariates=[_cohort_covariate(name) for name in names],
        fixed_part=TreePart(root=root),
        sigma_b=2.0,
        sigma=1.0,
        notes="Two-level split rules on rumination, life events and perceived control; "
        "independent covariates.",
    )


def _linear_interaction() -> DgpSpec:
    return DgpSpec(
        m=100,
        waves=5,
        covariates=[CovariateSpec(name=f"x{j}", time_varying=True) for j in (1, 2, 3)],
        fixed_part=LinearPart(
            intercept=2.0,
            coefficients={"x1": 1.0, "x2": -0.5, "x3": 0.25},
            interactions=[Interaction(a="x1", b="x2", coef=0.5)],
        ),
        sigma_b=1.0,
        sigma=1.0,
    )


def _ar1_strong() -> DgpSpec:
    return DgpSpec(
        m=100,
        waves=5,
        covariates=[CovariateSpec(name="x1", time_varying=True)],
        fixed_part=LinearPart(coefficients={"x1": 1.0}),
        sigma_b=1.0,
        phi=0.6,
        sigma=1.0,
    )


def _null() -> DgpSpec:
    return DgpSpec(
        m=100,
        waves=5,
        covariates=[CovariateSpec(name="x1", time_varying=True), CovariateSpec(name="x2", time_varying=True)],
        fixed_part=LinearPart(intercept=5.0),
        sigma_b=1.0,
        sigma=1.0,
    )


_PRESETS = {
    "paper-shape": _cohort_shape,
    "tree-2split": _tree_2split,
    "linear-interaction": _linear_interaction,
    "ar1-strong": _ar1_strong,
    "null": _null,
}


def preset_names() -> List[str]:
    return list(_PRESETS)


def preset(name: str) -> DgpSpec:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise UnknownPreset(name, preset_names()) from None


def with_subjects(spec: DgpSpec, m: int) -> DgpSpec:
    """Resize ``spec`` to ``m`` subjects, scaling retention counts proportionally."""
    update: Dict[str, object] = {"m": m}
    if spec.retention is not None:
        scale = m / spec.retention[0]
        counts = [max(1, int(round(c * scale))) for c in spec.retention]
        counts[0] = m
        update["retention"] = counts
    return spec.model_copy(update=update)


def wave_counts(ds: PanelDataset) -> Dict[int, int]:
    waves, counts = np.unique(ds.waves, return_counts=True)
    return {int(w): int(c) for w, c in zip(waves, counts)}


def lag1_autocorrelation(series: Sequence[np.ndarray]) -> float:
    """Pooled lag-1 autocorrelation over per-subject series."""
    x = np.concatenate([s[:-1] for s in series if len(s) > 1])
    y = np.concatenate([s[1:] for s in series if len(s) > 1])
    return float(np.corrcoef(x, y)[0, 1])
