"""Closed-form and property checks that cut across modules.

Replication counts shrink unless MIXED_TREES_RUN_SLOW is set; the heaviest
sweeps only run when it is.
"""

from __future__ import annotations

import numpy as np
import pytest

from mixed_trees.data.dataset import make_folds
from mixed_trees.evaluators.cross_validation import cross_validate
from mixed_trees.evaluators.metrics import mae
from mixed_trees.generators.synthgen import DgpSpec, generate, preset
from mixed_trees.mixed import lmm, merf, reem
from mixed_trees.models import LmmSpec, MerfSpec, ReemSpec
from mixed_trees.schemas import FixedSpec, ForestParams, MerfParams, RandomSpec, ReemParams, TreeParams
from mixed_trees.tests.conftest import make_panel, replications, require_slow
from mixed_trees.trees import cart
from mixed_trees.trees.cart import LEAF


def _balanced_one_way(m: int, T: int, seed: int):
    rng = np.random.default_rng(seed)
    groups = np.repeat([f"c{i:02d}" for i in range(m)], T)
    waves = np.tile(np.arange(T), m)
    y = 3.0 + np.repeat(rng.normal(0.0, 2.0, m), T) + rng.normal(0.0, 1.0, m * T)
    return y, groups, waves


class TestVarianceComponentsClosedForm:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_ml_matches_anova(self, seed):
        m, T = 30, 5
        y, groups, waves = _balanced_one_way(m, T, seed)
        cluster_means = y.reshape(m, T).mean(axis=1)
        grand = y.mean()
        sigma2 = float(np.sum((y.reshape(m, T) - cluster_means[:, None]) ** 2)) / (m * (T - 1))
        between = T * float(np.sum((cluster_means - grand) ** 2)) / m
        sigma_b2 = (between - sigma2) / T
        assert sigma_b2 > 0

        fit = lmm.fit_arrays(
            y, np.ones((m * T, 1)), groups, waves, tol=1e-12, param_tol=1e-12, max_iter=5000
        )
        assert fit.beta[0] == pytest.approx(grand, rel=1e-6)
        assert fit.vc.sigma2 == pytest.approx(sigma2, rel=1e-6)
        assert fit.vc.D[0, 0] == pytest.approx(sigma_b2, rel=1e-6)
        assert np.all(np.diff(fit.trace) >= -1e-8)


class TestBlupShrinkage:
    def test_scalar_formula(self):
        rng = np.random.default_rng(4)
        for _ in range(replications(50, 8)):
            m = int(rng.integers(8, 20))
            sizes = rng.integers(1, 7, m)
            subjects = np.repeat([f"s{i:02d}" for i in range(m)], sizes)
            waves = np.concatenate([np.arange(n) for n in sizes])
            x1 = rng.normal(size=subjects.size)
            b = np.repeat(rng.normal(0.0, 1.5, m), sizes)
            y = 1.0 + 0.5 * x1 + b + rng.normal(0.0, 1.0, subjects.size)
            ds = make_panel(subjects, waves, y, x1[:, None])
            fit = lmm.fit_ml(ds, FixedSpec(terms=["x1"]))
            if fit.vc.D[0, 0] == 0.0:
                continue

            resid = ds.response - (fit.beta[0] + fit.beta[1] * ds.column("x1"))
            for subject in ds.subjects:
                own = ds.subject_ids == subject
                n_i = int(own.sum())
                shrink = fit.vc.D[0, 0] / (fit.vc.D[0, 0] + fit.vc.sigma2 / n_i)
                expected = shrink * resid[own].mean()
                assert lmm.blup(fit, subject, rows=ds)[0] == pytest.approx(expected, abs=1e-9)
                assert fit.effect(subject)[0] == pytest.approx(expected, abs=1e-9)


def _ar1_rejects(spec: DgpSpec) -> bool:
    ds, _ = generate(spec)
    null = lmm.fit_ml(ds, FixedSpec(terms=["x1"]))
    alt = lmm.fit_ml(ds, FixedSpec(terms=["x1"]), random=RandomSpec(correlation="ar1"), start=null.vc)
    return lmm.lr_test(null, alt).p < 0.05


class TestAr1Calibration:
    def test_power(self):
        reps = replications(100, 5)
        base = preset("ar1-strong")
        rejected = sum(_ar1_rejects(base.model_copy(update={"seed": seed})) for seed in range(reps))
        assert rejected / reps >= 0.8

    def test_size(self):
        require_slow()
        base = preset("ar1-strong").model_copy(update={"phi": 0.0})
        rejected = sum(_ar1_rejects(base.model_copy(update={"seed": seed})) for seed in range(200))
        assert 0.02 <= rejected / 200 <= 0.09


class TestReemReduction:
    def test_singleton_clusters_give_pruned_cart(self):
        params_tree = TreeParams(min_split=6, min_leaf=3)
        for seed in range(replications(20, 3)):
            rng = np.random.default_rng(seed)
            n = 60
            X = rng.normal(size=(n, 2))
            y = np.where(X[:, 0] > 0.0, 3.0, 0.0) + rng.normal(size=n)
            ds = make_panel([f"u{i:03d}" for i in range(n)], [0] * n, y, X, ("x1", "x2"))

            model = reem.fit(ds, params=ReemParams(tree=params_tree, cv_k=5, seed=seed))
            full = cart.grow(ds.X, ds.response, params_tree, ds.variable_names)
            reference = cart.prune_one_se(full, cart.cp_table(full, ds.X, ds.response, k=5, seed=seed))
            assert model.tree.same_structure(reference)
            assert not np.any(model.lmm.b_matrix)


class TestReemRecovery:
    def test_root_split_and_intercept_variance(self):
        reps = replications(20, 2)
        hits = 0
        for seed in range(reps):
            rng = np.random.default_rng(100 + seed)
            m, T = 100, 5
            X = rng.normal(size=(m * T, 2))
            b = np.repeat(rng.normal(0.0, 2.0, m), T)
            y = 5.0 * (X[:, 0] > 0.0) + b + rng.normal(0.0, 1.0, m * T)
            subjects = np.repeat([f"S{i:03d}" for i in range(m)], T)
            ds = make_panel(subjects, np.tile(np.arange(T), m), y, X, ("x1", "x2"))

            model = reem.fit(ds, params=ReemParams(cv_k=5, seed=seed))
            tree = model.tree
            if tree.feature[0] != LEAF and tree.variable_names[tree.feature[0]] == "x1":
                hits += 1
            assert 2.0 <= model.vc.D[0, 0] <= 6.0
        assert hits >= 0.8 * reps


class TestMaeProperties:
    def test_metric_axioms(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            a, b = rng.normal(size=n), rng.normal(size=n)
            shift, scale = rng.normal(), rng.uniform(0.1, 10.0)
            value = mae(a, b)
            assert value >= 0.0
            assert mae(b, a) == pytest.approx(value, abs=1e-12)
            assert mae(a + shift, b + shift) == pytest.approx(value, abs=1e-12)
            assert mae(scale * a, scale * b) == pytest.approx(scale * value, rel=1e-12, abs=1e-12)
        assert mae([1.5, 2.5], [1.5, 2.5]) == 0.0


class TestFullScale:
    def test_merf_converges_on_cohort_shape(self):
        require_slow()
        params = MerfParams(forest=ForestParams(n_trees=300, max_depth=3), n_iter=100)
        converged = 0
        for seed in range(20):
            ds, _ = generate(preset("paper-shape").model_copy(update={"seed": seed}))
            model = merf.fit(ds, params=params.model_copy(update={"seed": seed}))
            converged += model.converged
        assert converged >= 18

    def test_model_ordering_on_nonlinear_panels(self):
        require_slow()
        wins = 0
        for seed in range(20):
            ds, _ = generate(preset("tree-2split").model_copy(update={"seed": seed}))
            folds = make_folds(ds, k=10, seed=seed)
            specs = [
                LmmSpec(fixed=FixedSpec(terms=list(ds.variable_names))),
                ReemSpec(params=ReemParams(seed=seed)),
                MerfSpec(params=MerfParams(forest=ForestParams(n_trees=300, max_depth=3), n_iter=100, seed=seed)),
            ]
            lmm_mae, reem_mae, merf_mae = (
                cross_validate(ds, spec, folds, full_fit=False).mean_mae for spec in specs
            )
            wins += merf_mae <= reem_mae <= lmm_mae
        assert wins >= 14
