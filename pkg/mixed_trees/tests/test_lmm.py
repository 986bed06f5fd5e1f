from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import chi2, multivariate_normal

from mixed_trees.errors import (
    DataError,
    IncompatibleFits,
    MalformedModel,
    NegativeStatBeyondTolerance,
    SingularDesign,
    UnknownCluster,
)
from mixed_trees.mixed import lmm
from mixed_trees.schemas import FixedSpec, RandomSpec
from mixed_trees.tests.conftest import make_panel, random_intercept_panel

FIXED = FixedSpec(terms=["x1"])


@pytest.fixture(scope="module")
def panel():
    return random_intercept_panel(m=60, T=5, sigma_b=2.0, sigma=1.0, seed=0)


@pytest.fixture(scope="module")
def fitted(panel):
    return lmm.fit_ml(panel, FIXED)


def _ar1_panel(m: int, T: int, phi: float, seed: int):
    rng = np.random.default_rng(seed)
    subjects = np.repeat([f"S{i:03d}" for i in range(m)], T)
    waves = np.tile(np.arange(T), m)
    x1 = rng.normal(size=m * T)
    e = np.empty((m, T))
    e[:, 0] = rng.normal(size=m)
    for t in range(1, T):
        e[:, t] = phi * e[:, t - 1] + np.sqrt(1 - phi**2) * rng.normal(size=m)
    y = 1.0 + 0.5 * x1 + np.repeat(rng.normal(0.0, 1.0, m), T) + e.reshape(-1)
    return make_panel(subjects, waves, y, x1[:, None])


class TestFit:
    def test_recovers_parameters(self, fitted):
        assert fitted.beta[0] == pytest.approx(2.0, abs=0.8)
        assert fitted.beta[1] == pytest.approx(1.0, abs=0.15)
        assert 1.5 < fitted.vc.D[0, 0] < 8.0
        assert fitted.vc.sigma2 == pytest.approx(1.0, abs=0.3)
        assert not fitted.boundary
        assert fitted.converged

    def test_loglik_is_the_marginal_gaussian_density(self, panel, fitted):
        expected = 0.0
        X, _ = lmm.design_matrix(panel, FIXED)
        for subject in panel.subjects:
            rows = panel.subject_ids == subject
            k = int(rows.sum())
            V = fitted.vc.D[0, 0] * np.ones((k, k)) + fitted.vc.sigma2 * np.eye(k)
            expected += multivariate_normal(X[rows] @ fitted.beta, V).logpdf(panel.response[rows])
        assert lmm.loglik(fitted, panel) == pytest.approx(expected, rel=1e-9)
        assert fitted.loglik == pytest.approx(expected, rel=1e-8)

    def test_em_trace_does_not_decrease(self, fitted):
        trace = np.array(fitted.trace)
        assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[1:]))

    def test_fixed_zero_matches_ols_likelihood(self, panel):
        fit = lmm.fit_ml(panel, FIXED, d_fixed_zero=True)
        X, _ = lmm.design_matrix(panel, FIXED)
        beta = np.linalg.lstsq(X, panel.response, rcond=None)[0]
        rss = float(((panel.response - X @ beta) ** 2).sum())
        n = panel.n_rows
        assert fit.beta == pytest.approx(beta)
        assert fit.vc.is_zero()
        assert fit.loglik == pytest.approx(-0.5 * n * (np.log(2 * np.pi) + np.log(rss / n) + 1.0), rel=1e-8)

    def test_singleton_clusters_fix_d_at_zero(self):
        ds = make_panel(["a", "b", "c", "d"], [0, 0, 0, 0], [1.0, 2.0, 3.0, 6.0])
        fit = lmm.fit_ml(ds, FixedSpec())
        assert fit.boundary
        assert fit.vc.is_zero()
        assert fit.beta[0] == pytest.approx(3.0)

    def test_random_slope_covariance_is_psd(self):
        rng = np.random.default_rng(4)
        m, T = 50, 5
        waves = np.tile(np.arange(T), m)
        slopes = np.repeat(rng.normal(0.0, 0.5, m), T)
        y = 1.0 + np.repeat(rng.normal(0.0, 1.0, m), T) + slopes * waves + rng.normal(0.0, 0.5, m * T)
        ds = make_panel(np.repeat([f"S{i}" for i in range(m)], T), waves, y)
        fit = lmm.fit_ml(ds, FixedSpec(), RandomSpec(effects=["intercept", "wave"]))
        assert fit.vc.D.shape == (2, 2)
        assert np.linalg.eigvalsh(fit.vc.D).min() >= -1e-10
        assert fit.b_matrix.shape == (m, 2)

    def test_rank_deficient_design(self, panel):
        twin = panel.with_predictors(np.column_stack([panel.column("x1")] * 2), ["x1", "x2"])
        with pytest.raises(SingularDesign):
            lmm.fit_ml(twin, FixedSpec(terms=["x1", "x2"]))

    def test_one_cluster_is_not_enough(self):
        ds = make_panel(["a", "a", "a"], [0, 1, 2], [1.0, 2.0, 4.0])
        with pytest.raises(DataError):
            lmm.fit_ml(ds, FixedSpec())

    def test_interaction_columns(self, panel):
        ds = panel.with_predictors(
            np.column_stack([panel.column("x1"), np.arange(panel.n_rows) % 3]), ["x1", "x2"]
        )
        X, names = lmm.design_matrix(ds, FixedSpec(terms=["x1", "x2"], interactions=[("x1", "x2")]))
        assert names == ["(Intercept)", "x1", "x2", "x1 * x2"]
        assert X[:, 3] == pytest.approx(X[:, 1] * X[:, 2])


class TestPrediction:
    def test_seen_and_unseen_clusters(self, panel, fitted):
        stranger = make_panel(["ZZZ"], [0], [0.0], [[1.0]])
        mixed = make_panel(["S000", "ZZZ"], [0, 0], [0.0, 0.0], [[1.0], [1.0]])
        population = fitted.beta[0] + fitted.beta[1]
        preds = lmm.predict(fitted, mixed)
        assert preds.seen.tolist() == [True, False]
        assert preds.values[1] == pytest.approx(population)
        assert preds.values[0] == pytest.approx(population + fitted.effect("S000")[0])
        assert lmm.predict(fitted, stranger).n_unseen == 1
        assert lmm.predict(fitted, mixed, use_random=False).values[0] == pytest.approx(population)

    def test_blup_matches_stored_effect(self, panel, fitted):
        assert lmm.blup(fitted, "S007", panel) == pytest.approx(fitted.effect("S007"))

    def test_blup_shrinks_the_mean_residual(self, panel, fitted):
        resid = panel.response - (fitted.beta[0] + fitted.beta[1] * panel.column("x1"))
        for subject in panel.subjects:
            raw = resid[panel.subject_ids == subject].mean()
            effect = fitted.effect(subject)[0]
            assert abs(effect) <= abs(raw) + 1e-12
            assert effect * raw >= 0.0

    def test_unknown_cluster(self, fitted):
        with pytest.raises(UnknownCluster):
            fitted.effect("nobody")


class TestInference:
    def test_lr_values(self):
        result = lmm.lr_test_values(-10.0, -8.0, df=1)
        assert result.stat == pytest.approx(4.0)
        assert result.p == pytest.approx(chi2.sf(4.0, 1))

    def test_negative_statistic(self):
        with pytest.raises(NegativeStatBeyondTolerance):
            lmm.lr_test_values(-8.0, -10.0)

    def test_tiny_negative_statistic_is_zero(self):
        assert lmm.lr_test_values(-8.0, -8.0 - 1e-9).stat == 0.0

    def test_fits_on_different_rows(self, panel, fitted):
        smaller = lmm.fit_ml(panel.subset(np.arange(100)), FIXED)
        with pytest.raises(IncompatibleFits):
            lmm.lr_test(smaller, fitted)

    def test_ar1_detected(self):
        ds = _ar1_panel(m=80, T=5, phi=0.6, seed=2)
        null = lmm.fit_ml(ds, FIXED)
        alt = lmm.fit_ml(ds, FIXED, RandomSpec(correlation="ar1"), start=null.vc)
        assert alt.loglik >= null.loglik - 1e-6
        assert 0.2 < alt.vc.phi < 0.95
        assert lmm.lr_test(null, alt).p < 0.01

    def test_wald_table(self, fitted):
        frame = lmm.wald_frame(fitted)
        assert list(frame.columns) == ["term", "b", "se", "t", "p"]
        assert frame["term"].tolist() == ["(Intercept)", "x1"]
        row = lmm.wald_table(fitted)[1]
        assert row.t == pytest.approx(row.b / row.se)
        assert row.p < 1e-6


class TestSerialization:
    def test_reloaded_fit_predicts_the_same(self, panel, fitted):
        loaded = lmm.import_json(lmm.export_json(fitted))
        assert loaded.term_names == fitted.term_names
        assert np.array_equal(loaded.beta, fitted.beta)
        assert np.array_equal(lmm.predict(loaded, panel).values, lmm.predict(fitted, panel).values)

    def test_wrong_format(self, fitted):
        text = lmm.export_json(fitted).replace('"lmm/v1"', '"lmm/v0"')
        with pytest.raises(MalformedModel):
            lmm.import_json(text)

    def test_negative_variance(self, fitted):
        import json

        doc = json.loads(lmm.export_json(fitted))
        doc["sigma2"] = -1.0
        with pytest.raises(MalformedModel):
            lmm.import_json(json.dumps(doc))
