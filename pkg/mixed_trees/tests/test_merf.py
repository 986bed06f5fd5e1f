from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from mixed_trees.errors import DataError, MalformedModel, UnknownCluster
from mixed_trees.mixed import merf
from mixed_trees.schemas import ForestParams, MerfParams, RandomSpec
from mixed_trees.tests.conftest import make_panel, random_intercept_panel, require_slow
from mixed_trees.trees import forest

SMALL = MerfParams(forest=ForestParams(n_trees=30, max_depth=3), n_iter=15, seed=3)


@pytest.fixture(scope="module")
def panel():
    return random_intercept_panel(m=40, T=5, sigma_b=2.0, sigma=1.0, seed=21)


@pytest.fixture(scope="module")
def model(panel):
    return merf.fit(panel, params=SMALL, n_jobs=1)


def test_iteration_seed():
    assert merf.iteration_seed(7, 0) == 7
    assert merf.iteration_seed(7, 1) != 7
    assert merf.iteration_seed(7, 1) == merf.iteration_seed(7, 1)
    assert merf.iteration_seed(7, 1) != merf.iteration_seed(7, 2)


def test_frozen_single_iteration_is_the_forest(panel):
    params = MerfParams(forest=ForestParams(n_trees=10, max_depth=3), n_iter=1, freeze_b=True, seed=9)
    fitted = merf.fit(panel, params=params, n_jobs=1)
    reference = forest.fit(
        panel.X, panel.response, params.forest.model_copy(update={"seed": 9}), panel.variable_names, n_jobs=1
    )
    assert fitted.forest == reference
    assert np.array_equal(merf.predict(fitted, panel).values, forest.predict(reference, panel.X))
    assert not np.any(fitted.b_matrix)


def test_recovers_random_intercepts(panel, model):
    # replay the generator: predictors first, then the intercepts
    rng = np.random.default_rng(21)
    rng.normal(size=panel.n_rows)
    truth = rng.normal(0.0, 2.0, 40)
    estimated = model.b_matrix[:, 0]
    assert np.corrcoef(estimated, truth)[0, 1] > 0.8
    assert model.vc.D[0, 0] > 1.0
    assert 0.3 < model.vc.sigma2 < 3.0


def test_gll_trace_and_convergence(model):
    assert len(model.gll_trace) == model.n_iter_run
    assert 1 <= model.n_iter_run <= SMALL.n_iter
    if model.converged:
        last, prev = model.gll_trace[-1], model.gll_trace[-2]
        assert abs(last - prev) / (1.0 + abs(prev)) < SMALL.gll_tol
    assert np.isfinite(model.loglik)


def test_same_seed_same_model(panel, model):
    again = merf.fit(panel, params=SMALL, n_jobs=1)
    assert np.array_equal(again.b_matrix, model.b_matrix)
    assert np.array_equal(merf.predict(again, panel).values, merf.predict(model, panel).values)


def test_constrained_d_keeps_effects_at_zero(panel):
    params = SMALL.model_copy(update={"constrain_d_zero": True, "n_iter": 3})
    fitted = merf.fit(panel, params=params, n_jobs=1)
    assert fitted.vc.is_zero()
    assert not np.any(fitted.b_matrix)


def test_unseen_cluster_gets_forest_prediction(model):
    rows = make_panel(["S000", "new"], [0, 0], [0.0, 0.0], [[0.5], [0.5]])
    preds = merf.predict(model, rows)
    base = forest.predict(model.forest, rows.X)
    assert preds.seen.tolist() == [True, False]
    assert preds.values[1] == pytest.approx(base[1])
    assert preds.values[0] == pytest.approx(base[0] + model.effect("S000")[0])
    with pytest.raises(UnknownCluster):
        model.effect("new")


def test_importance_and_representative_tree(model):
    ranking = merf.importance(model)
    assert [name for name, _ in ranking] == ["x1"]
    tree = merf.representative_tree(model)
    assert any(tree is member for member in model.forest.trees)


def test_random_slope_fit(panel):
    params = SMALL.model_copy(update={"random": RandomSpec(effects=["intercept", "wave"]), "n_iter": 4})
    fitted = merf.fit(panel, params=params, n_jobs=1)
    assert fitted.b_matrix.shape == (40, 2)
    assert np.linalg.eigvalsh(fitted.vc.D).min() > -1e-10


def test_ar1_is_rejected():
    with pytest.raises(ValidationError):
        MerfParams(random=RandomSpec(correlation="ar1"))


def test_missing_predictors(small_panel):
    with pytest.raises(DataError):
        merf.fit(small_panel, params=SMALL)


class TestSerialization:
    def test_reload_predicts_the_same(self, panel, model):
        loaded = merf.import_json(merf.export_json(model))
        assert loaded.forest == model.forest
        assert np.array_equal(merf.predict(loaded, panel).values, merf.predict(model, panel).values)
        assert loaded.train_X is None

    def test_representative_tree_needs_training_rows_after_reload(self, panel, model):
        loaded = merf.import_json(merf.export_json(model))
        with pytest.raises(DataError):
            merf.representative_tree(loaded)
        assert merf.representative_tree(loaded, panel.X) == merf.representative_tree(model)

    def test_bad_effect_shape(self, model):
        import json

        doc = json.loads(merf.export_json(model))
        doc["b"] = doc["b"][:-1]
        with pytest.raises(MalformedModel):
            merf.import_json(json.dumps(doc))


def test_grid_search_picks_a_cell(panel):
    grid = merf.MerfGrid(n_trees=[5, 10], max_depth=[2], n_iter=[2])
    best, rows = merf.grid_search(panel, grid=grid, k=3, seed=1)
    assert [(row.n_trees, row.max_depth, row.n_iter) for row in rows] == [(5, 2, 2), (10, 2, 2)]
    assert all(row.complete and row.mae is not None for row in rows)
    winner = min(rows, key=lambda row: (row.mae, row.n_trees))
    assert (best.forest.n_trees, best.forest.max_depth, best.n_iter) == (winner.n_trees, 2, 2)


def _interaction_panel(seed: int, m: int = 40, T: int = 5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(m * T, 2))
    high1, high2 = X[:, 0] > 0.0, X[:, 1] > 0.0
    b = np.repeat(rng.normal(0.0, 1.0, m), T)
    y = 3.0 * high1 + 3.0 * high2 + 4.0 * (high1 & high2) + b + rng.normal(0.0, 1.0, m * T)
    subjects = np.repeat([f"S{i:03d}" for i in range(m)], T)
    return make_panel(subjects, np.tile(np.arange(T), m), y, X, ("x1", "x2"))


def test_grid_search_prefers_depth_for_interactions():
    grid = merf.MerfGrid(n_trees=[20], max_depth=[1, 3], n_iter=[5])
    for seed in range(2):
        best, _ = merf.grid_search(_interaction_panel(seed), grid=grid, k=3, seed=seed)
        assert best.forest.max_depth == 3


def test_grid_search_prefers_depth_for_interactions_full_grid():
    require_slow()
    grid = merf.MerfGrid(n_trees=[50, 300], max_depth=[1, 3], n_iter=[10])
    picks = sum(
        merf.grid_search(_interaction_panel(seed), grid=grid, k=5, seed=seed)[0].forest.max_depth == 3
        for seed in range(20)
    )
    assert picks >= 16
