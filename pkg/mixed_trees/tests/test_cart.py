from __future__ import annotations

import numpy as np
import pytest

from mixed_trees.errors import MalformedModel, MissingSplitValue, TooFewRows
from mixed_trees.schemas import TreeParams
from mixed_trees.trees import cart
from mixed_trees.tests.conftest import replications
from mixed_trees.trees.cart import CpEntry, CpTable


def _step_data():
    x = np.arange(40, dtype=float)[:, None]
    y = np.where(x[:, 0] < 20, 0.0, 10.0)
    return x, y


def _brute_force_split(X, y, min_leaf):
    best = (None, None, -np.inf)
    total = ((y - y.mean()) ** 2).sum()
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = 0.5 * (lo + hi)
            go_left = X[:, j] < thr
            if go_left.sum() < min_leaf or (~go_left).sum() < min_leaf:
                continue
            yl, yr = y[go_left], y[~go_left]
            gain = total - ((yl - yl.mean()) ** 2).sum() - ((yr - yr.mean()) ** 2).sum()
            if gain > best[2]:
                best = (j, thr, gain)
    return best


@pytest.fixture
def random_xy():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(120, 3))
    y = 2.0 * (X[:, 0] > 0.3) - 1.5 * (X[:, 2] < -0.5) + rng.normal(scale=0.3, size=120)
    return X, y


class TestBestSplit:
    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for _ in range(replications(200, 40)):
            n = int(rng.integers(10, 51))
            p = int(rng.integers(1, 6))
            min_leaf = int(rng.integers(1, 4))
            X = rng.normal(size=(n, p))
            y = rng.normal(size=n)
            split = cart.best_split(X, y, TreeParams(cp=0.0, min_split=2, min_leaf=min_leaf))
            j, thr, gain = _brute_force_split(X, y, min_leaf)
            assert split is not None
            assert split.variable == j
            assert split.threshold == pytest.approx(thr)
            assert split.reduction == pytest.approx(gain)
            assert split.n_left + split.n_right == n

    def test_too_few_rows(self):
        X = np.arange(10, dtype=float)[:, None]
        assert cart.best_split(X, X[:, 0], TreeParams(min_split=21)) is None

    def test_constant_predictor_has_no_split(self):
        X = np.ones((30, 1))
        y = np.arange(30, dtype=float)
        assert cart.best_split(X, y, TreeParams(cp=0.0, min_split=2, min_leaf=1)) is None

    def test_cp_gate(self):
        x, y = _step_data()
        # alternating +-1 keeps the step split at a 1000 / 1040 share of the root SSE
        y = y + np.tile([-1.0, 1.0], 20)
        assert cart.best_split(x, y, TreeParams(cp=0.99, min_split=2, min_leaf=1)) is None
        assert cart.best_split(x, y, TreeParams(cp=0.5, min_split=2, min_leaf=1)) is not None


class TestGrow:
    def test_step_function(self):
        x, y = _step_data()
        tree = cart.grow(x, y, TreeParams(cp=0.0, min_split=2, min_leaf=1), ["x"])
        assert tree.n_leaves == 2
        assert tree.threshold[0] == pytest.approx(19.5)
        assert cart.predict(tree, np.array([[3.0], [30.0]])).tolist() == [0.0, 10.0]

    def test_threshold_value_goes_right(self):
        x, y = _step_data()
        tree = cart.grow(x, y, TreeParams(cp=0.0, min_split=2, min_leaf=1), ["x"])
        assert cart.predict_row(tree, {"x": 19.5}) == 10.0
        assert cart.predict_row(tree, [19.4]) == 0.0

    def test_leaf_sizes_and_depth(self, random_xy):
        X, y = random_xy
        params = TreeParams(cp=0.0, min_split=10, min_leaf=7, max_depth=3)
        tree = cart.grow(X, y, params)
        assert tree.n_rows[tree.leaf_ids].min() >= 7
        assert tree.max_depth <= 3
        assert tree.n_rows[tree.leaf_ids].sum() == 120

    def test_missing_split_value(self):
        x, y = _step_data()
        tree = cart.grow(x, y, TreeParams(cp=0.0, min_split=2, min_leaf=1), ["x"])
        with pytest.raises(MissingSplitValue) as info:
            cart.predict(tree, np.array([[np.nan]]))
        assert info.value.variable == "x"

    def test_mtry_is_reproducible(self, random_xy):
        X, y = random_xy
        params = TreeParams(cp=0.0, min_split=10, min_leaf=5)
        a = cart.grow(X, y, params, mtry=1, rng=np.random.default_rng(9))
        b = cart.grow(X, y, params, mtry=1, rng=np.random.default_rng(9))
        assert a == b


class TestPruning:
    def test_prune_extremes(self, random_xy):
        X, y = random_xy
        tree = cart.grow(X, y, TreeParams(cp=0.0, min_split=10, min_leaf=5))
        assert cart.prune(tree, 0.0).same_structure(tree)
        assert cart.prune(tree, 1.0).n_leaves == 1

    def test_pruned_trees_are_nested(self, random_xy):
        X, y = random_xy
        tree = cart.grow(X, y, TreeParams(cp=0.0, min_split=10, min_leaf=5))
        previous = tree
        for cp in (0.001, 0.01, 0.05, 0.2, 0.9):
            pruned = cart.prune(tree, cp)
            assert cart.is_rooted_subtree(pruned, tree)
            assert cart.is_rooted_subtree(pruned, previous)
            assert pruned.n_leaves <= previous.n_leaves
            previous = pruned

    def test_cp_table_shape(self, random_xy):
        X, y = random_xy
        tree = cart.grow(X, y, TreeParams(cp=0.0, min_split=10, min_leaf=5))
        table = cart.cp_table(tree, X, y, k=5, seed=1)
        assert table.entries[-1].cp_value == pytest.approx(tree.cp)
        assert table.entries[-1].n_leaves == tree.n_leaves
        assert table.entries[0].n_leaves == 1
        assert all(entry.cv_error_se >= 0 for entry in table.entries)

    def test_cp_table_is_seeded(self, random_xy):
        X, y = random_xy
        tree = cart.grow(X, y, TreeParams(cp=0.001, min_split=10, min_leaf=5))
        assert cart.cp_table(tree, X, y, k=5, seed=4) == cart.cp_table(tree, X, y, k=5, seed=4)

    def test_one_se_pick_prunes_noise(self, random_xy):
        X, y = random_xy
        tree = cart.grow(X, y, TreeParams(cp=0.0, min_split=10, min_leaf=5))
        pruned = cart.prune_one_se(tree, cart.cp_table(tree, X, y, k=10, seed=0))
        assert 2 <= pruned.n_leaves < tree.n_leaves

    def test_cp_table_too_few_rows(self):
        x, y = _step_data()
        tree = cart.grow(x, y, TreeParams(cp=0.0, min_split=2, min_leaf=1))
        with pytest.raises(TooFewRows):
            cart.cp_table(tree, x, y, k=41)


class TestSelectOneSe:
    def _table(self, means, ses):
        cps = [0.5, 0.1, 0.01, 0.001][: len(means)]
        leaves = [1, 3, 7, 12][: len(means)]
        return CpTable(
            entries=[
                CpEntry(cp_value=c, n_leaves=n, cv_error_mean=m, cv_error_se=s)
                for c, n, m, s in zip(cps, leaves, means, ses)
            ]
        )

    def test_picks_simplest_within_one_se(self):
        table = self._table([1.0, 0.55, 0.5, 0.52], [0.2, 0.1, 0.1, 0.1])
        assert cart.select_one_se(table).cp_value == 0.1

    def test_matches_direct_scan(self):
        rng = np.random.default_rng(0)
        for _ in range(replications(100, 20)):
            means = rng.uniform(0.5, 1.5, size=4)
            ses = rng.uniform(0.0, 0.3, size=4)
            table = self._table(means.tolist(), ses.tolist())
            limit = means.min() + ses[int(np.argmin(means))]
            expected = next(i for i, m in enumerate(means) if m <= limit)
            assert cart.select_one_se(table) == table.entries[expected]

    def test_rejects_non_monotone_table(self):
        with pytest.raises(ValueError):
            CpTable(
                entries=[
                    CpEntry(cp_value=0.1, n_leaves=1, cv_error_mean=1.0, cv_error_se=0.1),
                    CpEntry(cp_value=0.2, n_leaves=3, cv_error_mean=1.0, cv_error_se=0.1),
                ]
            )


class TestExport:
    def _tree(self):
        x, y = _step_data()
        return cart.grow(x, y, TreeParams(cp=0.0, min_split=2, min_leaf=1), ["Brooding"])

    def test_dot_layout(self):
        dot = cart.export_dot(self._tree())
        lines = dot.splitlines()
        assert lines[0] == "digraph Tree {"
        assert dot.endswith("}\n")
        assert '0 [label="Brooding < 19.5"] ;' in lines
        assert 'score = 0.00\\nsamples = 20 (50%)' in dot
        assert 'headlabel="yes"' in dot
        assert 'headlabel="no"' in dot

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_dot_parses_as_a_tree_graph(self, seed):
        pydot = pytest.importorskip("pydot")
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 3))
        y = np.where(X[:, 0] > 0, 2.0, -1.0) + X[:, 1] + 0.3 * rng.normal(size=60)
        grown = cart.grow(X, y, TreeParams(cp=0.0, min_split=4, min_leaf=2), ['say "x"', "a<b", "c\\d"])
        stump = cart.grow(X, np.full(60, 1.5), TreeParams(), ["x1", "x2", "x3"])
        assert stump.n_nodes == 1

        for tree in (grown, stump, self._tree()):
            graphs = pydot.graph_from_dot_data(cart.export_dot(tree))
            assert graphs is not None and len(graphs) == 1
            graph = graphs[0]
            nodes = {node.get_name() for node in graph.get_nodes() if node.get_name().isdigit()}
            assert nodes == {str(i) for i in range(tree.n_nodes)}
            edges = [(edge.get_source(), edge.get_destination()) for edge in graph.get_edges()]
            assert len(edges) == tree.n_nodes - 1
            assert {child for _, child in edges} == nodes - {"0"}

    def test_dot_labels_override(self):
        dot = cart.export_dot(self._tree(), labels={"Brooding": "RRS brooding"})
        assert "RRS brooding < 19.5" in dot

    def test_json_reload_is_equal(self):
        tree = self._tree()
        assert cart.import_json(cart.export_json(tree)) == tree

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda doc: doc.update(format="tree/v9"),
            lambda doc: doc["nodes"][0].update(variable="Worry"),
            lambda doc: doc["nodes"][0].update(left=0),
            lambda doc: doc["nodes"][1].update(id=5),
        ],
    )
    def test_malformed_documents(self, mutate):
        import json

        doc = json.loads(cart.export_json(self._tree()))
        mutate(doc)
        with pytest.raises(MalformedModel):
            cart.import_json(json.dumps(doc))

    def test_not_json(self):
        with pytest.raises(MalformedModel):
            cart.import_json("digraph {")
