"""Regression trees: sum-of-squares splits, cost-complexity pruning and one-SE selection.

Trees are stored as flat arrays in preorder, in the spirit of scikit-learn's
``tree_`` object: node 0 is the root and every child id is larger than its
parent's. Routing sends ``value >= threshold`` to the right child.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from sklearn.model_selection import KFold

from mixed_trees.errors import DataError, MalformedModel, MissingSplitValue, TooFewRows
from mixed_trees.schemas import TreeParams

logger = logging.getLogger(__name__)

LEAF = -1
_REL_TOL = 1e-10


@dataclass(frozen=True)
class SplitCandidate:
    variable: int
    threshold: float
    reduction: float
    n_left: int
    n_right: int


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_rows: np.ndarray
    sse: np.ndarray
    improvement: np.ndarray
    variable_names: Tuple[str, ...]
    n_train: int
    root_sse: float
    cp: float
    params: TreeParams

    def __post_init__(self) -> None:
        for name in ("feature", "left", "right", "n_rows"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("threshold", "value", "sse", "improvement"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == LEAF

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    def depths(self) -> np.ndarray:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return depth

    @property
    def max_depth(self) -> int:
        return int(self.depths().max())

    def same_structure(self, other: "Tree") -> bool:
        return (
            self.variable_names == other.variable_names
            and np.array_equal(self.feature, other.feature)
            and np.array_equal(self.threshold, other.threshold, equal_nan=True)
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tree):
            return NotImplemented
        return (
            self.same_structure(other)
            and np.array_equal(self.value, other.value)
            and np.array_equal(self.n_rows, other.n_rows)
            and np.array_equal(self.sse, other.sse)
            and np.array_equal(self.improvement, other.improvement)
            and (self.n_train, self.root_sse, self.cp, self.params)
            == (other.n_train, other.root_sse, other.cp, other.params)
        )

    __hash__ = None  # type: ignore[assignment]


def _sse(y: np.ndarray) -> float:
    if y.size == 0:
        return 0.0
    centered = y - y.mean()
    return float(centered @ centered)


# --- splitting --------------------------------------------------------------


def best_split(
    X: np.ndarray,
    target: np.ndarray,
    params: TreeParams,
    rows: Optional[np.ndarray] = None,
    root_sse: Optional[float] = None,
    features: Optional[Sequence[int]] = None,
) -> Optional[SplitCandidate]:
    """Best (variable, midpoint) split of ``rows`` by SSE reduction, or None.

    ``root_sse`` defaults to the SSE of ``rows`` themselves, i.e. the node is
    treated as the root for the cp gate.
    """
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    rows = np.arange(target.shape[0]) if rows is None else np.asarray(rows)
    n = int(rows.size)
    if n < params.min_split or n < 2 * params.min_leaf:
        return None

    y = target[rows]
    if root_sse is None:
        root_sse = _sse(y)
    centered = y - y.mean()
    s_total = centered.sum()
    base = s_total * s_total / n
    n_left = np.arange(1, n, dtype=float)
    size_ok = (n_left >= params.min_leaf) & (n - n_left >= params.min_leaf)

    columns = range(X.shape[1]) if features is None else features
    best: Optional[SplitCandidate] = None
    for j in columns:
        x = X[rows, j]
        order = np.argsort(x, kind="mergesort")
        xs = x[order]
        cs = np.cumsum(centered[order])
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        s_left = cs[:-1]
        s_right = s_total - s_left
        gain = s_left * s_left / n_left + s_right * s_right / (n - n_left) - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best.reduction:
            lo, hi = xs[i], xs[i + 1]
            threshold = 0.5 * (lo + hi)
            if not lo < threshold <= hi:
                threshold = hi
            best = SplitCandidate(int(j), float(threshold), float(gain[i]), i + 1, n - i - 1)

    if best is None or not best.reduction > params.cp * root_sse:
        return None
    return best


def grow(
    X: np.ndarray,
    target: np.ndarray,
    params: TreeParams,
    variable_names: Optional[Sequence[str]] = None,
    rows: Optional[np.ndarray] = None,
    mtry: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tree:
    """Grow a tree by recursive best splits until no eligible split remains.

    ``rows`` may repeat indices (bootstrap samples). With ``mtry`` below the
    number of predictors, each node searches a random subset drawn from ``rng``.
    """
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    if X.ndim != 2 or X.shape[0] != target.shape[0]:
        raise DataError(f"X has shape {X.shape} but target has {target.shape[0]} rows")
    p = X.shape[1]
    names = tuple(variable_names) if variable_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise DataError(f"{len(names)} variable names for {p} columns")
    rows = np.arange(target.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise DataError("cannot grow a tree on zero rows")
    if np.isnan(X[rows]).any():
        raise DataError("tree growing requires complete predictor rows; run drop_missing first")
    if mtry is not None and not 1 <= mtry <= p:
        raise DataError(f"mtry must be in [1, {p}], got {mtry}")
    subsample = mtry is not None and mtry < p
    if subsample and rng is None:
        rng = np.random.default_rng(0)

    root_sse = _sse(target[rows])
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    n_rows: List[int] = []
    sse: List[float] = []
    improvement: List[float] = []

    def build(node_rows: np.ndarray, depth: int) -> int:
        node = len(feature)
        y = target[node_rows]
        feature.append(LEAF)
        threshold.append(np.nan)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y.mean()))
        n_rows.append(int(node_rows.size))
        sse.append(_sse(y))
        improvement.append(0.0)

        if params.max_depth is not None and depth >= params.max_depth:
            return node
        features = np.sort(rng.choice(p, size=mtry, replace=False)) if subsample else None
        split = best_split(X, target, params, rows=node_rows, root_sse=root_sse, features=features)
        if split is None:
            return node

        go_right = X[node_rows, split.variable] >= split.threshold
        feature[node] = split.variable
        threshold[node] = split.threshold
        improvement[node] = split.reduction
        left[node] = build(node_rows[~go_right], depth + 1)
        right[node] = build(node_rows[go_right], depth + 1)
        return node

    build(rows, 0)
    return Tree(
        feature=np.array(feature),
        threshold=np.array(threshold),
        left=np.array(left),
        right=np.array(right),
        value=np.array(value),
        n_rows=np.array(n_rows),
        sse=np.array(sse),
        improvement=np.array(improvement),
        variable_names=names,
        n_train=int(rows.size),
        root_sse=root_sse,
        cp=params.cp,
        params=params,
    )


# --- prediction -------------------------------------------------------------


def apply(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf node id reached by each row of ``X`` (columns in ``tree.variable_names`` order)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = np.flatnonzero(tree.feature[node] != LEAF)
    while active.size:
        at = node[active]
        f = tree.feature[at]
        vals = X[active, f]
        missing = np.isnan(vals)
        if missing.any():
            raise MissingSplitValue(tree.variable_names[int(f[missing][0])])
        node[active] = np.where(vals >= tree.threshold[at], tree.right[at], tree.left[at])
        active = active[tree.feature[node[active]] != LEAF]
    return node


def predict(tree: Tree, X: np.ndarray) -> np.ndarray:
    return tree.value[apply(tree, X)]


def predict_row(tree: Tree, row: Union[Mapping[str, float], Sequence[float]]) -> float:
    if isinstance(row, Mapping):
        values = [float(row.get(name, np.nan)) for name in tree.variable_names]
    else:
        values = [float(v) for v in row]
    return float(predict(tree, np.asarray(values, dtype=float)[None, :])[0])


def with_leaf_values(tree: Tree, values: Union[Mapping[int, float], np.ndarray]) -> Tree:
    """Replace leaf means; ``values`` is keyed by leaf node id or ordered like ``tree.leaf_ids``."""
    new_value = tree.value.copy()
    if isinstance(values, Mapping):
        for node, v in values.items():
            if tree.feature[node] != LEAF:
                raise DataError(f"node {node} is not a leaf")
            new_value[node] = float(v)
    else:
        values = np.asarray(values, dtype=float)
        if values.shape != (tree.n_leaves,):
            raise DataError(f"expected {tree.n_leaves} leaf values, got {values.shape}")
        new_value[tree.leaf_ids] = values
    return replace(tree, value=new_value)


# --- cost-complexity pruning ------------------------------------------------


def _subtree_totals(tree: Tree, internal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Leaf SSE sum and leaf count below each node, treating non-``internal`` nodes as leaves."""
    r = tree.sse.copy()
    leaves = np.ones(tree.n_nodes)
    for i in range(tree.n_nodes - 1, -1, -1):
        if internal[i]:
            r[i] = r[tree.left[i]] + r[tree.right[i]]
            leaves[i] = leaves[tree.left[i]] + leaves[tree.right[i]]
    return r, leaves


def _descendants(tree: Tree, node: int) -> List[int]:
    out, stack = [], [node]
    while stack:
        i = stack.pop()
        out.append(i)
        if tree.feature[i] != LEAF:
            stack.extend((int(tree.left[i]), int(tree.right[i])))
    return out


def collapse_alphas(tree: Tree) -> np.ndarray:
    """Weakest-link pruning sequence.

    Returns, for each internal node, the complexity (in SSE units) at which it
    becomes a leaf; leaves get +inf.
    """
    alpha = np.full(tree.n_nodes, np.inf)
    internal = tree.feature != LEAF
    current = 0.0
    while internal[0]:
        r, leaves = _subtree_totals(tree, internal)
        g = np.full(tree.n_nodes, np.inf)
        g[internal] = (tree.sse[internal] - r[internal]) / (leaves[internal] - 1)
        level = max(float(g.min()), current)
        weakest = np.flatnonzero(internal & (g <= level + _REL_TOL * max(abs(level), tree.root_sse, 1e-300)))
        for node in weakest:
            if not internal[node]:
                continue
            for i in _descendants(tree, int(node)):
                if internal[i]:
                    alpha[i] = level
                    internal[i] = False
        current = level
    return alpha


def prune(tree: Tree, cp: float, alphas: Optional[np.ndarray] = None) -> Tree:
    """Cost-complexity optimal subtree at relative complexity ``cp``."""
    if alphas is None:
        alphas = collapse_alphas(tree)
    cut = cp * tree.root_sse
    collapsed = (tree.feature != LEAF) & (alphas <= cut + _REL_TOL * max(abs(cut), tree.root_sse, 1e-300))

    old_ids: List[int] = []
    stack = [0]
    while stack:
        i = stack.pop()
        old_ids.append(i)
        if tree.feature[i] != LEAF and not collapsed[i]:
            stack.extend((int(tree.right[i]), int(tree.left[i])))
    new_id = {old: new for new, old in enumerate(old_ids)}
    idx = np.array(old_ids, dtype=np.int64)
    keep_split = (tree.feature[idx] != LEAF) & ~collapsed[idx]

    def remap(children: np.ndarray) -> np.ndarray:
        return np.array([new_id[int(c)] if k else LEAF for c, k in zip(children[idx], keep_split)], dtype=np.int64)

    return replace(
        tree,
        feature=np.where(keep_split, tree.feature[idx], LEAF),
        threshold=np.where(keep_split, tree.threshold[idx], np.nan),
        left=remap(tree.left),
        right=remap(tree.right),
        value=tree.value[idx],
        n_rows=tree.n_rows[idx],
        sse=tree.sse[idx],
        improvement=np.where(keep_split, tree.improvement[idx], 0.0),
        cp=float(cp),
    )


class CpEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    cp_value: float = Field(ge=0.0)
    n_leaves: int = Field(ge=1)
    cv_error_mean: float
    cv_error_se: float = Field(ge=0.0)


class CpTable(BaseModel):
    """Nested subtree sequence, largest cp (smallest tree) first."""

    model_config = ConfigDict(frozen=True)

    entries: List[CpEntry] = Field(min_length=1)

    @model_validator(mode="after")
    def _monotone(self) -> "CpTable":
        for prev, cur in zip(self.entries, self.entries[1:]):
            if not cur.cp_value < prev.cp_value:
                raise ValueError("cp_value must be strictly decreasing")
            if not cur.n_leaves > prev.n_leaves:
                raise ValueError("n_leaves must be strictly increasing")
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def to_rows(self) -> List[dict]:
        return [entry.model_dump() for entry in self.entries]


def _observation_folds(n: int, k: int, seed: int) -> np.ndarray:
    folds = np.empty(n, dtype=np.int64)
    for fold, (_, test_idx) in enumerate(KFold(n_splits=k, shuffle=True, random_state=seed).split(np.arange(n))):
        folds[test_idx] = fold
    return folds


def cp_table(
    tree: Tree,
    X: np.ndarray,
    target: np.ndarray,
    k: int = 10,
    seed: int = 0,
    folds: Optional[np.ndarray] = None,
) -> CpTable:
    """Cross-validated error for every subtree in the pruning sequence of ``tree``.

    Each fold regrows a tree with ``tree.params`` on its training rows and prunes
    it at the geometric midpoint of consecutive cp values, as rpart does.
    ``folds`` is a per-row fold index; without it observation-level folds are
    drawn from ``seed``.
    """
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    n = target.shape[0]
    if folds is None:
        if k > n:
            raise TooFewRows(k, n)
        folds = _observation_folds(n, k, seed)
    else:
        folds = np.asarray(folds, dtype=np.int64)
        if folds.shape != (n,):
            raise DataError(f"fold vector has shape {folds.shape}, expected ({n},)")
    fold_ids = np.unique(folds)
    if fold_ids.size < 2:
        raise TooFewRows(int(fold_ids.size), n)

    alphas = collapse_alphas(tree)
    internal = tree.feature != LEAF
    levels = np.unique(alphas[internal]) if internal.any() else np.zeros(0)
    if tree.root_sse > 0:
        cps = [float(a / tree.root_sse) for a in levels[::-1]]
    else:
        cps = []
    cps = [c for c in cps if c > tree.cp] + [float(tree.cp)]
    sizes = [prune(tree, c, alphas).n_leaves for c in cps]
    # cp levels closer than the collapse tolerance yield the same subtree
    keep = [j for j in range(len(cps)) if j == 0 or sizes[j] > sizes[j - 1]]
    cps, sizes = [cps[j] for j in keep], [sizes[j] for j in keep]

    evaluation_cps = [max(1.0, cps[0])] + [float(np.sqrt(a * b)) for a, b in zip(cps[:-1], cps[1:])]
    errors = np.zeros((fold_ids.size, len(cps)))
    for row, fold in enumerate(fold_ids):
        test = folds == fold
        train_rows = np.flatnonzero(~test)
        fold_tree = grow(X, target, tree.params, tree.variable_names, rows=train_rows)
        fold_alphas = collapse_alphas(fold_tree)
        for j, cp in enumerate(evaluation_cps):
            pred = predict(prune(fold_tree, cp, fold_alphas), X[test])
            errors[row, j] = float(np.mean((target[test] - pred) ** 2))

    means = errors.mean(axis=0)
    ses = errors.std(axis=0, ddof=1) / np.sqrt(fold_ids.size)
    return CpTable(
        entries=[
            CpEntry(cp_value=c, n_leaves=s, cv_error_mean=float(m), cv_error_se=float(e))
            for c, s, m, e in zip(cps, sizes, means, ses)
        ]
    )


def select_one_se(table: CpTable) -> CpEntry:
    """Largest cp whose CV error is within one SE of the minimum."""
    means = np.array([e.cv_error_mean for e in table.entries])
    best = int(np.argmin(means))
    limit = means[best] + table.entries[best].cv_error_se
    for entry in table.entries:
        if entry.cv_error_mean <= limit:
            return entry
    return table.entries[best]


def prune_one_se(tree: Tree, table: CpTable) -> Tree:
    return prune(tree, select_one_se(table).cp_value)


def is_rooted_subtree(sub: Tree, full: Tree) -> bool:
    """True if every path of ``sub`` is a path of ``full`` with the same splits."""
    stack = [(0, 0)]
    while stack:
        i, j = stack.pop()
        if sub.feature[i] == LEAF:
            continue
        if full.feature[j] != sub.feature[i] or full.threshold[j] != sub.threshold[i]:
            return False
        stack.append((int(sub.left[i]), int(full.left[j])))
        stack.append((int(sub.right[i]), int(full.right[j])))
    return True


# --- export -----------------------------------------------------------------


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def _format_threshold(value: float) -> str:
    return f"{value:.6g}"


def export_dot(tree: Tree, labels: Optional[Mapping[str, str]] = None) -> str:
    """Graphviz DOT text; leaves show mean, row count and share of training rows."""
    labels = dict(labels or {})
    lines = [
        "digraph Tree {",
        'node [shape=box, style="rounded", fontname="helvetica"] ;',
        'edge [fontname="helvetica"] ;',
    ]
    total = max(tree.n_train, 1)
    for i in range(tree.n_nodes):
        if tree.feature[i] == LEAF:
            share = 100.0 * tree.n_rows[i] / total
            label = f"score = {tree.value[i]:.2f}\\nsamples = {tree.n_rows[i]} ({share:.0f}%)"
        else:
            name = tree.variable_names[tree.feature[i]]
            label = _escape(f"{labels.get(name, name)} < {_format_threshold(tree.threshold[i])}")
        lines.append(f'{i} [label="{label}"] ;')
        if i > 0:
            parent = _parent_of(tree, i)
            is_left = tree.left[parent] == i
            head = ', labeldistance=2.5, labelangle=45, headlabel="yes"' if parent == 0 and is_left else ""
            if parent == 0 and not is_left:
                head = ', labeldistance=2.5, labelangle=-45, headlabel="no"'
            lines.append(f"{parent} -> {i} [{head.lstrip(', ')}] ;" if head else f"{parent} -> {i} ;")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _parent_of(tree: Tree, node: int) -> int:
    hits = np.flatnonzero((tree.left == node) | (tree.right == node))
    return int(hits[0])


class NodeDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int = Field(ge=0)
    variable: Optional[str] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None
    value: float
    n_rows: int = Field(ge=0)
    sse: float
    improvement: float = 0.0


class TreeDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = "tree/v1"
    variable_names: List[str]
    n_train: int = Field(ge=0)
    root_sse: float
    cp: float
    params: TreeParams
    nodes: List[NodeDocument] = Field(min_length=1)


def to_document(tree: Tree) -> TreeDocument:
    nodes = []
    for i in range(tree.n_nodes):
        leaf = tree.feature[i] == LEAF
        nodes.append(
            NodeDocument(
                id=i,
                variable=None if leaf else tree.variable_names[tree.feature[i]],
                threshold=None if leaf else float(tree.threshold[i]),
                left=None if leaf else int(tree.left[i]),
                right=None if leaf else int(tree.right[i]),
                value=float(tree.value[i]),
                n_rows=int(tree.n_rows[i]),
                sse=float(tree.sse[i]),
                improvement=float(tree.improvement[i]),
            )
        )
    return TreeDocument(
        variable_names=list(tree.variable_names),
        n_train=tree.n_train,
        root_sse=tree.root_sse,
        cp=tree.cp,
        params=tree.params,
        nodes=nodes,
    )


def from_document(doc: TreeDocument) -> Tree:
    if doc.format != "tree/v1":
        raise MalformedModel(f"Expected format 'tree/v1', got {doc.format!r}")
    names = list(doc.variable_names)
    n = len(doc.nodes)
    feature = np.full(n, LEAF, dtype=np.int64)
    threshold = np.full(n, np.nan)
    left = np.full(n, LEAF, dtype=np.int64)
    right = np.full(n, LEAF, dtype=np.int64)
    for i, node in enumerate(doc.nodes):
        if node.id != i:
            raise MalformedModel(f"Node ids must be sequential; found {node.id} at position {i}")
        if node.variable is None:
            if node.left is not None or node.right is not None:
                raise MalformedModel(f"Leaf node {i} has children")
            continue
        if node.variable not in names:
            raise MalformedModel(f"Node {i} splits on unknown variable {node.variable!r}")
        if node.threshold is None or node.left is None or node.right is None:
            raise MalformedModel(f"Internal node {i} needs threshold, left and right")
        if not (i < node.left < n and i < node.right < n):
            raise MalformedModel(f"Node {i} has children out of preorder range")
        feature[i] = names.index(node.variable)
        threshold[i] = node.threshold
        left[i] = node.left
        right[i] = node.right
    return Tree(
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        value=np.array([node.value for node in doc.nodes]),
        n_rows=np.array([node.n_rows for node in doc.nodes]),
        sse=np.array([node.sse for node in doc.nodes]),
        improvement=np.array([node.improvement for node in doc.nodes]),
        variable_names=tuple(names),
        n_train=doc.n_train,
        root_sse=doc.root_sse,
        cp=doc.cp,
        params=doc.params,
    )


def export_json(tree: Tree) -> str:
    return to_document(tree).model_dump_json(indent=2)


def import_json(text: str) -> Tree:
    try:
        doc = TreeDocument.model_validate_json(text)
    except ValidationError as exc:
        raise MalformedModel(f"Invalid tree document: {exc.error_count()} validation errors") from exc
    return from_document(doc)
