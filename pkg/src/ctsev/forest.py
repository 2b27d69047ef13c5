"""Weighted CART trees and bootstrap ensembles for binary severity labels.

Class 0 is "non-severe", class 1 is "severe"; class 1 is the positive class
throughout the package. Sample weights are always class weights, so every
node's weighted histogram is exactly (count0 * w0, count1 * w1) — trees
store the integer counts and the forest stores the two weights, which keeps
training, scoring, persistence and importance bit-reproducible.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DegenerateError, FormatError, SchemaError, TrainingError

CLASS_LABELS = ("non-severe", "severe")
POSITIVE_CLASS = 1

FOREST_FORMAT = "ctsev-forest/1"


def class_index(label: str) -> int:
    try:
        return CLASS_LABELS.index(label)
    except ValueError:
        raise ValueError(f"label must be one of {CLASS_LABELS}, got {label!r}") from None


@dataclass(frozen=True)
class Dataset:
    """Feature rows with binary class labels.

    ``feature_ids`` names each column with its global feature id (ascending);
    ``y`` holds class indices (0 non-severe, 1 severe).
    """

    x: np.ndarray
    y: np.ndarray
    feature_ids: tuple[int, ...]
    patient_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.uint8)
        if x.ndim != 2:
            raise ValueError(f"x must be 2-D, got {x.ndim}-D")
        if y.shape != (x.shape[0],):
            raise ValueError("y length must match x rows")
        if y.size and int(y.max()) > 1:
            raise ValueError("class indices must be 0 or 1")
        ids = tuple(int(i) for i in self.feature_ids)
        if len(ids) != x.shape[1]:
            raise ValueError("feature_ids length must match x columns")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("feature_ids must be strictly ascending")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_ids", ids)
        if self.patient_ids is not None:
            pids = tuple(str(p) for p in self.patient_ids)
            if len(pids) != x.shape[0]:
                raise ValueError("patient_ids length must match x rows")
            object.__setattr__(self, "patient_ids", pids)

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return len(self.y) - n1, n1

    def restrict(self, feature_ids) -> "Dataset":
        """Column subset by global feature id (order preserved ascending)."""
        wanted = tuple(sorted(int(i) for i in feature_ids))
        pos = {fid: i for i, fid in enumerate(self.feature_ids)}
        missing = [fid for fid in wanted if fid not in pos]
        if missing:
            raise SchemaError(f"dataset lacks feature ids {missing}")
        cols = [pos[fid] for fid in wanted]
        return Dataset(self.x[:, cols], self.y, wanted, self.patient_ids)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        pids = None
        if self.patient_ids is not None:
            pids = tuple(self.patient_ids[int(r)] for r in rows)
        return Dataset(self.x[rows], self.y[rows], self.feature_ids, pids)


@dataclass(frozen=True)
class ClassWeights:
    """Per-class sample weights (non-severe, severe)."""

    weights: tuple[float, float]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != 2 or any(v <= 0 for v in w):
            raise ValueError(f"need two positive weights, got {self.weights}")
        object.__setattr__(self, "weights", w)

    @property
    def w0(self) -> float:
        return self.weights[0]

    @property
    def w1(self) -> float:
        return self.weights[1]


UNIT_WEIGHTS = ClassWeights((1.0, 1.0))


def class_weights(y) -> ClassWeights:
    """Inverse-frequency weights w_c = N / (2 * N_c), so the mean per-sample
    weight is 1 and total weight equals N."""
    y = np.asarray(y)
    n = len(y)
    n1 = int((y == 1).sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise TrainingError("both classes must be present to derive class weights")
    return ClassWeights((n / (2.0 * n0), n / (2.0 * n1)))


def gini(histogram) -> float:
    """Impurity 1 - sum_c p_c^2 of a weighted class histogram."""
    hist = [float(w) for w in histogram]
    if any(w < 0 for w in hist):
        raise ValueError("histogram weights must be >= 0")
    total = sum(hist)
    if total <= 0:
        raise DegenerateError("gini undefined for zero total weight")
    acc = 0.0
    for w in hist:
        p = w / total
        acc += p * p
    return 1.0 - acc


def split_cost(left_histogram, right_histogram) -> float:
    """Weight-fraction average of the child impurities."""
    wl = sum(float(w) for w in left_histogram)
    wr = sum(float(w) for w in right_histogram)
    total = wl + wr
    if total <= 0:
        raise DegenerateError("split cost undefined when both sides are empty")
    cost = 0.0
    if wl > 0:
        cost += (wl / total) * gini(left_histogram)
    if wr > 0:
        cost += (wr / total) * gini(right_histogram)
    return cost


def _gini_counts(c0: int, c1: int, w0: float, w1: float, w_total: float) -> float:
    # Same expression as the split kernels; w_total is passed in so all
    # call sites agree bitwise.
    p0 = (c0 * w0) / w_total
    p1 = (c1 * w1) / w_total
    return 1.0 - (p0 * p0 + p1 * p1)


@dataclass(frozen=True)
class SplitRecord:
    """One node split: feature, threshold, weighted sizes and impurities."""

    feature_id: int
    threshold: float
    w_total: float
    w_left: float
    w_right: float
    g_total: float
    g_left: float
    g_right: float


@dataclass(frozen=True)
class BestSplit:
    column: int
    threshold: float
    cost: float
    n0_left: int
    n1_left: int
    record: SplitRecord


def best_split(
    x: np.ndarray,
    y: np.ndarray,
    weights: ClassWeights,
    candidates=None,
) -> BestSplit | None:
    """Exhaustive scan over candidate columns and midpoint thresholds.

    Rows with value < threshold go left. Returns the candidate minimizing
    the weighted child impurity, ties broken by lower column then lower
    threshold, or None when no split strictly beats the node's own impurity.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.uint8)
    if candidates is None:
        cand = np.arange(x.shape[1])
    else:
        cand = np.sort(np.asarray(list(candidates), dtype=np.int64))
    n1 = int(y.sum())
    n0 = len(y) - n1
    w0, w1 = weights.w0, weights.w1
    w_total = n0 * w0 + n1 * w1
    g_parent = _gini_counts(n0, n1, w0, w1, w_total)

    values = np.ascontiguousarray(x[:, cand])
    col, thr, cost, n0l, n1l = _kernels.split_scan(
        values, y, w0, w1, n0, n1, w_total
    )
    if col < 0 or not cost < g_parent:
        return None
    n0r, n1r = n0 - n0l, n1 - n1l
    wl = n0l * w0 + n1l * w1
    wr = n0r * w0 + n1r * w1
    record = SplitRecord(
        feature_id=int(cand[col]),
        threshold=thr,
        w_total=w_total,
        w_left=wl,
        w_right=wr,
        g_total=g_parent,
        g_left=_gini_counts(n0l, n1l, w0, w1, wl),
        g_right=_gini_counts(n0r, n1r, w0, w1, wr),
    )
    return BestSplit(int(cand[col]), thr, cost, n0l, n1l, record)


@dataclass(frozen=True)
class ForestParams:
    """Hyper-parameters of one fit. ``features_per_node=None`` resolves to
    floor(sqrt(#active features)); ``weighting`` is "inverse" (class-count
    compensation) or "none" (plain unweighted forest)."""

    trees: int = 500
    features_per_node: int | None = None
    min_leaf_weight: float = 1.0
    max_depth: int | None = None
    weighting: str = "inverse"

    def __post_init__(self):
        if self.trees < 1:
            raise ValueError(f"trees must be >= 1, got {self.trees}")
        if self.features_per_node is not None and self.features_per_node < 1:
            raise ValueError("features_per_node must be >= 1 or None")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.weighting not in ("inverse", "none"):
            raise ValueError(f"weighting must be 'inverse' or 'none', got {self.weighting!r}")

    def to_dict(self) -> dict:
        return {
            "trees": self.trees,
            "features_per_node": self.features_per_node,
            "min_leaf_weight": self.min_leaf_weight,
            "max_depth": self.max_depth,
            "weighting": self.weighting,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestParams":
        return cls(**d)


@dataclass(frozen=True)
class DecisionTree:
    """Flattened binary tree. feature[i] is a global feature id at split
    nodes and -1 at leaves; (n0[i], n1[i]) are the node's class counts."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n0: np.ndarray
    n1: np.ndarray

    def __post_init__(self):
        for name in ("feature", "threshold", "left", "right", "n0", "n1"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max(initial=0))


class _TreeBuilder:
    def __init__(self, x, y, weights, params, feature_ids, rng):
        self.x = x
        self.y = y
        self.w0 = weights.w0
        self.w1 = weights.w1
        self.params = params
        self.feature_ids = feature_ids
        self.rng = rng
        m = x.shape[1]
        fpn = params.features_per_node
        if fpn is None:
            fpn = int(math.floor(math.sqrt(m)))
        self.fpn = max(1, min(fpn, m))
        self.max_depth = params.max_depth if params.max_depth is not None else 2**31
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.n0: list[int] = []
        self.n1: list[int] = []

    def _new_node(self, c0: int, c1: int) -> int:
        idx = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.n0.append(c0)
        self.n1.append(c1)
        return idx

    def build(self, rows: np.ndarray, depth: int) -> int:
        c1 = int(self.y[rows].sum())
        c0 = len(rows) - c1
        node = self._new_node(c0, c1)
        if c0 == 0 or c1 == 0 or depth >= self.max_depth:
            return node
        w_total = c0 * self.w0 + c1 * self.w1
        if w_total <= self.params.min_leaf_weight:
            return node
        cand = np.sort(self.rng.choice(self.x.shape[1], size=self.fpn, replace=False))
        values = np.ascontiguousarray(self.x[rows][:, cand])
        col, thr, cost, _, _ = _kernels.split_scan(
            values, self.y[rows], self.w0, self.w1, c0, c1, w_total
        )
        g_parent = _gini_counts(c0, c1, self.w0, self.w1, w_total)
        if col < 0 or not cost < g_parent:
            return node
        split_col = int(cand[col])
        mask = self.x[rows, split_col] < thr
        left_rows = rows[mask]
        right_rows = rows[~mask]
        assert len(left_rows) > 0 and len(right_rows) > 0
        self.feature[node] = self.feature_ids[split_col]
        self.threshold[node] = thr
        self.left[node] = self.build(left_rows, depth + 1)
        self.right[node] = self.build(right_rows, depth + 1)
        return node

    def finish(self) -> DecisionTree:
        return DecisionTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            n0=np.asarray(self.n0, dtype=np.int64),
            n1=np.asarray(self.n1, dtype=np.int64),
        )


def grow_tree(
    dataset: Dataset,
    weights: ClassWeights,
    params: ForestParams,
    rng: np.random.Generator,
) -> DecisionTree:
    """Grow one tree on all rows of ``dataset``. Per-node feature subsets
    come from ``rng``; recursion stops at purity, at ``min_leaf_weight``, at
    ``max_depth``, or when no split beats the node impurity."""
    if dataset.n_rows == 0:
        raise TrainingError("cannot grow a tree on an empty dataset")
    builder = _TreeBuilder(
        dataset.x, dataset.y, weights, params, dataset.feature_ids, rng
    )
    builder.build(np.arange(dataset.n_rows), 0)
    return builder.finish()


@dataclass(frozen=True)
class Forest:
    trees: tuple[DecisionTree, ...]
    params: ForestParams
    seed: int
    weights: ClassWeights
    feature_ids: tuple[int, ...]
    threshold: float = 0.5

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def fit_forest(
    dataset: Dataset,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    jobs: int = 1,
    threshold: float = 0.5,
) -> Forest:
    """Fit a bootstrap ensemble. Each tree draws its bootstrap rows and its
    per-node feature subsets from an rng derived from (seed, tree index), so
    the result is identical at any ``jobs`` setting."""
    n0, n1 = dataset.class_counts()
    if n0 == 0 or n1 == 0:
        raise TrainingError(
            f"training set must contain both classes, got {n0} non-severe / {n1} severe"
        )
    weights = class_weights(dataset.y) if params.weighting == "inverse" else UNIT_WEIGHTS
    n = dataset.n_rows

    def build(index: int) -> DecisionTree:
        rng = _tree_rng(seed, index)
        rows = rng.integers(0, n, size=n)
        builder = _TreeBuilder(
            dataset.x, dataset.y, weights, params, dataset.feature_ids, rng
        )
        builder.build(rows, 0)
        return builder.finish()

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = tuple(pool.map(build, range(params.trees)))
    else:
        trees = tuple(build(t) for t in range(params.trees))
    return Forest(trees, params, int(seed), weights, dataset.feature_ids, float(threshold))


def _column_lookup(forest: Forest, feature_ids) -> dict[int, int]:
    pos = {int(fid): i for i, fid in enumerate(feature_ids)}
    missing = [fid for fid in forest.feature_ids if fid not in pos]
    if missing:
        raise SchemaError(f"input lacks the model's active feature ids {missing}")
    return pos


def _tree_leaf_fractions(tree: DecisionTree, x: np.ndarray, node_col: np.ndarray, w0: float, w1: float) -> np.ndarray:
    n = x.shape[0]
    idx = np.zeros(n, dtype=np.int64)
    pending = tree.feature[idx] >= 0
    while pending.any():
        rows = np.flatnonzero(pending)
        nodes = idx[rows]
        vals = x[rows, node_col[nodes]]
        go_left = vals < tree.threshold[nodes]
        idx[rows] = np.where(go_left, tree.left[nodes], tree.right[nodes])
        pending[rows] = tree.feature[idx[rows]] >= 0
    wl0 = tree.n0[idx] * w0
    wl1 = tree.n1[idx] * w1
    return wl1 / (wl0 + wl1)


def predict_scores(forest: Forest, x: np.ndarray, feature_ids) -> np.ndarray:
    """Soft severity score per row: the mean over trees of the leaf's
    weighted severe-class fraction."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    pos = _column_lookup(forest, feature_ids)
    id_to_col = np.zeros(max(forest.feature_ids) + 1, dtype=np.int64)
    for fid in forest.feature_ids:
        id_to_col[fid] = pos[fid]
    total = np.zeros(x.shape[0], dtype=np.float64)
    w0, w1 = forest.weights.w0, forest.weights.w1
    for tree in forest.trees:
        node_col = id_to_col[np.maximum(tree.feature, 0)]
        total += _tree_leaf_fractions(tree, x, node_col, w0, w1)
    return total / forest.n_trees


def predict_score(forest: Forest, row, feature_ids=None) -> float:
    if feature_ids is None:
        feature_ids = forest.feature_ids
    return float(predict_scores(forest, np.atleast_2d(row), feature_ids)[0])


def predict_labels(
    forest: Forest, x: np.ndarray, feature_ids, threshold: float | None = None
) -> np.ndarray:
    """Hard labels: severe iff score >= threshold (boundary counts severe)."""
    thr = forest.threshold if threshold is None else float(threshold)
    return (predict_scores(forest, x, feature_ids) >= thr).astype(np.uint8)


def predict(forest: Forest, row, feature_ids=None, threshold: float | None = None) -> str:
    """Class name for one feature row; a score exactly at the threshold
    classifies severe."""
    thr = forest.threshold if threshold is None else float(threshold)
    score = predict_score(forest, row, feature_ids)
    return CLASS_LABELS[1] if score >= thr else CLASS_LABELS[0]


def iter_split_stats(forest: Forest):
    """Yield (feature_id, g_parent, g_left, g_right, w_left, w_right,
    w_total) for every split node, trees in index order. The arithmetic
    mirrors the split kernels exactly."""
    w0, w1 = forest.weights.w0, forest.weights.w1
    for tree in forest.trees:
        for node in range(tree.node_count):
            fid = int(tree.feature[node])
            if fid < 0:
                continue
            li, ri = int(tree.left[node]), int(tree.right[node])
            c0, c1 = int(tree.n0[node]), int(tree.n1[node])
            c0l, c1l = int(tree.n0[li]), int(tree.n1[li])
            c0r, c1r = int(tree.n0[ri]), int(tree.n1[ri])
            w_total = c0 * w0 + c1 * w1
            wl = c0l * w0 + c1l * w1
            wr = c0r * w0 + c1r * w1
            yield (
                fid,
                _gini_counts(c0, c1, w0, w1, w_total),
                _gini_counts(c0l, c1l, w0, w1, wl),
                _gini_counts(c0r, c1r, w0, w1, wr),
                wl,
                wr,
                w_total,
            )


def split_record_at(forest: Forest, tree_index: int, node: int) -> SplitRecord:
    """Materialize the SplitRecord of one internal node."""
    tree = forest.trees[tree_index]
    if tree.is_leaf(node):
        raise ValueError(f"node {node} of tree {tree_index} is a leaf")
    w0, w1 = forest.weights.w0, forest.weights.w1
    li, ri = int(tree.left[node]), int(tree.right[node])
    c0, c1 = int(tree.n0[node]), int(tree.n1[node])
    c0l, c1l = int(tree.n0[li]), int(tree.n1[li])
    c0r, c1r = int(tree.n0[ri]), int(tree.n1[ri])
    w_total = c0 * w0 + c1 * w1
    wl = c0l * w0 + c1l * w1
    wr = c0r * w0 + c1r * w1
    return SplitRecord(
        feature_id=int(tree.feature[node]),
        threshold=float(tree.threshold[node]),
        w_total=w_total,
        w_left=wl,
        w_right=wr,
        g_total=_gini_counts(c0, c1, w0, w1, w_total),
        g_left=_gini_counts(c0l, c1l, w0, w1, wl),
        g_right=_gini_counts(c0r, c1r, w0, w1, wr),
    )


# ---------------------------------------------------------------------------
# Persistence: one JSON document, bit-exact round trip (floats via repr).


def _tree_to_nodes(tree: DecisionTree) -> list[dict]:
    nodes = []
    for i in range(tree.node_count):
        if tree.feature[i] < 0:
            nodes.append({"kind": "leaf", "n": [int(tree.n0[i]), int(tree.n1[i])]})
        else:
            nodes.append(
                {
                    "kind": "split",
                    "feature": int(tree.feature[i]),
                    "threshold": float(tree.threshold[i]),
                    "left": int(tree.left[i]),
                    "right": int(tree.right[i]),
                    "n": [int(tree.n0[i]), int(tree.n1[i])],
                }
            )
    return nodes


def _tree_from_nodes(nodes: list[dict]) -> DecisionTree:
    count = len(nodes)
    feature = np.full(count, -1, dtype=np.int32)
    threshold = np.zeros(count, dtype=np.float64)
    left = np.full(count, -1, dtype=np.int32)
    right = np.full(count, -1, dtype=np.int32)
    n0 = np.zeros(count, dtype=np.int64)
    n1 = np.zeros(count, dtype=np.int64)
    for i, node in enumerate(nodes):
        kind = node.get("kind")
        if kind not in ("leaf", "split"):
            raise FormatError(f"model node {i}: unknown kind {kind!r}")
        counts = node.get("n")
        if not (isinstance(counts, list) and len(counts) == 2):
            raise FormatError(f"model node {i}: field 'n' must be a pair of counts")
        n0[i], n1[i] = int(counts[0]), int(counts[1])
        if n0[i] < 0 or n1[i] < 0 or (kind == "leaf" and n0[i] + n1[i] == 0):
            raise FormatError(f"model node {i}: invalid class counts {counts}")
        if kind == "split":
            for key in ("feature", "threshold", "left", "right"):
                if key not in node:
                    raise FormatError(f"model node {i}: field '{key}' missing")
            feature[i] = int(node["feature"])
            threshold[i] = float(node["threshold"])
            left[i] = int(node["left"])
            right[i] = int(node["right"])
            if not (0 <= left[i] < count and 0 <= right[i] < count):
                raise FormatError(f"model node {i}: child index out of range")
    return DecisionTree(feature, threshold, left, right, n0, n1)


def forest_to_dict(forest: Forest) -> dict:
    return {
        "format": FOREST_FORMAT,
        "params": forest.params.to_dict(),
        "seed": forest.seed,
        "threshold": forest.threshold,
        "class_labels": list(CLASS_LABELS),
        "class_weights": list(forest.weights.weights),
        "active_feature_ids": list(forest.feature_ids),
        "trees": [{"nodes": _tree_to_nodes(t)} for t in forest.trees],
    }


def forest_from_dict(doc: dict) -> Forest:
    if not isinstance(doc, dict) or doc.get("format") != FOREST_FORMAT:
        raise FormatError(f"not a {FOREST_FORMAT} document")
    for key in ("params", "seed", "threshold", "class_weights", "active_feature_ids", "trees"):
        if key not in doc:
            raise FormatError(f"model field '{key}' missing")
    if doc.get("class_labels", list(CLASS_LABELS)) != list(CLASS_LABELS):
        raise FormatError(f"model field 'class_labels' must be {list(CLASS_LABELS)}")
    try:
        params = ForestParams.from_dict(doc["params"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"model field 'params' invalid: {exc}") from exc
    trees = tuple(_tree_from_nodes(t["nodes"]) for t in doc["trees"])
    if not trees:
        raise FormatError("model field 'trees' must hold at least one tree")
    return Forest(
        trees=trees,
        params=params,
        seed=int(doc["seed"]),
        weights=ClassWeights(tuple(doc["class_weights"])),
        feature_ids=tuple(int(i) for i in doc["active_feature_ids"]),
        threshold=float(doc["threshold"]),
    )


def save_forest(forest: Forest, path) -> None:
    Path(path).write_text(
        json.dumps(forest_to_dict(forest), indent=1) + "\n", encoding="utf-8"
    )


def load_forest(path) -> Forest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable model file {path}: {exc}") from exc
    return forest_from_dict(doc)
