"""Per-feature impurity-decrease scores aggregated over a trained forest.

Two decrease formulas ship side by side:

* ``weighted`` (default): parent impurity minus the weight-fraction average
  of the child impurities — the standard CART mean-decrease-impurity, never
  negative on fitted trees;
* ``literal``: parent impurity minus the *unweighted sum* of both child
  impurities, which can go negative (e.g. parent 0.5, children 0.4/0.4);
  kept selectable so the two conventions can be compared on real fits.

In both modes a feature's reduced Gini is the *mean* decrease over the
nodes that split on it, and importances are the reduced-Gini values
normalized to sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError
from .forest import Forest, SplitRecord, iter_split_stats

MODES = ("weighted", "literal")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def node_decrease(split: SplitRecord, mode: str = "weighted") -> float:
    """Impurity decrease of one split under the chosen formula."""
    _check_mode(mode)
    if mode == "weighted":
        cost = (split.w_left / split.w_total) * split.g_left + (
            split.w_right / split.w_total
        ) * split.g_right
        return split.g_total - cost
    return split.g_total - split.g_left - split.g_right


@dataclass(frozen=True)
class ImportanceVector:
    """Aligned per-feature arrays: normalized importance, mean reduced Gini,
    and the number of nodes splitting on each feature."""

    feature_ids: tuple[int, ...]
    importances: np.ndarray
    reduced_gini: np.ndarray
    node_counts: np.ndarray

    def __post_init__(self):
        for name in ("importances", "reduced_gini", "node_counts"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def by_id(self, feature_id: int) -> float:
        try:
            idx = self.feature_ids.index(int(feature_id))
        except ValueError:
            raise ValueError(f"feature id {feature_id} not tracked") from None
        return float(self.importances[idx])


def _accumulate(forest: Forest, mode: str):
    ids = forest.feature_ids
    index = {fid: i for i, fid in enumerate(ids)}
    sums = np.zeros(len(ids), dtype=np.float64)
    counts = np.zeros(len(ids), dtype=np.int64)
    for fid, g, gl, gr, wl, wr, wt in iter_split_stats(forest):
        i = index[fid]
        if mode == "weighted":
            cost = (wl / wt) * gl + (wr / wt) * gr
            sums[i] += g - cost
        else:
            sums[i] += g - gl - gr
        counts[i] += 1
    return sums, counts


def reduced_gini(forest: Forest, feature_id: int, mode: str = "weighted") -> float:
    """Mean decrease over all nodes (all trees) splitting on ``feature_id``;
    0 when the feature is never used."""
    _check_mode(mode)
    if feature_id not in forest.feature_ids:
        raise ValueError(f"feature id {feature_id} is not active in this forest")
    sums, counts = _accumulate(forest, mode)
    i = forest.feature_ids.index(feature_id)
    if counts[i] == 0:
        return 0.0
    return float(sums[i] / counts[i])


def importance_vector(forest: Forest, mode: str = "weighted") -> ImportanceVector:
    _check_mode(mode)
    sums, counts = _accumulate(forest, mode)
    if int(counts.sum()) == 0:
        raise DegenerateError("forest has no split nodes; importance undefined")
    g_rd = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    total = float(g_rd.sum())
    if total == 0.0:
        raise DegenerateError("total reduced Gini is zero; importance undefined")
    return ImportanceVector(
        feature_ids=forest.feature_ids,
        importances=g_rd / total,
        reduced_gini=g_rd,
        node_counts=counts,
    )


def top_k(importances: ImportanceVector, k: int) -> tuple[int, ...]:
    """The k feature ids of highest importance, descending; ties broken by
    the lower feature id."""
    n = len(importances.feature_ids)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    ids = np.asarray(importances.feature_ids, dtype=np.int64)
    order = np.lexsort((ids, -importances.importances))
    return tuple(int(fid) for fid in ids[order][:k])


def ranking_rows(importances: ImportanceVector) -> list[dict]:
    """Full descending ranking as plain dicts (rank, feature_id, importance,
    reduced_gini, node_count)."""
    order = top_k(importances, len(importances.feature_ids))
    index = {fid: i for i, fid in enumerate(importances.feature_ids)}
    rows = []
    for rank, fid in enumerate(order, start=1):
        i = index[fid]
        rows.append(
            {
                "rank": rank,
                "feature_id": fid,
                "importance": float(importances.importances[i]),
                "reduced_gini": float(importances.reduced_gini[i]),
                "node_count": int(importances.node_counts[i]),
            }
        )
    return rows
