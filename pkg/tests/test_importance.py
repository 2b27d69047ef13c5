import numpy as np
import pytest

from ctsev.errors import DegenerateError
from ctsev.forest import (
    Dataset,
    DecisionTree,
    Forest,
    ForestParams,
    SplitRecord,
    UNIT_WEIGHTS,
    fit_forest,
    split_record_at,
)
from ctsev.importance import (
    importance_vector,
    node_decrease,
    ranking_rows,
    reduced_gini,
    top_k,
)
from oracles import walk_reduced_gini


def stump(feature_id, threshold, n0, n1, n0_left, n1_left):
    """A single split with two leaves, counts chosen by the caller."""
    return DecisionTree(
        feature=np.array([feature_id, -1, -1], dtype=np.int32),
        threshold=np.array([threshold, 0.0, 0.0]),
        left=np.array([1, -1, -1], dtype=np.int32),
        right=np.array([2, -1, -1], dtype=np.int32),
        n0=np.array([n0, n0_left, n0 - n0_left], dtype=np.int64),
        n1=np.array([n1, n1_left, n1 - n1_left], dtype=np.int64),
    )


def forest_of(trees, feature_ids):
    return Forest(tuple(trees), ForestParams(trees=len(trees)), 0, UNIT_WEIGHTS, feature_ids)


def random_forest_fixture(rng, trees=10, rows=100, cols=6):
    x = rng.normal(0, 1, (rows, cols))
    y = ((x[:, 0] + 0.5 * x[:, 1] + rng.normal(0, 1, rows)) > 0).astype(np.uint8)
    ds = Dataset(x, y, tuple(range(1, cols + 1)))
    return fit_forest(ds, ForestParams(trees=trees), seed=17)


class TestNodeDecrease:
    def test_pure_children_weighted(self):
        rec = SplitRecord(1, 0.0, w_total=4.0, w_left=2.0, w_right=2.0,
                          g_total=0.5, g_left=0.0, g_right=0.0)
        assert node_decrease(rec, "weighted") == 0.5

    def test_no_information_split(self):
        rec = SplitRecord(1, 0.0, w_total=4.0, w_left=2.0, w_right=2.0,
                          g_total=0.5, g_left=0.5, g_right=0.5)
        assert node_decrease(rec, "weighted") == 0.0

    def test_hand_value(self):
        # parent (2,2), children (2,1)/(0,1), unit weights:
        # 0.5 - (3/4)(4/9) - (1/4)(0) = 1/6
        tree = stump(1, 0.0, 2, 2, 2, 1)
        forest = forest_of([tree], (1,))
        rec = split_record_at(forest, 0, 0)
        assert node_decrease(rec, "weighted") == pytest.approx(1 / 6, rel=1e-12)

    def test_literal_mode_goes_negative(self):
        rec = SplitRecord(1, 0.0, w_total=4.0, w_left=2.0, w_right=2.0,
                          g_total=0.5, g_left=0.4, g_right=0.4)
        assert node_decrease(rec, "literal") == pytest.approx(-0.3, rel=1e-12)
        assert node_decrease(rec, "weighted") == pytest.approx(0.1, rel=1e-12)

    def test_unknown_mode(self):
        rec = SplitRecord(1, 0.0, 1.0, 0.5, 0.5, 0.5, 0.0, 0.0)
        with pytest.raises(ValueError):
            node_decrease(rec, "midpoint")


class TestReducedGini:
    def test_unused_feature_is_zero(self, rng):
        forest = random_forest_fixture(rng, trees=5, cols=6)
        used = {fid for fid, *_ in (s for s in iter_stats(forest))}
        for fid in forest.feature_ids:
            if fid not in used:
                assert reduced_gini(forest, fid) == 0.0

    def test_single_split_forest(self):
        tree = stump(1, 0.0, 2, 2, 2, 1)
        forest = forest_of([tree], (1,))
        rec = split_record_at(forest, 0, 0)
        assert reduced_gini(forest, 1, "weighted") == node_decrease(rec, "weighted")

    @pytest.mark.parametrize("mode", ["weighted", "literal"])
    def test_matches_node_walk(self, rng, mode):
        forest = random_forest_fixture(rng, trees=10)
        oracle = walk_reduced_gini(forest, mode)
        for fid in forest.feature_ids:
            expected = oracle.get(fid, 0.0)
            assert reduced_gini(forest, fid, mode) == pytest.approx(expected, abs=1e-12)


def iter_stats(forest):
    from ctsev.forest import iter_split_stats

    return iter_split_stats(forest)


class TestImportanceVector:
    def test_single_feature_takes_all(self):
        trees = [stump(7, 0.0, 3, 3, 3, 0), stump(7, 1.0, 4, 2, 2, 2)]
        forest = forest_of(trees, (3, 7, 9))
        iv = importance_vector(forest)
        assert iv.by_id(7) == 1.0
        assert iv.by_id(3) == 0.0 and iv.by_id(9) == 0.0

    def test_normalization(self, rng):
        forest = random_forest_fixture(rng, trees=8)
        iv = importance_vector(forest)
        assert float(iv.importances.sum()) == pytest.approx(1.0, abs=1e-9)
        assert np.all(iv.importances >= 0.0)

    def test_symmetric_trees_share_importance(self):
        # Two stumps with identical statistics on different features.
        t1 = stump(1, 0.0, 4, 4, 4, 0)
        t2 = stump(2, 0.0, 4, 4, 4, 0)
        forest = forest_of([t1, t2], (1, 2))
        iv = importance_vector(forest)
        assert iv.by_id(1) == iv.by_id(2) == 0.5

    def test_support_property(self, rng):
        forest = random_forest_fixture(rng, trees=6)
        iv = importance_vector(forest)
        used = {fid for fid, *_ in iter_stats(forest)}
        for i, fid in enumerate(iv.feature_ids):
            if iv.importances[i] > 0:
                assert fid in used
            if iv.node_counts[i] == 0:
                assert iv.importances[i] == 0.0

    def test_all_leaf_forest_rejected(self):
        leaf_only = DecisionTree(
            feature=np.array([-1], dtype=np.int32),
            threshold=np.zeros(1),
            left=np.array([-1], dtype=np.int32),
            right=np.array([-1], dtype=np.int32),
            n0=np.array([2], dtype=np.int64),
            n1=np.array([1], dtype=np.int64),
        )
        forest = forest_of([leaf_only], (1,))
        with pytest.raises(DegenerateError):
            importance_vector(forest)

    def test_weighted_decreases_nonnegative_on_fits(self, rng):
        forest = random_forest_fixture(rng, trees=20, rows=150)
        from ctsev.forest import iter_split_stats

        for fid, g, gl, gr, wl, wr, wt in iter_split_stats(forest):
            assert g - ((wl / wt) * gl + (wr / wt) * gr) >= 0.0

    def test_weighted_decrease_nonnegative_on_random_histograms(self, rng):
        # Gini is concave, so the weight-fraction child average never exceeds
        # the parent impurity; allow one ulp of slack for the exact-zero
        # (no-information) records.
        from ctsev.forest import Forest, ForestParams, ClassWeights, split_record_at

        for _ in range(2000):
            c0l, c1l, c0r, c1r = (int(v) for v in rng.integers(0, 40, 4))
            if c0l + c1l == 0 or c0r + c1r == 0:
                continue
            w = ClassWeights(tuple(rng.uniform(0.05, 5.0, 2)))
            tree = stump(1, 0.0, c0l + c0r, c1l + c1r, c0l, c1l)
            forest = Forest((tree,), ForestParams(trees=1), 0, w, (1,))
            rec = split_record_at(forest, 0, 0)
            assert node_decrease(rec, "weighted") >= -4e-16

    def test_literal_negative_on_real_fit(self, rng):
        # Noisy labels make near-no-information splits common; the literal
        # formula subtracts both child impurities and dips below zero there.
        x = rng.normal(0, 1, (200, 4))
        y = (rng.random(200) < 0.5).astype(np.uint8)
        ds = Dataset(x, y, (1, 2, 3, 4))
        forest = fit_forest(ds, ForestParams(trees=20), seed=5)
        decreases = []
        for fid, g, gl, gr, wl, wr, wt in iter_stats(forest):
            decreases.append(g - gl - gr)
        assert min(decreases) < 0.0


class TestTopK:
    def test_k_equals_all(self, rng):
        forest = random_forest_fixture(rng)
        iv = importance_vector(forest)
        got = top_k(iv, len(iv.feature_ids))
        assert sorted(got) == sorted(iv.feature_ids)
        imps = [iv.by_id(fid) for fid in got]
        assert imps == sorted(imps, reverse=True)

    def test_k_one_is_argmax(self, rng):
        forest = random_forest_fixture(rng)
        iv = importance_vector(forest)
        (best,) = top_k(iv, 1)
        assert iv.by_id(best) == max(iv.importances)

    def test_tie_prefers_lower_id(self):
        t1 = stump(12, 0.0, 4, 4, 4, 0)
        t2 = stump(30, 0.0, 4, 4, 4, 0)
        forest = forest_of([t1, t2], (12, 30))
        iv = importance_vector(forest)
        assert top_k(iv, 1) == (12,)

    def test_k_out_of_range(self, rng):
        forest = random_forest_fixture(rng)
        iv = importance_vector(forest)
        with pytest.raises(ValueError):
            top_k(iv, 0)
        with pytest.raises(ValueError):
            top_k(iv, len(iv.feature_ids) + 1)


def test_ranking_rows_are_descending(rng):
    forest = random_forest_fixture(rng, trees=12)
    rows = ranking_rows(importance_vector(forest))
    assert [r["rank"] for r in rows] == list(range(1, len(rows) + 1))
    imps = [r["importance"] for r in rows]
    assert imps == sorted(imps, reverse=True)
