import json

import numpy as np
import pytest

from ctsev import _kernels
from ctsev.errors import DegenerateError, SchemaError, TrainingError
from ctsev.forest import (
    Dataset,
    DecisionTree,
    Forest,
    ForestParams,
    UNIT_WEIGHTS,
    best_split,
    class_weights,
    fit_forest,
    forest_to_dict,
    gini,
    grow_tree,
    iter_split_stats,
    load_forest,
    predict,
    predict_labels,
    predict_score,
    predict_scores,
    save_forest,
    split_cost,
)
from oracles import exhaustive_best_split


def make_dataset(x, y, ids=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if ids is None:
        ids = tuple(range(1, x.shape[1] + 1))
    return Dataset(x, np.asarray(y, dtype=np.uint8), ids)


def leaf_tree(n0, n1):
    return DecisionTree(
        feature=np.array([-1], dtype=np.int32),
        threshold=np.zeros(1),
        left=np.array([-1], dtype=np.int32),
        right=np.array([-1], dtype=np.int32),
        n0=np.array([n0], dtype=np.int64),
        n1=np.array([n1], dtype=np.int64),
    )


class TestGini:
    def test_pure_node(self):
        assert gini((1.0, 0.0)) == 0.0

    def test_maximal_binary_impurity(self):
        assert gini((0.5, 0.5)) == 0.5

    def test_direct_value(self):
        assert gini((0.25, 0.75)) == 0.375

    def test_zero_total_weight(self):
        with pytest.raises(DegenerateError):
            gini((0.0, 0.0))

    def test_matches_direct_formula_on_random_histograms(self, rng):
        for _ in range(1000):
            h = rng.random(2) * 10
            if rng.random() < 0.2:
                h[rng.integers(0, 2)] = 0.0
            if h.sum() == 0:
                continue
            p0 = h[0] / (h[0] + h[1])
            p1 = h[1] / (h[0] + h[1])
            expected = 1.0 - (p0 * p0 + p1 * p1)
            got = gini(tuple(h))
            assert got == pytest.approx(expected, abs=1e-15)
            assert 0.0 <= got <= 0.5
            if h[0] == 0.0 or h[1] == 0.0:
                assert got == 0.0


class TestSplitCost:
    def test_pure_children(self):
        assert split_cost((2.0, 0.0), (0.0, 3.0)) == 0.0

    def test_identical_histograms(self):
        assert split_cost((1.0, 3.0), (1.0, 3.0)) == gini((1.0, 3.0))

    def test_hand_value(self):
        assert split_cost((2.0, 0.0), (1.0, 1.0)) == 0.25

    def test_one_empty_side_allowed(self):
        assert split_cost((0.0, 0.0), (1.0, 1.0)) == 0.5

    def test_both_empty_rejected(self):
        with pytest.raises(DegenerateError):
            split_cost((0.0, 0.0), (0.0, 0.0))


class TestBestSplit:
    def test_clean_separation(self):
        ds = make_dataset([1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1])
        got = best_split(ds.x, ds.y, UNIT_WEIGHTS)
        assert got is not None
        assert got.threshold == 2.5
        assert got.cost == 0.0
        assert (got.n0_left, got.n1_left) == (2, 0)

    def test_constant_feature_gives_none(self):
        ds = make_dataset([7.0, 7.0, 7.0], [0, 1, 0])
        assert best_split(ds.x, ds.y, UNIT_WEIGHTS) is None

    def test_picks_the_informative_feature(self):
        x = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0], [5.0, 4.0]])
        y = np.array([0, 0, 1, 1], dtype=np.uint8)
        got = best_split(x, y, UNIT_WEIGHTS)
        oracle = exhaustive_best_split(x, y, 1.0, 1.0, [0, 1])
        assert got.column == oracle[1] == 1
        assert got.threshold == oracle[2]

    def test_no_improvement_gives_none(self):
        # Any threshold leaves a 50/50 mix on both sides.
        x = np.array([[1.0], [1.0], [2.0], [2.0]])
        y = np.array([0, 1, 0, 1], dtype=np.uint8)
        assert best_split(x, y, UNIT_WEIGHTS) is None

    @pytest.mark.parametrize("weighted", [False, True])
    def test_matches_exhaustive_oracle(self, rng, weighted):
        for trial in range(60):
            n = int(rng.integers(2, 120))
            m = int(rng.integers(1, 6))
            # duplicate-heavy values exercise the tie handling
            x = np.round(rng.normal(0, 1, (n, m)), int(rng.integers(0, 3)))
            y = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(np.uint8)
            if weighted and 0 < y.sum() < n:
                w = class_weights(y)
            else:
                w = UNIT_WEIGHTS
            got = best_split(x, y, w)
            oracle = exhaustive_best_split(x, y, w.w0, w.w1, range(m))
            if oracle is None:
                assert got is None
            else:
                assert got is not None
                assert (got.column, got.threshold) == (oracle[1], oracle[2])
                assert got.cost == oracle[0]
                assert (got.n0_left, got.n1_left) == (oracle[3], oracle[4])

    def test_kernel_paths_agree_bitwise(self, rng):
        if not _kernels.HAVE_NUMBA:
            pytest.skip("numba unavailable")
        for trial in range(40):
            n = int(rng.integers(2, 150))
            m = int(rng.integers(1, 8))
            x = np.round(rng.normal(0, 1, (n, m)), int(rng.integers(0, 4)))
            y = (rng.random(n) < 0.5).astype(np.uint8)
            n1 = int(y.sum())
            n0 = n - n1
            w0, w1 = 0.8, 1.7
            wt = n0 * w0 + n1 * w1
            jit = _kernels.split_scan_jit(x, y, w0, w1, n0, n1, wt)
            vec = _kernels.split_scan_numpy(x, y, w0, w1, n0, n1, wt)
            assert jit == vec

    def test_voxel_scan_paths_agree(self, rng):
        if not _kernels.HAVE_NUMBA:
            pytest.skip("numba unavailable")
        hu = rng.integers(-1100, 600, 4000).astype(np.int16)
        lab = rng.integers(0, 19, 4000).astype(np.uint8)
        fl = ((rng.random(4000) < 0.4) & (lab > 0)).astype(np.uint8)
        for a, b in zip(
            _kernels.voxel_scan_jit(hu, lab, fl), _kernels.voxel_scan_numpy(hu, lab, fl)
        ):
            np.testing.assert_array_equal(a, b)


class TestClassWeights:
    def test_cohort_sized(self):
        y = np.concatenate([np.zeros(121), np.ones(55)])
        w = class_weights(y)
        assert w.w0 == pytest.approx(176 / 242, rel=1e-15)
        assert w.w1 == 1.6

    def test_balanced(self):
        assert class_weights([0] * 50 + [1] * 50).weights == (1.0, 1.0)

    def test_three_to_one(self):
        w = class_weights([0, 0, 0, 1])
        assert w.w0 == pytest.approx(4 / 6, rel=1e-15)
        assert w.w1 == 2.0

    def test_missing_class(self):
        with pytest.raises(TrainingError):
            class_weights([0, 0, 0])

    def test_total_weight_equals_n(self, rng):
        y = (rng.random(97) < 0.3).astype(int)
        if 0 < y.sum() < len(y):
            w = class_weights(y)
            total = (y == 0).sum() * w.w0 + (y == 1).sum() * w.w1
            assert total == pytest.approx(len(y), rel=1e-12)


class TestGrowTree:
    def test_separates_training_data(self, rng):
        x = rng.normal(0, 1, (40, 5))
        y = (x[:, 2] > 0).astype(np.uint8)
        ds = make_dataset(x, y)
        tree = grow_tree(ds, UNIT_WEIGHTS, ForestParams(trees=1, features_per_node=5), rng)
        forest = Forest((tree,), ForestParams(trees=1), 0, UNIT_WEIGHTS, ds.feature_ids)
        preds = predict_labels(forest, x, ds.feature_ids)
        assert (preds == y).all()

    def test_single_row_is_a_leaf(self, rng):
        ds = make_dataset([[1.0, 2.0]], [1])
        tree = grow_tree(ds, UNIT_WEIGHTS, ForestParams(trees=1), rng)
        assert tree.node_count == 1
        assert tree.is_leaf(0)

    def test_fixed_seed_reproducible(self):
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        x = np.random.default_rng(0).normal(0, 1, (60, 8))
        y = (x[:, 0] + x[:, 1] > 0).astype(np.uint8)
        ds = make_dataset(x, y)
        t1 = grow_tree(ds, UNIT_WEIGHTS, ForestParams(trees=1), rng1)
        t2 = grow_tree(ds, UNIT_WEIGHTS, ForestParams(trees=1), rng2)
        np.testing.assert_array_equal(t1.feature, t2.feature)
        np.testing.assert_array_equal(t1.threshold, t2.threshold)

    def test_max_depth_respected(self, rng):
        x = rng.normal(0, 1, (200, 4))
        y = (rng.random(200) < 0.5).astype(np.uint8)
        ds = make_dataset(x, y)
        tree = grow_tree(ds, UNIT_WEIGHTS, ForestParams(trees=1, max_depth=3), rng)
        assert tree.depth() <= 3

    def test_accepted_splits_never_increase_impurity(self, rng):
        x = rng.normal(0, 1, (120, 6))
        y = (rng.random(120) < 0.4).astype(np.uint8)
        ds = make_dataset(x, y)
        forest = fit_forest(ds, ForestParams(trees=10), seed=3)
        for fid, g, gl, gr, wl, wr, wt in iter_split_stats(forest):
            cost = (wl / wt) * gl + (wr / wt) * gr
            assert cost < g


class TestFitForest:
    def test_single_tree_separable(self, rng):
        x = rng.normal(0, 1, (50, 3))
        y = (x[:, 1] > 0).astype(np.uint8)
        ds = make_dataset(x, y)
        forest = fit_forest(ds, ForestParams(trees=1, features_per_node=3), seed=1)
        assert (predict_labels(forest, x, ds.feature_ids) == y).all()

    def test_same_seed_same_predictions(self, rng):
        x = rng.normal(0, 1, (80, 10))
        y = (rng.random(80) < 0.4).astype(np.uint8)
        ds = make_dataset(x, y)
        f1 = fit_forest(ds, ForestParams(trees=25), seed=11)
        f2 = fit_forest(ds, ForestParams(trees=25), seed=11)
        probe = rng.normal(0, 1, (30, 10))
        np.testing.assert_array_equal(
            predict_scores(f1, probe, ds.feature_ids),
            predict_scores(f2, probe, ds.feature_ids),
        )

    def test_jobs_do_not_change_results(self, rng):
        x = rng.normal(0, 1, (70, 6))
        y = (rng.random(70) < 0.3).astype(np.uint8)
        ds = make_dataset(x, y)
        f1 = fit_forest(ds, ForestParams(trees=30), seed=2, jobs=1)
        f4 = fit_forest(ds, ForestParams(trees=30), seed=2, jobs=4)
        assert json.dumps(forest_to_dict(f1)) == json.dumps(forest_to_dict(f4))

    def test_single_class_rejected(self):
        ds = make_dataset([[1.0], [2.0]], [1, 1])
        with pytest.raises(TrainingError):
            fit_forest(ds, ForestParams(trees=2), seed=0)

    def test_unweighted_mode_uses_unit_weights(self, rng):
        x = rng.normal(0, 1, (40, 4))
        y = (rng.random(40) < 0.25).astype(np.uint8)
        if not 0 < y.sum() < 40:
            y[:5] = 1
            y[5:] = 0
        ds = make_dataset(x, y)
        forest = fit_forest(ds, ForestParams(trees=3, weighting="none"), seed=0)
        assert forest.weights.weights == (1.0, 1.0)


class TestPredict:
    def test_hand_built_average(self):
        # Two stumps whose single leaves carry severe fractions 0.2 and 0.6.
        t1 = leaf_tree(4, 1)  # 1/5 = 0.2
        t2 = leaf_tree(2, 3)  # 3/5 = 0.6
        forest = Forest((t1, t2), ForestParams(trees=2), 0, UNIT_WEIGHTS, (1,))
        assert predict_score(forest, [0.0]) == pytest.approx(0.4, rel=1e-15)

    def test_pure_leaves(self):
        forest = Forest((leaf_tree(3, 0),), ForestParams(trees=1), 0, UNIT_WEIGHTS, (1,))
        assert predict_score(forest, [0.0]) == 0.0
        forest = Forest((leaf_tree(0, 3),), ForestParams(trees=1), 0, UNIT_WEIGHTS, (1,))
        assert predict_score(forest, [0.0]) == 1.0

    def test_boundary_score_counts_severe(self):
        t1 = leaf_tree(1, 1)  # 0.5 exactly
        forest = Forest((t1,), ForestParams(trees=1), 0, UNIT_WEIGHTS, (1,))
        assert predict_labels(forest, np.zeros((1, 1)), (1,))[0] == 1
        assert predict(forest, [0.0]) == "severe"
        assert predict(forest, [0.0], threshold=0.6) == "non-severe"

    def test_scores_in_convex_hull_of_leaf_fractions(self, rng):
        x = rng.normal(0, 1, (60, 5))
        y = (rng.random(60) < 0.5).astype(np.uint8)
        ds = make_dataset(x, y)
        forest = fit_forest(ds, ForestParams(trees=15), seed=4)
        scores = predict_scores(forest, x, ds.feature_ids)
        assert np.all(scores >= 0.0) and np.all(scores <= 1.0)

    def test_missing_feature_rejected(self, rng):
        x = rng.normal(0, 1, (30, 3))
        y = (x[:, 0] > 0).astype(np.uint8)
        ds = make_dataset(x, y, ids=(2, 5, 9))
        forest = fit_forest(ds, ForestParams(trees=2), seed=0)
        with pytest.raises(SchemaError):
            predict_scores(forest, x[:, :2], (2, 5))


class TestDatasetRestrict:
    def test_column_subset_by_id(self, rng):
        x = rng.normal(0, 1, (10, 4))
        ds = make_dataset(x, (rng.random(10) < 0.5).astype(np.uint8), ids=(3, 7, 11, 40))
        sub = ds.restrict((40, 3))
        assert sub.feature_ids == (3, 40)
        np.testing.assert_array_equal(sub.x[:, 0], x[:, 0])
        np.testing.assert_array_equal(sub.x[:, 1], x[:, 3])

    def test_missing_id_rejected(self, rng):
        ds = make_dataset(rng.normal(0, 1, (5, 2)), [0, 1, 0, 1, 0], ids=(1, 2))
        with pytest.raises(SchemaError):
            ds.restrict((1, 9))


class TestPersistence:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        x = rng.normal(0, 1, (50, 7))
        y = (rng.random(50) < 0.35).astype(np.uint8)
        ds = make_dataset(x, y)
        forest = fit_forest(ds, ForestParams(trees=12, max_depth=6), seed=21)
        path = tmp_path / "model.json"
        save_forest(forest, path)
        loaded = load_forest(path)
        assert json.dumps(forest_to_dict(forest)) == json.dumps(forest_to_dict(loaded))
        probe = rng.normal(0, 1, (20, 7))
        np.testing.assert_array_equal(
            predict_scores(forest, probe, ds.feature_ids),
            predict_scores(loaded, probe, ds.feature_ids),
        )
        save_forest(loaded, tmp_path / "model2.json")
        assert (tmp_path / "model.json").read_bytes() == (tmp_path / "model2.json").read_bytes()

    def test_malformed_documents_rejected(self, tmp_path):
        from ctsev.errors import FormatError

        path = tmp_path / "bad.json"
        path.write_text("{}")
        with pytest.raises(FormatError):
            load_forest(path)
        path.write_text(json.dumps({"format": "ctsev-forest/1", "seed": 0}))
        with pytest.raises(FormatError):
            load_forest(path)
