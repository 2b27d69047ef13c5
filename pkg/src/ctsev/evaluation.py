"""Cross-validated severity-assessment protocol.

The full run: stratified k-fold over the cohort; within each fold the
non-test rows are split 70/30 into train/validation, a grid search over the
feature-count grid picks that fold's K (train a full-feature forest, rank
features by importance, refit on the top K, score the validation rows), the
chosen-K model is refit on train+validation and applied to the test fold.
Test predictions are pooled across folds into one confusion matrix and one
ROC curve; per-fold numbers are kept alongside.

Severe is the positive class everywhere. Every random decision is derived
from the protocol seed and fixed tags, so a report is a pure function of
(dataset, config) and regenerates bit-identically at any parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import DegenerateError, SpecError, StratificationError
from .features import FEATURE_COUNT, RATIO_IDS, extract_features
from .forest import (
    CLASS_LABELS,
    Dataset,
    Forest,
    ForestParams,
    fit_forest,
    predict_scores,
)
from .importance import importance_vector, ranking_rows, top_k
from .phantom import PhantomSpec, generate_phantom

DEFAULT_K_GRID = (63, 50, 40, 30, 20, 10)

# Tags for deriving independent rng streams from the protocol seed.
_TAG_FOLDS = 1
_TAG_SPLIT = 2
_TAG_GRID = 3
_TAG_FINAL = 5
_TAG_COHORT = 6
_TAG_REPORT_MODEL = 7


def derive_seed(*parts: int) -> int:
    """Deterministic scalar seed from integer components."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_row: np.ndarray
    k: int
    seed: int

    def __post_init__(self):
        arr = np.asarray(self.fold_of_row, dtype=np.int64)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "fold_of_row", arr)

    def rows_in(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row == fold)

    def rows_out(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row != fold)


def stratified_kfold(y, k: int, seed: int) -> FoldAssignment:
    """Shuffle each class independently and deal rows round-robin into k
    folds (the dealing pointer runs on across classes, so fold sizes stay
    balanced even when both class sizes leave remainders)."""
    y = np.asarray(y)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    pos = 0
    for cls in (0, 1):
        rows = np.flatnonzero(y == cls)
        if len(rows) < k:
            raise StratificationError(
                f"class {CLASS_LABELS[cls]!r} has {len(rows)} rows; "
                f"cannot stratify into {k} folds"
            )
        rows = rng.permutation(rows)
        for r in rows:
            fold[r] = pos % k
            pos += 1
    return FoldAssignment(fold, k, int(seed))


def stratified_split(y, fraction: float = 0.7, seed: int = 0):
    """Per-class split at ``fraction`` (rounded half up), shuffled by seed.
    Returns (train_rows, holdout_rows), both sorted ascending."""
    y = np.asarray(y)
    if not 0.0 < fraction < 1.0:
        raise StratificationError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_parts = []
    hold_parts = []
    for cls in (0, 1):
        rows = np.flatnonzero(y == cls)
        if len(rows) == 0:
            continue
        n_train = int(math.floor(len(rows) * fraction + 0.5))
        if n_train == 0 or n_train == len(rows):
            raise StratificationError(
                f"class {CLASS_LABELS[cls]!r}: fraction {fraction} leaves an "
                f"empty side ({n_train} of {len(rows)} rows in train)"
            )
        rows = rng.permutation(rows)
        train_parts.append(rows[:n_train])
        hold_parts.append(rows[n_train:])
    train = np.sort(np.concatenate(train_parts))
    hold = np.sort(np.concatenate(hold_parts))
    if train.size == 0 or hold.size == 0:
        raise StratificationError("split produced an empty side")
    return train, hold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp}


def confusion_metrics(y_true, y_pred):
    """Returns (ConfusionCounts, tpr, tnr, accuracy) with severe positive.
    A rate whose truth class is absent is None, never 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have equal length")
    if y_true.size == 0:
        raise ValueError("empty truth")
    tp = int(np.count_nonzero((y_true == 1) & (y_pred == 1)))
    fn = int(np.count_nonzero((y_true == 1) & (y_pred == 0)))
    tn = int(np.count_nonzero((y_true == 0) & (y_pred == 0)))
    fp = int(np.count_nonzero((y_true == 0) & (y_pred == 1)))
    counts = ConfusionCounts(tp, fn, tn, fp)
    tpr = tp / (tp + fn) if tp + fn > 0 else None
    tnr = tn / (tn + fp) if tn + fp > 0 else None
    accuracy = (tp + tn) / counts.total
    return counts, tpr, tnr, accuracy


@dataclass(frozen=True)
class RocCurve:
    """Threshold sweep anchored at (0,0) and (1,1); thresholds[i] is the
    smallest score classified severe at points[i] (+inf at the anchor)."""

    points: np.ndarray
    thresholds: np.ndarray
    auc: float

    def __post_init__(self):
        for name in ("points", "thresholds"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _trapezoid(points: np.ndarray) -> float:
    x = points[:, 0]
    y = points[:, 1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


def roc_curve(y_true, scores) -> RocCurve:
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.shape != scores.shape:
        raise ValueError("y_true and scores must have equal length")
    n_pos = int(np.count_nonzero(y_true == 1))
    n_neg = int(np.count_nonzero(y_true == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateError("ROC undefined when the truth has a single class")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = y_true[order]
    # last index of each tie group of equal scores
    boundary = np.flatnonzero(np.diff(s) != 0)
    idx = np.concatenate([boundary, [len(s) - 1]])
    tps = np.cumsum(t == 1)[idx]
    fps = (idx + 1) - tps
    points = np.empty((len(idx) + 1, 2), dtype=np.float64)
    points[0] = (0.0, 0.0)
    points[1:, 0] = fps / n_neg
    points[1:, 1] = tps / n_pos
    thresholds = np.concatenate([[np.inf], s[idx]])
    return RocCurve(points, thresholds, _trapezoid(points))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve's points."""
    return _trapezoid(curve.points)


def paired_t_test(a, b):
    """Classical paired t on the differences a - b, df = n - 1; two-sided
    p via the regularized incomplete beta function."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("series must be 1-D with equal length")
    n = a.size
    if n < 2:
        raise ValueError(f"need at least 2 pairs, got {n}")
    d = a - b
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateError("differences have zero variance; t undefined")
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(0.5 * df, 0.5, df / (df + t * t)))
    return t, p


# ---------------------------------------------------------------------------
# Grid search and the full protocol.


@dataclass(frozen=True)
class ProtocolConfig:
    seed: int = 42
    n_folds: int = 3
    split_fraction: float = 0.7
    k_grid: tuple[int, ...] = DEFAULT_K_GRID
    forest: ForestParams = field(default_factory=ForestParams)
    importance_mode: str = "weighted"
    positive_class: str = "severe"
    refit_final: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.positive_class != "severe":
            raise ValueError("only 'severe' is supported as the positive class")
        if self.importance_mode not in ("weighted", "literal"):
            raise ValueError(f"importance_mode invalid: {self.importance_mode!r}")
        grid = tuple(int(k) for k in self.k_grid)
        if not grid or any(not 1 <= k <= FEATURE_COUNT for k in grid):
            raise ValueError(f"k_grid values must lie in 1..{FEATURE_COUNT}")
        if len(set(grid)) != len(grid):
            raise ValueError("k_grid values must be unique")
        object.__setattr__(self, "k_grid", grid)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_folds": self.n_folds,
            "split_fraction": self.split_fraction,
            "k_grid": list(self.k_grid),
            "forest": self.forest.to_dict(),
            "importance_mode": self.importance_mode,
            "positive_class": self.positive_class,
            "refit_final": self.refit_final,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        d = dict(d)
        d["forest"] = ForestParams.from_dict(d.get("forest", {}))
        d["k_grid"] = tuple(d.get("k_grid", DEFAULT_K_GRID))
        return cls(**d)


@dataclass(frozen=True)
class GridCell:
    k: int
    feature_ids: tuple[int, ...]
    tpr: float | None
    tnr: float | None
    accuracy: float
    auc: float
    roc_points: np.ndarray
    model: Forest


@dataclass(frozen=True)
class GridSearchResult:
    chosen_k: int
    cells: tuple[GridCell, ...]
    ranking: tuple[int, ...]
    full_model: Forest


def _choose_k(cells) -> int:
    best = None
    for cell in cells:
        key = (cell.accuracy, cell.auc, -cell.k)
        if best is None or key > best[0]:
            best = (key, cell.k)
    return best[1]


def grid_search_k(
    train: Dataset,
    validation: Dataset,
    k_grid=DEFAULT_K_GRID,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    importance_mode: str = "weighted",
    jobs: int = 1,
    threshold: float = 0.5,
) -> GridSearchResult:
    """For each K: rank features with a full-feature forest, refit on the
    top K, and score the validation rows. K with the best validation
    accuracy wins; ties go to the higher AUC, then the smaller K."""
    full_model = fit_forest(train, params, derive_seed(seed, 0), jobs, threshold)
    ranking = top_k(importance_vector(full_model, importance_mode), len(train.feature_ids))
    cells = []
    for k in k_grid:
        active = tuple(sorted(ranking[:k]))
        model = fit_forest(
            train.restrict(active), params, derive_seed(seed, k), jobs, threshold
        )
        scores = predict_scores(model, validation.x, validation.feature_ids)
        preds = (scores >= threshold).astype(np.uint8)
        _, tpr, tnr, accuracy = confusion_metrics(validation.y, preds)
        curve = roc_curve(validation.y, scores)
        cells.append(
            GridCell(k, active, tpr, tnr, accuracy, curve.auc, curve.points, model)
        )
    cells = tuple(cells)
    return GridSearchResult(_choose_k(cells), cells, ranking, full_model)


def _rate(value):
    return None if value is None else float(value)


@dataclass(frozen=True)
class EvaluationReport:
    """Everything produced by one protocol run, JSON-serializable via
    ``to_dict``. ``config`` plus the dataset regenerate it bit-identically."""

    config: ProtocolConfig
    n_rows: int
    class_counts: tuple[int, int]
    folds: tuple[dict, ...]
    per_k_validation_mean: tuple[dict, ...]
    per_k_validation_roc: dict
    chosen_k: int
    pooled: dict
    row_scores: tuple[dict, ...]
    importance: dict

    def to_dict(self) -> dict:
        return {
            "positive_class": self.config.positive_class,
            "config": self.config.to_dict(),
            "cohort": {
                "n_rows": self.n_rows,
                "class_counts": {
                    CLASS_LABELS[0]: self.class_counts[0],
                    CLASS_LABELS[1]: self.class_counts[1],
                },
            },
            "folds": list(self.folds),
            "per_k_validation_mean": list(self.per_k_validation_mean),
            "per_k_validation_roc": self.per_k_validation_roc,
            "chosen_k": self.chosen_k,
            "pooled": self.pooled,
            "row_scores": list(self.row_scores),
            "importance": self.importance,
        }


def run_protocol(dataset: Dataset, config: ProtocolConfig, jobs: int = 1) -> EvaluationReport:
    if dataset.feature_ids != tuple(range(1, FEATURE_COUNT + 1)):
        raise ValueError(f"protocol requires all {FEATURE_COUNT} features")
    n0, n1 = dataset.class_counts()
    base = config.seed
    assignment = stratified_kfold(dataset.y, config.n_folds, derive_seed(base, _TAG_FOLDS))

    fold_summaries = []
    val_scores_by_k: dict[int, list] = {k: [] for k in config.k_grid}
    val_truth_by_k: dict[int, list] = {k: [] for k in config.k_grid}
    pooled_scores = np.full(dataset.n_rows, np.nan)
    pooled_fold = np.full(dataset.n_rows, -1, dtype=np.int64)

    for fold in range(config.n_folds):
        test_rows = assignment.rows_in(fold)
        rest_rows = assignment.rows_out(fold)
        rest = dataset.subset(rest_rows)
        train_idx, val_idx = stratified_split(
            rest.y, config.split_fraction, derive_seed(base, _TAG_SPLIT, fold)
        )
        train = rest.subset(train_idx)
        validation = rest.subset(val_idx)
        grid = grid_search_k(
            train,
            validation,
            config.k_grid,
            config.forest,
            derive_seed(base, _TAG_GRID, fold),
            config.importance_mode,
            jobs,
            config.threshold,
        )
        chosen_cell = next(c for c in grid.cells if c.k == grid.chosen_k)
        if config.refit_final:
            final_model = fit_forest(
                rest.restrict(chosen_cell.feature_ids),
                config.forest,
                derive_seed(base, _TAG_FINAL, fold),
                jobs,
                config.threshold,
            )
        else:
            final_model = chosen_cell.model
        test = dataset.subset(test_rows)
        scores = predict_scores(final_model, test.x, test.feature_ids)
        preds = (scores >= config.threshold).astype(np.uint8)
        counts, tpr, tnr, accuracy = confusion_metrics(test.y, preds)
        curve = roc_curve(test.y, scores)
        pooled_scores[test_rows] = scores
        pooled_fold[test_rows] = fold
        for cell in grid.cells:
            val_scores_by_k[cell.k].append(
                predict_scores(cell.model, validation.x, validation.feature_ids)
            )
            val_truth_by_k[cell.k].append(validation.y)
        fold_summaries.append(
            {
                "fold": fold,
                "test_rows": [int(r) for r in test_rows],
                "chosen_k": grid.chosen_k,
                "grid": [
                    {
                        "k": c.k,
                        "feature_ids": list(c.feature_ids),
                        "tpr": _rate(c.tpr),
                        "tnr": _rate(c.tnr),
                        "accuracy": float(c.accuracy),
                        "auc": float(c.auc),
                    }
                    for c in grid.cells
                ],
                "test": {
                    "confusion": counts.to_dict(),
                    "tpr": _rate(tpr),
                    "tnr": _rate(tnr),
                    "accuracy": float(accuracy),
                    "auc": float(curve.auc),
                },
            }
        )

    assert not np.isnan(pooled_scores).any()
    pooled_preds = (pooled_scores >= config.threshold).astype(np.uint8)
    pooled_counts, p_tpr, p_tnr, p_acc = confusion_metrics(dataset.y, pooled_preds)
    pooled_curve = roc_curve(dataset.y, pooled_scores)

    per_k_mean = []
    per_k_roc = {}
    for k in config.k_grid:
        rows = [
            next(c for c in f["grid"] if c["k"] == k) for f in fold_summaries
        ]
        per_k_mean.append(
            {
                "k": k,
                "tpr": float(np.mean([r["tpr"] for r in rows])),
                "tnr": float(np.mean([r["tnr"] for r in rows])),
                "accuracy": float(np.mean([r["accuracy"] for r in rows])),
                "auc": float(np.mean([r["auc"] for r in rows])),
            }
        )
        pooled_val = roc_curve(
            np.concatenate(val_truth_by_k[k]), np.concatenate(val_scores_by_k[k])
        )
        per_k_roc[str(k)] = {
            "points": [[float(x), float(y)] for x, y in pooled_val.points],
            "auc": float(pooled_val.auc),
        }

    chosen_k = _choose_k(
        [
            GridCell(r["k"], (), r["tpr"], r["tnr"], r["accuracy"], r["auc"], np.empty((0, 2)), None)
            for r in per_k_mean
        ]
    )

    # One full-cohort, full-feature fit provides the report's feature
    # ranking (both decrease formulas).
    report_model = fit_forest(
        dataset, config.forest, derive_seed(base, _TAG_REPORT_MODEL), jobs, config.threshold
    )
    importance = {
        mode: ranking_rows(importance_vector(report_model, mode))
        for mode in ("weighted", "literal")
    }

    row_scores = tuple(
        {
            "row": int(i),
            "patient_id": dataset.patient_ids[i] if dataset.patient_ids else str(i),
            "truth": CLASS_LABELS[int(dataset.y[i])],
            "fold": int(pooled_fold[i]),
            "score": float(pooled_scores[i]),
            "predicted": CLASS_LABELS[int(pooled_preds[i])],
        }
        for i in range(dataset.n_rows)
    )

    return EvaluationReport(
        config=config,
        n_rows=dataset.n_rows,
        class_counts=(n0, n1),
        folds=tuple(fold_summaries),
        per_k_validation_mean=tuple(per_k_mean),
        per_k_validation_roc=per_k_roc,
        chosen_k=chosen_k,
        pooled={
            "confusion": pooled_counts.to_dict(),
            "tpr": _rate(p_tpr),
            "tnr": _rate(p_tnr),
            "accuracy": float(p_acc),
            "auc": float(pooled_curve.auc),
            "roc": [[float(x), float(y)] for x, y in pooled_curve.points],
            "roc_thresholds": [
                None if math.isinf(t) else float(t) for t in pooled_curve.thresholds
            ],
        },
        row_scores=row_scores,
        importance=importance,
    )


# ---------------------------------------------------------------------------
# Synthetic cohorts.


@dataclass(frozen=True)
class CohortSpec:
    """Class-conditional recipe for a labeled synthetic cohort.

    ``gaussian`` mode draws each feature from a per-class normal
    distribution (ratio features clamped to [0,1], volumes to >= 0);
    ``phantom`` mode builds one small phantom per patient with a
    class-conditional infection level and extracts real features, so all
    additivity invariants hold on the rows.
    """

    n_per_class: tuple[int, int] = (121, 55)
    seed: int = 0
    mode: str = "gaussian"
    class_means: np.ndarray | None = None
    class_sds: np.ndarray | None = None
    phantom_dims: tuple[int, int, int] = (12, 12, 8)
    phantom_spacing: tuple[float, float, float] = (2.0, 2.0, 2.5)
    infection_level: tuple[float, float] = (0.08, 0.45)
    infection_spread: float = 0.5

    def __post_init__(self):
        n = tuple(int(v) for v in self.n_per_class)
        if len(n) != 2 or any(v < 1 for v in n):
            raise SpecError(f"n_per_class must be two positive counts, got {self.n_per_class}")
        object.__setattr__(self, "n_per_class", n)
        if self.mode not in ("gaussian", "phantom"):
            raise SpecError(f"mode must be 'gaussian' or 'phantom', got {self.mode!r}")
        if self.mode == "gaussian":
            means = np.asarray(self.class_means, dtype=np.float64)
            sds = np.asarray(self.class_sds, dtype=np.float64)
            if means.shape != (2, FEATURE_COUNT) or sds.shape != (2, FEATURE_COUNT):
                raise SpecError(
                    f"gaussian mode needs (2, {FEATURE_COUNT}) class_means/class_sds"
                )
            if np.any(sds <= 0):
                raise SpecError("class_sds must be positive")
            means = means.copy()
            means.setflags(write=False)
            sds = sds.copy()
            sds.setflags(write=False)
            object.__setattr__(self, "class_means", means)
            object.__setattr__(self, "class_sds", sds)
        else:
            lvl = tuple(float(v) for v in self.infection_level)
            if len(lvl) != 2 or any(not 0.0 <= v <= 1.0 for v in lvl):
                raise SpecError("infection_level must be two fractions in [0, 1]")
            object.__setattr__(self, "infection_level", lvl)


def _baseline_means() -> np.ndarray:
    """Plausible magnitudes for all 63 features of a non-severe patient."""
    m = np.zeros(FEATURE_COUNT)
    m[0:3] = (4000.0, 2200.0, 1800.0)  # lung volumes, mL
    for i in range(3, 55, 2):
        m[i] = 40.0   # infection volumes
        m[i + 1] = 0.05  # infection ratios
    m[55:63] = (3200.0, 0.80, 500.0, 0.125, 240.0, 0.06, 60.0, 0.015)
    return m


def gaussian_cohort_spec(
    n_per_class=(121, 55),
    seed: int = 0,
    separation: float = 0.0,
    signal_features=(4, 5, 6, 7, 58, 59, 60, 61),
    noise_scale: float = 1.0,
) -> CohortSpec:
    """Gaussian cohort whose severe class is shifted by ``separation``
    standard deviations on the signal features; ``separation=0`` gives a
    null cohort with no class information."""
    means = np.stack([_baseline_means(), _baseline_means()])
    sds = np.stack([np.maximum(np.abs(_baseline_means()) * 0.25, 0.01)] * 2) * noise_scale
    for fid in signal_features:
        idx = int(fid) - 1
        means[1, idx] += separation * sds[1, idx]
    return CohortSpec(
        n_per_class=tuple(n_per_class),
        seed=seed,
        mode="gaussian",
        class_means=means,
        class_sds=sds,
    )


def synth_cohort(spec: CohortSpec) -> Dataset:
    """Draw a labeled 63-feature cohort; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n0, n1 = spec.n_per_class
    y = np.concatenate([np.zeros(n0, np.uint8), np.ones(n1, np.uint8)])
    rows = np.empty((n0 + n1, FEATURE_COUNT), dtype=np.float64)
    if spec.mode == "gaussian":
        ratio_idx = np.asarray(sorted(RATIO_IDS)) - 1
        for i in range(n0 + n1):
            cls = int(y[i])
            row = rng.normal(spec.class_means[cls], spec.class_sds[cls])
            row = np.maximum(row, 0.0)
            row[ratio_idx] = np.minimum(row[ratio_idx], 1.0)
            rows[i] = row
    else:
        lo, hi = 0.0, 1.0
        for i in range(n0 + n1):
            cls = int(y[i])
            level = spec.infection_level[cls]
            frac = np.clip(
                rng.normal(level, level * spec.infection_spread + 1e-3, 18), lo, hi
            )
            ph = PhantomSpec(
                dims=spec.phantom_dims,
                spacing_mm=spec.phantom_spacing,
                segment_fractions=(0.85 / 18,) * 18,
                infection_fractions=tuple(float(f) for f in frac),
                consolidation_share=0.3,
                seed=derive_seed(spec.seed, _TAG_COHORT, i),
            )
            ct, labels, mask = generate_phantom(ph)
            rows[i] = extract_features(ct, labels, mask).values
    pids = tuple(f"synth-{i + 1:04d}" for i in range(n0 + n1))
    return Dataset(rows, y, tuple(range(1, FEATURE_COUNT + 1)), pids)
