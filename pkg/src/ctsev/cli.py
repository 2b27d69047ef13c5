"""Command-line surface: phantom, extract, train, predict, protocol, importance.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. Option precedence is flags > config file > defaults. Every
emitted artifact embeds the tool version and the settings that produced it
(JSON fields, CSV comment lines, SVG metadata), and a protocol report can
be regenerated bit-identically by passing the report itself as --config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    EXIT_DATA,
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_USAGE,
    CtsevError,
    FormatError,
    SchemaError,
    SpecError,
)
from .evaluation import EvaluationReport, ProtocolConfig, run_protocol
from .features import (
    FEATURE_COUNT,
    FEATURE_NAMES,
    extract_features,
    feature_name,
    read_feature_table,
    write_feature_table,
)
from .forest import (
    CLASS_LABELS,
    Dataset,
    ForestParams,
    fit_forest,
    load_forest,
    predict_scores,
    save_forest,
)
from .importance import importance_vector, ranking_rows
from .phantom import SEGMENT_COUNT, DEFAULT_TISSUES, PhantomSpec, TissueModel, generate_phantom
from .volume import (
    DEFAULT_LUNG_MAP,
    LungMap,
    load_infection,
    load_label_map,
    load_volume,
    save_infection,
    save_label_map,
    save_volume,
)
from . import plots

logger = logging.getLogger("ctsev")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Config handling.

_CONFIG_DEFAULTS = {
    "seed": 42,
    "protocol_seed": None,  # defaults to the master seed
    "trees": 500,
    "features_per_node": None,
    "min_leaf_weight": 1.0,
    "max_depth": None,
    "weighting": "inverse",
    "k_grid": [63, 50, 40, 30, 20, 10],
    "importance_mode": "weighted",
    "positive_class": "severe",
    "refit_final": True,
    "threshold": 0.5,
    "n_folds": 3,
    "split_fraction": 0.7,
    "lobe_segments": None,
}


def _load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"config file {path} must hold a JSON object")
    if "config" in doc and isinstance(doc["config"], dict):
        # A protocol report: adopt its embedded config for exact re-runs.
        embedded = doc["config"]
        flat = {
            "protocol_seed": embedded.get("seed"),
            "n_folds": embedded.get("n_folds"),
            "split_fraction": embedded.get("split_fraction"),
            "k_grid": embedded.get("k_grid"),
            "importance_mode": embedded.get("importance_mode"),
            "positive_class": embedded.get("positive_class"),
            "refit_final": embedded.get("refit_final"),
            "threshold": embedded.get("threshold"),
        }
        flat.update(embedded.get("forest", {}))
        return {k: v for k, v in flat.items() if v is not None or k in ("features_per_node", "max_depth")}
    unknown = sorted(set(doc) - set(_CONFIG_DEFAULTS))
    if unknown:
        raise FormatError(f"config file {path} has unknown keys: {unknown}")
    return doc


def _resolve_config(args) -> dict:
    cfg = dict(_CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(_load_config_file(args.config))
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    if cfg["protocol_seed"] is None:
        cfg["protocol_seed"] = cfg["seed"]
    return cfg


def _forest_params(cfg: dict) -> ForestParams:
    return ForestParams(
        trees=int(cfg["trees"]),
        features_per_node=cfg["features_per_node"],
        min_leaf_weight=float(cfg["min_leaf_weight"]),
        max_depth=cfg["max_depth"],
        weighting=cfg["weighting"],
    )


def _protocol_config(cfg: dict) -> ProtocolConfig:
    return ProtocolConfig(
        seed=int(cfg["protocol_seed"]),
        n_folds=int(cfg["n_folds"]),
        split_fraction=float(cfg["split_fraction"]),
        k_grid=tuple(cfg["k_grid"]),
        forest=_forest_params(cfg),
        importance_mode=cfg["importance_mode"],
        positive_class=cfg["positive_class"],
        refit_final=bool(cfg["refit_final"]),
        threshold=float(cfg["threshold"]),
    )


def _lung_map(cfg: dict) -> LungMap:
    if cfg.get("lobe_segments"):
        return LungMap({k: tuple(v) for k, v in cfg["lobe_segments"].items()})
    return DEFAULT_LUNG_MAP


def _stamp(settings: dict) -> str:
    return f"ctsev {__version__} settings={json.dumps(settings, sort_keys=True)}"


# ---------------------------------------------------------------------------
# phantom


def _parse_fraction_field(value, what: str) -> tuple[float, ...]:
    """A fraction field is a number (uniform), an 18-list, or a mapping of
    segment names (RS1..RS10, LS1..LS8, or 'default') to fractions."""
    if isinstance(value, (int, float)):
        return (float(value),) * SEGMENT_COUNT
    if isinstance(value, list):
        if len(value) != SEGMENT_COUNT:
            raise SpecError(f"{what}: list form needs {SEGMENT_COUNT} entries, got {len(value)}")
        return tuple(float(v) for v in value)
    if isinstance(value, dict):
        default = float(value.get("default", 0.0))
        out = [default] * SEGMENT_COUNT
        names = [f"RS{i}" for i in range(1, 11)] + [f"LS{i}" for i in range(1, 9)]
        for key, v in value.items():
            if key == "default":
                continue
            if key not in names:
                raise SpecError(f"{what}: unknown segment name {key!r}")
            out[names.index(key)] = float(v)
        return tuple(out)
    raise SpecError(f"{what}: expected number, list, or mapping, got {type(value).__name__}")


def _phantom_spec_from_entry(entry: dict, defaults: dict, index: int, master_seed: int) -> PhantomSpec:
    merged = dict(defaults)
    merged.update(entry)
    if "dims" not in merged or "spacing_mm" not in merged:
        raise SpecError("phantom spec needs 'dims' and 'spacing_mm' (entry or defaults)")
    seg = _parse_fraction_field(
        merged.get("segment_fractions", 0.85 / SEGMENT_COUNT), "segment_fractions"
    )
    inf = _parse_fraction_field(merged.get("infection_fractions", 0.0), "infection_fractions")
    tissues = dict(DEFAULT_TISSUES)
    for name, payload in merged.get("tissues", {}).items():
        tissues[name] = TissueModel(float(payload["mean_hu"]), float(payload["sd_hu"]))
    seed = merged.get("seed")
    if seed is None:
        seed = master_seed + index
    return PhantomSpec(
        dims=tuple(merged["dims"]),
        spacing_mm=tuple(merged["spacing_mm"]),
        segment_fractions=seg,
        infection_fractions=inf,
        tissues=tissues,
        consolidation_share=float(merged.get("consolidation_share", 0.25)),
        calcification_share=float(merged.get("calcification_share", 0.0)),
        seed=int(seed),
    )


def cmd_phantom(args) -> int:
    cfg = _resolve_config(args)
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable phantom spec {args.spec}: {exc}") from exc
    patients = doc.get("patients")
    if not isinstance(patients, list) or not patients:
        raise SpecError("phantom spec must define a non-empty 'patients' list")
    defaults = doc.get("defaults", {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    manifest_rows = []
    for index, entry in enumerate(patients):
        pid = str(entry.get("id", f"patient{index + 1:03d}"))
        label = entry.get("label", "")
        if label not in ("", *CLASS_LABELS):
            raise SpecError(f"patient {pid}: label must be one of {CLASS_LABELS} or empty")
        spec = _phantom_spec_from_entry(entry, defaults, index, int(cfg["seed"]))
        ct, labels, mask = generate_phantom(spec)
        save_volume(ct, out / f"{pid}_ct.json")
        save_label_map(labels, out / f"{pid}_labels.json")
        save_infection(mask, out / f"{pid}_infection.json")
        manifest_rows.append(
            [pid, label, f"{pid}_ct.json", f"{pid}_labels.json", f"{pid}_infection.json"]
        )

    manifest = out / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_stamp({'command': 'phantom', 'seed': cfg['seed']})}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "label", "ct", "labels", "infection"])
        writer.writerows(manifest_rows)
    logger.info("wrote %d phantom(s) and %s", len(manifest_rows), manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def _read_manifest(path) -> list[dict]:
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows or rows[0] != ["patient_id", "label", "ct", "labels", "infection"]:
        raise SchemaError(
            f"manifest {path} must have header patient_id,label,ct,labels,infection"
        )
    out = []
    for row in rows[1:]:
        if len(row) != 5:
            raise FormatError(f"manifest {path}: expected 5 fields per row, got {len(row)}")
        out.append(
            {
                "patient_id": row[0],
                "label": row[1],
                "ct": path.parent / row[2],
                "labels": path.parent / row[3],
                "infection": path.parent / row[4],
            }
        )
    return out


def cmd_extract(args) -> int:
    cfg = _resolve_config(args)
    lung_map = _lung_map(cfg)
    entries = _read_manifest(args.manifest)
    ids, labels, rows = [], [], []
    failures = 0
    for entry in entries:
        try:
            ct = load_volume(entry["ct"])
            label_map = load_label_map(entry["labels"])
            mask = load_infection(entry["infection"])
            fv = extract_features(ct, label_map, mask, lung_map)
        except (CtsevError, OSError) as exc:
            failures += 1
            logger.error("patient %s failed: %s", entry["patient_id"], exc)
            continue
        ids.append(entry["patient_id"])
        labels.append(entry["label"])
        rows.append(fv.values)
    matrix = np.asarray(rows) if rows else np.empty((0, FEATURE_COUNT))
    write_feature_table(
        args.out,
        ids,
        labels,
        matrix,
        comment=_stamp({"command": "extract", "lobe_segments": cfg["lobe_segments"]}),
    )
    logger.info("extracted %d/%d patients into %s", len(ids), len(entries), args.out)
    return EXIT_DATA if failures else EXIT_OK


# ---------------------------------------------------------------------------
# train / predict


def _dataset_from_table(path, require_labels: bool) -> Dataset:
    ids, labels, matrix = read_feature_table(path)
    if require_labels and any(lab == "" for lab in labels):
        bad = [ids[i] for i, lab in enumerate(labels) if lab == ""][:5]
        raise FormatError(f"feature table {path} has unlabeled rows (e.g. {bad})")
    y = np.asarray([CLASS_LABELS.index(lab) if lab else 0 for lab in labels], dtype=np.uint8)
    return Dataset(matrix, y, tuple(range(1, FEATURE_COUNT + 1)), tuple(ids))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = _dataset_from_table(args.features, require_labels=True)
    forest = fit_forest(
        dataset,
        _forest_params(cfg),
        seed=int(cfg["seed"]),
        jobs=int(args.jobs),
        threshold=float(cfg["threshold"]),
    )
    save_forest(forest, args.out)
    logger.info("trained %d trees on %d rows -> %s", forest.n_trees, dataset.n_rows, args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    forest = load_forest(args.model)
    ids, labels, matrix = read_feature_table(args.features)
    scores = predict_scores(forest, matrix, tuple(range(1, FEATURE_COUNT + 1)))
    preds = (scores >= forest.threshold).astype(np.uint8)
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_stamp({'command': 'predict', 'model_seed': forest.seed})}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["patient_id", "label", *[f"f{i:02d}" for i in range(1, FEATURE_COUNT + 1)],
             "score", "predicted_label"]
        )
        for i, (pid, lab) in enumerate(zip(ids, labels)):
            writer.writerow(
                [pid, lab, *(repr(float(v)) for v in matrix[i]),
                 repr(float(scores[i])), CLASS_LABELS[int(preds[i])]]
            )
    logger.info("scored %d rows -> %s", len(ids), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# protocol


def _write_csv(path, header, rows, stamp: str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    return repr(float(value))


def _write_importance_csv(path, ranking, stamp: str) -> None:
    _write_csv(
        path,
        ["rank", "feature_id", "feature_name", "importance", "reduced_gini", "node_count"],
        [
            [r["rank"], r["feature_id"], feature_name(r["feature_id"]),
             repr(r["importance"]), repr(r["reduced_gini"]), r["node_count"]]
            for r in ranking
        ],
        stamp,
    )


def write_report_artifacts(report: EvaluationReport, out_dir, ggo=None, cons=None,
                           patient_labels=None, patient_ids=None) -> dict:
    """Write report.json, the companion CSVs, and the four SVG figures.
    Returns {artifact name: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp({"command": "protocol", "config": report.config.to_dict()})
    description = stamp

    paths = {}
    report_path = out / "report.json"
    doc = {"tool": {"name": "ctsev", "version": __version__}, **report.to_dict()}
    report_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    paths["report"] = report_path

    per_k_path = out / "per_k_metrics.csv"
    _write_csv(
        per_k_path,
        ["K", "TPR", "TNR", "Accuracy", "AUC"],
        [
            [r["k"], _fmt(r["tpr"]), _fmt(r["tnr"]), _fmt(r["accuracy"]), _fmt(r["auc"])]
            for r in report.per_k_validation_mean
        ],
        stamp,
    )
    paths["per_k_metrics"] = per_k_path

    roc_path = out / "roc_pooled.csv"
    thresholds = report.pooled["roc_thresholds"]
    _write_csv(
        roc_path,
        ["threshold", "fpr", "tpr"],
        [
            ["inf" if thr is None else repr(thr), repr(float(x)), repr(float(y))]
            for thr, (x, y) in zip(thresholds, report.pooled["roc"])
        ],
        stamp,
    )
    paths["roc_pooled"] = roc_path

    imp_path = out / "importance.csv"
    _write_importance_csv(imp_path, report.importance["weighted"], stamp)
    paths["importance"] = imp_path
    imp_lit_path = out / "importance_literal.csv"
    _write_importance_csv(imp_lit_path, report.importance["literal"], stamp)
    paths["importance_literal"] = imp_lit_path

    plots.save_per_k_metrics_chart(
        report.per_k_validation_mean, out / "fig_per_k_metrics.svg", description
    )
    plots.save_per_k_roc_chart(
        report.per_k_validation_roc, out / "fig_per_k_roc.svg", description
    )
    plots.save_roc_chart(
        report.pooled["roc"], report.pooled["auc"], out / "fig_pooled_roc.svg", description
    )
    paths["fig_per_k_metrics"] = out / "fig_per_k_metrics.svg"
    paths["fig_per_k_roc"] = out / "fig_per_k_roc.svg"
    paths["fig_pooled_roc"] = out / "fig_pooled_roc.svg"

    if ggo is not None:
        ratio_path = out / "ggo_consolidation.csv"
        _write_csv(
            ratio_path,
            ["patient_id", "label", "ggo_ratio", "consolidation_ratio"],
            [
                [pid, lab, repr(float(g)), repr(float(c))]
                for pid, lab, g, c in zip(patient_ids, patient_labels, ggo, cons)
            ],
            stamp,
        )
        paths["ggo_consolidation"] = ratio_path
        plots.save_ratio_chart(
            patient_ids, patient_labels, ggo, cons,
            out / "fig_ggo_consolidation.svg", description,
        )
        paths["fig_ggo_consolidation"] = out / "fig_ggo_consolidation.svg"
    return paths


def cmd_protocol(args) -> int:
    cfg = _resolve_config(args)
    dataset = _dataset_from_table(args.features, require_labels=True)
    config = _protocol_config(cfg)
    report = run_protocol(dataset, config, jobs=int(args.jobs))

    labels = [CLASS_LABELS[int(v)] for v in dataset.y]
    ggo_idx = FEATURE_NAMES.index("R(HU[-750,-300))")
    cons_idx = FEATURE_NAMES.index("R(HU[-300,50))")
    write_report_artifacts(
        report,
        args.out,
        ggo=dataset.x[:, ggo_idx],
        cons=dataset.x[:, cons_idx],
        patient_labels=labels,
        patient_ids=dataset.patient_ids,
    )
    logger.info(
        "protocol done: chosen K=%d, pooled accuracy %.3f, AUC %.3f -> %s",
        report.chosen_k,
        report.pooled["accuracy"],
        report.pooled["auc"],
        args.out,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# importance


def cmd_importance(args) -> int:
    forest = load_forest(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp({"command": "importance", "model_seed": forest.seed})
    modes = ("weighted", "literal") if args.mode == "both" else (args.mode,)
    for mode in modes:
        ranking = ranking_rows(importance_vector(forest, mode))
        name = "importance.csv" if mode == "weighted" else "importance_literal.csv"
        _write_importance_csv(out / name, ranking, stamp)
    logger.info("wrote importance report(s) to %s", out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> _Parser:
    parser = _Parser(prog="ctsev", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ctsev {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--config", default=None, help="JSON config file (or a report.json)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for tree fitting")

    p = sub.add_parser("phantom", help="generate synthetic patients from a spec file")
    common(p)
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("extract", help="compute the 63-feature table from a manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="manifest CSV from `ctsev phantom`")
    p.add_argument("--out", required=True, help="output feature CSV")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit a weighted forest on a labeled feature table")
    common(p)
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--out", required=True, help="output model JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a feature table with a saved model")
    common(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--out", required=True, help="output scored CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("protocol", help="run the full cross-validated evaluation")
    common(p)
    p.add_argument("--features", required=True, help="labeled feature CSV")
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--protocol-seed", dest="protocol_seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("importance", help="rank features from a saved model")
    common(p)
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--mode", choices=["weighted", "literal", "both"], default="both")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_importance)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CtsevError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violations and bugs
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
