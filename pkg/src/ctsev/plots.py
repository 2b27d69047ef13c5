"""SVG figure emission for protocol reports.

All figures are written as SVG with a fixed hash salt and no creation date,
so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_RC = {
    "svg.hashsalt": "ctsev",
    "svg.fonttype": "none",
    "figure.dpi": 100,
}


def _save(fig, path, description: str) -> None:
    with plt.rc_context(_RC):
        fig.savefig(
            str(path),
            format="svg",
            metadata={"Date": None, "Description": description},
        )
    plt.close(fig)


def save_per_k_metrics_chart(per_k_rows, path, description: str = "") -> None:
    """Grouped bars of validation TPR/TNR/accuracy per feature-count K."""
    ks = [str(r["k"]) for r in per_k_rows]
    x = np.arange(len(ks))
    width = 0.26
    fig, ax = plt.subplots(figsize=(7, 4))
    for offset, (key, label) in enumerate(
        (("tpr", "TPR"), ("tnr", "TNR"), ("accuracy", "Accuracy"))
    ):
        vals = [r[key] for r in per_k_rows]
        ax.bar(x + (offset - 1) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels([f"K{k}" for k in ks])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("validation metric (fold mean)")
    ax.set_title("Model performance by retained feature count")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path, description)


def save_per_k_roc_chart(per_k_roc: dict, path, description: str = "") -> None:
    """Overlay of pooled validation ROC curves, one per K."""
    fig, ax = plt.subplots(figsize=(5.2, 5))
    for k, payload in per_k_roc.items():
        pts = np.asarray(payload["points"])
        ax.plot(pts[:, 0], pts[:, 1], label=f"K{k} (AUC {payload['auc']:.3f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("Validation ROC by retained feature count")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path, description)


def save_roc_chart(points, auc_value: float, path, description: str = "") -> None:
    """Single ROC curve of the pooled test predictions."""
    pts = np.asarray(points)
    fig, ax = plt.subplots(figsize=(5.2, 5))
    ax.plot(pts[:, 0], pts[:, 1], color="tab:blue", label=f"AUC {auc_value:.3f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("Pooled test ROC")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path, description)


def save_ratio_chart(
    patient_ids, labels, ggo_ratio, consolidation_ratio, path, description: str = ""
) -> None:
    """Per-patient GGO and consolidation ratios, non-severe block first."""
    labels = list(labels)
    order = [i for i, lab in enumerate(labels) if lab == "non-severe"] + [
        i for i, lab in enumerate(labels) if lab == "severe"
    ]
    ggo = np.asarray(ggo_ratio)[order]
    cons = np.asarray(consolidation_ratio)[order]
    n_nonsevere = sum(1 for lab in labels if lab == "non-severe")
    x = np.arange(1, len(order) + 1)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(x, ggo, marker=".", linewidth=0.7, label="GGO ratio")
    ax.plot(x, cons, marker=".", linewidth=0.7, label="consolidation ratio")
    if 0 < n_nonsevere < len(order):
        ax.axvline(n_nonsevere + 0.5, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("patient (non-severe block, then severe block)")
    ax.set_ylabel("ratio of whole-lung volume")
    ax.set_title("GGO vs consolidation burden per patient")
    ax.legend(loc="upper left")
    fig.tight_layout()
    _save(fig, path, description)
