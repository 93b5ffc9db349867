"""Report figures: group AUCs, attention entropy, confusion with ROI, ROC, training curves.

Everything renders off-screen with the Agg backend and is written with fixed PNG metadata,
so the same inputs give byte-identical files.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "casemil",
}
BENIGN_COLOR = "#4C72B0"
MALIGNANT_COLOR = "#C44E52"


def _figure(width: float = 4.5, height: float | None = None):
    fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no Software/date chunks: identical inputs, identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def group_auc_bars(groups: dict[str, dict], path) -> Path:
    """Bar per case group; groups without a defined AUC are drawn as an empty slot marked n/a."""
    names = list(groups)
    with plt.rc_context(STYLE):
        fig, ax = _figure(5.5)
        for i, g in enumerate(names):
            a = groups[g]["auc"]
            if isinstance(a, float) and math.isfinite(a):
                ax.bar(i, a, color=BENIGN_COLOR if g != "All" else "0.35", width=0.7)
                ax.text(i, a + 0.01, f"{a:.2f}", ha="center", va="bottom", fontsize=7)
            else:
                ax.text(i, 0.02, "n/a", ha="center", va="bottom", fontsize=7, color="0.4")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels([f"{g}\n(n={groups[g]['n']})" for g in names], fontsize=7)
        ax.set_ylim(0, 1.08)
        ax.axhline(0.5, color="0.6", lw=0.8, ls=":")
        ax.set_ylabel("AUC")
        ax.set_title("Test AUC per view-combination group")
        return _save(fig, path)


def entropy_plot(benign: Sequence[float], malignant: Sequence[float], uniform: float, path) -> Path:
    """Strip plot of per-case attention entropy by class, with the uniform-weight level."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        rng = np.random.default_rng(0)  # jitter only; fixed for reproducible files
        for x, vals, color, name in ((0, benign, BENIGN_COLOR, "benign"), (1, malignant, MALIGNANT_COLOR, "malignant")):
            vals = np.asarray(vals, dtype=float)
            if vals.size:
                ax.scatter(x + rng.uniform(-0.15, 0.15, vals.size), vals, s=8, alpha=0.5, color=color, lw=0)
                ax.plot([x - 0.25, x + 0.25], [vals.mean()] * 2, color="k", lw=1.5)
        ax.axhline(uniform, color="0.4", ls="--", lw=1, label=f"uniform ln4 = {uniform:.3f}")
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["benign cases", "malignant cases"])
        ax.set_xlim(-0.6, 1.6)
        ax.set_ylabel("attention entropy (nats)")
        ax.legend(loc="lower right")
        return _save(fig, path)


def confusion_plot(table: np.ndarray, rows: Sequence[str], cols: Sequence[str], path) -> Path:
    table = np.asarray(table)
    with plt.rc_context(STYLE):
        fig, ax = _figure(4.5, 2.4)
        ax.imshow(table, cmap="Blues", aspect="auto")
        for (i, j), v in np.ndenumerate(table):
            ax.text(j, i, str(int(v)), ha="center", va="center",
                    color="white" if v > table.max() / 2 else "black")
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(cols)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(rows)
        ax.set_xlabel("prediction + ROI candidate hit")
        for s in ax.spines.values():
            s.set_visible(False)
        return _save(fig, path)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) with one step per distinct score, descending."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    p, n = max(y.sum(), 1), max((1 - y).sum(), 1)
    return np.r_[0.0, fp / n], np.r_[0.0, tp / p]


def roc_plot(scores: Sequence[float], labels: Sequence[int], auc_value, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure(3.6, 3.6)
        if len(set(int(v) for v in labels)) == 2:
            fpr, tpr = roc_curve(scores, labels)
            ax.plot(fpr, tpr, color=MALIGNANT_COLOR, lw=1.5, label=f"AUC = {auc_value:.3f}")
            ax.legend(loc="lower right")
        else:
            ax.text(0.5, 0.5, "single-class set: ROC n/a", ha="center")
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls=":")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        return _save(fig, path)


def parse_train_log(text: str) -> dict[str, dict[str, list[float]]]:
    """split -> metric -> per-epoch values, from ``epoch=.. split=.. loss=.. f1=.. auc=..`` lines."""
    out: dict[str, dict[str, list[float]]] = {}
    for line in text.splitlines():
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        if "epoch" not in fields or "split" not in fields:
            continue
        rec = out.setdefault(fields["split"], {"epoch": [], "loss": [], "auc": [], "f1": []})
        for key in rec:
            rec[key].append(float(fields.get(key, "nan")))
    return out


def training_curves(log_text: str, path) -> Path:
    curves = parse_train_log(log_text)
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for split, rec in sorted(curves.items()):
            style = "-" if split == "train" else "--"
            ax_l.plot(rec["epoch"], rec["loss"], style, label=split)
            ax_a.plot(rec["epoch"], rec["auc"], style, label=split)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("AUC")
        ax_a.set_ylim(0, 1.02)
        ax_l.legend()
        return _save(fig, path)
