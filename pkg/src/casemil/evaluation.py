"""Metrics and analysis protocols: F1, AUC, IoU/DSC, attention entropy, proxy labels, reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .casedata import GROUP_NAMES, CaseRecord, Label, case_group_of, group_batches
from .model import CaseModel

IOU_MODES = ("best-of-topk", "mean-all-rois", "top-attention")
ROI_MATCH_THRESHOLD = 0.1
ATTENTION_THRESHOLD = 0.25
PROBABILITY_THRESHOLD = 0.5


# ---------------------------------------------------------------- classification metrics

def f1(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """F1 of the malignant class; a score above ``threshold`` predicts malignant."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("f1 needs equal-length, non-empty inputs")
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_malignant > score_benign), ties count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC undefined: need both classes")
    order = np.sort(neg)
    below = np.searchsorted(order, pos, side="left")
    upto = np.searchsorted(order, pos, side="right")
    wins = below.sum() + 0.5 * (upto - below).sum()
    return float(wins / (pos.size * neg.size))


# ---------------------------------------------------------------- boxes

def box_overlap(a, b) -> tuple[int, int, int]:
    """(|A and B|, |A|, |B|) pixel counts for half-open (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    return iw * ih, (ax1 - ax0) * (ay1 - ay0), (bx1 - bx0) * (by1 - by0)


def iou(a, b) -> float:
    inter, sa, sb = box_overlap(a, b)
    union = sa + sb - inter
    return inter / union if union else 0.0


def dsc(a, b) -> float:
    inter, sa, sb = box_overlap(a, b)
    return 2 * inter / (sa + sb) if sa + sb else 0.0


def as_box(b) -> tuple:
    return (b.x0, b.y0, b.x1, b.y1) if hasattr(b, "x0") else tuple(b)


def image_iou_dsc(candidates: Sequence, attentions: Sequence[float] | None, truth: Sequence,
                  mode: str) -> tuple[float, float]:
    """Score one image's candidate boxes against its groundtruth boxes."""
    if mode not in IOU_MODES:
        raise ValueError(f"unknown mode {mode!r}; valid: {IOU_MODES}")
    cands = [as_box(c) for c in candidates]
    gts = [as_box(g) for g in truth]
    if not gts:
        raise ValueError("image has no groundtruth boxes")
    if not cands:
        return 0.0, 0.0
    if mode == "best-of-topk":
        return (max(iou(c, g) for c in cands for g in gts),
                max(dsc(c, g) for c in cands for g in gts))
    if mode == "mean-all-rois":
        return (float(np.mean([max(iou(c, g) for c in cands) for g in gts])),
                float(np.mean([max(dsc(c, g) for c in cands) for g in gts])))
    if attentions is None:
        raise ValueError("top-attention mode needs patch attentions")
    top = cands[int(np.argmax(attentions))]
    return max(iou(top, g) for g in gts), max(dsc(top, g) for g in gts)


def iou_dsc(per_image: Sequence[tuple], mode: str) -> tuple[float, float]:
    """Dataset score: mean over images with at least one groundtruth box.

    ``per_image`` holds (candidate boxes, patch attentions, groundtruth boxes).
    """
    scores = [image_iou_dsc(c, a, g, mode) for c, a, g in per_image if len(g)]
    if not scores:
        raise ValueError("no groundtruth boxes in dataset")
    arr = np.array(scores)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def random_window_iou(truth: Sequence, image_shape: tuple, window: tuple, k: int, trials: int,
                      rng: np.random.Generator, grid: tuple | None = None) -> float:
    """Monte-Carlo expected best-of-k IoU for uniformly random non-overlapping windows.

    Windows of ``window`` = (height, width) pixels are placed one at a time uniformly over
    positions that do not overlap earlier picks. With ``grid`` = (step_y, step_x), positions
    are restricted to that lattice (how the retriever places windows).
    """
    h, w = image_shape
    wh, ww = window
    sy, sx = grid or (1, 1)
    ys = np.arange(0, h - wh + 1, sy)
    xs = np.arange(0, w - ww + 1, sx)
    pos = np.array([(y, x) for y in ys for x in xs])
    gts = [as_box(g) for g in truth]
    total = 0.0
    for _ in range(trials):
        free = np.ones(len(pos), dtype=bool)
        best = 0.0
        for _ in range(k):
            idx = np.flatnonzero(free)
            if idx.size == 0:
                break
            y, x = pos[idx[rng.integers(idx.size)]]
            box = (int(x), int(y), int(x + ww), int(y + wh))
            best = max(best, max(iou(box, g) for g in gts))
            free &= ~((np.abs(pos[:, 0] - y) < wh) & (np.abs(pos[:, 1] - x) < ww))
        total += best
    return total / trials


# ---------------------------------------------------------------- attention analysis

def attention_entropy(weights: Sequence[float]) -> float:
    a = np.asarray(weights, dtype=float)
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def proxy_image_labels(case_pred: "CasePrediction", source: str, attention_threshold: float = ATTENTION_THRESHOLD,
                       probability_threshold: float = PROBABILITY_THRESHOLD) -> list[int]:
    if source == "attention":
        if case_pred.image_attention is None:
            raise ValueError("attention weights unavailable for this pooling")
        return [int(a > attention_threshold) for a in case_pred.image_attention]
    if source == "probability":
        if case_pred.image_probs is None:
            raise ValueError("image probabilities unavailable")
        return [int(p > probability_threshold) for p in case_pred.image_probs]
    raise ValueError(f"unknown proxy source {source!r}")


def proxy_label_f1(preds: Sequence["CasePrediction"], cases: Sequence[CaseRecord], source: str, **kw) -> float:
    """Image-level F1 of proxy labels, pooled over all images of truly malignant cases."""
    y_true, y_pred = [], []
    for p, c in zip(preds, cases):
        if c.case_label != Label.malignant:
            continue
        if any(im.image_label is None for im in c.images):
            raise ValueError(f"case {c.case_id}: image labels unknown")
        y_true += [int(im.image_label) for im in c.images]
        y_pred += proxy_image_labels(p, source, **kw)
    if not y_true:
        raise ValueError("no malignant cases")
    return f1(np.array(y_pred, dtype=float), y_true)


# ---------------------------------------------------------------- predictions over a dataset

@dataclass
class CasePrediction:
    case_id: str
    label: int
    prob: float
    probs: dict
    image_attention: np.ndarray | None  # effective per-image attention (fusion features)
    image_probs: np.ndarray | None  # per-image fusion probabilities (IS only)
    patch_boxes: list  # per image: list of k (x0, y0, x1, y1)
    patch_attention: list  # per image: k patch attentions
    saliency: list  # per image: (H', W') array


def predict_cases(model: CaseModel, cases: Sequence[CaseRecord], batch_size: int = 16) -> list[CasePrediction]:
    out: dict[int, CasePrediction] = {}
    index = {id(c): i for i, c in enumerate(cases)}
    for batch in group_batches(list(cases), batch_size):
        res = model.predict(batch)
        m = res.n_images
        for b, case in enumerate(batch):
            rows = range(b * m, (b + 1) * m)
            att = res.info.image_weights.get("fusion")
            ip = res.info.image_probs.get("fusion")
            out[index[id(case)]] = CasePrediction(
                case.case_id, int(case.case_label), float(res.heads.final.data[b]),
                {k: float(v.data[b]) for k, v in res.heads.as_dict().items()},
                None if att is None else att[b].copy(),
                None if ip is None else ip[b].copy(),
                [[p.box for p in res.bundle.patches[r]] for r in rows],
                [[p.attention for p in res.bundle.patches[r]] for r in rows],
                [res.bundle.saliency.data[r].copy() for r in rows],
            )
    return [out[i] for i in range(len(cases))]


def roi_found(pred: CasePrediction, case: CaseRecord, threshold: float = ROI_MATCH_THRESHOLD) -> bool:
    for boxes, im in zip(pred.patch_boxes, case.images):
        for g in im.roi_boxes:
            if any(iou(b, as_box(g)) >= threshold for b in boxes):
                return True
    return False


CONFUSION_ROWS = ("B-Case", "M-Case")
CONFUSION_COLS = ("B+ROI", "B+noROI", "M+ROI", "M+noROI")


def confusion_with_roi(probs: Sequence[float], labels: Sequence[int], found: Sequence[bool],
                       threshold: float = 0.5) -> np.ndarray:
    table = np.zeros((2, 4), dtype=int)
    for p, y, r in zip(probs, labels, found):
        col = (2 if p > threshold else 0) + (0 if r else 1)
        table[int(y), col] += 1
    return table


def group_report(probs: Sequence[float], cases: Sequence[CaseRecord]) -> dict[str, dict]:
    """AUC/F1 per case group; 'n/a' where a group is empty or single-class."""
    members: dict[str, list[int]] = {g: [] for g in GROUP_NAMES}
    for i, c in enumerate(cases):
        for g in case_group_of(c).names():
            members[g].append(i)
    p = np.asarray(probs, dtype=float)
    y = np.array([int(c.case_label) for c in cases])
    out = {}
    for g in GROUP_NAMES:
        idx = members[g]
        row = {"n": len(idx), "auc": "n/a", "f1": "n/a"}
        if idx:
            row["f1"] = f1(p[idx], y[idx])
            if len(set(y[idx])) == 2:
                row["auc"] = auc(p[idx], y[idx])
        out[g] = row
    return out


# ---------------------------------------------------------------- full report

@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)  # flat "a.b.c" -> float | int | str
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((2, 4), dtype=int))

    def to_text(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, float):
                v = f"{v:.6f}" if math.isfinite(v) else "n/a"
            lines.append(f"{k} = {v}")
        lines.append("confusion_with_roi.rows = " + ",".join(CONFUSION_ROWS))
        lines.append("confusion_with_roi.cols = " + ",".join(CONFUSION_COLS))
        for name, row in zip(CONFUSION_ROWS, self.confusion):
            lines.append(f"confusion_with_roi.{name} = " + " ".join(str(int(x)) for x in row))
        return "\n".join(lines) + "\n"


def entropy_summary(preds: Sequence[CasePrediction], cases: Sequence[CaseRecord],
                    n_images: int | None = 4) -> dict[str, float]:
    """Mean attention entropy per class, optionally restricted to cases with ``n_images`` images."""
    by_class: dict[int, list[float]] = {0: [], 1: []}
    for p, c in zip(preds, cases):
        if p.image_attention is None:
            continue
        if n_images is not None and len(c.images) != n_images:
            continue
        by_class[int(c.case_label)].append(attention_entropy(p.image_attention))
    out = {"uniform": math.log(n_images) if n_images else float("nan")}
    for lbl, name in ((0, "benign"), (1, "malignant")):
        out[name] = float(np.mean(by_class[lbl])) if by_class[lbl] else float("nan")
        out[f"{name}_n"] = len(by_class[lbl])
    return out


def evaluate(model: CaseModel, cases: Sequence[CaseRecord], roi_match_threshold: float = ROI_MATCH_THRESHOLD,
             attention_threshold: float = ATTENTION_THRESHOLD,
             probability_threshold: float = PROBABILITY_THRESHOLD) -> tuple[MetricsReport, list[CasePrediction]]:
    preds = predict_cases(model, cases)
    probs = [p.prob for p in preds]
    labels = [int(c.case_label) for c in cases]
    rep = MetricsReport()
    v = rep.values
    v["cases"] = len(cases)
    v["f1"] = f1(probs, labels)
    v["auc"] = auc(probs, labels) if len(set(labels)) == 2 else "n/a"
    for g, row in group_report(probs, cases).items():
        for key in ("n", "auc", "f1"):
            v[f"group.{g}.{key}"] = row[key]

    have_gt = any(im.roi_boxes for c in cases for im in c.images)
    for mode in IOU_MODES:
        if have_gt:
            per_image = [(bx, att, im.roi_boxes) for p, c in zip(preds, cases)
                         for bx, att, im in zip(p.patch_boxes, p.patch_attention, c.images)]
            mi, md = iou_dsc(per_image, mode)
            mal = [(bx, att, im.roi_boxes) for p, c in zip(preds, cases)
                   for bx, att, im in zip(p.patch_boxes, p.patch_attention, c.images)
                   if im.image_label == Label.malignant]
            v[f"roi.{mode}.iou"], v[f"roi.{mode}.dsc"] = mi, md
            if mal:
                v[f"roi.{mode}.malignant.iou"], v[f"roi.{mode}.malignant.dsc"] = iou_dsc(mal, mode)
        else:
            v[f"roi.{mode}.iou"] = v[f"roi.{mode}.dsc"] = "n/a"

    labels_known = all(im.image_label is not None for c in cases for im in c.images)
    has_mal = any(l == 1 for l in labels)
    for source in ("attention", "probability"):
        key = f"proxy.{source}.f1"
        try:
            if not labels_known or not has_mal:
                raise ValueError
            v[key] = proxy_label_f1(preds, cases, source, attention_threshold=attention_threshold,
                                    probability_threshold=probability_threshold)
        except ValueError:
            v[key] = "n/a"
    ent = entropy_summary(preds, cases)
    for k, val in ent.items():
        v[f"entropy.4img.{k}"] = val

    found = [roi_found(p, c, roi_match_threshold) for p, c in zip(preds, cases)]
    rep.confusion = confusion_with_roi(probs, labels, found)
    return rep, preds
