import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from casemil.casedata import CaseRecord, ImageRecord, Label, RoiBox, Side, View
from casemil.evaluation import (
    CasePrediction, attention_entropy, auc, confusion_with_roi, dsc, entropy_summary, f1, group_report,
    image_iou_dsc, iou, iou_dsc, proxy_image_labels, proxy_label_f1, random_window_iou, roi_found,
)
from oracles import brute_auc, random_box, random_scores, raster_iou_dsc

LCC, LMLO, RCC, RMLO = (Side.L, View.CC), (Side.L, View.MLO), (Side.R, View.CC), (Side.R, View.MLO)


def img(key, label=None, boxes=()):
    return ImageRecord(key[0], key[1], np.zeros((64, 48)), label, list(boxes))


def pred(case_id="c", label=0, prob=0.5, attention=None, image_probs=None, boxes=(), patch_att=()):
    return CasePrediction(case_id, label, prob, {}, None if attention is None else np.asarray(attention),
                          None if image_probs is None else np.asarray(image_probs), list(boxes), list(patch_att), [])


# ---------------------------------------------------------------- F1 / AUC

def test_f1_examples():
    assert f1([0.9, 0.1], [1, 0]) == 1.0
    assert f1([0.1, 0.2], [1, 0]) == 0.0
    # TP=2, FP=1, FN=1
    assert f1([0.9, 0.8, 0.7, 0.1, 0.2], [1, 1, 0, 1, 0]) == pytest.approx(2 / 3, abs=1e-15)
    # strictly greater than the threshold
    assert f1([0.5], [1]) == 0.0


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
    assert auc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5
    with pytest.raises(ValueError, match="AUC undefined"):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_counting_on_200_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        s, y = random_scores(rng)
        assert abs(auc(s, y) - brute_auc(s, y)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1, allow_nan=False), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_pair_counting_property(items):
    s = [a for a, _ in items]
    y = [b for _, b in items]
    if len(set(y)) < 2:
        return
    assert abs(auc(s, y) - brute_auc(s, y)) < 1e-12


# ---------------------------------------------------------------- boxes

def test_box_examples():
    assert (iou((0, 0, 4, 4), (0, 0, 4, 4)), dsc((0, 0, 4, 4), (0, 0, 4, 4))) == (1.0, 1.0)
    assert (iou((0, 0, 2, 2), (5, 5, 6, 6)), dsc((0, 0, 2, 2), (5, 5, 6, 6))) == (0.0, 0.0)
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert dsc((0, 0, 2, 2), (1, 1, 3, 3)) == 0.25


def test_iou_dsc_match_rasterization_on_500_pairs():
    rng = np.random.default_rng(7)
    for _ in range(500):
        a, b = random_box(rng), random_box(rng)
        ri, rd = raster_iou_dsc(a, b)
        assert iou(a, b) == ri and dsc(a, b) == rd
        assert abs(dsc(a, b) - 2 * iou(a, b) / (1 + iou(a, b))) < 1e-12


def test_iou_modes():
    truth = [RoiBox(0, 0, 4, 4), RoiBox(10, 10, 14, 14)]
    cands = [(0, 0, 4, 4), (10, 10, 12, 12), (20, 20, 24, 24)]
    att = [0.1, 0.2, 0.7]
    assert image_iou_dsc(cands, att, truth, "best-of-topk")[0] == 1.0
    assert image_iou_dsc(cands, att, truth, "mean-all-rois")[0] == pytest.approx((1.0 + 0.25) / 2)
    assert image_iou_dsc(cands, att, truth, "top-attention") == (0.0, 0.0)
    with pytest.raises(ValueError):
        image_iou_dsc(cands, None, truth, "top-attention")
    with pytest.raises(ValueError):
        image_iou_dsc(cands, att, truth, "median")


def test_dataset_score_skips_images_without_truth():
    per_image = [([(0, 0, 4, 4)], [1.0], [RoiBox(0, 0, 4, 4)]), ([(0, 0, 4, 4)], [1.0], [])]
    assert iou_dsc(per_image, "best-of-topk") == (1.0, 1.0)
    with pytest.raises(ValueError):
        iou_dsc([([(0, 0, 4, 4)], [1.0], [])], "best-of-topk")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_best_of_topk_dominates_top_attention(seed, k):
    rng = np.random.default_rng(seed)
    cands = [random_box(rng) for _ in range(k)]
    truth = [random_box(rng) for _ in range(int(rng.integers(1, 3)))]
    att = rng.dirichlet(np.ones(k))
    best = image_iou_dsc(cands, att, truth, "best-of-topk")
    top = image_iou_dsc(cands, att, truth, "top-attention")
    assert best[0] >= top[0] >= 0 and best[1] >= top[1] >= 0


def test_random_window_baseline():
    rng = np.random.default_rng(0)
    # a window-sized truth box in a window-sized image is always hit exactly
    assert random_window_iou([(0, 0, 16, 16)], (16, 16), (16, 16), 1, 20, rng) == 1.0
    # two placements on a 2x1 lattice of disjoint windows must cover the truth
    assert random_window_iou([(0, 0, 8, 8)], (8, 16), (8, 8), 2, 50, rng, grid=(8, 8)) == 1.0
    v = random_window_iou([(10, 20, 22, 32)], (64, 48), (16, 16), 6, 300, rng)
    assert 0.0 < v < 1.0


# ---------------------------------------------------------------- attention analysis

def test_entropy_examples():
    assert attention_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)
    assert attention_entropy([1.0, 0.0, 0.0, 0.0]) == 0.0
    assert attention_entropy([0.5, 0.5, 0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_entropy_bounds(seed, m):
    a = np.random.default_rng(seed).dirichlet(np.ones(m) * 0.5)
    h = attention_entropy(a)
    assert -1e-12 <= h <= math.log(m) + 1e-9
    if m > 1 and np.max(np.abs(a - 1 / m)) > 1e-3:
        assert h < math.log(m) - 1e-9


def test_proxy_labels_from_attention():
    assert proxy_image_labels(pred(attention=[0.7, 0.1, 0.1, 0.1]), "attention") == [1, 0, 0, 0]
    assert proxy_image_labels(pred(attention=[0.25] * 4), "attention") == [0, 0, 0, 0]
    assert proxy_image_labels(pred(attention=[1.0]), "attention") == [1]
    assert proxy_image_labels(pred(image_probs=[0.6, 0.5]), "probability") == [1, 0]
    with pytest.raises(ValueError, match="image probabilities unavailable"):
        proxy_image_labels(pred(attention=[1.0]), "probability")


def test_proxy_f1_counts_only_malignant_cases():
    mal = CaseRecord("m", [img(LCC, Label.malignant), img(LMLO, Label.benign)], Label.malignant)
    ben = CaseRecord("b", [img(LCC, Label.benign), img(LMLO, Label.benign)], Label.benign)
    preds = [pred("m", 1, attention=[0.9, 0.1]), pred("b", 0, attention=[0.9, 0.1])]
    assert proxy_label_f1(preds, [mal, ben], "attention") == 1.0


def test_entropy_summary_by_class():
    cases = [CaseRecord(f"c{i}", [img(k) for k in (LCC, LMLO, RCC, RMLO)], Label(i % 2)) for i in range(4)]
    preds = [pred(attention=[0.25] * 4), pred(attention=[1.0, 0, 0, 0]),
             pred(attention=[0.25] * 4), pred(attention=[0.5, 0.5, 0, 0])]
    s = entropy_summary(preds, cases)
    assert s["benign"] == pytest.approx(math.log(4))
    assert s["malignant"] == pytest.approx(math.log(2) / 2)
    assert s["uniform"] == pytest.approx(math.log(4)) and s["benign_n"] == 2


# ---------------------------------------------------------------- confusion and groups

def test_confusion_with_roi_cells():
    table = confusion_with_roi([0.9, 0.2, 0.8, 0.1], [1, 0, 0, 1], [True, False, False, True])
    assert table[1, 2] == 1  # malignant, predicted malignant, ROI found
    assert table[0, 1] == 1  # benign, predicted benign, no ROI
    assert table[0, 3] == 1  # benign, predicted malignant, no ROI
    assert table[1, 0] == 1  # malignant, predicted benign, ROI found
    assert table.sum() == 4


def test_roi_found_needs_a_matching_candidate():
    truth = RoiBox(10, 10, 20, 20)
    case = CaseRecord("m", [img(LCC, Label.malignant, [truth]), img(LMLO, Label.benign)], Label.malignant)
    assert roi_found(pred(boxes=[[(10, 10, 20, 20)], [(0, 0, 5, 5)]]), case)
    assert not roi_found(pred(boxes=[[(30, 30, 40, 40)], [(10, 10, 20, 20)]]), case)
    benign = CaseRecord("b", [img(LCC, Label.benign)], Label.benign)
    assert not roi_found(pred(boxes=[[(0, 0, 5, 5)]]), benign)


def test_group_report():
    four = [CaseRecord(f"a{i}", [img(k) for k in (LCC, LMLO, RCC, RMLO)], Label(i % 2)) for i in range(4)]
    single = [CaseRecord("s", [img(LCC)], Label.benign)]
    probs = [0.1, 0.9, 0.2, 0.8, 0.3]
    rep = group_report(probs, four + single)
    assert rep["4-std"]["auc"] == 1.0 and rep["4-std"]["n"] == 4
    assert rep["1L/1R"]["auc"] == "n/a" and rep["1L/1R"]["n"] == 1
    assert rep["mix"] == {"n": 0, "auc": "n/a", "f1": "n/a"}
    assert rep["All"]["auc"] == auc(probs, [0, 1, 0, 1, 0])
