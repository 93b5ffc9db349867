"""Acceptance checks. Each test prints one ``[PASS]``/``[FAIL]`` line for its criterion.

The three learning criteria share trained models on the reference synthetic dataset; the
first of them to run pays for training (several minutes on one core).
"""
import math
import time
from functools import lru_cache

import numpy as np
import pytest

import pool_props
from casemil.casedata import Label, SyntheticConfig, case_group_of, generate_synthetic
from casemil.evaluation import (
    auc, dsc, evaluate, f1, image_iou_dsc, iou, proxy_label_f1, random_window_iou,
)
from casemil.gradcheck import run_all, tiny_config, toy_case
from casemil.model import CaseModel, ModelConfig
from casemil.training import LossConfig, SnapshotStore, TrainConfig, default_step, dynamic_step, make_optimizer, train
from oracles import brute_auc, random_box, random_scores, raster_iou_dsc
from test_training import ATTENTION, FOUR, LCC, LMLO, RCC, RMLO, _attention_state, _warm, cases_of

REFERENCE_DATA = SyntheticConfig(n_cases=840, image_height=64, image_width=48, malignant_fraction=0.3,
                                 lesion_contrast=0.6, seed=17, split_sizes=(600, 80, 160))
MODEL_SEED = 0
TRAINING = dict(max_epochs=30)
# 2% of an 8x6 saliency map is a single cell, which leaves the cells around the peak untrained
# and the retrieved window placement close to arbitrary; 10% (5 cells) keeps top-t a pooled statistic
MODEL = dict(t_fraction=0.1)


def report(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, detail


@lru_cache(maxsize=None)
def reference_splits():
    return generate_synthetic(REFERENCE_DATA)


@lru_cache(maxsize=None)
def trained(pooling, scheme):
    tr, va, te = reference_splits()
    model = CaseModel(ModelConfig(pooling=pooling, **MODEL), seed=MODEL_SEED)
    train(model, tr, va, TrainConfig(scheme=scheme, **TRAINING))
    rep, preds = evaluate(model, te)
    return rep.values, preds


# ---------------------------------------------------------------- 1

def test_gradient_correctness(capsys):
    results, seconds = run_all(seed=0)
    bad = [r.line() for r in results if not r.ok]
    worst = max(r.max_rel_error for r in results)
    ok = not bad and worst < 1e-4 and seconds < 120
    report(capsys, "gradient correctness", ok,
           f"{len(results)} checks, max_rel_error {worst:.2e} (< 1e-4), {seconds:.0f}s (< 120s)"
           + (f", failing: {bad}" if bad else ""))


# ---------------------------------------------------------------- 2

def test_pooling_algebra(capsys):
    t0 = time.perf_counter()
    failed = {s: f for s in range(500) if (f := pool_props.check_seed(s))}
    seconds = time.perf_counter() - t0
    ok = not failed and seconds < 60
    report(capsys, "pooling algebra", ok,
           f"{500 - len(failed)}/500 seeds pass every property, {seconds:.1f}s (< 60s)"
           + (f", first failure {next(iter(failed.items()))}" if failed else ""))


# ---------------------------------------------------------------- 3

def _state_bytes(model):
    return {k: v.tobytes() for k, v in model.registry.state().items()}


def test_dynamic_training_contract(capsys):
    t0 = time.perf_counter()
    checks = {}

    # 1L/1R batch: dynamic freezes both attention components, default moves them
    for mode in ("dynamic", "default"):
        model = CaseModel(tiny_config("es-att-side"))
        st = make_optimizer(model.parameters(), lr=1e-2)
        _warm(model, st)
        assert all(np.any(st.m[p.name] != 0) for c in ATTENTION for p in model.parameters(c))
        before = _attention_state(model, st)
        params = {p.name: p.data.copy() for c in ATTENTION for p in model.parameters(c)}
        if mode == "dynamic":
            dynamic_step(cases_of((LCC,), 2), model, st, SnapshotStore(model, st), LossConfig())
            checks["dynamic leaves attention bit-identical"] = _attention_state(model, st) == before
        else:
            default_step(cases_of((LCC,), 2), model, st, LossConfig())
            checks["default changes attention"] = all(
                not np.array_equal(p.data, params[p.name]) for c in ATTENTION for p in model.parameters(c))

    # nL+mR batches: every component participates, so the two steppers agree exactly
    for layout in ((LCC, LMLO, RCC), (LCC, RCC, RMLO), FOUR):
        states = []
        for dynamic in (True, False):
            model = CaseModel(tiny_config("es-att-side"))
            st = make_optimizer(model.parameters(), lr=1e-2)
            _warm(model, st)
            snaps = SnapshotStore(model, st)
            for i in range(2):
                batch = cases_of(layout, 2, 100 + 2 * i)
                if dynamic:
                    dynamic_step(batch, model, st, snaps, LossConfig())
                else:
                    default_step(batch, model, st, LossConfig())
            states.append(_state_bytes(model))
        checks[f"dynamic == default on {len(layout)}-image batches"] = states[0] == states[1]

    # one full epoch of 4-std data through the training loop
    four_std = [toy_case(i, FOUR, label=Label(i % 2)) for i in range(6)]
    states = []
    for scheme in ("dynamic", "default"):
        model = CaseModel(tiny_config("es-att-side"))
        res = train(model, four_std, [], TrainConfig(lr=1e-2, max_epochs=1, scheme=scheme, batch_size=2))
        states.append({k: v.tobytes() for k, v in res.best_state.items()})
    checks["4-std epoch checkpoints bit-identical"] = states[0] == states[1]

    seconds = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and seconds < 60
    report(capsys, "dynamic-training contract", ok,
           f"{len(checks) - len(failed)}/{len(checks)} checks, {seconds:.1f}s (< 60s)"
           + (f", failing: {failed}" if failed else ""))


# ---------------------------------------------------------------- 4

def test_metric_oracles(capsys):
    rng = np.random.default_rng(2024)
    auc_err = max(abs(auc(s, y) - brute_auc(s, y)) for s, y in (random_scores(rng) for _ in range(200)))
    rng = np.random.default_rng(7)
    box_mismatch, identity_err = 0, 0.0
    for _ in range(500):
        a, b = random_box(rng), random_box(rng)
        ri, rd = raster_iou_dsc(a, b)
        box_mismatch += (iou(a, b) != ri) or (dsc(a, b) != rd)
        identity_err = max(identity_err, abs(dsc(a, b) - 2 * iou(a, b) / (1 + iou(a, b))))
    ok = auc_err < 1e-12 and box_mismatch == 0 and identity_err < 1e-12
    report(capsys, "metric oracles", ok,
           f"AUC max err {auc_err:.1e} over 200 instances, {box_mismatch}/500 IoU/DSC raster mismatches, "
           f"DSC identity err {identity_err:.1e}")


# ---------------------------------------------------------------- 5

def test_synthetic_learnability(capsys):
    side, _ = trained("es-att-side", "dynamic")
    mean, _ = trained("is-mean", "dynamic")
    ok = side["auc"] >= 0.90 and side["f1"] >= 0.75 and side["auc"] >= mean["auc"] - 0.02
    report(capsys, "synthetic learnability", ok,
           f"es-att-side AUC {side['auc']:.3f} (>= 0.90), F1 {side['f1']:.3f} (>= 0.75); "
           f"is-mean AUC {mean['auc']:.3f} (es-att-side >= is-mean - 0.02)")


# ---------------------------------------------------------------- 6

def test_relevant_image_identification(capsys):
    values, preds = trained("es-att-side", "dynamic")
    _, _, te = reference_splits()
    proxy = proxy_label_f1(preds, te, "attention")
    # uniform weights on 4-image cases mark every image malignant
    truth = [int(im.image_label) for c in te if c.case_label == Label.malignant for im in c.images]
    uniform = f1(np.ones(len(truth)), truth)
    ent_m, ent_b = values["entropy.4img.malignant"], values["entropy.4img.benign"]
    ok = proxy >= 0.70 and proxy > uniform and ent_m < ent_b < math.log(4)
    report(capsys, "relevant-image identification", ok,
           f"attention proxy F1 {proxy:.3f} (>= 0.70, > uniform baseline {uniform:.3f}); "
           f"entropy malignant {ent_m:.3f} < benign {ent_b:.3f} < ln 4 {math.log(4):.3f}")


# ---------------------------------------------------------------- 7

def test_roi_extraction(capsys):
    _, preds = trained("es-att-side", "dynamic")
    _, _, te = reference_splits()
    rng = np.random.default_rng(0)
    best, top, baseline, dominated = [], [], [], True
    window = (16, 16)
    for p, c in zip(preds, te):
        for boxes, att, im in zip(p.patch_boxes, p.patch_attention, c.images):
            truth = [b for b in im.roi_boxes if b.label == Label.malignant]
            if im.image_label != Label.malignant or not truth:
                continue
            assert all((y1 - y0, x1 - x0) == window for x0, y0, x1, y1 in boxes)
            b = image_iou_dsc(boxes, att, truth, "best-of-topk")
            t = image_iou_dsc(boxes, att, truth, "top-attention")
            dominated &= b[0] >= t[0] and b[1] >= t[1]
            best.append(b[0])
            top.append(t[0])
            baseline.append(random_window_iou(truth, im.pixels.shape, window, len(boxes), 1000, rng))
    model_iou, random_iou = float(np.mean(best)), float(np.mean(baseline))
    ok = model_iou >= 2 * random_iou and dominated
    report(capsys, "ROI extraction", ok,
           f"best-of-top-6 IoU {model_iou:.3f} on {len(best)} malignant images vs random {random_iou:.3f} "
           f"(target >= {2 * random_iou:.3f}); top-attention {np.mean(top):.3f}; "
           f"dominance on every image: {dominated}")


# ---------------------------------------------------------------- 8

def test_fixed_vs_variable_training(capsys):
    _, _, te = reference_splits()
    results = {s: trained("es-att-side", s)[0] for s in ("fixed-image", "dynamic", "default")}
    two_class = {g for g in ("4-std", "1L/1R", "nL/mR", "1L+1R", "mix")
                 if len({int(c.case_label) for c in te if g in case_group_of(c).names()}) == 2} | {"All"}
    undefined = [f"{s}:{g}" for s, values in results.items() for g in sorted(two_class)
                 if not (isinstance(values[f"group.{g}.auc"], float) and math.isfinite(values[f"group.{g}.auc"]))]
    dyn, dflt = results["dynamic"]["group.nL/mR.auc"], results["default"]["group.nL/mR.auc"]
    ok = not undefined and "nL/mR" in two_class and dyn >= dflt - 0.05
    groups = ", ".join(f"{s} nL/mR AUC {results[s]['group.nL/mR.auc']:.3f}" for s in results)
    report(capsys, "fixed vs variable training", ok,
           f"{len(two_class)} two-class groups x 3 schemes report finite AUC: {not undefined}; {groups}; "
           "need dynamic >= default - 0.05" + (f"; undefined: {undefined}" if undefined else ""))
