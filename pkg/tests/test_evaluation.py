import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fbchain.evaluation import (
    ConfusionCounts,
    cam,
    cam_mass_ratio,
    confusion,
    dsc,
    evaluate_predictions,
    grad_cam,
    iou_bg,
    iou_fg,
    miou,
    precision,
    recall,
    roc_auc,
    roc_curve,
    save_cam_panel,
)
from helpers import brute_counts, rank_auc


def test_confusion_hand_example():
    target = np.zeros((4, 4))
    target[0, :4] = 1
    pred = np.zeros((4, 4))
    pred[0, :2] = 1
    pred[3, 3] = 1
    c = confusion(pred, target)
    assert c == ConfusionCounts(tp=2, fp=1, fn=2, tn=11)
    assert dsc(c) == 4 / 7
    assert iou_fg(c) == 0.4


def test_confusion_identity_and_complement():
    t = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    c = confusion(t, t)
    assert c.fp == c.fn == 0
    c = confusion(1 - t, t)
    assert c.tp == c.tn == 0


def test_perfect_and_empty():
    t = np.zeros((4, 4))
    t[1, 1] = 1
    c = confusion(t, t)
    assert dsc(c) == miou(c) == recall(c) == precision(c) == 1.0
    e = confusion(np.zeros((4, 4)), np.zeros((4, 4)))
    assert dsc(e) == 1.0 and iou_fg(e) == 1.0


def test_confusion_validation():
    with pytest.raises(ValueError, match="shape"):
        confusion(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="threshold"):
        confusion(np.zeros((2, 2)), np.zeros((2, 2)), threshold=1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_match_pixel_set_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((8, 8)) < rng.random()
    t = rng.random((8, 8)) < rng.random()
    tp, fp, fn, tn = brute_counts(p, t)
    c = confusion(p.astype(float), t)
    assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
    if tp + fp + fn:
        assert dsc(c) == 2 * tp / (2 * tp + fp + fn)
        assert abs(dsc(c) - 2 * iou_fg(c) / (1 + iou_fg(c))) < 1e-12


def test_auc_extremes_and_symmetry():
    t = np.array([0, 0, 1, 1, 0, 1])
    s = np.array([0.1, 0.2, 0.8, 0.9, 0.3, 0.7])
    assert roc_auc(s, t)[1] == 1.0
    rng = np.random.default_rng(0)
    s2, t2 = rng.random(500), rng.random(500) > 0.6
    a = roc_auc(s2, t2)[1]
    assert abs(roc_auc(-s2, t2)[1] - (1 - a)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_matches_rank_statistic_with_ties(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 6, size=60) / 5.0
    t = rng.random(60) > 0.5
    if t.all() or not t.any():
        return
    assert abs(roc_auc(s, t)[1] - rank_auc(s, t)) < 1e-12


def test_roc_curve_endpoints_monotone():
    rng = np.random.default_rng(1)
    fpr, tpr, thr = roc_curve(rng.random(200), rng.random(200) > 0.5)
    assert (fpr[0], tpr[0], thr[0]) == (0.0, 0.0, np.inf)
    assert fpr[-1] == 1.0 and tpr[-1] == 1.0
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_curve(np.random.rand(10), np.zeros(10))


def test_report_modes_and_write(tmp_path):
    rng = np.random.default_rng(0)
    probs = [rng.random((8, 8)) for _ in range(3)]
    targets = [(rng.random((8, 8)) > 0.7).astype(float) for _ in range(3)]
    per = evaluate_predictions(probs, targets, ["a", "b", "c"])
    pooled = evaluate_predictions(probs, targets, mode="pooled")
    assert per.aggregate["dsc"] == pytest.approx(np.mean([m.dsc for m in per.per_sample]))
    total = sum((confusion(p, t) for p, t in zip(probs, targets)), ConfusionCounts(0, 0, 0, 0))
    assert pooled.aggregate["dsc"] == dsc(total)
    per.write(tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[-1])["n_samples"] == 3
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["fpr", "tpr"] and len(rows) == len(per.roc) + 1


def test_empty_split_notice():
    r = evaluate_predictions([], [])
    assert r.per_sample == [] and "empty" in r.notice


def test_grad_cam_range_and_constant():
    f = torch.randn(2, 4, 8, 8)
    g = torch.randn(2, 4, 8, 8)
    h = grad_cam(f, g, (32, 32))
    assert h.shape == (2, 32, 32) and h.min() >= 0 and h.max() <= 1
    flat = grad_cam(torch.ones(1, 4, 8, 8), torch.ones(1, 4, 8, 8), (16, 16))
    assert np.all(flat == flat.flat[0])


def test_cam_on_overfit_model(overfit, tmp_path):
    model, samples, _, _ = overfit
    ratios = []
    for s in samples:
        heat = cam(model, s.image)
        assert heat.shape == s.image.shape and 0 <= heat.min() and heat.max() <= 1
        ratios.append(cam_mass_ratio(heat, s.mask))
    assert np.mean(ratios) > 1
    save_cam_panel(tmp_path / "p.png", samples[0].image, samples[0].mask, heat, samples[0].mask)
    assert (tmp_path / "p.png").stat().st_size > 0
