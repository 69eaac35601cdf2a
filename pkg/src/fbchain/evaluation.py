"""Segmentation metrics, ROC/AUC and class activation maps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def confusion(pred_prob, target, threshold: float = 0.5) -> ConfusionCounts:
    pred_prob, target = _np(pred_prob), _np(target)
    if pred_prob.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {pred_prob.shape} vs target {target.shape}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    p = pred_prob >= threshold
    t = target > 0.5
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float:
    # den == 0 means prediction and target are both empty of the class
    return 1.0 if den == 0 else num / den


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou_fg(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def iou_bg(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp + c.fn)


def miou(c: ConfusionCounts) -> float:
    return 0.5 * (iou_fg(c) + iou_bg(c))


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def roc_curve(scores, targets) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC swept over every distinct score, highest threshold first.

    Returns (fpr, tpr, thresholds); the first point is (0, 0) at +inf.
    """
    s = np.concatenate([_np(x).ravel() for x in scores]) if isinstance(scores, (list, tuple)) else _np(scores).ravel()
    t = np.concatenate([_np(x).ravel() for x in targets]) if isinstance(targets, (list, tuple)) else _np(targets).ravel()
    t = t > 0.5
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative pixel")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    # last index of each run of equal scores
    cut = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    cut = np.r_[cut, s.size - 1]
    tps = np.cumsum(t)[cut]
    fps = (cut + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thr = np.r_[np.inf, s[cut]]
    return fpr, tpr, thr


def roc_auc(scores, targets):
    fpr, tpr, thr = roc_curve(scores, targets)
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    auc = float(trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist(), thr.tolist())), auc


@dataclass
class SampleMetrics:
    sample_id: str
    dsc: float
    iou_fg: float
    iou_bg: float
    recall: float
    precision: float


@dataclass
class MetricsReport:
    per_sample: List[SampleMetrics] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    roc: List[Tuple[float, float, float]] = field(default_factory=list)
    auc: Optional[float] = None
    threshold_used: float = 0.5
    mode: str = "per_slice"
    notice: str = ""

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for m in self.per_sample:
                rec = asdict(m)
                rec["accuracy"] = rec["precision"]
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({
                "aggregate": self.aggregate,
                "auc": self.auc,
                "threshold": self.threshold_used,
                "mode": self.mode,
                "n_samples": len(self.per_sample),
                "notice": self.notice,
                "note": "accuracy is reported as precision (positive predictive value)",
            }) + "\n")
        with open(out / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            for fpr, tpr, _ in self.roc:
                w.writerow([repr(fpr), repr(tpr)])


def evaluate_predictions(probs: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                         ids: Optional[Sequence[str]] = None, threshold: float = 0.5,
                         mode: str = "per_slice") -> MetricsReport:
    """Metrics per sample and aggregated either as a per-slice mean or pooled counts."""
    if mode not in ("per_slice", "pooled"):
        raise ValueError(f"mode must be per_slice or pooled, got {mode!r}")
    report = MetricsReport(threshold_used=threshold, mode=mode)
    if len(probs) == 0:
        report.notice = "empty split: no samples evaluated"
        report.aggregate = {k: None for k in ("dsc", "miou", "recall", "precision", "accuracy")}
        return report
    ids = list(ids) if ids is not None else [str(i) for i in range(len(probs))]
    total = ConfusionCounts(0, 0, 0, 0)
    for sid, p, t in zip(ids, probs, targets):
        c = confusion(p, t, threshold)
        total = total + c
        report.per_sample.append(SampleMetrics(sid, dsc(c), iou_fg(c), iou_bg(c), recall(c), precision(c)))
    if mode == "per_slice":
        agg = {
            "dsc": float(np.mean([m.dsc for m in report.per_sample])),
            "miou": float(np.mean([(m.iou_fg + m.iou_bg) / 2 for m in report.per_sample])),
            "recall": float(np.mean([m.recall for m in report.per_sample])),
            "precision": float(np.mean([m.precision for m in report.per_sample])),
        }
    else:
        agg = {"dsc": dsc(total), "miou": miou(total), "recall": recall(total), "precision": precision(total)}
    agg["accuracy"] = agg["precision"]
    report.aggregate = agg
    try:
        report.roc, report.auc = roc_auc(list(probs), list(targets))
    except ValueError as exc:
        report.notice = f"ROC unavailable: {exc}"
    return report


# -- class activation maps ---------------------------------------------------


def grad_cam(feature: torch.Tensor, grad: torch.Tensor, size: Tuple[int, int]) -> np.ndarray:
    """Gradient-weighted channel sum, ReLU, min-max scaled, upsampled. Returns (B, H, W)."""
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * feature).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)
    lo = cam.amin(dim=(2, 3), keepdim=True)
    hi = cam.amax(dim=(2, 3), keepdim=True)
    span = hi - lo
    cam = torch.where(span > 0, (cam - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.zeros_like(cam))
    return cam[:, 0].detach().cpu().numpy()


def cam(model, image) -> np.ndarray:
    """Class activation map at the GPA output for one image (H, W) or batch (B, 1, H, W).

    The target scalar is the mean foreground logit over predicted-positive
    pixels (all pixels when nothing is predicted positive).
    """
    x = torch.as_tensor(image, dtype=next(model.parameters()).dtype)
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None, None]
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            outputs, _, bridged = model.features(x)
            bridged = bridged.detach().requires_grad_(True)
            logits = model.decoder(outputs[:-1], bridged)
            positive = (logits > 0).to(logits.dtype)
            per_item = []
            for b in range(logits.shape[0]):
                sel = positive[b]
                if sel.sum() > 0:
                    per_item.append((logits[b] * sel).sum() / sel.sum())
                else:
                    per_item.append(logits[b].mean())
            target = torch.stack(per_item).sum()
            (grad,) = torch.autograd.grad(target, bridged)
    finally:
        model.train(was_training)
    heat = grad_cam(bridged.detach(), grad, tuple(x.shape[-2:]))
    return heat[0] if squeeze else heat


def cam_mass_ratio(heat: np.ndarray, mask: np.ndarray) -> float:
    """Mean heat inside the mask divided by mean heat outside."""
    m = mask > 0
    inside = heat[m].mean() if m.any() else 0.0
    outside = heat[~m].mean() if (~m).any() else 0.0
    return float(inside / outside) if outside > 0 else float("inf")


def save_cam_panel(path, image: np.ndarray, mask: np.ndarray, heat: np.ndarray, pred: np.ndarray) -> None:
    """Input, ground truth, attention map and segmentation side by side."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 4, figsize=(8, 2.3))
    panels = [(image, "gray", "input"), (mask, "gray", "ground truth"),
              (heat, "jet", "attention"), (pred, "gray", "segmentation")]
    for ax, (arr, cmap, title) in zip(axes, panels):
        ax.imshow(arr, cmap=cmap)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
