"""Loss, augmentation and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from fbchain.checkpoint import Checkpoint, load_params, save_checkpoint
from fbchain.datasets import SegmentationSample, stack_samples
from fbchain.errors import ConfigError, NumericError
from fbchain.evaluation import evaluate_predictions
from fbchain.network import SegmentationNet

log = logging.getLogger(__name__)

# number of loss calls whose predictions had to be clamped into [eps, 1 - eps]
clamp_warnings = 0


# -- loss --------------------------------------------------------------------


def class_weights(target: torch.Tensor, eps: float = 1e-7) -> Tuple[torch.Tensor, torch.Tensor]:
    """Inverse-frequency weights over the whole batch.

    With both classes present this is N / (2 N_pos + eps) and
    N / (2 N_neg + eps). A class absent from the batch gets weight 0 and the
    other one N / (N_c + eps), so the weighted pixel mass still sums to N.
    """
    n = target.numel()
    n_pos = target.sum()
    n_neg = n - n_pos
    present = (n_pos > 0).to(target.dtype) + (n_neg > 0).to(target.dtype)
    w_pos = torch.where(n_pos > 0, n / (present * n_pos + eps), torch.zeros_like(n_pos))
    w_neg = torch.where(n_neg > 0, n / (present * n_neg + eps), torch.zeros_like(n_neg))
    return w_pos, w_neg


def class_balanced_bce(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7,
                       balanced: bool = True) -> torch.Tensor:
    """Weighted binary cross-entropy on probabilities."""
    global clamp_warnings
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    target = target.to(pred.dtype)
    if bool(((pred <= 0) | (pred >= 1)).any()):
        clamp_warnings += 1
    p = pred.clamp(eps, 1 - eps)
    if balanced:
        w_pos, w_neg = class_weights(target, eps)
    else:
        w_pos = w_neg = torch.ones((), dtype=pred.dtype)
    loss = -(w_pos * target * torch.log(p) + w_neg * (1 - target) * torch.log(1 - p))
    return loss.mean()


def bce_from_logits(logits: torch.Tensor, target: torch.Tensor, balanced: bool = True,
                    eps: float = 1e-7) -> torch.Tensor:
    """Same loss as :func:`class_balanced_bce`, computed stably from logits."""
    target = target.to(logits.dtype)
    if balanced:
        w_pos, w_neg = class_weights(target, eps)
    else:
        w_pos = w_neg = torch.ones((), dtype=logits.dtype)
    # -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
    loss = w_pos * target * F.softplus(-logits) + w_neg * (1 - target) * F.softplus(logits)
    return loss.mean()


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentConfig:
    rotation_degrees: float = 15.0
    translation_fraction: float = 0.1
    blur_sigma: float = 0.8
    intensity_jitter: float = 0.1
    channel_shuffle: bool = True
    flip: bool = True
    p_rotate: float = 0.5
    p_translate: float = 0.5
    p_blur: float = 0.3
    p_jitter: float = 0.5
    p_flip: float = 0.5

    def __post_init__(self):
        for name in ("p_rotate", "p_translate", "p_blur", "p_jitter", "p_flip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1], got {v}")
        for name in ("rotation_degrees", "translation_fraction", "blur_sigma", "intensity_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"augment.{name} must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotate=0, p_translate=0, p_blur=0, p_jitter=0, p_flip=0)


def rotate(sample: SegmentationSample, degrees: float) -> SegmentationSample:
    """Rotate image and mask together; right angles are exact."""
    if float(degrees) % 90 == 0:
        k = int(round(degrees / 90)) % 4
        img, msk = np.rot90(sample.image, k), np.rot90(sample.mask, k)
    else:
        fill = float(sample.image.min())
        img = ndimage.rotate(sample.image, degrees, reshape=False, order=1, mode="constant", cval=fill)
        msk = ndimage.rotate(sample.mask, degrees, reshape=False, order=0, mode="constant", cval=0)
    return replace(sample, image=np.ascontiguousarray(img, dtype=np.float32),
                   mask=np.ascontiguousarray(msk, dtype=np.uint8))


def translate(sample: SegmentationSample, dy: int, dx: int) -> SegmentationSample:
    def shift(a, fill):
        out = np.full_like(a, fill)
        h, w = a.shape
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[yd, xd] = a[ys, xs]
        return out

    return replace(sample, image=shift(sample.image, sample.image.min()), mask=shift(sample.mask, 0))


def augment(sample: SegmentationSample, cfg: AugmentConfig, rng: np.random.Generator) -> SegmentationSample:
    """Geometric ops move image and mask together; photometric ops touch the image only."""
    out = sample
    h, w = sample.image.shape
    if rng.random() < cfg.p_rotate and cfg.rotation_degrees > 0:
        out = rotate(out, rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
    if rng.random() < cfg.p_translate and cfg.translation_fraction > 0:
        dy = int(rng.integers(-int(cfg.translation_fraction * h), int(cfg.translation_fraction * h) + 1))
        dx = int(rng.integers(-int(cfg.translation_fraction * w), int(cfg.translation_fraction * w) + 1))
        out = translate(out, dy, dx)
    if cfg.flip and rng.random() < cfg.p_flip:
        out = replace(out, image=np.ascontiguousarray(out.image[:, ::-1]),
                      mask=np.ascontiguousarray(out.mask[:, ::-1]))
    if rng.random() < cfg.p_blur and cfg.blur_sigma > 0:
        sigma = rng.uniform(0, cfg.blur_sigma)
        out = replace(out, image=ndimage.gaussian_filter(out.image, sigma).astype(np.float32))
    # single-channel slices: "channel shuffle" becomes an intensity jitter
    if cfg.channel_shuffle and rng.random() < cfg.p_jitter and cfg.intensity_jitter > 0:
        gain = 1.0 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
        offset = rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
        out = replace(out, image=(out.image * gain + offset).astype(np.float32))
    return out


# -- training loop ----------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 2.0e-5
    batch_size: int = 32
    epochs: int = 300
    optimizer: str = "adam"
    loss: str = "class_balanced_bce"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    early_stop_patience: Optional[int] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    track_train_metrics: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer != "adam":
            raise ConfigError(f"optimizer must be 'adam', got {self.optimizer!r}")
        if self.loss not in ("bce", "class_balanced_bce"):
            raise ConfigError(f"loss must be bce or class_balanced_bce, got {self.loss!r}")


class HistoryLog:
    """Append-only per-epoch records, mirrored to a JSON-lines file if given a path."""

    def __init__(self, path=None, records: Optional[List[dict]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = list(records or [])

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def numerics(self) -> List[dict]:
        """Records without wall-clock fields."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def __len__(self):
        return len(self.records)

    @classmethod
    def read(cls, path) -> "HistoryLog":
        p = Path(path)
        records = [json.loads(line) for line in p.read_text().splitlines() if line.strip()] if p.exists() else []
        return cls(p, records)


class NonFiniteLoss(NumericError):
    pass


def optimizer_arrays(model: torch.nn.Module, opt: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for key, val in st.items():
            out[f"{name}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return out


def restore_optimizer(model: torch.nn.Module, opt: torch.optim.Optimizer, arrays: Dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        keys = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.split("/", 1)[0] == name}
        if keys:
            opt.state[p] = {k: torch.from_numpy(v.copy()) for k, v in keys.items()}


def predict(model: SegmentationNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Probabilities (N, 1, H, W) in eval mode."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i:i + batch_size], dtype=dtype)
            out.append(model(x).cpu().numpy())
    model.train(was)
    if not out:
        return np.zeros_like(images)
    return np.concatenate(out)


def _metrics(model, samples, batch_size) -> Tuple[float, float]:
    if not samples:
        return float("nan"), float("nan")
    images, masks = stack_samples(samples)
    probs = predict(model, images, batch_size)
    rep = evaluate_predictions(list(probs[:, 0]), list(masks[:, 0]))
    return rep.aggregate["dsc"], rep.aggregate["miou"]


def _rng_blob(seed: int, epoch: int) -> bytes:
    return json.dumps({"seed": seed, "next_epoch": epoch,
                       "scheme": "numpy default_rng([seed, epoch, stream])"}).encode()


def train(model: SegmentationNet, train_set: Sequence[SegmentationSample],
          val_set: Sequence[SegmentationSample], cfg: TrainConfig,
          resume: Optional[Checkpoint] = None) -> Tuple[Checkpoint, HistoryLog]:
    """Adam training with per-epoch validation.

    Epoch ``e`` draws its sample order and augmentations from
    ``default_rng([seed, e, stream])``, so a resumed run continues exactly
    where the interrupted one would have. Returns the best-validation-DSC
    checkpoint (the last one when there is no validation set).
    """
    if not train_set:
        raise ValueError("empty training set")
    train_ids = {(s.subject_id, s.slice_index) for s in train_set}
    overlap = train_ids & {(s.subject_id, s.slice_index) for s in val_set}
    if overlap:
        raise ValueError(f"train and validation sets share {len(overlap)} samples")
    h, w = model.config.input_size
    if train_set[0].image.shape != (h, w):
        raise ValueError(f"samples are {train_set[0].image.shape}, model expects {(h, w)}")

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    history_path = ckpt_dir / "history.jsonl" if ckpt_dir else None

    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    start_epoch = 0
    best = float("-inf")
    best_ckpt: Optional[Checkpoint] = None
    stale = 0
    if resume is not None:
        load_params(model, resume.params)
        restore_optimizer(model, opt, resume.optimizer)
        start_epoch = resume.epoch
        best = resume.best_metric
        stale = int(resume.extra.get("stale_epochs", 0))
        history = HistoryLog.read(history_path) if history_path else HistoryLog(None, resume.extra.get("history", []))
        history.records = history.records[:start_epoch]
        if history_path is not None:
            history_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history.records))
        if ckpt_dir is not None and (ckpt_dir / "best.ckpt").exists():
            from fbchain.checkpoint import load_checkpoint

            best_ckpt = load_checkpoint(ckpt_dir / "best.ckpt")
    else:
        if history_path is not None and history_path.exists():
            history_path.unlink()
        history = HistoryLog(history_path)

    images_all, masks_all = None, None
    balanced = cfg.loss == "class_balanced_bce"
    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            break
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        model.train()
        losses = []
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            batch = [augment(train_set[i], cfg.augment, aug_rng) for i in idx]
            images, masks = stack_samples(batch)
            x = torch.as_tensor(images, dtype=dtype)
            y = torch.as_tensor(masks, dtype=dtype)
            try:
                loss = bce_from_logits(model.logits(x), y, balanced=balanced)
                cause = ""
            except NumericError as exc:
                loss, cause = torch.tensor(float("nan")), f" ({exc})"
            if not torch.isfinite(loss):
                snap = None
                if ckpt_dir is not None:
                    snap = ckpt_dir / f"nonfinite_epoch{epoch}_batch{b // cfg.batch_size}.npz"
                    np.savez(snap, images=images, masks=masks, indices=idx)
                raise NonFiniteLoss(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {b // cfg.batch_size}{cause}"
                    + (f"; batch snapshot written to {snap}" if snap else "")
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())

        val_dsc, val_miou = _metrics(model, list(val_set), cfg.batch_size)
        record = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "val_dsc": val_dsc,
            "val_miou": val_miou,
            "lr": cfg.learning_rate,
        }
        if cfg.track_train_metrics:
            record["train_dsc"], record["train_miou"] = _metrics(model, list(train_set), cfg.batch_size)
        record["wall_time"] = time.perf_counter() - t0
        history.append(record)

        score = val_dsc if val_set else -record["train_loss"]
        improved = score > best
        if improved:
            best = score
            stale = 0
        else:
            stale += 1
        extra = {"stale_epochs": stale, "history": history.records if history_path is None else []}
        ckpt = Checkpoint.from_model(model, epoch=epoch + 1, rng_state=_rng_blob(cfg.seed, epoch + 1),
                                     best_metric=best, optimizer=optimizer_arrays(model, opt), extra=extra)
        if improved:
            best_ckpt = ckpt
        if ckpt_dir is not None:
            save_checkpoint(ckpt, ckpt_dir / "last.ckpt")
            if improved:
                save_checkpoint(ckpt, ckpt_dir / "best.ckpt")

    if best_ckpt is None:
        best_ckpt = Checkpoint.from_model(model, epoch=start_epoch, rng_state=_rng_blob(cfg.seed, start_epoch),
                                          best_metric=best, optimizer=optimizer_arrays(model, opt))
    return best_ckpt, history
