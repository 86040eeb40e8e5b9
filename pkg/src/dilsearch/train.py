"""Training loop, poly learning rate, cropping, mean IoU and BN recomputation."""

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .data import IGNORE_LABEL, SegSample
from .errors import DataError, NumericError
from .network import RunMode, forward_segmentation, init_params
from .tensor import Adam, Tape, Tensor, backward, softmax_cross_entropy


@dataclass
class TrainConfig:
    """Hyperparameters. Defaults are paper scale; see :meth:`desk`."""

    base_lr: float = 1e-3
    lr_power: float = 0.9
    batch_size: int = 32
    crop_size: int = 800
    total_steps: int = 1000
    num_classes: int = 2
    seed: int = 0
    output_stride: int = 8
    pad_unaligned_crop: bool = False
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    ignore_label: int = IGNORE_LABEL
    bn_recompute_passes: Optional[int] = None  # None: exact
    bn_recompute_images: int = 32
    log_every: int = 0

    @classmethod
    def desk(cls, **kw):
        base = dict(batch_size=8, crop_size=96, total_steps=2000)
        base.update(kw)
        return cls(**base)

    def validate(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if self.crop_size < 0:
            raise ValueError("crop_size must be >= 0 (0 disables cropping)")
        if self.crop_size % self.output_stride and not self.pad_unaligned_crop:
            raise ValueError(
                f"crop_size {self.crop_size} is not a multiple of the output stride {self.output_stride}; "
                "pick an aligned size or set pad_unaligned_crop"
            )
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def poly_lr(step, cfg):
    """``base_lr * (1 - step / total_steps) ** power``."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.base_lr * (1.0 - step / cfg.total_steps) ** cfg.lr_power


def random_crop(sample, crop, rng):
    """Crop image and mask at the same uniformly drawn offset."""
    h, w = sample.mask.shape
    if h < crop or w < crop:
        raise DataError(f"sample {sample.id}: {h}x{w} image is smaller than crop {crop}")
    dy = int(rng.integers(0, h - crop + 1))
    dx = int(rng.integers(0, w - crop + 1))
    return SegSample(
        sample.image[:, dy : dy + crop, dx : dx + crop],
        sample.mask[dy : dy + crop, dx : dx + crop],
        sample.id,
    )


def _pad_to(images, masks, multiple, ignore_label):
    h, w = masks.shape[1:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return images, masks
    images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)))
    masks = np.pad(masks, ((0, 0), (0, ph), (0, pw)), constant_values=ignore_label)
    return images, masks


def confusion_matrix(pred, target, num_classes, ignore_label=IGNORE_LABEL):
    """Rows are ground-truth classes, columns predictions."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"pred/target sizes differ: {pred.shape} vs {target.shape}")
    keep = target != ignore_label
    pred, target = pred[keep], target[keep]
    if ((pred < 0) | (pred >= num_classes)).any() or ((target < 0) | (target >= num_classes)).any():
        raise ValueError(f"mask values must lie in [0, {num_classes})")
    return np.bincount(target * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(cm):
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    if not present.any():
        raise ValueError("empty masks: no labelled pixels")
    return iou, float(iou[present].mean())


def mean_iou(pred_mask, target_mask, num_classes, ignore_label=IGNORE_LABEL):
    cm = confusion_matrix(pred_mask, target_mask, num_classes, ignore_label)
    if cm.sum() == 0:
        raise ValueError("empty masks: no labelled pixels")
    return iou_from_confusion(cm)[1]


def _batches(n, size):
    for start in range(0, n, size):
        yield list(range(start, min(n, start + size)))


def recompute_bn_stats(spec, params, dataset, passes=None, batch_size=32, gates=None, max_images=None):
    """Replace BN running statistics by statistics aggregated over ``dataset``.

    The target is the train-mode statistics of the whole set treated as one
    batch. The first pass normalizes each chunk with its own batch statistics;
    later passes normalize with the pooled statistics of the previous pass.
    Pass ``p`` makes the first ``p`` BN layers (in call order) exact, so the
    default (``passes=None``) runs one pass when the set fits in one chunk and
    one pass per BN layer otherwise. Weights are untouched.
    """
    n = len(dataset) if max_images is None else min(len(dataset), max_images)
    if n == 0:
        raise ValueError("recompute_bn_stats needs a non-empty dataset")
    if passes is not None and passes < 1:
        raise ValueError("passes must be >= 1")
    dtype = params["stem.conv.weight"].dtype
    p = 0
    while True:
        acc = {}
        mode = RunMode(training=(p == 0), momentum=0.0, collect=acc)
        for idx in _batches(n, batch_size):
            imgs, _ = dataset.stack(idx)
            forward_segmentation(spec, params, Tensor(imgs.astype(dtype)), mode, gates)
        for prefix, (s, ss, count) in acc.items():
            mean = s / count
            var = np.maximum(ss / count - mean * mean, 0.0)
            params.buffers[f"{prefix}.running_mean"] = mean.astype(dtype)
            params.buffers[f"{prefix}.running_var"] = var.astype(dtype)
        p += 1
        total = passes if passes is not None else (1 if n <= batch_size else len(acc))
        if p >= total:
            return params


def predict(spec, params, images, batch_size=8, gates=None):
    """Argmax class map for a stack of images (B, 3, H, W), inference mode."""
    dtype = params["stem.conv.weight"].dtype
    out = []
    for idx in _batches(len(images), batch_size):
        logits = forward_segmentation(spec, params, Tensor(images[idx].astype(dtype)), RunMode(), gates)
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(spec, params, dataset, batch_size=8, ignore_label=IGNORE_LABEL):
    """Global-confusion-matrix IoU report over ``dataset``."""
    c = dataset.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    for idx in _batches(len(dataset), batch_size):
        imgs, masks = dataset.stack(idx)
        pred = predict(spec, params, imgs, batch_size)
        cm += confusion_matrix(pred, masks, c, ignore_label)
    iou, miou = iou_from_confusion(cm)
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "mean_iou": miou,
        "pixel_counts": {"target": cm.sum(1).tolist(), "predicted": cm.sum(0).tolist()},
        "confusion_matrix": cm.tolist(),
    }


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    tau: Optional[float] = None


def write_loss_log(records, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "lr", "tau", "loss"])
        for r in records:
            wr.writerow([r.step, repr(r.lr), "" if r.tau is None else repr(r.tau), repr(r.loss)])


def sample_batch(dataset, cfg, rng):
    """Draw ``batch_size`` random samples, crop them, stack (image, mask).

    ``crop_size == 0`` disables cropping (full images).
    """
    idx = rng.integers(0, len(dataset), cfg.batch_size)
    if cfg.crop_size:
        crops = [random_crop(dataset[int(i)], cfg.crop_size, rng) for i in idx]
    else:
        crops = [dataset[int(i)] for i in idx]
    imgs = np.stack([s.image for s in crops])
    masks = np.stack([s.mask for s in crops])
    if cfg.pad_unaligned_crop:
        imgs, masks = _pad_to(imgs, masks, cfg.output_stride, cfg.ignore_label)
    return imgs, masks


def train(spec, dataset, cfg, params=None, log_path=None, checkpoint_path=None, dtype=np.float32, recompute=True):
    """Adam + poly LR on mean pixel-wise cross-entropy.

    Returns ``(params, records)``. BN statistics are recomputed on the
    training images at the end unless ``recompute`` is False.
    """
    cfg.validate()
    if spec.gated_units():
        raise ValueError("spec has gated units; use gates.run_search")
    if dataset.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, network {spec.num_classes}")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(spec, cfg.seed, dtype)
    opt = Adam(params.trainable(), cfg.betas, cfg.adam_eps)
    mode = RunMode(training=True, momentum=cfg.bn_momentum)
    records = []
    for step in range(cfg.total_steps):
        imgs, masks = sample_batch(dataset, cfg, rng)
        lr = poly_lr(step, cfg)
        opt.zero_grad()
        with Tape():
            logits = forward_segmentation(spec, params, Tensor(imgs.astype(dtype)), mode)
            loss = softmax_cross_entropy(logits, masks, cfg.ignore_label)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        backward(loss)
        opt.step(lr)
        records.append(StepRecord(step, lr, value))
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"step {step:5d} lr {lr:.3e} loss {value:.4f}", flush=True)
    if recompute:
        recompute_bn_stats(spec, params, dataset, cfg.bn_recompute_passes, max_images=cfg.bn_recompute_images)
    if log_path is not None:
        write_loss_log(records, log_path)
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, params.arrays(), {"spec": spec.to_dict(), "train": cfg.to_dict()})
    return params, records
