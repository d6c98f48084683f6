"""Mini-batch AdamW training loops for the segmenter and the candidate classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import ndcore as nd
from ..classnet import ClassConfig, build_classifier, prepare_crop
from ..losses import bce_loss, combined_loss
from ..segnet import SegConfig, build_segnet, images_to_nchw
from .models import save_model
from .patches import augment_patch

TASKS = ("seg", "class")
DECAY_MODES = ("lr_step", "weight_decay")


class EmptyDatasetError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainHyper:
    lr: float = 1e-4
    batch_size: int = 16
    decay: float = 0.1
    decay_mode: str = "lr_step"     # lr_step: lr *= decay once at 80% of epochs
    decay_at: float = 0.8
    epochs: int = 10
    seed: int = 0
    augment: bool = True
    stop_below: float | None = None  # end early once a batch loss drops under this

    def __post_init__(self):
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}, got {self.decay_mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("batch_size must be >= 1, epochs and lr non-negative")


@dataclass
class TrainingSet:
    """Seg: inputs N×h×w×3 (uint8 or [0,1] float), targets N×h×w in {0,1}.
    Class: inputs is a list of H×W×3 crops, targets N labels in {0,1}."""
    inputs: object
    targets: object

    def __len__(self):
        return len(self.inputs)


@dataclass
class TrainResult:
    model: object
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    steps: int = 0


def smoothed(losses, window: int = 10) -> list[float]:
    """Means of consecutive non-overlapping windows."""
    return [float(np.mean(losses[i:i + window])) for i in range(0, len(losses) - window + 1, window)]


def _seg_batch(ds: TrainingSet, idx, rng_seed, augment):
    xs, ys = [], []
    for k, i in enumerate(idx):
        img = np.asarray(ds.inputs[i])
        img = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
        mask = np.asarray(ds.targets[i]).astype(np.float32)
        if augment:
            img, mask = augment_patch(img, mask, [rng_seed, k])
        xs.append(img)
        ys.append(mask)
    return nd.Tensor(images_to_nchw(np.stack(xs))), np.stack(ys)[:, None].astype(np.float32)


def _class_batch(prepared, labels, idx, rng_seed, augment):
    xs = []
    for k, i in enumerate(idx):
        crop = prepared[i]
        if augment:
            hwc = crop.transpose(1, 2, 0)
            hwc, _ = augment_patch(hwc, np.zeros(hwc.shape[:2], np.uint8), [rng_seed, k],
                                   blur_sigma=(0.0, 0.5), scale_range=(0.9, 1.1))
            crop = hwc.transpose(2, 0, 1)
        xs.append(crop)
    return nd.Tensor(np.ascontiguousarray(np.stack(xs))), labels[idx]


def run_training(task: str, dataset: TrainingSet, hyper: TrainHyper | None = None, model=None,
                 config=None, checkpoint=None, log=None) -> TrainResult:
    """Train ``model`` (built from ``config`` when omitted) and optionally checkpoint it.

    ``log`` receives one ``(epoch, step, loss, lr)`` tuple per optimizer step.
    """
    hyper = hyper or TrainHyper()
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if dataset is None or len(dataset) == 0:
        raise EmptyDatasetError("training dataset is empty")
    if model is None:
        model = build_segnet(config or SegConfig()) if task == "seg" else build_classifier(config or ClassConfig.desk())
    model.train()
    wd = hyper.decay if hyper.decay_mode == "weight_decay" else 0.0
    opt = nd.AdamW(model.parameters(), lr=hyper.lr, weight_decay=wd)
    rng = np.random.default_rng(hyper.seed)
    if task == "class":
        prepared = [prepare_crop(c) for c in dataset.inputs]
        labels = np.asarray(dataset.targets, dtype=np.float32)
    decay_epoch = math.ceil(hyper.decay_at * hyper.epochs) if hyper.decay_mode == "lr_step" else None
    result = TrainResult(model)
    n = len(dataset)
    for epoch in range(hyper.epochs):
        if epoch == decay_epoch:
            opt.lr = hyper.lr * hyper.decay
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            batch_seed = int(rng.integers(2 ** 31))
            if task == "seg":
                x, y = _seg_batch(dataset, idx, batch_seed, hyper.augment)
                loss = combined_loss(model(x), y)
            else:
                x, y = _class_batch(prepared, labels, idx, batch_seed, hyper.augment)
                loss = bce_loss(model(x), y)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b} (samples {idx.tolist()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.losses.append(value)
            result.lrs.append(opt.lr)
            result.steps += 1
            if log is not None:
                log(epoch, result.steps, value, opt.lr)
            if hyper.stop_below is not None and value < hyper.stop_below:
                break
        else:
            continue
        break
    model.eval()
    if checkpoint is not None:
        save_model(model, checkpoint)
    return result
