"""Residual CNN that scores 128×128 candidate crops as mitosis / not mitosis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Module, Tensor
from .segnet import ConfigError, ConvUnit

INPUT_SIZE = 128
DEEP_DEPTHS = (3, 4, 6, 3)  # the 34-layer residual layout
DESK_DEPTHS = (1, 1, 1, 1)


@dataclass
class ClassConfig:
    stage_depths: tuple[int, ...] = DEEP_DEPTHS
    base_width: int = 16
    input_size: int = INPUT_SIZE
    use_batchnorm: bool = True
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if not self.stage_depths or min(self.stage_depths) < 1:
            raise ConfigError(f"every stage needs at least one block, got {self.stage_depths}")
        if self.input_size != INPUT_SIZE:
            raise ConfigError(f"input_size is fixed at {INPUT_SIZE}")
        if self.base_width < 1:
            raise ConfigError("base_width must be positive")

    @classmethod
    def desk(cls, **kw) -> "ClassConfig":
        kw.setdefault("stage_depths", DESK_DEPTHS)
        return cls(**kw)


class BasicBlock(Module):
    def __init__(self, c_in, c_out, stride, bn, rng):
        self.conv1 = ConvUnit(c_in, c_out, 3, stride=stride, bn=bn, rng=rng)
        self.conv2 = ConvUnit(c_out, c_out, 3, bn=bn, act=False, rng=rng)
        needs_proj = stride != 1 or c_in != c_out
        self.shortcut = ConvUnit(c_in, c_out, 1, stride=stride, bn=bn, act=False, rng=rng) if needs_proj else None

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return nd.relu(self.conv2(self.conv1(x)) + skip)


class Classifier(Module):
    """7×7/2 stem and a 3×3/2 reduction conv, residual stages, global average pool, linear, sigmoid."""

    def __init__(self, config: ClassConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        bn, w = config.use_batchnorm, config.base_width
        self.stem = ConvUnit(3, w, 7, stride=2, bn=bn, rng=rng)
        self.reduce = ConvUnit(w, w, 3, stride=2, bn=bn, rng=rng)
        blocks, c_in = [], w
        for stage, depth in enumerate(config.stage_depths):
            c_out = w * 2 ** stage
            for i in range(depth):
                stride = 2 if (i == 0 and stage > 0) else 1
                blocks.append(BasicBlock(c_in, c_out, stride, bn, rng))
                c_in = c_out
        self.blocks = blocks
        self.fc = nd.Linear(c_in, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (3, INPUT_SIZE, INPUT_SIZE):
            raise nd.ShapeError(f"expected N×3×{INPUT_SIZE}×{INPUT_SIZE} input, got {x.shape}")
        y = self.reduce(self.stem(x))
        for block in self.blocks:
            y = block(y)
        pooled = nd.global_avg_pool(y)
        logits = self.fc(pooled.reshape(pooled.shape[0], pooled.shape[1]))
        return nd.sigmoid(logits).reshape(x.shape[0])

    def predict_crops(self, crops) -> list[float]:
        return classify_candidates(self, crops)


def build_classifier(config: ClassConfig | None = None) -> Classifier:
    return Classifier(config or ClassConfig())


class CropError(ValueError):
    pass


def prepare_crop(crop: np.ndarray) -> np.ndarray:
    """H×W×3 crop (uint8 or [0,1] float) -> 3×128×128 float32 in [0, 1]."""
    arr = np.asarray(crop)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise CropError(f"crop must be H×W×3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise CropError("empty crop")
    img = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    if img.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        img = nd.resize_image(img, (INPUT_SIZE, INPUT_SIZE))
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def classify_candidates(model: Classifier, samples, batch_size: int = 32) -> list:
    """One probability per crop, in order. Invalid crops yield a ``CropError`` entry.

    Identical crops are scored once, so duplicates get bit-identical probabilities regardless
    of how BLAS blocks differently sized batches.
    """
    results: list = [None] * len(samples)
    unique: dict[bytes, int] = {}
    ready, owners = [], []
    for i, crop in enumerate(samples):
        try:
            prepared = prepare_crop(crop)
        except CropError as exc:
            results[i] = exc
            continue
        key = prepared.tobytes()
        if key not in unique:
            unique[key] = len(ready)
            ready.append(prepared)
            owners.append([])
        owners[unique[key]].append(i)
    was_training = model.training
    model.eval()
    with nd.no_grad():
        for start in range(0, len(ready), batch_size):
            probs = model(Tensor(np.stack(ready[start:start + batch_size]))).data
            for slot, p in enumerate(probs, start):
                for j in owners[slot]:
                    results[j] = float(p)
    model.train(was_training)
    return results
