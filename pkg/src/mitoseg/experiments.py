"""Desk-scale experiment recipes shared by the CLI, scripts/ and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .classnet import ClassConfig
from .metrics import DEFAULT_RADIUS, ConfusionCounts, detection_metrics, match_detections
from .pipeline import (InferenceOptions, SynthConfig, TrainHyper, TrainingSet, generate_synthetic,
                       mine_candidates, prepare_patches, run_training, run_two_stage_full)
from .pipeline.regions import crop_centered
from .segnet import SegConfig


def seg_training_set(images, masks, centroids, patch: int = 64, random_per_image: int = 6,
                     jitter: int = 16, seed: int = 0) -> TrainingSet:
    """Mitosis-centred patches plus uniformly random ones from every image."""
    xs, ys = [], []
    for i, (img, mask, cents) in enumerate(zip(images, masks, centroids)):
        pairs = prepare_patches(img, mask, "mitosis_centered", patch, centroids=cents, jitter=jitter, seed=seed + i)
        pairs += prepare_patches(img, mask, "random", patch, count=random_per_image, seed=seed + 10_000 + i)
        for p, m in pairs:
            xs.append(p)
            ys.append(m)
    return TrainingSet(np.stack(xs), np.stack(ys))


def class_training_set(images, centroids, seg_model, options: InferenceOptions | None = None,
                       radius: float = DEFAULT_RADIUS, add_ground_truth: bool = True) -> TrainingSet:
    """Stage-1 candidates labelled by the matcher, plus ground-truth-centred positives."""
    options = options or InferenceOptions()
    crops, labels = mine_candidates(images, centroids, seg_model, options, radius)
    if add_ground_truth:
        for img, cents in zip(images, centroids):
            for c in cents:
                crops.append(crop_centered(np.asarray(img), c, options.crop_size))
                labels.append(1)
    return TrainingSet(crops, np.asarray(labels, dtype=np.float32))


def evaluate(images, centroids, seg_model, class_model, options: InferenceOptions | None = None,
             radius: float = DEFAULT_RADIUS) -> dict:
    """Summed confusion counts and metrics for the two-stage and stage-1-only outputs."""
    options = options or InferenceOptions()
    two, one = ConfusionCounts(), ConfusionCounts()
    for img, gts in zip(images, centroids):
        out = run_two_stage_full(img, seg_model, class_model, options)
        two = two + match_detections(out.detections, gts, radius)[0]
        one = one + match_detections(out.stage1, gts, radius)[0]
    return {"two_stage": (two, detection_metrics(two)), "stage1": (one, detection_metrics(one))}


@dataclass
class DeskSetup:
    n_train: int = 48
    n_test: int = 16
    image_size: int = 512
    data_seed: int = 1
    seg: SegConfig = field(default_factory=lambda: SegConfig(base_width=8, seed=0))
    seg_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(lr=2e-3, batch_size=16, epochs=20, seed=0))
    seg_patch: int = 64
    random_per_image: int = 6
    cls: ClassConfig = field(default_factory=lambda: ClassConfig.desk(seed=0))
    class_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(lr=1e-3, batch_size=16, epochs=10, seed=0))
    options: InferenceOptions = field(default_factory=InferenceOptions)
    radius: float = DEFAULT_RADIUS


def run_desk_experiment(setup: DeskSetup | None = None, log=print) -> dict:
    setup = setup or DeskSetup()
    synth = SynthConfig(image_size=setup.image_size)
    train = generate_synthetic(synth, setup.n_train, seed=setup.data_seed, prefix="train")
    test = generate_synthetic(synth, setup.n_test, seed=setup.data_seed + 1000, prefix="test")
    t0 = time.time()
    seg_set = seg_training_set(train.images, train.masks, train.centroids, setup.seg_patch,
                               setup.random_per_image, seed=setup.data_seed)
    seg = run_training("seg", seg_set, setup.seg_hyper, config=setup.seg)
    t_seg = time.time() - t0
    log(f"seg trained | patches={len(seg_set)} steps={seg.steps} loss={seg.losses[-1]:.4f} seconds={t_seg:.0f}")
    cls_set = class_training_set(train.images, train.centroids, seg.model, setup.options, setup.radius)
    cls = run_training("class", cls_set, setup.class_hyper, config=setup.cls)
    t_cls = time.time() - t0 - t_seg
    log(f"class trained | crops={len(cls_set)} positives={int(np.sum(cls_set.targets))} "
        f"steps={cls.steps} loss={cls.losses[-1]:.4f} seconds={t_cls:.0f}")
    result = evaluate(test.images, test.centroids, seg.model, cls.model, setup.options, setup.radius)
    for key in ("stage1", "two_stage"):
        counts, (p, r, f) = result[key]
        log(f"{key} | precision={p:.4f} recall={r:.4f} f_score={f:.4f} TP={counts.tp} FP={counts.fp} FN={counts.fn}")
    result.update(seg_losses=seg.losses, class_losses=cls.losses, seg_seconds=t_seg, class_seconds=t_cls,
                  seg_model=seg.model, class_model=cls.model)
    return result
