"""Segment, extract candidates, classify, filter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..metrics import DEFAULT_RADIUS, Detection, match_detections
from ..segnet import DOWNSAMPLE
from ..stain import REFERENCE_PROFILE, StainError, StainProfile, normalize_to_reference
from .regions import extract_candidates, label_regions
from .tiling import tiled_predict


@dataclass
class InferenceOptions:
    window: int = 256
    seg_threshold: float = 0.5
    min_area: int = 100
    crop_size: int = 64
    class_threshold: float = 0.5
    normalize: bool = False
    reference: StainProfile = REFERENCE_PROFILE
    stage1_only: bool = False
    batch_size: int = 4


@dataclass
class StageOutput:
    detections: list[Detection]
    stage1: list[Detection]
    probability: np.ndarray


def effective_window(shape, window: int) -> int:
    w = min(window, shape[0], shape[1]) // DOWNSAMPLE * DOWNSAMPLE
    if w < DOWNSAMPLE:
        raise ValueError(f"image {shape[:2]} too small for tiled inference")
    return w


TILE_PIXEL_BUDGET = 4 * 256 * 256


def as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    return image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)


def segment_image(image: np.ndarray, seg_model, options: InferenceOptions) -> np.ndarray:
    img = as_float_image(image)
    window = effective_window(img.shape, options.window)
    # large windows (the 2048 HPF plan) go one tile at a time to bound memory
    batch = max(1, min(options.batch_size, TILE_PIXEL_BUDGET // (window * window)))
    return tiled_predict(seg_model.predict, img, window, batch)


def region_score(prob: np.ndarray, region) -> float:
    r0, c0, r1, c1 = region.bbox
    window = prob[r0:r1 + 1, c0:c1 + 1]
    return float(window.max())


def sort_detections(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.y, d.x))


def run_two_stage_full(image, seg_model, class_model=None, options: InferenceOptions | None = None) -> StageOutput:
    options = options or InferenceOptions()
    image = np.asarray(image)
    if options.normalize:
        try:
            image = normalize_to_reference(image, options.reference)
        except StainError:
            pass   # blank or tissue-poor field: nothing to normalize
    prob = segment_image(image, seg_model, options)
    regions = label_regions(prob, options.seg_threshold)
    candidates = extract_candidates(image, regions, options.min_area, options.crop_size)
    stage1 = sort_detections([Detection(r.centroid[0], r.centroid[1], region_score(prob, r), r.area)
                              for _, r in candidates])
    if options.stage1_only or class_model is None or not candidates:
        return StageOutput(stage1, stage1, prob)
    probs = class_model.predict_crops([crop for crop, _ in candidates])
    kept = [Detection(r.centroid[0], r.centroid[1], float(p), r.area)
            for (_, r), p in zip(candidates, probs)
            if isinstance(p, float) and p >= options.class_threshold]
    return StageOutput(sort_detections(kept), stage1, prob)


def run_two_stage(image, seg_model, class_model=None, options: InferenceOptions | None = None) -> list[Detection]:
    """Detections sorted by descending score. ``seg_model`` needs ``predict(N×H×W×3) -> N×H×W``;
    ``class_model`` needs ``predict_crops(list of crops) -> list of probabilities``."""
    return run_two_stage_full(image, seg_model, class_model, options).detections


def label_candidates(detections, ground_truth, radius: float = DEFAULT_RADIUS) -> list[int]:
    """1 when a candidate's centroid is matched to a ground-truth centroid, else 0."""
    _, pairs = match_detections(detections, ground_truth, radius)
    labels = [0] * len(detections)
    for i, _ in pairs:
        labels[i] = 1
    return labels


def mine_candidates(images, centroids, seg_model, options: InferenceOptions | None = None,
                    radius: float = DEFAULT_RADIUS) -> tuple[list[np.ndarray], list[int]]:
    """Stage-1 candidate crops from labeled images, with matcher-derived labels."""
    options = options or InferenceOptions()
    crops, labels = [], []
    for image, gts in zip(images, centroids):
        prob = segment_image(image, seg_model, options)
        regions = label_regions(prob, options.seg_threshold)
        cands = extract_candidates(np.asarray(image), regions, options.min_area, options.crop_size)
        dets = [Detection(r.centroid[0], r.centroid[1], 1.0, r.area) for _, r in cands]
        crops.extend(c for c, _ in cands)
        labels.extend(label_candidates(dets, gts, radius))
    return crops, labels
