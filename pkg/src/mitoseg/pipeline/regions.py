"""Connected-component labeling of binarized probability maps and candidate cropping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Region:
    label: int
    area: int
    centroid: tuple[float, float]        # (x, y) = (mean column, mean row)
    bbox: tuple[int, int, int, int]      # (row_min, col_min, row_max, col_max), inclusive

    def __post_init__(self):
        if self.area < 1:
            raise ValueError("region area must be at least 1")


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) > threshold


def _row_runs(row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start and inclusive end columns of each foreground run."""
    padded = np.concatenate(([False], row, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return edges[0::2], edges[1::2] - 1


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def label_runs(mask: np.ndarray):
    """Run-length two-pass union-find with 8-connectivity.

    Returns per-run arrays (row, start, end, label); labels run from 1 in raster order of
    each component's first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, starts, ends = [], [], []
    parent: list[int] = []
    prev_lo = prev_hi = 0
    for r in range(mask.shape[0]):
        s, e = _row_runs(mask[r])
        base = len(rows)
        j = prev_lo
        for k in range(len(s)):
            idx = base + k
            parent.append(idx)
            # previous-row runs touching [s-1, e+1]
            while j < prev_hi and ends[j] < s[k] - 1:
                j += 1
            m = j
            while m < prev_hi and starts[m] <= e[k] + 1:
                a, b = _find(parent, m), _find(parent, idx)
                if a != b:
                    parent[max(a, b)] = min(a, b)
                m += 1
        rows.extend([r] * len(s))
        starts.extend(s.tolist())
        ends.extend(e.tolist())
        prev_lo, prev_hi = base, len(rows)
    roots = [_find(parent, i) for i in range(len(parent))]
    relabel: dict[int, int] = {}
    labels = np.empty(len(roots), dtype=np.int64)
    for i, root in enumerate(roots):
        # runs are in raster order, and a root is always the smallest run index of its set
        labels[i] = relabel.setdefault(root, len(relabel) + 1)
    return (np.asarray(rows, dtype=np.int64), np.asarray(starts, dtype=np.int64),
            np.asarray(ends, dtype=np.int64), labels)


def label_image(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(np.shape(mask), dtype=np.int64)
    for r, s, e, lab in zip(*label_runs(mask)):
        out[r, s:e + 1] = lab
    return out


def label_regions(prob: np.ndarray, threshold: float = 0.5) -> list[Region]:
    """Regions of pixels strictly above ``threshold``, 8-connected, labels 1..n in raster order."""
    rows, starts, ends, labels = label_runs(binarize(prob, threshold))
    if len(labels) == 0:
        return []
    n = int(labels.max())
    lengths = ends - starts + 1
    area = np.bincount(labels, weights=lengths, minlength=n + 1)
    col_sum = np.bincount(labels, weights=(starts + ends) * lengths / 2.0, minlength=n + 1)
    row_sum = np.bincount(labels, weights=rows * lengths, minlength=n + 1)
    big = np.iinfo(np.int64).max
    rmin = np.full(n + 1, big); cmin = np.full(n + 1, big)
    rmax = np.full(n + 1, -1); cmax = np.full(n + 1, -1)
    np.minimum.at(rmin, labels, rows); np.maximum.at(rmax, labels, rows)
    np.minimum.at(cmin, labels, starts); np.maximum.at(cmax, labels, ends)
    return [Region(lab, int(area[lab]), (col_sum[lab] / area[lab], row_sum[lab] / area[lab]),
                   (int(rmin[lab]), int(cmin[lab]), int(rmax[lab]), int(cmax[lab])))
            for lab in range(1, n + 1)]


def crop_centered(image: np.ndarray, center_xy: tuple[float, float], size: int) -> np.ndarray:
    """``size``² crop around the rounded center; out-of-image parts are zero (black)."""
    cx, cy = (int(round(v)) for v in center_xy)
    top, left = cy - size // 2, cx - size // 2
    out = np.zeros((size, size) + image.shape[2:], dtype=image.dtype)
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + size, image.shape[0]), min(left + size, image.shape[1])
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = image[r0:r1, c0:c1]
    return out


def extract_candidates(image: np.ndarray, regions, min_area: int = 100,
                       crop_size: int = 64) -> list[tuple[np.ndarray, Region]]:
    """Crops for regions whose area is strictly greater than ``min_area``."""
    return [(crop_centered(image, reg.centroid, crop_size), reg)
            for reg in regions if reg.area > min_area]
