"""Centroid matching and detection-level precision / recall / F-score."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

DEFAULT_RADIUS = 20.0  # px; ~5 um at 0.25 um/px


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float = 1.0
    area: int = 1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: float = 0
    fp: float = 0
    fn: float = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative confusion count: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _xy(p) -> tuple[float, float]:
    if isinstance(p, Detection):
        return p.x, p.y
    return float(p[0]), float(p[1])


def match_detections(preds: Sequence, gts: Sequence, radius: float = DEFAULT_RADIUS):
    """Greedy one-to-one matching by ascending centroid distance.

    Returns ``(counts, pairs)`` where ``pairs`` lists matched (pred_index, gt_index).
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    pxy = [_xy(p) for p in preds]
    gxy = [_xy(g) for g in gts]
    candidates = []
    for i, (px, py) in enumerate(pxy):
        for j, (gx, gy) in enumerate(gxy):
            d = math.hypot(px - gx, py - gy)
            if d <= radius:
                candidates.append((d, i, j))
    candidates.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    tp = len(pairs)
    return ConfusionCounts(tp, len(pxy) - tp, len(gxy) - tp), pairs


def detection_metrics(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, f_score); undefined ratios are reported as 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall, f_score(precision, recall)


def f_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


METRIC_COLUMNS = ("precision", "recall", "f_score", "TP", "FP", "FN")


def metrics_row(counts: ConfusionCounts) -> dict:
    p, r, f = detection_metrics(counts)
    return {"precision": p, "recall": r, "f_score": f, "TP": counts.tp, "FP": counts.fp, "FN": counts.fn}


def format_report(counts: ConfusionCounts, label: str = "") -> str:
    row = metrics_row(counts)
    head = f"[{label}] " if label else ""
    return "\n".join([
        f"{head}precision {row['precision']:.4f}",
        f"{head}recall    {row['recall']:.4f}",
        f"{head}f_score   {row['f_score']:.4f}",
        f"{head}TP={counts.tp} FP={counts.fp} FN={counts.fn}",
    ]) + "\n"


def metrics_csv(rows: Iterable[tuple[str, ConfusionCounts]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("label",) + METRIC_COLUMNS)
    for label, counts in rows:
        r = metrics_row(counts)
        writer.writerow([label] + [f"{r[k]:.6f}" if isinstance(r[k], float) else r[k] for k in METRIC_COLUMNS])
    return buf.getvalue()
