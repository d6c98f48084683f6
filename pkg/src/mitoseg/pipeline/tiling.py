"""Window planning and overlap-averaged stitching for whole-field inference."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TilePlan:
    window: int
    offsets: tuple[tuple[int, int], ...]   # (row, col) top-left corners
    full_size: tuple[int, int]

    def __len__(self):
        return len(self.offsets)

    def coverage(self) -> np.ndarray:
        """How many tiles cover each pixel."""
        count = np.zeros(self.full_size, dtype=np.int32)
        for r, c in self.offsets:
            count[r:r + self.window, c:c + self.window] += 1
        return count


def axis_offsets(dim: int, window: int) -> list[int]:
    """ceil(dim / window) evenly spread windows, first at 0 and last flush with the edge."""
    n = math.ceil(dim / window)
    if n == 1:
        return [0]
    return sorted({int(round(v)) for v in np.linspace(0, dim - window, n)})


def plan_tiles(full_size: tuple[int, int], window: int) -> TilePlan:
    h, w = full_size
    if window < 1:
        raise TilingError(f"window must be positive, got {window}")
    if window > min(h, w):
        raise TilingError(f"window {window} exceeds image extent {h}×{w}")
    rows, cols = axis_offsets(h, window), axis_offsets(w, window)
    return TilePlan(window, tuple((r, c) for r in rows for c in cols), (h, w))


def stitch_average(tile_maps, plan: TilePlan) -> np.ndarray:
    """Mean of all tile predictions covering each pixel."""
    tile_maps = list(tile_maps)
    if len(tile_maps) != len(plan.offsets):
        raise TilingError(f"plan has {len(plan.offsets)} tiles but {len(tile_maps)} maps were given")
    total = np.zeros(plan.full_size, dtype=np.float64)
    for tile, (r, c) in zip(tile_maps, plan.offsets):
        tile = np.asarray(tile)
        if tile.shape != (plan.window, plan.window):
            raise TilingError(f"tile map shape {tile.shape} != window {plan.window}")
        total[r:r + plan.window, c:c + plan.window] += tile
    return total / plan.coverage()


def tiled_predict(predict_fn, image: np.ndarray, window: int, batch_size: int = 4) -> np.ndarray:
    """Run ``predict_fn`` (N×w×w×C -> N×w×w) over a tile plan and stitch the results."""
    plan = plan_tiles(image.shape[:2], window)
    maps = []
    for start in range(0, len(plan.offsets), batch_size):
        chunk = plan.offsets[start:start + batch_size]
        batch = np.stack([image[r:r + window, c:c + window] for r, c in chunk])
        maps.extend(np.asarray(predict_fn(batch)))
    return stitch_average(maps, plan)
