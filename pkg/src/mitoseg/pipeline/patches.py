"""Training-patch sampling and online augmentation."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..ndcore import resize_image
from .regions import label_regions

STRATEGIES = ("sliding", "random", "mitosis_centered")


class PatchError(ValueError):
    pass


def sliding_starts(dim: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)   # clamp the last window to the edge
    return starts


def prepare_patches(image: np.ndarray, mask: np.ndarray, strategy: str = "sliding", patch: int = 256,
                    overlap: int = 32, count: int | None = None, centroids=None, seed: int = 0,
                    jitter: int = 16) -> list[tuple[np.ndarray, np.ndarray]]:
    h, w = image.shape[:2]
    if mask.shape[:2] != (h, w):
        raise PatchError(f"mask {mask.shape} does not match image {image.shape}")
    if patch > min(h, w):
        raise PatchError(f"patch {patch} larger than image {h}×{w}")
    rng = np.random.default_rng(seed)
    if strategy == "sliding":
        stride = patch - overlap
        if stride < 1:
            raise PatchError("overlap must be smaller than the patch size")
        corners = [(r, c) for r in sliding_starts(h, patch, stride) for c in sliding_starts(w, patch, stride)]
    elif strategy == "random":
        n = 1 if count is None else count
        corners = list(zip(rng.integers(0, h - patch + 1, n).tolist(), rng.integers(0, w - patch + 1, n).tolist()))
    elif strategy == "mitosis_centered":
        if centroids is None:
            centroids = [reg.centroid for reg in label_regions(mask, 0)]
        corners = []
        for cx, cy in centroids:
            dr, dc = rng.integers(-jitter, jitter + 1, 2) if jitter else (0, 0)
            r = int(np.clip(int(round(cy)) - patch // 2 + dr, 0, h - patch))
            c = int(np.clip(int(round(cx)) - patch // 2 + dc, 0, w - patch))
            corners.append((r, c))
    else:
        raise PatchError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return [(image[r:r + patch, c:c + patch], mask[r:r + patch, c:c + patch]) for r, c in corners]


def hflip(a):
    return a[:, ::-1]


def vflip(a):
    return a[::-1]


def rot90(a, k=1):
    return np.rot90(a, k, axes=(0, 1))


def fit_center(a: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad the two leading axes to ``size``."""
    out = np.zeros((size, size) + a.shape[2:], dtype=a.dtype)
    h, w = a.shape[:2]
    sr, dr = max((h - size) // 2, 0), max((size - h) // 2, 0)
    sc, dc = max((w - size) // 2, 0), max((size - w) // 2, 0)
    n_r, n_c = min(h, size), min(w, size)
    out[dr:dr + n_r, dc:dc + n_c] = a[sr:sr + n_r, sc:sc + n_c]
    return out


def rescale_pair(patch: np.ndarray, mask: np.ndarray, factor: float) -> tuple[np.ndarray, np.ndarray]:
    size = patch.shape[0]
    new = max(1, int(round(size * factor)))
    if new == size:
        return patch, mask
    img = resize_image(patch.astype(np.float32), (new, new))
    # nearest-neighbour keeps the mask binary
    idx = np.minimum(((np.arange(new) + 0.5) * size / new).astype(int), size - 1)
    m = mask[idx][:, idx]
    return fit_center(img, size).astype(patch.dtype), fit_center(m, size)


def augment_patch(patch: np.ndarray, mask: np.ndarray, seed, blur_sigma: tuple[float, float] = (0.0, 1.0),
                  scale_range: tuple[float, float] = (0.8, 1.2)) -> tuple[np.ndarray, np.ndarray]:
    """Random flips, quarter turns, mild blur (image only) and rescale-then-crop.

    ``patch`` is H×W×3 float in [0, 1]; ``mask`` is H×W and must be square with it.
    """
    if patch.shape[0] != patch.shape[1] or mask.shape != patch.shape[:2]:
        raise PatchError(f"augment_patch needs square, aligned inputs; got {patch.shape} and {mask.shape}")
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        patch, mask = hflip(patch), hflip(mask)
    if rng.random() < 0.5:
        patch, mask = vflip(patch), vflip(mask)
    k = int(rng.integers(4))
    patch, mask = rot90(patch, k), rot90(mask, k)
    sigma = rng.uniform(*blur_sigma)
    if sigma > 0:
        patch = gaussian_filter(patch, sigma=(sigma, sigma, 0))
    patch, mask = rescale_pair(patch, mask, rng.uniform(*scale_range))
    return np.ascontiguousarray(patch), np.ascontiguousarray(mask)
