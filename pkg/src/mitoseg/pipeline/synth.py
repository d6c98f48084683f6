"""Synthetic H&E-like fields with pixel-labeled mitoses and look-alike confounders.

Nuclei are painted as stain concentrations and rendered through the Beer-Lambert model:
mitoses are dark, elongated and clumpy; ordinary nuclei are lighter and round; a few
"hard" confounders are as dark as mitoses but smooth, so colour alone cannot separate them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..stain import CANONICAL_STAIN_MATRIX, beer_lambert_image


@dataclass
class SynthConfig:
    image_size: int = 512
    mitoses: tuple[int, int] = (3, 5)             # inclusive count range per image
    confounders: tuple[int, int] = (10, 16)       # ordinary, lighter nuclei
    hard_confounders: tuple[int, int] = (1, 3)    # dark but smooth
    mitosis_radius: tuple[float, float] = (10.0, 14.0)
    mitosis_elongation: tuple[float, float] = (1.2, 1.7)
    confounder_radius: tuple[float, float] = (7.0, 12.0)
    mitosis_hematoxylin: tuple[float, float] = (1.25, 0.12)    # mean, sd
    confounder_hematoxylin: tuple[float, float] = (0.6, 0.12)
    hard_hematoxylin: tuple[float, float] = (1.1, 0.1)
    chromatin_contrast: float = 0.55
    background_eosin: tuple[float, float] = (0.35, 0.08)
    background_hematoxylin: float = 0.06
    texture_seed: int = 0
    stain_matrix: np.ndarray = field(default_factory=lambda: CANONICAL_STAIN_MATRIX.copy())
    gap: float = 4.0
    max_tries: int = 500


@dataclass
class SynthDataset:
    ids: list[str]
    images: list[np.ndarray]           # H×W×3 uint8
    masks: list[np.ndarray]            # H×W uint8 in {0, 1}
    centroids: list[list[tuple[float, float]]]   # per image, (x, y)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = gaussian_filter(rng.normal(size=shape), sigma)
    return n / (n.std() + 1e-12)


def ellipse_mask(shape, cx, cy, a, b, theta) -> tuple[np.ndarray, tuple[slice, slice]]:
    r = int(np.ceil(max(a, b))) + 1
    r0, r1 = max(int(cy) - r, 0), min(int(cy) + r + 1, shape[0])
    c0, c1 = max(int(cx) - r, 0), min(int(cx) + r + 1, shape[1])
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, (slice(r0, r1), slice(c0, c1))


def _place(rng, placed, radius, size, gap, tries):
    for _ in range(tries):
        cx, cy = rng.uniform(radius + 2, size - radius - 3, 2)
        if all(np.hypot(cx - px, cy - py) >= radius + pr + gap for px, py, pr in placed):
            placed.append((cx, cy, radius))
            return cx, cy
    return None


def generate_image(config: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray, list, list[str]]:
    size = config.image_size
    shape = (size, size)
    tex_rng = np.random.default_rng([config.texture_seed, int(rng.integers(2 ** 31))])
    eosin = config.background_eosin[0] + config.background_eosin[1] * smooth_noise(tex_rng, shape, 6)
    eosin += 0.04 * smooth_noise(tex_rng, shape, 1.5)
    hema = config.background_hematoxylin + 0.02 * smooth_noise(tex_rng, shape, 3)
    mask = np.zeros(shape, dtype=np.uint8)
    centroids, warnings, placed = [], [], []

    def counts(rng_range):
        return int(rng.integers(rng_range[0], rng_range[1] + 1))

    kinds = (["mitosis"] * counts(config.mitoses) + ["hard"] * counts(config.hard_confounders)
             + ["normal"] * counts(config.confounders))
    for kind in kinds:
        if kind == "mitosis":
            r = rng.uniform(*config.mitosis_radius)
            a, b = r, r / rng.uniform(*config.mitosis_elongation)
            level = rng.normal(*config.mitosis_hematoxylin)
        else:
            r = rng.uniform(*config.confounder_radius)
            a, b = r, r / rng.uniform(1.0, 1.25)
            level = rng.normal(*(config.hard_hematoxylin if kind == "hard" else config.confounder_hematoxylin))
        spot = _place(rng, placed, a, size, config.gap, config.max_tries)
        if spot is None:
            warnings.append(f"could not place a {kind} nucleus after {config.max_tries} tries")
            continue
        inside, sl = ellipse_mask(shape, spot[0], spot[1], a, b, rng.uniform(0, np.pi))
        local = np.full(inside.shape, level)
        if kind == "mitosis":
            # clumped chromatin: high-frequency dark/light speckle
            speckle = gaussian_filter(rng.normal(size=inside.shape), 0.8)
            local += config.chromatin_contrast * speckle / (speckle.std() + 1e-12)
        else:
            local += 0.03 * rng.normal(size=inside.shape)
        hema[sl][inside] = np.clip(local[inside], 0.05, None)
        eosin[sl][inside] *= 0.5
        if kind == "mitosis":
            mask[sl][inside] = 1
            rows, cols = np.nonzero(inside)
            centroids.append((float(cols.mean() + sl[1].start), float(rows.mean() + sl[0].start)))
    conc = np.stack([hema, np.clip(eosin, 0, None)], axis=-1)
    conc = gaussian_filter(conc, (0.6, 0.6, 0)) + 0.015 * rng.normal(size=conc.shape)
    image = beer_lambert_image(np.clip(conc, 0, None), config.stain_matrix)
    return image, mask, centroids, warnings


def generate_synthetic(config: SynthConfig | None = None, n_images: int = 1, seed: int = 0,
                       prefix: str = "synth") -> SynthDataset:
    config = config or SynthConfig()
    ds = SynthDataset([], [], [], [])
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        image, mask, cents, warns = generate_image(config, rng)
        ds.ids.append(f"{prefix}_{i:03d}")
        ds.images.append(image)
        ds.masks.append(mask)
        ds.centroids.append(cents)
        ds.warnings.extend(f"{ds.ids[-1]}: {w}" for w in warns)
    return ds
