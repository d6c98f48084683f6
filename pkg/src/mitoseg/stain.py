"""Macenko-style H&E stain estimation and normalization in optical-density space."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IO_DEFAULT = 255.0
MIN_TISSUE_PIXELS = 100

# hematoxylin, eosin (unit OD vectors, RGB order); also what the synthetic generator stains with
CANONICAL_STAIN_MATRIX = np.array([[0.5626, 0.2159],
                                   [0.7201, 0.8012],
                                   [0.4062, 0.5581]])
CANONICAL_STAIN_MATRIX = CANONICAL_STAIN_MATRIX / np.linalg.norm(CANONICAL_STAIN_MATRIX, axis=0)
CANONICAL_MAX_CONCENTRATIONS = (1.9705, 1.0308)


class StainError(ValueError):
    pass


class InsufficientTissueError(StainError):
    pass


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray            # 3×2, unit columns, hematoxylin first
    max_concentrations: tuple[float, float]
    io: float = IO_DEFAULT

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise StainError(f"stain matrix must be 3×2, got {m.shape}")
        if np.any(m < 0) or not np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-6):
            raise StainError("stain matrix columns must be non-negative unit vectors")
        mc = tuple(float(v) for v in self.max_concentrations)
        if len(mc) != 2 or min(mc) <= 0:
            raise StainError(f"max concentrations must be two positive numbers, got {mc}")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", mc)

    def to_text(self) -> str:
        nums = list(self.stain_matrix.flatten(order="F")) + list(self.max_concentrations)
        return " ".join(repr(float(v)) for v in nums) + "\n"

    @classmethod
    def from_text(cls, text: str, io: float = IO_DEFAULT) -> "StainProfile":
        nums = [float(t) for t in text.split()]
        if len(nums) != 8:
            raise StainError(f"stain profile record needs 8 numbers, found {len(nums)}")
        return cls(np.array(nums[:6]).reshape(3, 2, order="F"), tuple(nums[6:]), io)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "StainProfile":
        return cls.from_text(Path(path).read_text())


REFERENCE_PROFILE = StainProfile(CANONICAL_STAIN_MATRIX, CANONICAL_MAX_CONCENTRATIONS)


def rgb_to_od(image, io: float = IO_DEFAULT) -> np.ndarray:
    """Optical density, -log((I + 1) / io); the +1 keeps black pixels finite."""
    return -np.log((np.asarray(image, dtype=np.float64) + 1.0) / io)


def od_to_rgb(od, io: float = IO_DEFAULT) -> np.ndarray:
    """Inverse of ``rgb_to_od`` as float intensities clipped to [0, 255]."""
    return np.clip(io * np.exp(-np.asarray(od, dtype=np.float64)) - 1.0, 0.0, 255.0)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def od_covariance(od: np.ndarray) -> np.ndarray:
    centered = od - od.mean(axis=0)
    return centered.T @ centered / len(od)


def principal_directions(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and unit eigenvectors of a symmetric 3×3 matrix, each
    vector signed so that its component sum is non-negative."""
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    vecs = vecs * np.where(vecs.sum(axis=0) < 0, -1.0, 1.0)
    return vals, vecs


def _percentile(values: np.ndarray, q: float) -> float:
    # inverted-CDF percentiles are order statistics, so duplicating every pixel changes nothing
    return float(np.percentile(values, q, method="inverted_cdf"))


def _as_stain_vector(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    n = np.linalg.norm(v)
    if n == 0:
        raise StainError("degenerate stain direction")
    return v / n


def tissue_od(image, od_threshold: float = 0.15, io: float = IO_DEFAULT) -> np.ndarray:
    od = rgb_to_od(image, io).reshape(-1, 3)
    return od[np.linalg.norm(od, axis=1) >= od_threshold]


def estimate_stain_profile(image, od_threshold: float = 0.15, angle_percentile: float = 1.0,
                           io: float = IO_DEFAULT) -> StainProfile:
    od = tissue_od(image, od_threshold, io)
    if len(od) < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(
            f"insufficient tissue: {len(od)} pixels above OD {od_threshold}, need {MIN_TISSUE_PIXELS}")
    _, vecs = principal_directions(od_covariance(od))
    plane = vecs[:, :2]
    proj = od @ plane
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo = _percentile(angles, angle_percentile)
    hi = _percentile(angles, 100.0 - angle_percentile)
    v1 = _as_stain_vector(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v2 = _as_stain_vector(plane @ np.array([np.cos(hi), np.sin(hi)]))
    # hematoxylin absorbs more red than eosin does
    stains = np.stack([v1, v2], axis=1) if v1[0] >= v2[0] else np.stack([v2, v1], axis=1)
    check_not_singular(stains)
    conc = concentrations(od, stains)
    max_c = tuple(_percentile(conc[:, k], 99.0) for k in range(2))
    if min(max_c) <= 0:
        raise InsufficientTissueError(f"a stain is absent from the tissue pixels (max concentrations {max_c})")
    return StainProfile(stains, max_c, io)


def check_not_singular(stains: np.ndarray, tol: float = 1e-6) -> None:
    a, b = stains[:, 0] / np.linalg.norm(stains[:, 0]), stains[:, 1] / np.linalg.norm(stains[:, 1])
    if np.linalg.norm(np.cross(a, b)) < tol:
        raise StainError("stain matrix is singular: the two stain vectors are parallel")


def concentrations(od: np.ndarray, stains: np.ndarray) -> np.ndarray:
    """Per-pixel stain amounts (pseudo-inverse, then clipped at zero). od: P×3 -> P×2."""
    return np.clip(od @ np.linalg.pinv(stains).T, 0.0, None)


def normalize_stain(image, source: StainProfile, target: StainProfile = REFERENCE_PROFILE) -> np.ndarray:
    """Re-render ``image`` with the target's stain vectors and concentration ranges."""
    arr = np.asarray(image)
    check_not_singular(source.stain_matrix)
    check_not_singular(target.stain_matrix)
    od = rgb_to_od(arr, source.io).reshape(-1, 3)
    conc = concentrations(od, source.stain_matrix)
    conc *= np.asarray(target.max_concentrations) / np.asarray(source.max_concentrations)
    rgb = od_to_rgb(conc @ target.stain_matrix.T, target.io).reshape(arr.shape)
    if arr.dtype == np.uint8:
        return to_uint8(rgb)
    return rgb.astype(arr.dtype) if np.issubdtype(arr.dtype, np.floating) else rgb


def normalize_to_reference(image, reference: StainProfile = REFERENCE_PROFILE, **estimate_kw) -> np.ndarray:
    return normalize_stain(image, estimate_stain_profile(image, **estimate_kw), reference)


def beer_lambert_image(conc: np.ndarray, stains: np.ndarray = CANONICAL_STAIN_MATRIX,
                       io: float = IO_DEFAULT) -> np.ndarray:
    """Forward model: H×W×2 stain amounts -> H×W×3 uint8 RGB."""
    return to_uint8(od_to_rgb(conc @ np.asarray(stains).T, io))
