"""On-disk dataset layout: images/<id>.png, masks/<id>.png (0/255), centroids.csv, detections.csv.

Images may also be .bmp, .tif/.tiff or .jpg, as HPF datasets are often shipped that way.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import numpy as np
from PIL import Image

from ..metrics import Detection
from ..ndcore import atomic_write
from .synth import SynthDataset

CENTROID_HEADER = ["image_id", "x", "y"]
DETECTION_HEADER = ["image_id", "x", "y", "score", "area"]


IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class DataError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(path, array: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def _read_csv(path, header) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(h not in reader.fieldnames for h in header):
            raise DataError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
        return list(reader)


def write_centroids(path, centroids: dict[str, list[tuple[float, float]]]) -> None:
    rows = [(iid, f"{x:.3f}", f"{y:.3f}") for iid, pts in centroids.items() for x, y in pts]
    _write_csv(path, CENTROID_HEADER, rows)


def read_centroids(path) -> dict[str, list[tuple[float, float]]]:
    out: dict[str, list] = defaultdict(list)
    for i, row in enumerate(_read_csv(path, CENTROID_HEADER), start=2):
        try:
            out[row["image_id"]].append((float(row["x"]), float(row["y"])))
        except ValueError as exc:
            raise DataError(f"{path}:{i}: {exc}") from exc
    return dict(out)


def write_detections(path, detections: dict[str, list[Detection]]) -> None:
    rows = [(iid, f"{d.x:.3f}", f"{d.y:.3f}", f"{d.score:.6f}", d.area)
            for iid, dets in detections.items() for d in dets]
    _write_csv(path, DETECTION_HEADER, rows)


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list] = defaultdict(list)
    for i, row in enumerate(_read_csv(path, DETECTION_HEADER), start=2):
        try:
            out[row["image_id"]].append(Detection(float(row["x"]), float(row["y"]),
                                                  float(row["score"]), int(row["area"])))
        except ValueError as exc:
            raise DataError(f"{path}:{i}: {exc}") from exc
    return dict(out)


def save_dataset(ds: SynthDataset, root) -> None:
    root = Path(root)
    for iid, image, mask in zip(ds.ids, ds.images, ds.masks):
        write_png(root / "images" / f"{iid}.png", image)
        write_png(root / "masks" / f"{iid}.png", (mask > 0).astype(np.uint8) * 255)
    write_centroids(root / "centroids.csv", dict(zip(ds.ids, ds.centroids)))


def _image_files(folder: Path) -> dict[str, Path]:
    found = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise DataError(f"two images share the id {p.stem!r} in {folder}")
            found[p.stem] = p
    return found


def list_image_ids(root) -> list[str]:
    folder = Path(root) / "images"
    if not folder.is_dir():
        raise DataError(f"{root} has no images/ directory")
    return sorted(_image_files(folder))


def image_path(root, image_id: str, sub: str = "images") -> Path:
    """Path of ``image_id`` under ``root/sub`` whatever its image suffix."""
    folder = Path(root) / sub
    if folder.is_dir():
        for suffix in IMAGE_SUFFIXES:
            for cand in (folder / f"{image_id}{suffix}", folder / f"{image_id}{suffix.upper()}"):
                if cand.exists():
                    return cand
    return folder / f"{image_id}.png"


def load_dataset(root, require_masks: bool = True) -> SynthDataset:
    root = Path(root)
    ids = list_image_ids(root)
    images, masks = [], []
    for iid in ids:
        images.append(read_png(image_path(root, iid)))
        mpath = image_path(root, iid, "masks")
        if mpath.exists():
            m = read_png(mpath)
            masks.append(((m if m.ndim == 2 else m[..., 0]) > 127).astype(np.uint8))
        elif require_masks:
            raise DataError(f"missing mask {mpath}")
        else:
            masks.append(None)
    cpath = root / "centroids.csv"
    cents = read_centroids(cpath) if cpath.exists() else {}
    return SynthDataset(ids, images, masks, [cents.get(i, []) for i in ids])
