"""Flat little-endian float32 weights plus a text manifest of (name, shape, byte offset).

``save_checkpoint(model, "seg.bin")`` writes ``seg.bin`` and ``seg.bin.manifest``.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .nn import Module


class CheckpointError(ValueError):
    pass


def manifest_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".manifest")


def _entries(model: Module):
    for name, p in model.named_parameters():
        yield name, p.data, lambda arr, p=p: setattr(p, "data", arr)
    for mod_prefix, mod in _named_modules(model):
        for attr, value in list(vars(mod).items()):
            if isinstance(value, np.ndarray) and not attr.startswith("_"):
                yield f"{mod_prefix}{attr}", value, lambda arr, m=mod, a=attr: setattr(m, a, arr)


def _named_modules(model: Module, prefix: str = ""):
    yield prefix, model
    for name, value in vars(model).items():
        if name.startswith("_"):
            continue
        if isinstance(value, Module):
            yield from _named_modules(value, f"{prefix}{name}.")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{name}.{i}.")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Module, path: str | os.PathLike, header: str = "") -> None:
    chunks, lines, offset = [], [], 0
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for name, arr, _ in _entries(model):
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(buf)
        offset += len(buf)
    # weights first, manifest last: a manifest on disk implies complete weights
    atomic_write(path, b"".join(chunks))
    atomic_write(manifest_path(path), ("\n".join(lines) + "\n").encode())


def read_manifest(path: str | os.PathLike) -> list[tuple[str, tuple[int, ...], int]]:
    rows = []
    for line in manifest_path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, shape, offset = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        rows.append((name, dims, int(offset)))
    return rows


def load_checkpoint(model: Module, path: str | os.PathLike) -> Module:
    """Load weights into ``model``; every manifest shape must match the constructed model."""
    path = Path(path)
    if not path.exists() or not manifest_path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} (or its manifest) not found")
    blob = path.read_bytes()
    rows = {name: (shape, off) for name, shape, off in read_manifest(path)}
    entries = list(_entries(model))
    expected = {name for name, _, _ in entries}
    missing, extra = expected - set(rows), set(rows) - expected
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    for name, arr, setter in entries:
        shape, off = rows[name]
        if tuple(arr.shape) != shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape} != model shape {tuple(arr.shape)}")
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(blob):
            raise CheckpointError(f"{name}: data truncated")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        setter(values.astype(arr.dtype).copy())
    return model
