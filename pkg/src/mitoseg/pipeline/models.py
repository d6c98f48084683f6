"""Checkpoints that remember how to rebuild their network."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from ..classnet import ClassConfig, Classifier, build_classifier
from ..ndcore import CheckpointError, load_checkpoint, save_checkpoint
from ..ndcore.checkpoint import manifest_path
from ..segnet import SegConfig, SegModel, build_segnet

_TAG = "network "


def save_model(model, path) -> None:
    if isinstance(model, SegModel):
        kind = "seg"
    elif isinstance(model, Classifier):
        kind = "class"
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    header = _TAG + json.dumps({"kind": kind, "config": asdict(model.config)})
    save_checkpoint(model, path, header=header)


def read_network_header(path) -> dict:
    mpath = manifest_path(path)
    if not Path(path).exists() or not mpath.exists():
        raise FileNotFoundError(f"checkpoint {path} (or its manifest) not found")
    for line in mpath.read_text().splitlines():
        if line.startswith("# " + _TAG):
            return json.loads(line[2 + len(_TAG):])
    raise CheckpointError(f"{mpath} carries no network description")


def load_model(path, expect: str | None = None):
    info = read_network_header(path)
    if expect is not None and info["kind"] != expect:
        raise CheckpointError(f"{path} holds a {info['kind']} network, expected {expect}")
    if info["kind"] == "seg":
        model = build_segnet(SegConfig(**info["config"]))
    else:
        cfg = dict(info["config"])
        cfg["stage_depths"] = tuple(cfg["stage_depths"])
        model = build_classifier(ClassConfig(**cfg))
    return load_checkpoint(model, path).eval()
