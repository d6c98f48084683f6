"""Command-line entry point: ``mitoseg <command> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import difflib
import io
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "normalize", "prep", "train-seg", "train-class", "infer", "evaluate", "overlay", "ablate")

log = logging.getLogger("mitoseg")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    data: str = ""                 # dataset root (images/, masks/, centroids.csv)
    out: str = ""
    seg_checkpoint: str = "seg.bin"
    class_checkpoint: str = "class.bin"
    predictions: str = ""          # detections.csv for evaluate / overlay
    ground_truth: str = ""         # centroids.csv; defaults to <data>/centroids.csv
    stain_reference: str = ""      # 8-number stain profile record; empty = built-in reference
    # synthetic data
    n_images: int = 8
    image_size: int = 512
    # segmentation network and training
    variant: str = "dscrb_csag"
    base_width: int = 8
    attention_reduction: int = 8
    patch_size: int = 64
    random_patches: int = 6
    jitter: int = 16
    # classifier
    class_depths: str = "1,1,1,1"
    class_width: int = 16
    # optimisation
    lr: float = 1e-4
    batch_size: int = 16
    decay: float = 0.1
    decay_mode: str = "lr_step"
    epochs: int = 6
    steps: int = 50                # ablate: optimizer steps per variant
    augment: bool = True
    # inference and evaluation
    threshold: float = 0.5         # segmentation binarisation
    class_threshold: float = 0.5
    min_area: int = 100
    crop_size: int = 64
    window: int = 256
    radius: float = 20.0
    normalize: bool = False
    stage1_only: bool = False
    box_size: int = 64
    seed: int = 0
    workers: int = 1

    def validate(self) -> "RunConfig":
        if self.command and self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        positive = ("n_images", "image_size", "base_width", "patch_size", "batch_size", "crop_size",
                    "window", "box_size", "workers", "class_width", "attention_reduction")
        for name in positive:
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("threshold", "class_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.lr < 0 or self.radius < 0 or self.epochs < 0 or self.steps < 0:
            raise UsageError("lr, radius, epochs and steps must be non-negative")
        if self.decay_mode not in ("lr_step", "weight_decay"):
            raise UsageError(f"decay_mode must be lr_step or weight_decay, got {self.decay_mode!r}")
        self.depths()
        return self

    def depths(self) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self.class_depths.split(","))
        except ValueError as exc:
            raise UsageError(f"class_depths must be comma-separated integers, got {self.class_depths!r}") from exc

    def echo(self) -> str:
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
CONFIG_KEYS = [name for name in FIELD_TYPES if name != "command"]


def parse_value(key: str, text: str):
    kind = FIELD_TYPES[key]
    text = text.strip()
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def unknown_key_message(key: str, where: str) -> str:
    close = difflib.get_close_matches(key, CONFIG_KEYS, n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return f"{where}: unknown key {key!r}{hint}"


def read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES or key == "command":
            raise UsageError(unknown_key_message(key, f"{path}:{lineno}"))
        try:
            values[key] = parse_value(key, value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def parse_config(config_file=None, overrides: dict | None = None, command: str = "") -> RunConfig:
    """Defaults, then the ``key = value`` file, then explicit overrides."""
    values = read_config_file(config_file) if config_file else {}
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise UsageError(unknown_key_message(key, "override"))
        if value is not None:
            values[key] = parse_value(key, value) if isinstance(value, str) else value
    return RunConfig(command=command, **values).validate()


# -- argument parsing -----------------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


HELP = {
    "data": "dataset root with images/, masks/ and centroids.csv",
    "out": "output directory or file (command dependent)",
    "threshold": "segmentation binarisation threshold (strictly greater is foreground)",
    "class_threshold": "minimum classifier probability kept as a detection",
    "min_area": "candidate regions must have area strictly greater than this",
    "radius": "centroid matching radius in pixels",
    "decay_mode": "lr_step (x decay once at 80%% of epochs) or weight_decay (AdamW decay = decay)",
    "stage1_only": "skip the classifier",
    "normalize": "stain-normalise images before inference",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mitoseg", description="Two-stage mitosis segmentation and classification.")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults = RunConfig()
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=COMMAND_HELP[cmd], description=COMMAND_HELP[cmd])
        p.add_argument("--config", help="key = value file; flags override it")
        for key in CONFIG_KEYS:
            default = getattr(defaults, key)
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=FIELD_TYPES[key].upper(),
                           help=f"{HELP.get(key, key.replace('_', ' '))} (default: {default!r})")
    return parser


COMMAND_HELP = {
    "synth": "write a synthetic dataset to --out",
    "normalize": "stain-normalise every image of --data into --out",
    "prep": "cut training patches from --data into --out (npz)",
    "train-seg": "train the segmentation network on --data, save --seg-checkpoint",
    "train-class": "mine candidates with --seg-checkpoint on --data and train --class-checkpoint",
    "infer": "run two-stage inference on --data images, write detections.csv to --out",
    "evaluate": "match --predictions against --ground-truth and report precision/recall/F",
    "overlay": "draw detections (green) and ground truth (yellow) boxes into --out",
    "ablate": "smoke-train every segmentation variant for --steps steps and print a flag table",
}


# -- helpers -------------------------------------------------------------------------------------------------
def _require(cfg: RunConfig, *names):
    for name in names:
        if not getattr(cfg, name):
            raise UsageError(f"command {cfg.command!r} requires --{name.replace('_', '-')}")


class TrainingLock:
    """Exclusive ``<checkpoint>.lock`` so two trainings never write one checkpoint."""

    def __init__(self, checkpoint):
        self.path = Path(str(checkpoint) + ".lock")

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path} exists: another training run holds this checkpoint") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def render_overlay(image: np.ndarray, detections, ground_truth, box: int = 64, thickness: int = 2) -> np.ndarray:
    """Green boxes on detections, yellow on ground truth (drawn last, so on top)."""
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    h, w = out.shape[:2]

    def draw(x, y, color):
        top, left = int(round(y)) - box // 2, int(round(x)) - box // 2
        bottom, right = top + box - 1, left + box - 1
        for r0, r1, c0, c1 in ((top, top + thickness - 1, left, right),
                               (bottom - thickness + 1, bottom, left, right),
                               (top, bottom, left, left + thickness - 1),
                               (top, bottom, right - thickness + 1, right)):
            r0, r1, c0, c1 = max(r0, 0), min(r1, h - 1), max(c0, 0), min(c1, w - 1)
            if r0 <= r1 and c0 <= c1:
                out[r0:r1 + 1, c0:c1 + 1] = color

    for d in detections:
        x, y = (d.x, d.y) if hasattr(d, "x") else d
        draw(x, y, (0, 255, 0))
    for x, y in ground_truth:
        draw(x, y, (255, 255, 0))
    return out


def _options(cfg: RunConfig):
    from .pipeline import InferenceOptions
    from .stain import REFERENCE_PROFILE, StainProfile
    ref = StainProfile.load(cfg.stain_reference) if cfg.stain_reference else REFERENCE_PROFILE
    return InferenceOptions(window=cfg.window, seg_threshold=cfg.threshold, min_area=cfg.min_area,
                            crop_size=cfg.crop_size, class_threshold=cfg.class_threshold,
                            normalize=cfg.normalize, reference=ref, stage1_only=cfg.stage1_only)


def _hyper(cfg: RunConfig):
    from .pipeline import TrainHyper
    return TrainHyper(lr=cfg.lr, batch_size=cfg.batch_size, decay=cfg.decay, decay_mode=cfg.decay_mode,
                      epochs=cfg.epochs, seed=cfg.seed, augment=cfg.augment)


def _train_logger(task):
    def emit(epoch, step, loss, lr):
        log.info("train step | task=%s epoch=%d step=%d loss=%.6f lr=%g", task, epoch, step, loss, lr)
    return emit


def _write_loss_log(path, losses):
    from .ndcore import atomic_write
    atomic_write(path, ("step,loss\n" + "".join(f"{i + 1},{v:.6f}\n" for i, v in enumerate(losses))).encode())


# -- commands ------------------------------------------------------------------------------------------------
def cmd_synth(cfg):
    from .pipeline import SynthConfig, generate_synthetic, save_dataset
    _require(cfg, "out")
    ds = generate_synthetic(SynthConfig(image_size=cfg.image_size), cfg.n_images, seed=cfg.seed)
    save_dataset(ds, cfg.out)
    for w in ds.warnings:
        log.warning("synth placement | %s", w)
    log.info("synth done | images=%d mitoses=%d out=%s", len(ds), sum(map(len, ds.centroids)), cfg.out)


def cmd_normalize(cfg):
    import shutil
    from .pipeline import image_path, list_image_ids, read_png, write_png
    from .stain import InsufficientTissueError, estimate_stain_profile, normalize_stain
    _require(cfg, "data", "out")
    reference = _options(cfg).reference
    done = skipped = 0
    for iid in list_image_ids(cfg.data):
        image = read_png(image_path(cfg.data, iid))
        try:
            profile = estimate_stain_profile(image)
        except InsufficientTissueError as exc:
            # copied unchanged so the output stays a complete dataset
            log.warning("normalize skipped | image_id=%s reason=%s", iid, str(exc).replace(" ", "_"))
            skipped += 1
            normalized = image
        else:
            normalized = normalize_stain(image, profile, reference)
            done += 1
        write_png(Path(cfg.out) / "images" / f"{iid}.png", normalized)
        mask = image_path(cfg.data, iid, "masks")
        if mask.exists():
            (Path(cfg.out) / "masks").mkdir(parents=True, exist_ok=True)
            shutil.copyfile(mask, Path(cfg.out) / "masks" / mask.name)
    cents = Path(cfg.data) / "centroids.csv"
    if cents.exists():
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        shutil.copyfile(cents, Path(cfg.out) / "centroids.csv")
    log.info("normalize done | normalized=%d skipped=%d", done, skipped)


def _seg_set(cfg):
    from .experiments import seg_training_set
    from .pipeline import load_dataset
    ds = load_dataset(cfg.data)
    return seg_training_set(ds.images, ds.masks, ds.centroids, cfg.patch_size, cfg.random_patches,
                            cfg.jitter, cfg.seed)


def cmd_prep(cfg):
    from .ndcore import atomic_write
    _require(cfg, "data", "out")
    patches = _seg_set(cfg)
    buf = io.BytesIO()
    np.savez_compressed(buf, images=patches.inputs, masks=patches.targets)
    out = Path(cfg.out)
    target = out if out.suffix == ".npz" else out / "patches.npz"
    atomic_write(target, buf.getvalue())
    log.info("prep done | patches=%d size=%d out=%s", len(patches), cfg.patch_size, target)


def cmd_train_seg(cfg):
    from .pipeline import run_training
    from .pipeline.training import TrainingSet
    from .segnet import SegConfig
    _require(cfg, "data", "seg_checkpoint")
    if cfg.data.endswith(".npz"):
        with np.load(cfg.data) as z:
            patches = TrainingSet(z["images"], z["masks"])
    else:
        patches = _seg_set(cfg)
    config = SegConfig(base_width=cfg.base_width, variant=cfg.variant,
                       attention_reduction=cfg.attention_reduction, seed=cfg.seed)
    with TrainingLock(cfg.seg_checkpoint):
        res = run_training("seg", patches, _hyper(cfg), config=config, checkpoint=cfg.seg_checkpoint,
                           log=_train_logger("seg"))
        _write_loss_log(cfg.seg_checkpoint + ".losses.csv", res.losses)
    log.info("train-seg done | steps=%d final_loss=%.6f checkpoint=%s", res.steps, res.losses[-1], cfg.seg_checkpoint)


def cmd_train_class(cfg):
    from .classnet import ClassConfig
    from .experiments import class_training_set
    from .pipeline import load_dataset, load_model, run_training
    _require(cfg, "data", "seg_checkpoint", "class_checkpoint")
    seg = load_model(cfg.seg_checkpoint, expect="seg")
    ds = load_dataset(cfg.data)
    crops = class_training_set(ds.images, ds.centroids, seg, _options(cfg), cfg.radius)
    log.info("candidates mined | crops=%d positives=%d", len(crops), int(np.sum(crops.targets)))
    config = ClassConfig(stage_depths=cfg.depths(), base_width=cfg.class_width, seed=cfg.seed)
    with TrainingLock(cfg.class_checkpoint):
        res = run_training("class", crops, _hyper(cfg), config=config, checkpoint=cfg.class_checkpoint,
                           log=_train_logger("class"))
        _write_loss_log(cfg.class_checkpoint + ".losses.csv", res.losses)
    log.info("train-class done | steps=%d final_loss=%.6f checkpoint=%s", res.steps, res.losses[-1], cfg.class_checkpoint)


def cmd_infer(cfg):
    from .pipeline import image_path, list_image_ids, load_model, read_png, run_two_stage, write_detections
    _require(cfg, "data", "out", "seg_checkpoint")
    # models first: a missing checkpoint must fail before any image is touched
    seg = load_model(cfg.seg_checkpoint, expect="seg")
    clf = None if cfg.stage1_only else load_model(cfg.class_checkpoint, expect="class")
    options = _options(cfg)
    results = {}
    for iid in list_image_ids(cfg.data):
        dets = run_two_stage(read_png(image_path(cfg.data, iid)), seg, clf, options)
        results[iid] = dets
        log.info("infer image | image_id=%s detections=%d", iid, len(dets))
    out = Path(cfg.out)
    target = out if out.suffix == ".csv" else out / "detections.csv"
    write_detections(target, results)
    log.info("infer done | images=%d detections=%d out=%s", len(results), sum(map(len, results.values())), target)


def _read_points(path):
    """detections.csv or centroids.csv, as {image_id: [Detection]}."""
    from .metrics import Detection
    from .pipeline import read_centroids, read_detections
    header = Path(path).read_text().splitlines()[:1]
    if header and "score" in header[0]:
        return read_detections(path)
    return {k: [Detection(x, y) for x, y in v] for k, v in read_centroids(path).items()}


def cmd_evaluate(cfg):
    from .metrics import ConfusionCounts, format_report, match_detections, metrics_csv, metrics_row
    from .ndcore import atomic_write
    _require(cfg, "predictions")
    gt_path = cfg.ground_truth or (str(Path(cfg.data) / "centroids.csv") if cfg.data else "")
    if not gt_path:
        raise UsageError("evaluate requires --ground-truth (or --data with centroids.csv)")
    preds, gts = _read_points(cfg.predictions), _read_points(gt_path)
    total = ConfusionCounts()
    for iid in sorted(set(preds) | set(gts)):
        total = total + match_detections(preds.get(iid, []), gts.get(iid, []), cfg.radius)[0]
    print(format_report(total, "stage1" if cfg.stage1_only else "two_stage"), end="")
    if cfg.out:
        out = Path(cfg.out)
        target = out if out.suffix == ".csv" else out / "metrics.csv"
        atomic_write(target, metrics_csv([("all", total)]).encode())
    row = metrics_row(total)
    log.info("evaluate done | precision=%.4f recall=%.4f f_score=%.4f TP=%d FP=%d FN=%d",
             row["precision"], row["recall"], row["f_score"], total.tp, total.fp, total.fn)


def cmd_overlay(cfg):
    from .pipeline import image_path, list_image_ids, read_png, write_png
    _require(cfg, "data", "out")
    preds = _read_points(cfg.predictions) if cfg.predictions else {}
    gt_path = cfg.ground_truth or Path(cfg.data) / "centroids.csv"
    gts = _read_points(gt_path) if Path(gt_path).exists() else {}
    ids = list_image_ids(cfg.data)
    for iid in ids:
        img = read_png(image_path(cfg.data, iid))
        gt = [(d.x, d.y) for d in gts.get(iid, [])]
        write_png(Path(cfg.out) / f"{iid}.png", render_overlay(img, preds.get(iid, []), gt, cfg.box_size))
    log.info("overlay done | images=%d out=%s", len(ids), cfg.out)


def ablation_table(rows) -> str:
    from .segnet import TABLE_COLUMNS
    header = ["variant", *TABLE_COLUMNS, "params", "first_loss", "final_loss"]
    lines = ["\t".join(header)]
    for r in rows:
        flags = ["+" if f else "" for f in r["flags"]]
        lines.append("\t".join([r["variant"], *flags, str(r["params"]), f"{r['first_loss']:.4f}", f"{r['final_loss']:.4f}"]))
    return "\n".join(lines) + "\n"


def run_ablation(patches, steps: int = 50, base_width: int = 8, lr: float = 1e-3, batch_size: int = 8,
                 seed: int = 0, log_fn=None) -> list[dict]:
    from .pipeline import TrainHyper, run_training
    from .pipeline.training import TrainingSet
    from .segnet import TABLE_FLAGS, VARIANTS, SegConfig, count_parameters
    rows = []
    for variant in VARIANTS:
        n = min(len(patches), steps * batch_size)
        # one epoch over exactly ``steps`` batches
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(patches), size=steps * batch_size, replace=n < steps * batch_size)
        subset = TrainingSet(np.asarray(patches.inputs)[idx], np.asarray(patches.targets)[idx])
        res = run_training("seg", subset, TrainHyper(lr=lr, batch_size=batch_size, epochs=1, seed=seed,
                                                     decay_mode="weight_decay", decay=0.0),
                           config=SegConfig(base_width=base_width, variant=variant, seed=seed))
        rows.append({"variant": variant, "flags": TABLE_FLAGS[variant], "params": count_parameters(res.model)["total"],
                     "first_loss": res.losses[0], "final_loss": res.losses[-1], "steps": res.steps})
        if log_fn:
            log_fn(rows[-1])
    return rows


def cmd_ablate(cfg):
    from .experiments import seg_training_set
    from .ndcore import atomic_write
    from .pipeline import SynthConfig, generate_synthetic, load_dataset
    if cfg.data:
        ds = load_dataset(cfg.data)
    else:
        ds = generate_synthetic(SynthConfig(image_size=cfg.image_size), cfg.n_images, seed=cfg.seed)
    patches = seg_training_set(ds.images, ds.masks, ds.centroids, cfg.patch_size, cfg.random_patches,
                               cfg.jitter, cfg.seed)
    rows = run_ablation(patches, cfg.steps, cfg.base_width, cfg.lr, min(cfg.batch_size, 8), cfg.seed,
                        log_fn=lambda r: log.info("ablate variant | variant=%s steps=%d final_loss=%.6f",
                                                  r["variant"], r["steps"], r["final_loss"]))
    table = ablation_table(rows)
    print(table, end="")
    if cfg.out:
        out = Path(cfg.out)
        atomic_write(out if out.suffix else out / "ablation.tsv", table.encode())


HANDLERS = {"synth": cmd_synth, "normalize": cmd_normalize, "prep": cmd_prep, "train-seg": cmd_train_seg,
            "train-class": cmd_train_class, "infer": cmd_infer, "evaluate": cmd_evaluate,
            "overlay": cmd_overlay, "ablate": cmd_ablate}


def main(argv=None) -> int:
    from .ndcore import CheckpointError, ContractError, ShapeError
    from .pipeline import DataError, NumericError
    from .stain import StainError
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k) for k in CONFIG_KEYS}
        cfg = parse_config(args.config, overrides, command=args.command)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        log.info("config | %s", cfg.echo())
        HANDLERS[cfg.command](cfg)
        return EXIT_OK
    except UsageError as exc:
        log.error("usage | %s", exc)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, ContractError) as exc:
        log.error("numeric failure | %s", exc)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, CheckpointError, StainError, ShapeError, ValueError, OSError) as exc:
        log.error("data error | %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
