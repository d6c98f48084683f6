"""Train both stages on synthetic HPFs and compare stage-1-only with two-stage detection.

    python3 scripts/desk_end_to_end.py --n-train 48 --n-test 16 --out runs/desk
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from mitoseg.experiments import DeskSetup, run_desk_experiment
from mitoseg.pipeline import save_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=48)
    ap.add_argument("--n-test", type=int, default=16)
    ap.add_argument("--image-size", type=int, default=512)
    ap.add_argument("--seed", type=int, default=1, help="data seed; the test split uses seed + 1000")
    ap.add_argument("--seg-epochs", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None, help="folder for checkpoints and metrics.json")
    args = ap.parse_args()

    setup = DeskSetup(n_train=args.n_train, n_test=args.n_test, image_size=args.image_size, data_seed=args.seed)
    if args.seg_epochs is not None:
        setup.seg_hyper = replace(setup.seg_hyper, epochs=args.seg_epochs)
    result = run_desk_experiment(setup)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_model(result["seg_model"], args.out / "seg.bin")
        save_model(result["class_model"], args.out / "class.bin")
        summary = {key: dict(zip(("precision", "recall", "f_score"), result[key][1])) for key in ("stage1", "two_stage")}
        summary.update(seg_seconds=result["seg_seconds"], class_seconds=result["class_seconds"])
        (args.out / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
