"""Smoke-train the five encoder/fusion variants on the same synthetic patches and tabulate them."""
import argparse

from mitoseg.cli import ablation_table, run_ablation
from mitoseg.experiments import seg_training_set
from mitoseg.pipeline import SynthConfig, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--n-images", type=int, default=8)
    ap.add_argument("--image-size", type=int, default=256)
    ap.add_argument("--patch-size", type=int, default=64)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = generate_synthetic(SynthConfig(image_size=args.image_size), args.n_images, seed=args.seed)
    patches = seg_training_set(ds.images, ds.masks, ds.centroids, args.patch_size, seed=args.seed)
    rows = run_ablation(patches, args.steps, args.base_width, args.lr, seed=args.seed,
                        log_fn=lambda r: print(f"{r['variant']}: final loss {r['final_loss']:.4f}", flush=True))
    print(ablation_table(rows), end="")


if __name__ == "__main__":
    main()
