"""Tiling, region extraction, patch sampling, synthetic data, two-stage inference, training."""
from .dataset_io import (DataError, image_path, list_image_ids, load_dataset, read_centroids, read_detections,
                         read_png, save_dataset, write_centroids, write_detections, write_png)
from .models import load_model, save_model
from .patches import augment_patch, hflip, prepare_patches, rot90, sliding_starts, vflip
from .regions import (Region, binarize, crop_centered, extract_candidates, label_image,
                      label_regions)
from .synth import SynthConfig, SynthDataset, generate_synthetic
from .tiling import TilePlan, TilingError, plan_tiles, stitch_average, tiled_predict
from .training import (EmptyDatasetError, NumericError, TrainHyper, TrainingSet, TrainResult,
                       run_training, smoothed)
from .two_stage import (InferenceOptions, label_candidates, mine_candidates, run_two_stage,
                        run_two_stage_full)
