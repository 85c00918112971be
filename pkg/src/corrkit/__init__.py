"""corrkit: pseudo-label generation, filtering, and adapter training for
dense semantic correspondence on feature grids.

The package is numpy-first and fully deterministic: matching, chaining, and
filtering are exact set operations on cosine-similarity fields; the adapter
and the sphere mapper train with hand-derived gradients; every artifact
round-trips through versioned binary or text formats.
"""

from .adapter import (Adapter, AdapterConfig, AdamW, PAPER_SCALE,
                      dense_point_terms, lr_schedule, sample_noise,
                      sparse_contrastive_loss)
from .chains import (BIN_WIDTH_DEG, Chain, ImageRecord, azimuth_bin,
                     chain_is_valid, d_circ, propagate, sample_chains,
                     sample_naive_pairs)
from .evaluation import (TABLE_BINS, EvalPair, LabelQuality, PckResult,
                         label_quality, pck, predict_targets,
                         viewpoint_binned_pck)
from .filters import (FilterReport, back_match_distances, cyclic_filter,
                      relaxed_cyclic_filter)
from .grids import (FeatureMap, Mask, cosine_sim, masked_points,
                    patch_to_pixel, pixel_to_patch, sim_map)
from .matching import Match, MatchSet, nn_match, nn_match_all, window_soft_argmax
from .sphere import (DEFAULT_THETA_TH, SphereMapper, SpherePoint, geodesic,
                     geodesic_many, mean_on_sphere, quantize_pose,
                     rotation_to_sphere, sphere_loss, sphere_reject)
from .synthetic import SynthConfig, SynthWorld, generate, plant_report
from .trainer import TrainConfig, TrainPair, load_adapter, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Adapter", "AdapterConfig", "AdamW", "PAPER_SCALE",
    "dense_point_terms", "lr_schedule", "sample_noise",
    "sparse_contrastive_loss",
    "BIN_WIDTH_DEG", "Chain", "ImageRecord", "azimuth_bin", "chain_is_valid",
    "d_circ", "propagate", "sample_chains", "sample_naive_pairs",
    "TABLE_BINS", "EvalPair", "LabelQuality", "PckResult", "label_quality",
    "pck", "predict_targets", "viewpoint_binned_pck",
    "FilterReport", "back_match_distances", "cyclic_filter",
    "relaxed_cyclic_filter",
    "FeatureMap", "Mask", "cosine_sim", "masked_points", "patch_to_pixel",
    "pixel_to_patch", "sim_map",
    "Match", "MatchSet", "nn_match", "nn_match_all", "window_soft_argmax",
    "DEFAULT_THETA_TH", "SphereMapper", "SpherePoint", "geodesic",
    "geodesic_many", "mean_on_sphere", "quantize_pose", "rotation_to_sphere",
    "sphere_loss", "sphere_reject",
    "SynthConfig", "SynthWorld", "generate", "plant_report",
    "TrainConfig", "TrainPair", "load_adapter", "save_checkpoint", "train",
    "__version__",
]
