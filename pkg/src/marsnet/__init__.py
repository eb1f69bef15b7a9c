"""Multimodal dominant-height regression from spaceborne imagery.

The package turns LiDAR footprint heights plus optical/SAR/terrain rasters
into wall-to-wall canopy height maps: filter and calibrate the footprints,
stack the rasters on a common grid, cut masked training patches, train the
multi-encoder network, and predict and evaluate maps.
"""

from .gedi import (CalibrationModel, FootprintRecord, apply_filters,
                   fit_calibration, rasterize_labels)
from .metrics import footprint_eval, pixel_eval, regression_metrics
from .model import MarsNet, ModelConfig, build_model
from .patches import extract_patches, fit_norm_stats, split_samples
from .rasters import GridGeometry, ModalityStack, Raster, assemble_stacks
from .synth import SynthWorld, generate
from .train import TrainConfig, predict_map, train_model

__version__ = "0.1.0"

__all__ = [
    "CalibrationModel", "FootprintRecord", "GridGeometry", "MarsNet",
    "ModalityStack", "ModelConfig", "Raster", "SynthWorld", "TrainConfig",
    "apply_filters", "assemble_stacks", "build_model", "extract_patches",
    "fit_calibration", "fit_norm_stats", "footprint_eval", "generate",
    "pixel_eval", "predict_map", "rasterize_labels", "regression_metrics",
    "split_samples", "train_model", "__version__",
]
