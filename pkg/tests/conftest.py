import numpy as np
import pytest
import torch

from marsnet import gedi, patches, synth
from marsnet.model import ModelConfig
from marsnet.rasters import point_sampler

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def world():
    return synth.SynthWorld(seed=101, width=160, height=160)


@pytest.fixture(scope="session")
def dataset(world):
    return synth.generate(world)


@pytest.fixture(scope="session")
def filtered(dataset):
    ndvi_at = point_sampler(dataset.ndvi, band=0, fill=float("nan"))
    forest_sample = point_sampler(dataset.forest_mask, band=0, fill=float("nan"))

    def forest_at(lon, lat):
        v = forest_sample(lon, lat)
        return bool(np.isfinite(v) and v > 0.5)

    return gedi.apply_filters(dataset.footprints, ndvi_at=ndvi_at, forest_at=forest_at)


@pytest.fixture(scope="session")
def calibration(dataset, filtered):
    pairs, _ = gedi.matched_pairs(dataset.plots, filtered.kept)
    return gedi.fit_calibration(pairs)


@pytest.fixture(scope="session")
def patch_splits(dataset, filtered, calibration):
    """Standardized (train, val, test) splits plus the fitted stats."""
    geometry = dataset.stacks["sentinel2"].raster.geometry
    labels, mask = gedi.rasterize_labels(filtered.kept, calibration, geometry)
    samples = patches.extract_patches(dataset.stacks, labels, mask)
    train, val, test = patches.split_samples(samples, seed=33)
    stats = patches.fit_norm_stats(train)
    return (patches.standardize_samples(train, stats),
            patches.standardize_samples(val, stats),
            patches.standardize_samples(test, stats),
            stats)


def tiny_config(**overrides) -> ModelConfig:
    """Small all-modality config that keeps unit tests fast."""
    base = dict(
        input_bands={"sentinel2": 17, "sentinel1": 9, "palsar2": 4, "ancillary": 4},
        stage_widths=(8, 16),
        input_spatial=16,
        seed=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_inputs(config: ModelConfig, batch: int = 2, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    size = config.input_spatial
    return {m: torch.randn(batch, b, size, size, generator=gen)
            for m, b in config.input_bands.items()}
