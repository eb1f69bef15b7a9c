"""Training sample preparation: tiling, splitting, and standardization.

The raster stacks and the sparse label grid are cut into non-overlapping
square patches anchored at the grid origin. Only patches containing at least
one labeled pixel become samples. Inputs are z-score standardized per band
with statistics fit on the training split only; labels stay in meters so the
loss and every reported error are in physical units.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rasters import ModalityStack, Raster

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 64
SPLIT_RATIOS = (0.8, 0.1, 0.1)  # train, val, test; val absorbs rounding


@dataclass
class PatchSample:
    """One training sample: per-modality input tiles plus sparse labels."""

    inputs: dict[str, np.ndarray]      # modality -> (bands, p, p) float32
    label: np.ndarray                  # (1, p, p) float32, meters
    mask: np.ndarray                   # (1, p, p) bool, True where labeled
    patch_origin: tuple[int, int]      # (row, col) of the patch's top-left pixel
    infill_values: dict[str, int] = field(default_factory=dict)  # filled entries per modality


def band_means(stacks: dict[str, ModalityStack]) -> dict[str, np.ndarray]:
    """Stack-wide per-band means over valid, finite pixels.

    Bands with no valid pixel at all fall back to 0 with a warning; they carry
    no information either way.
    """
    means: dict[str, np.ndarray] = {}
    for name, stack in stacks.items():
        data = stack.raster.data
        valid = ~stack.raster.nodata[None, :, :] & np.isfinite(data)
        out = np.zeros(data.shape[0], dtype=np.float64)
        for b in range(data.shape[0]):
            v = data[b][valid[b]]
            if v.size == 0:
                warnings.warn(f"modality '{name}' band {b} has no valid pixels; infill mean = 0")
            else:
                out[b] = v.mean()
        means[name] = out
    return means


def extract_patches(stacks: dict[str, ModalityStack], label_raster: Raster,
                    mask: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE) -> list[PatchSample]:
    """Cut aligned, non-overlapping patches keeping only labeled ones.

    Tiling starts at the grid origin; a partial row/column at the far edges is
    discarded. Invalid input values (the modality's nodata plane, or NaN in a
    single band) are replaced by the stack-wide band mean and counted per
    sample in infill_values.
    """
    if not stacks:
        raise ValueError("no input stacks")
    geom = next(iter(stacks.values())).raster.geometry
    for name, stack in stacks.items():
        if stack.raster.geometry != geom:
            raise ValueError(f"modality '{name}' grid does not match the label grid")
    if label_raster.geometry != geom:
        raise ValueError("label raster grid does not match the input stacks")
    if mask.shape != (geom.height, geom.width):
        raise ValueError(f"mask shape {mask.shape} does not match the grid")
    if geom.height < patch_size or geom.width < patch_size:
        raise ValueError(
            f"grid {geom.height}x{geom.width} is smaller than one {patch_size}px patch")

    means = band_means(stacks)
    filled: dict[str, np.ndarray] = {}
    invalid_planes: dict[str, np.ndarray] = {}
    for name, stack in stacks.items():
        data = stack.raster.data.astype(np.float32)
        invalid = stack.raster.nodata[None, :, :] | ~np.isfinite(data)
        fill = np.broadcast_to(
            means[name].astype(np.float32)[:, None, None], data.shape)
        filled[name] = np.where(invalid, fill, data)
        invalid_planes[name] = invalid

    samples: list[PatchSample] = []
    label = label_raster.data[0].astype(np.float32)
    for r0 in range(0, geom.height - patch_size + 1, patch_size):
        for c0 in range(0, geom.width - patch_size + 1, patch_size):
            sl = np.s_[r0:r0 + patch_size, c0:c0 + patch_size]
            patch_mask = mask[sl]
            if not patch_mask.any():
                continue
            inputs = {name: filled[name][:, sl[0], sl[1]].copy() for name in stacks}
            counts = {name: int(invalid_planes[name][:, sl[0], sl[1]].sum()) for name in stacks}
            patch_label = np.where(patch_mask, label[sl], 0.0).astype(np.float32)
            samples.append(PatchSample(
                inputs=inputs,
                label=patch_label[None],
                mask=patch_mask[None].copy(),
                patch_origin=(r0, c0),
                infill_values=counts,
            ))
    logger.info("extracted %d labeled patches of %dpx", len(samples), patch_size)
    return samples


def split_samples(samples, seed: int):
    """Seeded uniform shuffle into train/val/test.

    Sizes: train = floor(0.8 n), test = floor(0.1 n), val = the remainder,
    so every sample lands in exactly one split. Works on any sequence.
    """
    n = len(samples)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(SPLIT_RATIOS[0] * n))
    n_test = int(np.floor(SPLIT_RATIOS[2] * n))
    n_val = n - n_train - n_test
    order = [samples[i] for i in perm]
    train = order[:n_train]
    val = order[n_train:n_train + n_val]
    test = order[n_train + n_val:]
    logger.info("split %d samples into %d/%d/%d train/val/test", n, len(train), len(val), len(test))
    return train, val, test


@dataclass
class NormStats:
    """Per-band z-score parameters, fit on the training split only."""

    means: dict[str, np.ndarray]     # modality -> (bands,) float64
    stds: dict[str, np.ndarray]
    epsilon: float = 1e-6

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "means": {m: v.tolist() for m, v in self.means.items()},
            "stds": {m: v.tolist() for m, v in self.stds.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            means={m: np.asarray(v, dtype=np.float64) for m, v in d["means"].items()},
            stds={m: np.asarray(v, dtype=np.float64) for m, v in d["stds"].items()},
            epsilon=float(d["epsilon"]),
        )


def fit_norm_stats(train_samples, epsilon: float = 1e-6) -> NormStats:
    """Per-band mean and population std over all training patches and pixels."""
    if not train_samples:
        raise ValueError("cannot fit normalization on an empty training split")
    modalities = list(train_samples[0].inputs)
    means: dict[str, np.ndarray] = {}
    stds: dict[str, np.ndarray] = {}
    for m in modalities:
        stacked = np.stack([s.inputs[m] for s in train_samples]).astype(np.float64)
        means[m] = stacked.mean(axis=(0, 2, 3))
        stds[m] = stacked.std(axis=(0, 2, 3), ddof=0)
    return NormStats(means=means, stds=stds, epsilon=epsilon)


def standardize_array(data: np.ndarray, mean: np.ndarray, std: np.ndarray,
                      epsilon: float) -> np.ndarray:
    """(x - mean) / max(std, epsilon), broadcast over (bands, ...)."""
    denom = np.maximum(std, epsilon)
    return ((data - mean[:, None, None]) / denom[:, None, None]).astype(np.float32)


def standardize_sample(sample: PatchSample, stats: NormStats) -> PatchSample:
    """A copy of the sample with standardized inputs; label and mask untouched."""
    inputs = {
        m: standardize_array(sample.inputs[m].astype(np.float64), stats.means[m],
                             stats.stds[m], stats.epsilon)
        for m in sample.inputs
    }
    return PatchSample(inputs=inputs, label=sample.label, mask=sample.mask,
                       patch_origin=sample.patch_origin,
                       infill_values=dict(sample.infill_values))


def standardize_samples(samples, stats: NormStats) -> list[PatchSample]:
    return [standardize_sample(s, stats) for s in samples]
