"""Masked-regression training loop and full-map prediction.

Labels are sparse: a pixel contributes to the loss only where the label mask
is set. The optimized objective is

    loss = sum((pred - label)^2 * mask) / sum(mask) + lambda * sum(theta^2)

where the penalty runs over convolution and linear kernels only (parameters
with ndim >= 2); biases and normalization affines are exempt. The penalty is
part of the loss on purpose, not optimizer weight decay, so the gradient
check sees it. Validation loss is the pure masked MSE (the penalty would
only shift the curve by a prediction-independent amount).
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .patches import NormStats, standardize_array
from .rasters import ModalityStack, Raster

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_epochs: int = 50
    batch_size: int = 64
    l2_lambda: float = 1e-5
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size, and patience must be at least 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "l2_lambda": self.l2_lambda,
            "patience": self.patience,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked pixels only.

    An all-zero mask contributes zero loss (warned): there is nothing to fit.
    """
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"mask {tuple(mask.shape)}")
    m = mask.to(dtype=pred.dtype)
    total = m.sum()
    if total.item() == 0:
        warnings.warn("masked_mse: mask selects no pixels; contributing zero loss")
        return (pred * 0.0).sum()
    return ((pred - target) ** 2 * m).sum() / total


def l2_penalty(model: torch.nn.Module) -> torch.Tensor:
    """Sum of squares over kernel parameters (ndim >= 2) only."""
    terms = [p.pow(2).sum() for p in model.parameters() if p.ndim >= 2]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def masked_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
                model: torch.nn.Module | None = None,
                l2_lambda: float = 0.0) -> torch.Tensor:
    """The full training objective: masked MSE plus the kernel L2 penalty."""
    loss = masked_mse(pred, target, mask)
    if l2_lambda > 0:
        if model is None:
            raise ValueError("l2_lambda > 0 needs the model to read parameters from")
        loss = loss + l2_lambda * l2_penalty(model)
    return loss


def to_batch(samples, modalities=None, dtype=torch.float32):
    """Stack patch samples into tensors: (inputs dict, labels, bool masks)."""
    if not samples:
        raise ValueError("empty sample batch")
    if modalities is None:
        modalities = list(samples[0].inputs)
    missing = [m for m in modalities if m not in samples[0].inputs]
    if missing:
        raise ValueError(f"samples are missing modalities: {missing}")
    inputs = {
        m: torch.from_numpy(np.stack([s.inputs[m] for s in samples])).to(dtype)
        for m in modalities
    }
    labels = torch.from_numpy(np.stack([s.label for s in samples])).to(dtype)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    return inputs, labels, masks


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0                  # 1-based
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    epochs_run: int = 0
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "epochs_run": self.epochs_run,
            "wall_seconds": self.wall_seconds,
        }


def _val_mse(model, inputs, labels, masks, batch_size) -> float:
    """Exact masked MSE over the whole set, accumulated in float64."""
    sq = 0.0
    count = 0.0
    n = labels.shape[0]
    with torch.no_grad():
        for i in range(0, n, batch_size):
            sl = slice(i, i + batch_size)
            pred = model({m: t[sl] for m, t in inputs.items()})
            m = masks[sl].to(pred.dtype)
            sq += float(((pred - labels[sl]) ** 2 * m).sum().item())
            count += float(m.sum().item())
    if count == 0:
        warnings.warn("validation mask selects no pixels")
        return float("inf")
    return sq / count


def train_model(model, train_samples, val_samples, config: TrainConfig,
                log_fn=None) -> TrainHistory:
    """Adam training with early stopping on validation masked MSE.

    The model is trained in place; when training ends (early stop or epoch
    budget) the parameters from the best validation epoch are restored.
    log_fn, if given, is called as log_fn(epoch, train_loss, val_loss).
    """
    config.validate()
    if not train_samples:
        raise ValueError("empty training split")
    if not val_samples:
        raise ValueError("early stopping needs a non-empty validation split")
    torch.manual_seed(config.seed)   # dropout reproducibility
    modalities = list(model.config.input_bands)
    tr_inputs, tr_labels, tr_masks = to_batch(train_samples, modalities)
    va_inputs, va_labels, va_masks = to_batch(val_samples, modalities)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate,
        betas=config.adam_betas, eps=config.adam_eps)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_state: dict | None = None
    bad_epochs = 0
    n = len(train_samples)
    started = time.monotonic()

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = torch.from_numpy(perm[i:i + config.batch_size].copy())
            batch_inputs = {m: t[idx] for m, t in tr_inputs.items()}
            optimizer.zero_grad()
            pred = model(batch_inputs)
            loss = masked_loss(pred, tr_labels[idx], tr_masks[idx],
                               model, config.l2_lambda)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * idx.shape[0]
        epoch_loss /= n

        model.eval()
        val_loss = _val_mse(model, va_inputs, va_labels, va_masks, config.batch_size)
        history.train_loss.append(epoch_loss)
        history.val_loss.append(val_loss)
        history.epochs_run = epoch
        if log_fn is not None:
            log_fn(epoch, epoch_loss, val_loss)
        logger.debug("epoch %d: train %.5f val %.5f", epoch, epoch_loss, val_loss)

        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                history.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    history.wall_seconds = time.monotonic() - started
    logger.info("trained %d epochs, best epoch %d (val %.5f)%s",
                history.epochs_run, history.best_epoch, history.best_val_loss,
                ", stopped early" if history.stopped_early else "")
    return history


def predict_patches(model, samples, modalities=None, batch_size: int = 64):
    """Model predictions over samples: (preds, labels, masks) numpy arrays."""
    if modalities is None:
        modalities = list(model.config.input_bands)
    inputs, labels, masks = to_batch(samples, modalities)
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, labels.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            preds.append(model({m: t[sl] for m, t in inputs.items()}).numpy())
    return np.concatenate(preds), labels.numpy(), masks.numpy().astype(bool)


def predict_map(model, stacks: dict[str, ModalityStack], stats: NormStats,
                forest_mask: Raster | None = None, batch_tiles: int = 16) -> Raster:
    """Tile a full raster stack through the model into a height map.

    Inputs are standardized with the training statistics (invalid pixels take
    the band mean, i.e. zero after standardization). The grid is padded to a
    tile multiple by reflection at the bottom/right edges and cropped back,
    so interior tiles see exactly their own pixels. Negative predictions are
    clamped to zero; non-forest pixels become nodata when a forest mask is
    given. Tile traversal order cannot affect the result: tiles are disjoint.
    """
    config = model.config
    tile = config.input_spatial
    missing = [m for m in config.input_bands if m not in stacks]
    if missing:
        raise ValueError(f"prediction stacks are missing modalities: {missing}")
    geom = next(iter(stacks.values())).raster.geometry
    for name, stack in stacks.items():
        if stack.raster.geometry != geom:
            raise ValueError(f"modality '{name}' grid does not match the others")
    if geom.height < tile or geom.width < tile:
        raise ValueError(f"grid {geom.height}x{geom.width} is smaller than one {tile}px tile")
    if forest_mask is not None and forest_mask.geometry != geom:
        raise ValueError("forest mask grid does not match the input stacks")

    pad_h = (tile - geom.height % tile) % tile
    pad_w = (tile - geom.width % tile) % tile
    planes: dict[str, np.ndarray] = {}
    for m in config.input_bands:
        stack = stacks[m]
        data = stack.raster.data.astype(np.float64)
        invalid = stack.raster.nodata[None, :, :] | ~np.isfinite(data)
        std = standardize_array(data, stats.means[m], stats.stds[m], stats.epsilon)
        std = np.where(invalid, np.float32(0.0), std)
        planes[m] = np.pad(std, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")

    out = np.zeros((geom.height + pad_h, geom.width + pad_w), dtype=np.float32)
    origins = [(r, c) for r in range(0, geom.height + pad_h, tile)
               for c in range(0, geom.width + pad_w, tile)]
    model.eval()
    with torch.no_grad():
        for i in range(0, len(origins), batch_tiles):
            chunk = origins[i:i + batch_tiles]
            batch = {
                m: torch.from_numpy(np.stack([
                    planes[m][:, r:r + tile, c:c + tile] for r, c in chunk]))
                for m in config.input_bands
            }
            pred = model(batch).numpy()[:, 0]
            for j, (r, c) in enumerate(chunk):
                out[r:r + tile, c:c + tile] = pred[j]

    out = np.maximum(out[:geom.height, :geom.width], 0.0)
    if forest_mask is not None:
        nodata = forest_mask.nodata | (forest_mask.data[0] <= 0.5)
    else:
        nodata = np.zeros(geom.shape, dtype=bool)
    result = out[None].astype(np.float32)
    result[:, nodata] = np.nan
    return Raster(geom, result, nodata)
