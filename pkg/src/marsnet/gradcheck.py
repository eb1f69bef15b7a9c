"""Finite-difference verification of the training gradients.

Runs the model in double precision, eval mode, with the spatial
reconstruction gates captured on one forward pass and pinned for every
subsequent evaluation. Pinning matters: the gate is a hard threshold, and a
finite-difference step that flips a gate would compare the analytic gradient
of one region of the loss surface against a secant across two regions. With
the gates fixed, the loss is smooth in the parameters (up to max-pool tie
points) and central differences must match backpropagation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .model import sru_modules
from .train import masked_loss

logger = logging.getLogger(__name__)


@dataclass
class GradSample:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckResult:
    samples: list[GradSample]
    max_rel_error: float
    n_checked: int
    n_params_covered: int

    def worst(self) -> GradSample:
        return max(self.samples, key=lambda s: s.rel_error)


def freeze_sru_gates(model, inputs) -> None:
    """Capture every spatial-reconstruction gate on one forward and pin it."""
    units = sru_modules(model)
    for unit in units:
        unit.capture_gates = True
        unit.gate_override = None
    with torch.no_grad():
        model(inputs)
    for unit in units:
        unit.capture_gates = False
        unit.gate_override = unit.captured_gate


def release_sru_gates(model) -> None:
    for unit in sru_modules(model):
        unit.gate_override = None
        unit.captured_gate = None


def gradient_check(model, inputs, labels, masks, l2_lambda: float = 1e-3,
                   n_samples: int = 200, step: float = 1e-5, seed: int = 0,
                   rel_floor: float = 1e-6) -> GradCheckResult:
    """Compare backprop against central differences on sampled coordinates.

    Every parameter tensor contributes at least one sampled coordinate;
    remaining draws are spread proportionally to tensor size. rel_error is
    |analytic - numeric| / max(|analytic|, |numeric|, rel_floor); the floor
    keeps finite-difference noise on near-zero gradients from registering as
    disagreement.

    The model is converted to double precision in place.
    """
    model.double().eval()
    inputs = {m: t.double() for m, t in inputs.items()}
    labels = labels.double()
    masks = masks.bool()

    freeze_sru_gates(model, inputs)
    try:
        def loss_value() -> float:
            with torch.no_grad():
                return float(masked_loss(model(inputs), labels, masks,
                                         model, l2_lambda).item())

        model.zero_grad(set_to_none=True)
        loss = masked_loss(model(inputs), labels, masks, model, l2_lambda)
        loss.backward()
        params = [(name, p) for name, p in model.named_parameters()]
        grads = [p.grad.detach().clone() if p.grad is not None
                 else torch.zeros_like(p) for _, p in params]

        rng = np.random.default_rng(seed)
        coords: list[tuple[int, int]] = [
            (ti, int(rng.integers(p.numel()))) for ti, (_, p) in enumerate(params)]
        sizes = np.array([p.numel() for _, p in params], dtype=np.float64)
        extra = max(0, n_samples - len(coords))
        if extra:
            picks = rng.choice(len(params), size=extra, p=sizes / sizes.sum())
            coords.extend((int(ti), int(rng.integers(params[ti][1].numel())))
                          for ti in picks)

        samples: list[GradSample] = []
        for ti, flat_idx in coords:
            name, p = params[ti]
            flat = p.data.view(-1)
            orig = flat[flat_idx].item()
            flat[flat_idx] = orig + step
            f_plus = loss_value()
            flat[flat_idx] = orig - step
            f_minus = loss_value()
            flat[flat_idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[ti].view(-1)[flat_idx].item())
            denom = max(abs(analytic), abs(numeric), rel_floor)
            samples.append(GradSample(
                param=name, index=flat_idx, analytic=analytic, numeric=numeric,
                rel_error=abs(analytic - numeric) / denom))
    finally:
        release_sru_gates(model)

    result = GradCheckResult(
        samples=samples,
        max_rel_error=max(s.rel_error for s in samples),
        n_checked=len(samples),
        n_params_covered=len(params),
    )
    logger.info("gradient check: %d coordinates over %d tensors, max rel error %.3g",
                result.n_checked, result.n_params_covered, result.max_rel_error)
    return result
