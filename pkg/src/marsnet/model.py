"""Multimodal encoder-decoder network for dense height regression.

One encoder per input modality (optionally shared, see encoder modes below)
produces a four-scale feature pyramid. At every scale the per-modality
features are fused by a learned attention map, and a mirrored decoder
upsamples back to full resolution, ending in a single unbounded regression
band (meters).

The distinguishing convolution unit ("ESBC") is a 1x1 band-adjust
convolution followed by two reconstruction steps:

  * spatial: GroupNorm scale magnitudes weight a sigmoid gate that splits
    each feature map into an informative and a redundant copy of the
    *original* input, whose band halves are cross-summed and re-concatenated.
    The split is hard (threshold 0.5) and sums back to the input exactly.
  * band: the stack is cut into an upper ceil(alpha*b) and lower remainder
    part, each squeezed 1x1 by ratio r; the upper path runs grouped and
    pointwise 3x3/1x1 convolutions summed together, the lower path pads its
    squeezed bands back with its own input; a global-average softmax over the
    two branches blends them band-wise.

Encoder modes: "separate" (one encoder per modality), "shared" (one encoder
behind per-modality 1x1 adapters), "sar_shared" (the two radar modalities
share one encoder; optical and ancillary keep their own). Adapters that
happen to be square are identity-initialized, which makes a single-modality
shared model start out forward-identical to its separate twin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .rasters import EXPECTED_BAND_COUNTS, MODALITY_ORDER

logger = logging.getLogger(__name__)

ENCODER_MODES = ("separate", "shared", "sar_shared")
SAR_GROUP = ("sentinel1", "palsar2")


def effective_gn_groups(bands: int, preferred: int) -> int:
    """Largest divisor of `bands` that does not exceed `preferred`."""
    for g in range(min(preferred, bands), 0, -1):
        if bands % g == 0:
            return g
    return 1


def check_bru_widths(bands: int, alpha: float, squeeze_ratio: int, groups: int) -> None:
    """Raise with specifics when a width cannot host the band reconstruction."""
    upper = math.ceil(alpha * bands)
    lower = bands - upper
    problems = []
    if upper % squeeze_ratio:
        problems.append(f"upper part {upper} not divisible by squeeze ratio {squeeze_ratio}")
    if lower % squeeze_ratio:
        problems.append(f"lower part {lower} not divisible by squeeze ratio {squeeze_ratio}")
    if upper // squeeze_ratio < 1 or lower // squeeze_ratio < 1:
        problems.append("squeezed widths must be at least 1")
    elif (upper // squeeze_ratio) % groups:
        problems.append(
            f"squeezed upper width {upper // squeeze_ratio} not divisible by {groups} groups")
    if bands % groups:
        problems.append(f"width {bands} not divisible by {groups} groups")
    if lower // squeeze_ratio >= bands:
        problems.append("lower squeeze must stay below the full width")
    if problems:
        raise ValueError(f"band reconstruction cannot run at width {bands}: " + "; ".join(problems))


@dataclass
class ModelConfig:
    """Everything needed to build the network deterministically."""

    input_bands: dict[str, int] = field(
        default_factory=lambda: dict(EXPECTED_BAND_COUNTS))
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    input_spatial: int = 64
    encoder_mode: str = "separate"
    esbc_enabled: bool = True
    bru_alpha: float = 0.5
    squeeze_ratio: int = 2
    gwc_groups: int = 2
    gn_groups: int = 16
    gate_threshold: float = 0.5
    sru_straight_through: bool = False
    dropout_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        # canonical modality order regardless of how the dict was built
        self.input_bands = {m: int(self.input_bands[m])
                            for m in MODALITY_ORDER if m in self.input_bands} | {
            m: int(b) for m, b in self.input_bands.items() if m not in MODALITY_ORDER}

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.input_bands)

    @property
    def n_stages(self) -> int:
        return len(self.stage_widths)

    def validate(self) -> None:
        unknown = [m for m in self.input_bands if m not in MODALITY_ORDER]
        if unknown:
            raise ValueError(f"unknown modalities in config: {unknown}")
        if not self.input_bands:
            raise ValueError("config needs at least one modality")
        if any(b < 1 for b in self.input_bands.values()):
            raise ValueError("modality band counts must be positive")
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}, got '{self.encoder_mode}'")
        if self.n_stages < 2:
            raise ValueError("need at least 2 stages (one downsample) for the decoder")
        if any(w < 2 or w % 2 for w in self.stage_widths):
            raise ValueError(f"stage widths must be positive and even, got {self.stage_widths}")
        if any(b >= a for b, a in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError(f"stage widths must be strictly increasing, got {self.stage_widths}")
        down = 2 ** (self.n_stages - 1)
        if self.input_spatial % down or self.input_spatial // down < 1:
            raise ValueError(
                f"input spatial size {self.input_spatial} does not survive "
                f"{self.n_stages - 1} halvings")
        if not 0.0 < self.bru_alpha < 1.0:
            raise ValueError(f"bru_alpha must lie in (0, 1), got {self.bru_alpha}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.esbc_enabled:
            for w in self.stage_widths:
                check_bru_widths(w, self.bru_alpha, self.squeeze_ratio, self.gwc_groups)

    def to_dict(self) -> dict:
        return {
            "input_bands": dict(self.input_bands),
            "stage_widths": list(self.stage_widths),
            "input_spatial": self.input_spatial,
            "encoder_mode": self.encoder_mode,
            "esbc_enabled": self.esbc_enabled,
            "bru_alpha": self.bru_alpha,
            "squeeze_ratio": self.squeeze_ratio,
            "gwc_groups": self.gwc_groups,
            "gn_groups": self.gn_groups,
            "gate_threshold": self.gate_threshold,
            "sru_straight_through": self.sru_straight_through,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_widths"] = tuple(d["stage_widths"])
        return cls(**d)


def pyramid_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(bands, height, width) of each encoder scale for one sample."""
    return [(w, config.input_spatial // 2 ** i, config.input_spatial // 2 ** i)
            for i, w in enumerate(config.stage_widths)]


class BandAttention(nn.Module):
    """Squeeze-and-excitation style band re-weighting (bottleneck ratio 4)."""

    def __init__(self, bands: int, reduction: int = 4):
        super().__init__()
        hidden = max(bands // reduction, 1)
        self.squeeze = nn.Linear(bands, hidden)
        self.excite = nn.Linear(hidden, bands)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3))
        s = torch.relu(self.squeeze(s))
        w = torch.sigmoid(self.excite(s))
        return x * w[:, :, None, None]


class SpatialReconstructionUnit(nn.Module):
    """Hard-gated informative/redundant split with cross-half reassembly.

    The gate weights come from the GroupNorm scale vector: W = |g| / sum|g|,
    per-band sigmoid(W * GN(x)), thresholded. Both gated copies multiply the
    original input, so the unit conserves the total sum exactly:
    sum(output) == sum(input).

    The threshold comparison is treated as a constant in the backward pass
    (set `straight_through` for a soft surrogate gradient instead). For
    finite-difference checking, the gate can be captured on one forward and
    pinned via `gate_override`.
    """

    def __init__(self, bands: int, gn_groups: int = 16, threshold: float = 0.5,
                 straight_through: bool = False, eps: float = 1e-5):
        super().__init__()
        if bands % 2:
            raise ValueError(f"spatial reconstruction needs an even band count, got {bands}")
        self.bands = bands
        self.threshold = threshold
        self.straight_through = straight_through
        self.norm = nn.GroupNorm(effective_gn_groups(bands, gn_groups), bands, eps=eps)
        self.gate_override: torch.Tensor | None = None
        self.capture_gates = False
        self.captured_gate: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.norm(x)
        gamma = self.norm.weight.abs()
        w_gamma = (gamma / gamma.sum()).view(1, -1, 1, 1)
        score = torch.sigmoid(w_gamma * normed)
        if self.gate_override is not None:
            w1 = self.gate_override.to(dtype=x.dtype)
        else:
            hard = (score > self.threshold).to(dtype=x.dtype)
            w1 = hard + (score - score.detach()) if self.straight_through else hard
            if self.capture_gates:
                self.captured_gate = hard.detach().clone()
        w2 = 1.0 - w1
        informative = w1 * x
        redundant = w2 * x
        half = self.bands // 2
        x11, x12 = informative[:, :half], informative[:, half:]
        x21, x22 = redundant[:, :half], redundant[:, half:]
        return torch.cat([x11 + x22, x21 + x12], dim=1)


class BandReconstructionUnit(nn.Module):
    """Split-squeeze-transform-fuse over the band dimension.

    The upper ceil(alpha*b) bands are squeezed 1x1 by `squeeze_ratio` and
    expanded back through a grouped 3x3 plus a pointwise 1x1 (summed); the
    lower remainder is squeezed the same way and completed back to b bands by
    concatenating its own squeezed input. A global-average pooled, per-band
    two-way softmax blends the branches; the two weights sum to 1 exactly.
    """

    def __init__(self, bands: int, alpha: float = 0.5, squeeze_ratio: int = 2,
                 groups: int = 2):
        super().__init__()
        check_bru_widths(bands, alpha, squeeze_ratio, groups)
        self.upper = math.ceil(alpha * bands)
        self.lower = bands - self.upper
        up_sq = self.upper // squeeze_ratio
        low_sq = self.lower // squeeze_ratio
        self.squeeze_up = nn.Conv2d(self.upper, up_sq, kernel_size=1)
        self.squeeze_low = nn.Conv2d(self.lower, low_sq, kernel_size=1)
        self.grouped = nn.Conv2d(up_sq, bands, kernel_size=3, padding=1, groups=groups)
        self.pointwise_up = nn.Conv2d(up_sq, bands, kernel_size=1)
        self.pointwise_low = nn.Conv2d(low_sq, bands - low_sq, kernel_size=1)

    def branches(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        up = self.squeeze_up(x[:, :self.upper])
        low = self.squeeze_low(x[:, self.upper:])
        y1 = self.grouped(up) + self.pointwise_up(up)
        y2 = torch.cat([self.pointwise_low(low), low], dim=1)
        return y1, y2

    def branch_weights(self, y1: torch.Tensor, y2: torch.Tensor):
        s1 = y1.mean(dim=(2, 3))
        s2 = y2.mean(dim=(2, 3))
        # two-way softmax written so the pair sums to 1.0 exactly in floats
        beta1 = torch.sigmoid(s1 - s2)
        beta2 = 1.0 - beta1
        return beta1, beta2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y1, y2 = self.branches(x)
        beta1, beta2 = self.branch_weights(y1, y2)
        return beta1[:, :, None, None] * y1 + beta2[:, :, None, None] * y2


class ESBCConv(nn.Module):
    """Band-adjust 1x1 conv + spatial and band reconstruction.

    With `esbc_enabled=False` the whole unit degrades to a plain 3x3
    convolution of the same width, which is the ablation baseline.
    """

    def __init__(self, in_bands: int, out_bands: int, config: ModelConfig):
        super().__init__()
        self.enabled = config.esbc_enabled
        if self.enabled:
            self.adjust = nn.Conv2d(in_bands, out_bands, kernel_size=1)
            self.spatial = SpatialReconstructionUnit(
                out_bands, config.gn_groups, config.gate_threshold,
                config.sru_straight_through)
            self.band = BandReconstructionUnit(
                out_bands, config.bru_alpha, config.squeeze_ratio, config.gwc_groups)
        else:
            self.adjust = nn.Conv2d(in_bands, out_bands, kernel_size=3, padding=1)
            self.spatial = None
            self.band = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.adjust(x)
        if self.enabled:
            x = self.spatial(x)
            x = self.band(x)
        return x


class ConvBlock(nn.Module):
    """ESBC unit + BatchNorm + ReLU + band attention, with optional
    pre-pooling (encoder downsampling) and post-dropout (deepest stage)."""

    def __init__(self, in_bands: int, out_bands: int, config: ModelConfig,
                 pool: bool = False, dropout: float = 0.0):
        super().__init__()
        self.pool = nn.MaxPool2d(2) if pool else None
        self.conv = ESBCConv(in_bands, out_bands, config)
        self.norm = nn.BatchNorm2d(out_bands)
        self.attention = BandAttention(out_bands)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pool is not None:
            x = self.pool(x)
        x = torch.relu(self.norm(self.conv(x)))
        x = self.attention(x)
        if self.dropout is not None:
            x = self.dropout(x)
        return x


class Encoder(nn.Module):
    """Stagewise feature pyramid: one block per scale, pooling between."""

    def __init__(self, in_bands: int, config: ModelConfig):
        super().__init__()
        self.in_bands = in_bands
        self.input_spatial = config.input_spatial
        blocks = []
        prev = in_bands
        last = config.n_stages - 1
        for i, width in enumerate(config.stage_widths):
            blocks.append(ConvBlock(
                prev, width, config, pool=i > 0,
                dropout=config.dropout_rate if i == last else 0.0))
            prev = width
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.in_bands:
            raise ValueError(
                f"encoder expects (N, {self.in_bands}, {self.input_spatial}, "
                f"{self.input_spatial}), got {tuple(x.shape)}")
        if x.shape[-2:] != (self.input_spatial, self.input_spatial):
            raise ValueError(
                f"encoder expects {self.input_spatial}px inputs, got {tuple(x.shape[-2:])}")
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return features


class ModalFusion(nn.Module):
    """Attention-weighted fusion of same-scale features across modalities.

    Concatenates the N modality features, mixes them down to the scale width,
    and multiplies by a single-band sigmoid attention map.
    """

    def __init__(self, n_modalities: int, bands: int):
        super().__init__()
        self.n_modalities = n_modalities
        self.mix = nn.Conv2d(n_modalities * bands, bands, kernel_size=3, padding=1)
        self.attend = nn.Conv2d(bands, 1, kernel_size=3, padding=1)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.n_modalities:
            raise ValueError(
                f"fusion expects {self.n_modalities} feature maps, got {len(features)}")
        shape = features[0].shape
        if any(f.shape != shape for f in features[1:]):
            raise ValueError("fused features must share one shape")
        mixed = torch.relu(self.mix(torch.cat(features, dim=1)))
        weight = torch.sigmoid(self.attend(mixed))
        return weight * mixed


class DecoderBlock(nn.Module):
    """Bilinear 2x upsample, concat the skip, and convolve down to its width."""

    def __init__(self, in_bands: int, skip_bands: int, out_bands: int, config: ModelConfig):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.block = ConvBlock(in_bands + skip_bands, out_bands, config)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.upsample(x)
        return self.block(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    """Mirror of the encoder widths, ending in a single regression band.

    No output activation: heights come out in meters, unclamped.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.stage_widths
        blocks = []
        for s in range(config.n_stages - 2, -1, -1):
            blocks.append(DecoderBlock(widths[s + 1], widths[s], widths[s], config))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(widths[0], 1, kernel_size=1)

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        x = pyramid[-1]
        for i, block in enumerate(self.blocks):
            skip = pyramid[len(pyramid) - 2 - i]
            x = block(x, skip)
        return self.head(x)


class MarsNet(nn.Module):
    """The full multimodal regression network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.modalities = list(config.modalities)
        bands = config.input_bands

        route: dict[str, str] = {}
        encoder_inputs: dict[str, int] = {}
        adapter_specs: dict[str, int] = {}      # modality -> adapter out width
        if config.encoder_mode == "separate":
            for m in self.modalities:
                route[m] = m
                encoder_inputs[m] = bands[m]
        elif config.encoder_mode == "shared":
            shared_in = max(bands.values())
            for m in self.modalities:
                route[m] = "shared"
                adapter_specs[m] = shared_in
            encoder_inputs["shared"] = shared_in
        else:  # sar_shared
            sar_members = [m for m in self.modalities if m in SAR_GROUP]
            for m in self.modalities:
                if m in SAR_GROUP:
                    route[m] = "sar"
                else:
                    route[m] = m
                    encoder_inputs[m] = bands[m]
            if sar_members:
                sar_in = max(bands[m] for m in sar_members)
                encoder_inputs["sar"] = sar_in
                for m in sar_members:
                    adapter_specs[m] = sar_in
        self.route = route

        self.encoders = nn.ModuleDict({
            key: Encoder(width, config) for key, width in encoder_inputs.items()})
        self.adapters = nn.ModuleDict({
            m: nn.Conv2d(bands[m], out, kernel_size=1) for m, out in adapter_specs.items()})
        self.fusion = nn.ModuleList([
            ModalFusion(len(self.modalities), w) for w in config.stage_widths])
        self.decoder = Decoder(config)

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        missing = [m for m in self.modalities if m not in inputs]
        if missing:
            raise ValueError(f"forward is missing modalities: {missing}")
        extra = [k for k in inputs if k not in self.modalities]
        if extra:
            raise ValueError(f"forward got unexpected modalities: {extra}")
        pyramids = []
        size = self.config.input_spatial
        for m in self.modalities:
            x = inputs[m]
            want = self.config.input_bands[m]
            if x.ndim != 4 or x.shape[1] != want or x.shape[-2:] != (size, size):
                raise ValueError(
                    f"modality '{m}' expects shape (N, {want}, {size}, {size}), "
                    f"got {tuple(x.shape)}")
            if m in self.adapters:
                x = self.adapters[m](x)
            pyramids.append(self.encoders[self.route[m]](x))
        fused = [self.fusion[s]([p[s] for p in pyramids])
                 for s in range(self.config.n_stages)]
        return self.decoder(fused)


def _init_tensor(param: torch.Tensor, name: str, generator: torch.Generator) -> None:
    with torch.no_grad():
        if param.ndim >= 2:
            fan_in = param.shape[1:].numel()
            param.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
        elif name.endswith("weight"):
            param.fill_(1.0)    # norm scales
        else:
            param.zero_()       # all biases


def initialize_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic He fan-in init; same seed gives bitwise-equal weights.

    Input adapters are initialized last (identity when square) so that the
    draw sequence of encoder/fusion/decoder weights does not depend on
    whether adapters exist. That is what makes a single-modality shared model
    match its separate-mode twin at init.
    """
    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    adapters = getattr(model, "adapters", None)
    adapter_ids = {id(p) for p in adapters.parameters()} if adapters is not None else set()
    for name, param in model.named_parameters():
        if id(param) in adapter_ids:
            continue
        _init_tensor(param, name, generator)
    if adapters is not None:
        for conv in adapters.values():
            with torch.no_grad():
                out_b, in_b = conv.weight.shape[:2]
                if out_b == in_b:
                    conv.weight.copy_(torch.eye(out_b).view(out_b, in_b, 1, 1))
                else:
                    _init_tensor(conv.weight, "weight", generator)
                conv.bias.zero_()


def build_model(config: ModelConfig) -> MarsNet:
    """Construct and deterministically initialize the network from a config."""
    model = MarsNet(config)
    initialize_parameters(model, config.seed)
    n = parameter_count(model)
    logger.info("built model: %d parameters, mode=%s, esbc=%s",
                n, config.encoder_mode, config.esbc_enabled)
    return model


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encoder_parameter_count(model: MarsNet) -> int:
    """Parameters in the encoders proper, excluding input adapters."""
    return sum(p.numel() for p in model.encoders.parameters())


def sru_modules(model: nn.Module) -> list[SpatialReconstructionUnit]:
    return [m for m in model.modules() if isinstance(m, SpatialReconstructionUnit)]
