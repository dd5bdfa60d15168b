"""Reconstruction losses used by GLO training and image inversion.

Every loss is a per-element mean (not a sum) so learning rates carry over
between resolutions. Inputs are ``(N, C, H, W)`` tensors or ``ImageBatch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

LOSS_KINDS = ("l2", "lap_pyramid", "perceptual", "multiscale-perceptual")
BINOMIAL_5 = (1.0, 4.0, 6.0, 4.0, 1.0)


def _pixels(x):
    return x.pixels if hasattr(x, "pixels") else x


def _check_pair(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def l2_loss(a, b) -> torch.Tensor:
    """Mean squared difference over all elements."""
    a, b = _check_pair(a, b)
    return ((a - b) ** 2).mean()


# -- Laplacian pyramid ------------------------------------------------------

def _blur(x: torch.Tensor) -> torch.Tensor:
    k = torch.tensor(BINOMIAL_5, dtype=x.dtype, device=x.device) / 16.0
    c = x.shape[1]
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    return F.conv2d(x, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)


def pyramid_down(x: torch.Tensor) -> torch.Tensor:
    return _blur(x)[..., ::2, ::2]


def pyramid_up(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    # pad the coarse image before zero insertion so borders see real neighbours
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    n, c, h, w = x.shape
    up = x.new_zeros(n, c, 2 * h, 2 * w)
    up[..., ::2, ::2] = x
    return (4.0 * _blur(up))[..., 2: 2 + size[0], 2: 2 + size[1]]


def laplacian_pyramid(x: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Band-pass residuals, finest first; the last entry is the low-pass residue."""
    bands = []
    cur = x
    for _ in range(levels - 1):
        low = pyramid_down(cur)
        bands.append(cur - pyramid_up(low, cur.shape[-2:]))
        cur = low
    bands.append(cur)
    return bands


def laplacian_pyramid_loss(a, b, levels: int = 3) -> torch.Tensor:
    """Sum over levels j of 4**-j times the mean absolute band difference."""
    a, b = _check_pair(a, b)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(a.shape[-2:]) < 2 ** (levels - 1):
        raise ValueError(f"image {tuple(a.shape[-2:])} too small for {levels} pyramid levels")
    # the pyramid is linear, so decompose the difference once
    bands = laplacian_pyramid(a - b, levels)
    return sum(4.0 ** -j * band.abs().mean() for j, band in enumerate(bands))


# -- feature extractors -----------------------------------------------------

class FeatureExtractor(nn.Module):
    """Frozen network returning one feature tensor per tapped layer.

    Subclasses build their layers and then call ``self.freeze()``. The
    extractor stays in eval mode even if a parent module calls ``train()``.
    """

    identifier = "extractor"
    in_channels: int | None = None

    def __init__(self, layer_weights: Sequence[float] | None = None, pixel_weight: float = 1.0):
        super().__init__()
        self._layer_weights = None if layer_weights is None else [float(w) for w in layer_weights]
        self.pixel_weight = float(pixel_weight)

    def freeze(self):
        self.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def layer_weights(self, n_layers: int) -> list[float]:
        if self._layer_weights is None:
            return [1.0 / n_layers] * n_layers
        if len(self._layer_weights) != n_layers:
            raise ConfigurationError(
                f"{len(self._layer_weights)} layer weights for {n_layers} tapped layers"
            )
        return self._layer_weights

    def adapt(self, x: torch.Tensor) -> torch.Tensor:
        """Replicate grayscale to the channel count the extractor expects."""
        want = self.in_channels
        if want is None or x.shape[1] == want:
            return x
        if x.shape[1] == 1:
            return x.expand(-1, want, -1, -1)
        raise ConfigurationError(f"{self.identifier} expects {want} channels, got {x.shape[1]}")

    def config(self) -> dict:
        return {"extractor": self.identifier, "layer_weights": self._layer_weights,
                "pixel_weight": self.pixel_weight}


class IdentityExtractor(FeatureExtractor):
    """A single tapped layer equal to the input."""

    identifier = "identity"

    def __init__(self, layer_weights=None, pixel_weight: float = 0.0):
        super().__init__(layer_weights, pixel_weight)
        self.freeze()

    def forward(self, x):
        return [x]


class RandomConvExtractor(FeatureExtractor):
    """Small convolution stack with fixed seeded random weights.

    Block ``k`` is a 3x3 convolution (stride 1 for the first block, 2 after)
    followed by ReLU; every block output is tapped.
    """

    identifier = "random-conv"

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32), seed: int = 0,
                 layer_weights=None, pixel_weight: float = 1.0):
        super().__init__(layer_weights, pixel_weight)
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        gen = torch.Generator().manual_seed(self.seed)
        blocks = []
        cin = in_channels
        for k, cout in enumerate(self.widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if k == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (cin * 9)) ** 0.5, generator=gen)
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.ReLU()))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.freeze()

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def config(self):
        return dict(super().config(), in_channels=self.in_channels, widths=list(self.widths),
                    seed=self.seed)


class VGGExtractor(FeatureExtractor):
    """VGG-16 features tapped at relu1_2, relu2_2, relu3_3, relu4_3.

    Weights come from a local state-dict file (torchvision layout); without
    one the network is randomly initialized, which is only useful for tests.
    """

    identifier = "vgg16"
    in_channels = 3
    TAPS = (3, 8, 15, 22)

    def __init__(self, weights_path=None, taps: Sequence[int] = TAPS, layer_weights=None,
                 pixel_weight: float = 1.0):
        super().__init__(layer_weights, pixel_weight)
        from torchvision.models import vgg16

        features = vgg16(weights=None).features[: max(taps) + 1]
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu")
            state = {k.removeprefix("features."): v for k, v in state.items()}
            wanted = features.state_dict().keys()
            features.load_state_dict({k: v for k, v in state.items() if k in wanted})
        self.features = features
        self.taps = tuple(taps)
        self.weights_path = None if weights_path is None else str(weights_path)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        x = ((x + 1) / 2 - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats

    def config(self):
        return dict(super().config(), weights_path=self.weights_path, taps=list(self.taps))


def perceptual_feature_loss(a, b, fx: FeatureExtractor) -> torch.Tensor:
    """Weighted per-layer feature MSE plus ``fx.pixel_weight`` times pixel MSE."""
    a, b = _check_pair(a, b)
    try:
        fa, fb = fx(fx.adapt(a)), fx(fx.adapt(b))
    except RuntimeError as exc:
        raise ConfigurationError(f"{fx.identifier} cannot process input {tuple(a.shape)}: {exc}") from exc
    weights = fx.layer_weights(len(fa))
    total = sum(w * ((x - y) ** 2).mean() for w, x, y in zip(weights, fa, fb))
    if fx.pixel_weight:
        total = total + fx.pixel_weight * l2_loss(a, b)
    return total


# -- loss specification -------------------------------------------------------

@dataclass
class LossSpec:
    """Which reconstruction loss to use; ``kind`` decides which fields are read.

    ``lap_pyramid`` reads ``pyramid_levels``; ``perceptual`` reads the
    extractor fields; ``multiscale-perceptual`` reads those plus
    ``subsample_levels``.
    """

    kind: str = "perceptual"
    pyramid_levels: int = 3
    subsample_levels: int = 2
    extractor: str = "random-conv"
    extractor_path: str | None = None
    extractor_seed: int = 0
    extractor_widths: list[int] = field(default_factory=lambda: [16, 32])
    layer_weights: list[float] | None = None
    pixel_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if self.pyramid_levels < 1 or self.subsample_levels < 1:
            raise ValueError("pyramid_levels and subsample_levels must be >= 1")

    def to_dict(self):
        return asdict(self)


def build_extractor(spec: LossSpec, in_channels: int = 3) -> FeatureExtractor:
    if spec.extractor_path is not None and spec.extractor != "vgg16":
        from .checkpoint import load_extractor

        return load_extractor(spec.extractor_path)
    if spec.extractor == "identity":
        return IdentityExtractor(spec.layer_weights, spec.pixel_weight)
    if spec.extractor == "random-conv":
        return RandomConvExtractor(in_channels, spec.extractor_widths, spec.extractor_seed,
                                   spec.layer_weights, spec.pixel_weight)
    if spec.extractor == "vgg16":
        return VGGExtractor(spec.extractor_path, layer_weights=spec.layer_weights,
                            pixel_weight=spec.pixel_weight)
    raise ConfigurationError(f"unknown feature extractor {spec.extractor!r}")


def _half(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    return F.interpolate(x, size=(h // 2, w // 2), mode="bilinear", align_corners=False)


def multiscale_loss(a, b, base: LossSpec | Callable, subsample_levels: int) -> torch.Tensor:
    """Mean of the base loss at scales 1, 1/2, ..., 1/2**(levels-1).

    Each coarser scale is a bilinear 2x downsampling of the previous one.
    """
    a, b = _check_pair(a, b)
    if subsample_levels < 1:
        raise ValueError("subsample_levels must be >= 1")
    factor = 2 ** (subsample_levels - 1)
    if a.shape[-1] % factor or a.shape[-2] % factor:
        raise ValueError(f"image sides {tuple(a.shape[-2:])} not divisible by {factor}")
    fn = base if callable(base) else build_loss(base, in_channels=a.shape[1])
    total = fn(a, b)
    for _ in range(subsample_levels - 1):
        a, b = _half(a), _half(b)
        total = total + fn(a, b)
    return total / subsample_levels


class ReconstructionLoss:
    """Callable ``loss(a, b)`` resolved from a LossSpec, extractor built once."""

    def __init__(self, spec: LossSpec, in_channels: int = 3, extractor: FeatureExtractor | None = None):
        self.spec = spec
        self.extractor = extractor
        if extractor is None and spec.kind in ("perceptual", "multiscale-perceptual"):
            self.extractor = build_extractor(spec, in_channels=max(in_channels, 3)
                                             if spec.extractor != "identity" else in_channels)

    def _perceptual(self, a, b):
        return perceptual_feature_loss(a, b, self.extractor)

    def __call__(self, a, b) -> torch.Tensor:
        kind = self.spec.kind
        if kind == "l2":
            return l2_loss(a, b)
        if kind == "lap_pyramid":
            return laplacian_pyramid_loss(a, b, self.spec.pyramid_levels)
        if kind == "perceptual":
            return self._perceptual(a, b)
        return multiscale_loss(a, b, self._perceptual, self.spec.subsample_levels)

    def to(self, *args, **kwargs):
        if self.extractor is not None:
            self.extractor.to(*args, **kwargs)
        return self


def build_loss(spec: LossSpec, in_channels: int = 3) -> ReconstructionLoss:
    return ReconstructionLoss(spec, in_channels)
