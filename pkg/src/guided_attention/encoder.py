"""DenseNet-lite image encoder and 2-D positional encoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .layers import BatchNorm, Conv2d, Dropout, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

#: Spatial reduction of the stem (stride-2 conv + max pool) and two transitions.
DOWNSAMPLE_FACTOR = 16


@dataclass(slots=True)
class EncoderConfig:
    """Hyper-parameters of the DenseNet-lite encoder."""

    num_blocks: int = 3
    layers_per_block: int = 16
    growth_rate: int = 24
    transition_theta: float = 0.5
    dropout: float = 0.2
    out_dim: int = 256
    stem_channels: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.transition_theta <= 1.0:
            raise ConfigError(f"transition_theta must lie in (0, 1], got {self.transition_theta}.")
        if self.growth_rate <= 0:
            raise ConfigError(f"growth_rate must be positive, got {self.growth_rate}.")
        if self.num_blocks < 1 or self.layers_per_block < 1:
            raise ConfigError("num_blocks and layers_per_block must be at least 1.")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}.")
        if self.out_dim % 4:
            raise ConfigError(f"out_dim must be divisible by 4, got {self.out_dim}.")

    @property
    def stem_width(self) -> int:
        return self.stem_channels or 2 * self.growth_rate

    @property
    def downsample_factor(self) -> int:
        return 4 * 2 ** (self.num_blocks - 1)


@dataclass(slots=True)
class FeatureGrid:
    """Encoded features ``[N×h₀×w₀×d]`` (or ``[h₀×w₀×d]``) with a validity mask."""

    features: Tensor
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.features.shape[:-1] != self.mask.shape:
            raise InputError(
                f"Feature shape {self.features.shape} does not agree with mask shape {self.mask.shape}."
            )

    @property
    def batched(self) -> bool:
        return self.features.ndim == 4

    @property
    def batch_size(self) -> int:
        return self.features.shape[0] if self.batched else 1

    @property
    def h0(self) -> int:
        return self.features.shape[-3]

    @property
    def w0(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    @property
    def flat_len(self) -> int:
        return self.h0 * self.w0

    def flat(self) -> Tensor:
        """Return features as ``[N×L×d]`` (``N == 1`` for a single image)."""

        return self.features.reshape(self.batch_size, self.flat_len, self.dim)

    def flat_mask(self) -> np.ndarray:
        return self.mask.reshape(self.batch_size, self.flat_len)

    def __getitem__(self, i: int) -> "FeatureGrid":
        if not self.batched:
            raise IndexError("FeatureGrid holds a single image.")
        return FeatureGrid(self.features[i], self.mask[i])

    def detach(self) -> "FeatureGrid":
        return FeatureGrid(self.features.detach(), self.mask.copy())


# ----------------------------------------------------------------------
# Positional encodings
# ----------------------------------------------------------------------
def positional_encoding_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal encoding: ``[2i] = sin(p / 10000^(2i/dim))``, ``[2i+1] = cos(...)``."""

    positions = np.asarray(positions, dtype=np.float64)
    freqs = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions[..., None] / freqs
    out = np.empty(positions.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def positional_encoding_2d(h0: int, w0: int, d: int) -> np.ndarray:
    """Image positional encoding of shape ``[h₀×w₀×d]``.

    Coordinates are normalised to ``x/w₀`` and ``y/h₀``; the first ``d/2``
    channels encode the column, the last ``d/2`` the row.

    Raises
    ------
    ConfigError
        If ``d`` is not divisible by 4.
    """

    if d % 4:
        raise ConfigError(f"2-D positional encoding needs d divisible by 4, got {d}.")
    x_enc = positional_encoding_1d(np.arange(w0) / w0, d // 2)
    y_enc = positional_encoding_1d(np.arange(h0) / h0, d // 2)
    grid = np.empty((h0, w0, d), dtype=np.float64)
    grid[:, :, : d // 2] = x_enc[None, :, :]
    grid[:, :, d // 2 :] = y_enc[:, None, :]
    return grid


# ----------------------------------------------------------------------
# Network blocks
# ----------------------------------------------------------------------
class DenseLayer(Module):
    """``H_l``: 3×3 conv → ReLU → batch-norm, then dropout in training."""

    def __init__(self, in_channels: int, growth_rate: int, dropout: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, growth_rate, 3, rng, bias=False)
        self.norm = BatchNorm(growth_rate)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(self.norm(T.relu(self.conv(x))))


class DenseBlock(Module):
    """``D`` dense layers; every layer sees the concatenation of all earlier outputs."""

    def __init__(self, in_channels: int, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.layers: List[DenseLayer] = [
            DenseLayer(in_channels + i * cfg.growth_rate, cfg.growth_rate, cfg.dropout, rng)
            for i in range(cfg.layers_per_block)
        ]
        self.out_channels = in_channels + cfg.layers_per_block * cfg.growth_rate

    def forward(self, x: Tensor) -> Tensor:
        features = x
        for layer in self.layers:
            features = T.concat([features, layer(features)], axis=-3)
        return features


def dense_block(x: Tensor, block: DenseBlock) -> Tensor:
    """Run ``block`` on ``x`` (``C×H×W`` or ``N×C×H×W``) → ``C + D·k`` channels."""

    return block(x)


class Transition(Module):
    """1×1 conv to ``⌊θC⌋`` channels then 2×2 average pooling."""

    def __init__(self, in_channels: int, theta: float, rng: np.random.Generator) -> None:
        super().__init__()
        if in_channels < 2:
            raise ConfigError(f"transition needs at least 2 input channels, got {in_channels}.")
        self.out_channels = max(1, int(math.floor(theta * in_channels)))
        self.conv = Conv2d(in_channels, self.out_channels, 1, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.avg_pool2d(self.conv(x))


def transition(x: Tensor, layer: Transition) -> Tensor:
    return layer(x)


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """2×2 max-pool (ceil mode) of a boolean mask: a window is valid if any pixel is."""

    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape[-2:]
    pad = [(0, 0)] * (mask.ndim - 2) + [(0, height % 2), (0, width % 2)]
    padded = np.pad(mask, pad, constant_values=False)
    h2, w2 = padded.shape[-2] // 2, padded.shape[-1] // 2
    blocks = padded.reshape(padded.shape[:-2] + (h2, 2, w2, 2))
    return blocks.any(axis=(-3, -1))


class Encoder(Module):
    """Stem, dense blocks with transitions between, and a 1×1 projection to ``d``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        channels = cfg.stem_width
        self.stem = Conv2d(1, channels, 7, rng, stride=2, padding=3, bias=False)
        self.stem_norm = BatchNorm(channels)
        self.blocks: List[DenseBlock] = []
        self.transitions: List[Transition] = []
        for b in range(cfg.num_blocks):
            block = DenseBlock(channels, cfg, rng)
            self.blocks.append(block)
            channels = block.out_channels
            if b != cfg.num_blocks - 1:
                trans = Transition(channels, cfg.transition_theta, rng)
                self.transitions.append(trans)
                channels = trans.out_channels
        self.out_norm = BatchNorm(channels)
        self.project = Conv2d(channels, cfg.out_dim, 1, rng)
        self.feature_channels = channels

    def forward(self, images: Tensor, mask: np.ndarray | None = None) -> FeatureGrid:
        return encode(images, self, mask)


def encode(image, encoder: Encoder, mask: np.ndarray | None = None) -> FeatureGrid:
    """Encode ``image`` (``1×H×W`` or ``N×1×H×W``, values in ``[0, 1]``).

    Pixels outside ``mask`` are zeroed first; the mask is reduced alongside
    every spatial reduction and positional encoding is added at the end.

    Raises
    ------
    InputError
        If the image is smaller than the total downsampling factor.
    """

    image = T.as_tensor(image)
    single = image.ndim == 3
    if single:
        image = image.reshape((1,) + image.shape)
    if image.ndim != 4 or image.shape[1] != 1:
        raise InputError(f"Expected a grayscale 1×H×W or N×1×H×W image, got shape {image.shape}.")
    n, _, height, width = image.shape
    factor = encoder.cfg.downsample_factor
    if height < factor or width < factor:
        raise InputError(f"Image of size {height}×{width} is smaller than the downsampling factor {factor}.")

    if mask is None:
        mask = np.ones((n, height, width), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(n, height, width)
        image = T.mul(image, mask[:, None, :, :].astype(image.dtype))

    x = T.relu(encoder.stem_norm(encoder.stem(image)))
    x = T.max_pool2d(x)
    mask = downsample_mask(downsample_mask(mask))
    for b, block in enumerate(encoder.blocks):
        x = dense_block(x, block)
        if b < len(encoder.transitions):
            x = transition(x, encoder.transitions[b])
            mask = downsample_mask(mask)
    x = encoder.project(T.relu(encoder.out_norm(x)))

    _, d, h0, w0 = x.shape
    pos = positional_encoding_2d(h0, w0, d).astype(x.dtype)
    features = T.add(T.transpose(x, (0, 2, 3, 1)), pos)
    logger.debug("encoded %d image(s) of %dx%d to a %dx%d grid", n, height, width, h0, w0)
    if single:
        return FeatureGrid(features[0], mask[0])
    return FeatureGrid(features, mask)
