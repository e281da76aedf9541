"""Progressive-upsampling decoder with channel halving.

Each stage runs ``convs_per_stage`` 3x3 conv + batch-norm + ReLU units at
the stage's input resolution (the first halves the width), then upsamples
2x bilinearly. A 1x1 conv with bias produces the class logits. For
``in_dim=768`` the widths are 768 -> 384 -> 192 -> 96 -> 48 -> classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    in_dim: int
    grid: int
    stages: int = 4
    num_classes: int = 4
    convs_per_stage: int = 2

    def __post_init__(self):
        if self.stages < 1 or self.convs_per_stage < 1 or self.grid < 1:
            raise ConfigurationError("decoder needs stages >= 1, convs_per_stage >= 1, grid >= 1")
        if self.in_dim % (2**self.stages):
            raise ConfigurationError(f"in_dim {self.in_dim} not divisible by 2^{self.stages}")
        if self.widths()[-1] < self.num_classes:
            raise ConfigurationError(
                f"terminal width {self.widths()[-1]} is below num_classes {self.num_classes}"
            )

    def widths(self) -> list[int]:
        return [self.in_dim >> s for s in range(self.stages + 1)]

    @property
    def out_size(self) -> int:
        return self.grid * 2**self.stages


def reshape_tokens(tokens: Tensor, grid: int) -> Tensor:
    """``(N, n, C)`` -> ``(N, C, grid, grid)``; token ``i`` lands at ``(i // grid, i % grid)``.

    An unbatched ``(n, C)`` input gives ``(C, grid, grid)``.
    """
    if tokens.ndim == 2:
        return reshape_tokens(tokens.reshape(1, *tokens.shape), grid).reshape(tokens.shape[1], grid, grid)
    n, seq, c = tokens.shape
    if seq != grid * grid:
        raise DimensionError(f"{seq} tokens cannot fill a {grid}x{grid} grid")
    return tokens.transpose(0, 2, 1).reshape(n, c, grid, grid)


def flatten_grid(feat: Tensor) -> Tensor:
    """Inverse of :func:`reshape_tokens`."""
    if feat.ndim == 3:
        c, g, _ = feat.shape
        return feat.reshape(c, g * g).transpose(1, 0)
    n, c, h, w = feat.shape
    return feat.reshape(n, c, h * w).transpose(0, 2, 1)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class PUPDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.stages = []
        for s in range(cfg.stages):
            units = [ConvBNReLU(widths[s], widths[s + 1], rng)]
            units += [ConvBNReLU(widths[s + 1], widths[s + 1], rng) for _ in range(cfg.convs_per_stage - 1)]
            self.stages.append(units)
        self.classifier = Conv2d(widths[-1], cfg.num_classes, 1, rng)

    def _children(self):
        for s, units in enumerate(self.stages):
            for u, unit in enumerate(units):
                yield f"stages.{s}.{u}", unit
        yield "classifier", self.classifier

    def forward(self, feat: Tensor) -> Tensor:
        unbatched = feat.ndim == 3
        x = feat.reshape(1, *feat.shape) if unbatched else feat
        if x.shape[1] != self.cfg.in_dim:
            raise DimensionError(f"decoder expects {self.cfg.in_dim} channels, got {x.shape[1]}")
        for units in self.stages:
            for unit in units:
                x = unit(x)
            x = T.upsample_bilinear_2x(x)
        x = self.classifier(x)
        return x.reshape(*x.shape[1:]) if unbatched else x


def pup_decode(feat: Tensor, decoder: PUPDecoder) -> Tensor:
    return decoder(feat)
