"""Encoder + decoder assembly for the seven segmentation models."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .decoder import PUPDecoder, reshape_tokens
from .encoders import build_encoder
from .nn import Module
from .tensor import Tensor


class SegmentationModel(Module):
    """``(N, 3, H, W)`` images -> ``(N, num_classes, H, W)`` logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder_config(), rng, zero_init)
        self.decoder = PUPDecoder(cfg.decoder_config(), rng)

    def forward(self, images: Tensor) -> Tensor:
        tokens = self.encoder(images)
        return self.decoder(reshape_tokens(tokens, self.cfg.decoder_config().grid))

    def predict(self, images: Tensor) -> np.ndarray:
        return self.forward(images).data.argmax(axis=1)


def build_model(cfg: ModelConfig, seed: int = 0, zero_init: bool = False) -> SegmentationModel:
    """Deterministically initialise a model in the current precision mode."""
    return SegmentationModel(cfg, np.random.default_rng(seed), zero_init)
