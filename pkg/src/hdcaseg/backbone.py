"""Small dilated CNN producing a 1/8-resolution feature map and its reduced companion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ConvBNReLU, Module
from .tensor import Tensor


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    out_channels: int = 64
    reduced_channels: int = 32
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4])

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.dilations = list(self.dilations)
        if len(self.stage_channels) != len(self.dilations):
            raise ValueError("stage_channels and dilations must have the same length")
        if not self.stage_channels:
            raise ValueError("need at least one stage")
        if self.reduced_channels >= self.out_channels:
            raise ValueError(f"reduced_channels ({self.reduced_channels}) must be smaller "
                             f"than out_channels ({self.out_channels})")


class Backbone(Module):
    """Three stride-2 convs to 1/8 scale, then constant-stride dilated stages.

    With the default config that is ten conv-bn-relu blocks:

        stem (3 -> 16, /2), down (16 -> 16, /2), down (16 -> 16, /2),
        2 x d1 (16), 2 x d2 (32), 2 x d4 (64), 1x1 projection to C.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        c0 = config.stage_channels[0]
        blocks = [
            ("stem", ConvBNReLU(rng, 3, config.stem_channels, 3, stride=2, dtype=dtype)),
            ("down1", ConvBNReLU(rng, config.stem_channels, c0, 3, stride=2, dtype=dtype)),
            ("down2", ConvBNReLU(rng, c0, c0, 3, stride=2, dtype=dtype)),
        ]
        prev = c0
        for i, (ch, dil) in enumerate(zip(config.stage_channels, config.dilations)):
            blocks.append((f"stage{i}a", ConvBNReLU(rng, prev, ch, 3, dilation=dil, dtype=dtype)))
            blocks.append((f"stage{i}b", ConvBNReLU(rng, ch, ch, 3, dilation=dil, dtype=dtype)))
            prev = ch
        blocks.append(("proj", ConvBNReLU(rng, prev, config.out_channels, 1, dtype=dtype)))
        self.blocks = blocks
        self.reduce = ConvBNReLU(rng, config.out_channels, config.reduced_channels, 1, dtype=dtype)
        for name, block in blocks:
            self.children[name] = block
        self.children["reduce"] = self.reduce

    def __call__(self, images: Tensor, training: bool = False) -> Tensor:
        return backbone_forward(self, images, training)


def backbone_forward(backbone: Backbone, images: Tensor, training: bool = False) -> Tensor:
    """(B, 3, H, W) or (3, H, W) image -> (.., C, ceil(H/8), ceil(W/8)) features."""
    if images.ndim not in (3, 4) or images.shape[-3] != 3:
        raise ValueError(f"backbone expects 3-channel images, got shape {images.shape}")
    x = images
    for _, block in backbone.blocks:
        x = block(x, training)
    return x


def reduce_features(backbone: Backbone, x: Tensor, training: bool = False) -> Tensor:
    """1x1 conv -> norm -> relu from C to C' channels at unchanged resolution."""
    return backbone.reduce(x, training)
