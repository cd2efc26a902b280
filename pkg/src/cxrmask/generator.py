"""Dual-head generator, mask normalization and mask-guided blending."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from cxrmask.errors import InvalidArgumentError, ShapeError


class Direction(str, enum.Enum):
    A = "A"  # Opacity -> NonOpacity
    B = "B"  # NonOpacity -> Opacity


@dataclass(frozen=True)
class GeneratorConfig:
    width: int = 32
    depth: int = 2
    n_res: int = 2
    seed: int = 0

    def validate(self):
        if self.width < 8:
            raise InvalidArgumentError(f"generator width must be >= 8, got {self.width}")
        if self.depth < 1:
            raise InvalidArgumentError(f"generator depth must be >= 1, got {self.depth}")
        if self.n_res < 0:
            raise InvalidArgumentError("n_res must be >= 0")


class GeneratorOutput(NamedTuple):
    synth_image: torch.Tensor
    raw_mask: torch.Tensor


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=True)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), _norm(ch), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1), _norm(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class MaskGenerator(nn.Module):
    """Residual encoder-decoder with sibling image and mask heads.

    Both heads are 1-channel and tanh-bounded, so the raw mask lives in
    [-1, 1] and must be mapped to [0, 1] before blending.
    """

    def __init__(self, config: GeneratorConfig, direction: Direction = Direction.A, in_channels: int = 1):
        super().__init__()
        config.validate()
        self.config = config
        self.direction = Direction(direction)
        w = config.width
        layers = [nn.Conv2d(in_channels, w, 3, padding=1), _norm(w), nn.ReLU(inplace=True)]
        ch = w
        for _ in range(config.depth):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(ch * 2), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResBlock(ch) for _ in range(config.n_res)]
        for _ in range(config.depth):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1), _norm(ch // 2), nn.ReLU(inplace=True),
            ]
            ch //= 2
        self.trunk = nn.Sequential(*layers)
        self.image_head = nn.Conv2d(ch, in_channels, 3, padding=1)
        self.mask_head = nn.Conv2d(ch, 1, 3, padding=1)

    @property
    def stride(self) -> int:
        return 2 ** self.config.depth

    def check_shape(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} not divisible by {self.stride} (depth {self.config.depth})")

    def forward(self, x: torch.Tensor) -> GeneratorOutput:
        self.check_shape(x)
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h = self.trunk(x)
        out = GeneratorOutput(torch.tanh(self.image_head(h)), torch.tanh(self.mask_head(h)))
        if squeeze:
            out = GeneratorOutput(out.synth_image[0], out.raw_mask[0])
        return out

    def header(self) -> dict:
        return {"config": asdict(self.config), "direction": self.direction.value}


def init_generator(config: GeneratorConfig, direction: Direction = Direction.A) -> MaskGenerator:
    """Build a generator whose initial weights depend only on ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return MaskGenerator(config, direction)


def generator_forward(params: MaskGenerator, image: torch.Tensor) -> GeneratorOutput:
    return params(image)


def normalize_mask(raw_mask: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Map a tanh-bounded mask from [-1, 1] to [0, 1] with a fixed affine map."""
    if check:
        with torch.no_grad():
            if raw_mask.numel() and (raw_mask.min() < -1.0 or raw_mask.max() > 1.0):
                raise InvalidArgumentError("raw mask values must lie in [-1, 1]")
    return (raw_mask + 1.0) / 2.0


def blend(synth_image: torch.Tensor, mask01: torch.Tensor, source_image: torch.Tensor) -> torch.Tensor:
    """Per-pixel convex combination: mask 1 keeps the synthesized pixel, 0 the source."""
    if synth_image.shape != source_image.shape or mask01.shape[-2:] != synth_image.shape[-2:]:
        raise ShapeError(
            f"blend shape mismatch: synth {tuple(synth_image.shape)}, mask {tuple(mask01.shape)}, "
            f"source {tuple(source_image.shape)}"
        )
    return synth_image * mask01 + (1.0 - mask01) * source_image


def translate(params: MaskGenerator, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward, normalize and blend; returns ``(translated, mask01)``."""
    out = params(image)
    mask01 = normalize_mask(out.raw_mask, check=False)
    return blend(out.synth_image, mask01, image), mask01
