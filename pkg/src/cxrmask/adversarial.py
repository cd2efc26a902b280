"""Patch discriminators, adversarial losses and cycle reconstruction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from cxrmask.errors import InvalidArgumentError, ShapeError
from cxrmask.phantom import Domain

LOSS_FORMS = ("least_squares", "hinge")


@dataclass(frozen=True)
class DiscriminatorConfig:
    width: int = 32
    n_blocks: int = 3
    seed: int = 0


class PatchDiscriminator(nn.Module):
    """Stride-2 conv critic; each block halves the spatial size."""

    def __init__(self, config: DiscriminatorConfig, domain: Domain, in_channels: int = 1):
        super().__init__()
        if config.n_blocks < 1 or config.width < 1:
            raise InvalidArgumentError("discriminator needs n_blocks >= 1 and width >= 1")
        self.config = config
        self.domain = Domain(domain)
        layers, ch = [], in_channels
        for i in range(config.n_blocks):
            out = config.width * 2**i
            layers.append(nn.Conv2d(ch, out, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(out, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            ch = out
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        stride = 2**self.config.n_blocks
        if x.shape[-1] % stride or x.shape[-2] % stride:
            raise ShapeError(f"discriminator input {tuple(x.shape[-2:])} not divisible by {stride}")
        squeeze = x.dim() == 3
        out = self.net(x.unsqueeze(0) if squeeze else x)
        return out[0] if squeeze else out

    def header(self) -> dict:
        return {"config": asdict(self.config), "domain": self.domain.value}


def init_discriminator(config: DiscriminatorConfig, domain: Domain) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return PatchDiscriminator(config, domain)


def discriminator_forward(params: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    return params(image)


def adv_loss_generator(scores_fake: torch.Tensor, form: str = "least_squares") -> torch.Tensor:
    if form == "least_squares":
        return ((scores_fake - 1.0) ** 2).mean()
    if form == "hinge":
        return -scores_fake.mean()
    raise InvalidArgumentError(f"unknown adversarial loss form {form!r}")


def adv_loss_discriminator(scores_real: torch.Tensor, scores_fake: torch.Tensor,
                           form: str = "least_squares") -> torch.Tensor:
    if form == "least_squares":
        return 0.5 * ((scores_real - 1.0) ** 2).mean() + 0.5 * (scores_fake**2).mean()
    if form == "hinge":
        return torch.relu(1.0 - scores_real).mean() + torch.relu(1.0 + scores_fake).mean()
    raise InvalidArgumentError(f"unknown adversarial loss form {form!r}")


def cycle_reconstruction_loss(original: torch.Tensor, cycled: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its round trip."""
    if original.shape != cycled.shape:
        raise ShapeError(f"cycle loss shape mismatch: {tuple(original.shape)} vs {tuple(cycled.shape)}")
    return (original - cycled).abs().mean()
