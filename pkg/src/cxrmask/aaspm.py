"""Activation-mask penalties: coverage bound, central-point repulsion and
the bidirectional activation minimisation loss (BAML).

All functions accept a single mask (``H x W`` or ``1 x H x W``) or a batch
(``N x 1 x H x W``).  Per-image values are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from cxrmask.errors import InvalidArgumentError
from cxrmask.phantom import Domain

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class MaskPenaltyConfig:
    f_upper: float = 0.75
    f_central: float = 0.1
    f_height: float = 0.2
    epsilon: float = 0.01
    # "sum" restores the literal per-pixel sums; "mean" keeps the constants
    # resolution independent.
    reduction: str = "mean"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError("epsilon must be > 0")
        if not 0 < self.f_upper <= 1:
            raise InvalidArgumentError("f_upper must lie in (0, 1]")
        if not 0 <= self.f_central <= 1:
            raise InvalidArgumentError("f_central must lie in [0, 1]")
        if not self.f_height > 0:
            raise InvalidArgumentError("f_height must be > 0")
        if self.reduction not in REDUCTIONS:
            raise InvalidArgumentError(f"reduction must be one of {REDUCTIONS}")


def _per_image(mask01: torch.Tensor) -> torch.Tensor:
    # -> (N, P) view with one row per image
    if mask01.dim() <= 3:
        return mask01.reshape(1, -1)
    return mask01.reshape(mask01.shape[0], -1)


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    return values.mean(dim=1) if reduction == "mean" else values.sum(dim=1)


def upper_bound_penalty(mask01: torch.Tensor, f_upper: float = 0.75, reduction: str = "mean") -> torch.Tensor:
    """Squared excess of mask coverage above ``f_upper``; zero at or below it."""
    if mask01.numel() == 0:
        raise InvalidArgumentError("upper_bound_penalty of an empty mask")
    coverage = _reduce(_per_image(mask01), reduction)
    return (torch.relu(coverage - f_upper) ** 2).mean()


def central_repulsion_penalty(mask01: torch.Tensor, f_central: float = 0.1, f_height: float = 0.2,
                              epsilon: float = 0.01, reduction: str = "mean") -> torch.Tensor:
    """Penalty that peaks when pixels sit at ``f_central`` and decays with distance."""
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be > 0")
    terms = (1.0 / ((_per_image(mask01) - f_central).abs() + epsilon)) ** f_height
    return _reduce(terms, reduction).mean()


def bam_loss(mask01: torch.Tensor, domain_label: Domain,
             output_domain: Domain = Domain.NON_OPACITY) -> torch.Tensor:
    """Sum of |mask| when the input already lies in the generator's output domain.

    For generator A the output domain is NonOpacity; pass
    ``output_domain=Domain.OPACITY`` for generator B.
    """
    if Domain(domain_label) is Domain(output_domain):
        return mask01.abs().sum()
    return mask01.sum() * 0.0


def bam_loss_batch(masks01: torch.Tensor, labels: Sequence[Domain],
                   output_domain: Domain = Domain.NON_OPACITY) -> torch.Tensor:
    """Average of :func:`bam_loss` over the intra-domain items of a batch.

    Returns zero (still attached to the graph) when no item is intra-domain.
    """
    if len(labels) != masks01.shape[0]:
        raise InvalidArgumentError("one label per mask required")
    active = [i for i, lab in enumerate(labels) if Domain(lab) is Domain(output_domain)]
    if not active:
        return masks01.sum() * 0.0
    idx = torch.tensor(active, dtype=torch.long)
    return masks01.index_select(0, idx).abs().flatten(1).sum(dim=1).mean()


def mask_penalties(mask01: torch.Tensor, config: MaskPenaltyConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """``(upper, repulsion)`` for a mask under ``config``."""
    upper = upper_bound_penalty(mask01, config.f_upper, config.reduction)
    repul = central_repulsion_penalty(mask01, config.f_central, config.f_height, config.epsilon, config.reduction)
    return upper, repul
