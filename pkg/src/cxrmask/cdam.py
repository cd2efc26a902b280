"""Cross-domain alignment against a frozen classifier prior.

The prior is split into a feature extractor (``features``) and a prediction
head (``head``).  Feature alignment compares instance-normalized features
(structure) and Gram matrices (style); label alignment asks the prior to
predict the selected source-positive labels as absent after translation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cxrmask.errors import InvalidArgumentError, ShapeError
from cxrmask.phantom import DatasetHandle, Domain, collate

logger = logging.getLogger(__name__)

IN_EPS = 1e-5
BCE_CLAMP = 1e-6

# Label set of a 14-label CheXpert-style prior and its opacity-associated subset.
CHEXPERT_LABELS = (
    "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity", "Lung Lesion", "Edema",
    "Consolidation", "Pneumonia", "Atelectasis", "Pneumothorax", "Pleural Effusion", "Pleural Other",
    "Fracture", "Support Devices",
)
OPACITY_ASSOCIATED_LABELS = ("Atelectasis", "Consolidation", "Edema", "Pneumonia", "Lung Opacity", "Pleural Effusion")
PHANTOM_LABELS = ("Opacity", "NoFinding")


class ClassifierPrior(nn.Module):
    """Frozen classifier split as ``head(features(x))``.

    Subclasses (or adapters wrapping an external network) implement
    :meth:`features` and :meth:`head`; inputs are resized to
    ``input_size`` before feature extraction.
    """

    input_size: int | None = None
    label_names: tuple[str, ...] = ()

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def head(self, feat: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _resize(self, x):
        if self.input_size is not None and tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        return x

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.features(self._resize(x))
        return feat, self.head(feat)

    def freeze(self) -> "ClassifierPrior":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


class PhantomClassifier(ClassifierPrior):
    """Small convolutional prior for 64x64 phantoms: features ``C x 8 x 8``."""

    label_names = PHANTOM_LABELS

    def __init__(self, width: int = 16, input_size: int = 64, seed: int = 0):
        super().__init__()
        self.input_size = input_size
        self.width = width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            w = width
            self.body = nn.Sequential(
                nn.Conv2d(1, w, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            )
            self.fc = nn.Linear(2 * w, len(self.label_names))

    def features(self, x):
        return self.body(x)

    def head(self, feat):
        return torch.sigmoid(self.fc(feat.mean(dim=(-2, -1))))


def phantom_targets(domains) -> torch.Tensor:
    op = torch.tensor([1.0 if Domain(d) is Domain.OPACITY else 0.0 for d in domains])
    return torch.stack([op, 1.0 - op], dim=1)


def train_prior(opacity: DatasetHandle, clear: DatasetHandle, val_opacity: DatasetHandle,
                val_clear: DatasetHandle, seed: int = 0, width: int = 16, input_size: int = 64,
                target_accuracy: float = 0.95, max_epochs: int = 40, lr: float = 2e-3,
                batch_size: int = 32) -> tuple[PhantomClassifier, float]:
    """Fit a :class:`PhantomClassifier` on opacity-present labels, then freeze it.

    Training stops once validation accuracy on the opacity label reaches
    ``target_accuracy``.  Returns ``(prior, val_accuracy)``.
    """
    model = PhantomClassifier(width=width, input_size=input_size, seed=seed)
    items = list(opacity) + list(clear)
    x = collate(items)
    y = phantom_targets([it.domain_label for it in items])
    val_items = list(val_opacity) + list(val_clear)
    vx = collate(val_items)
    vy = phantom_targets([it.domain_label for it in val_items])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    acc = 0.0
    for epoch in range(max_epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(items)))
        for start in range(0, len(items), batch_size):
            idx = order[start:start + batch_size]
            _, probs = model(x[idx])
            loss = F.binary_cross_entropy(probs, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            _, vp = model(vx)
        acc = float(((vp[:, 0] > 0.5).float() == vy[:, 0]).float().mean())
        logger.info("prior epoch %d: val accuracy %.4f", epoch, acc)
        if acc >= target_accuracy:
            break
    return model.freeze(), acc


# --- feature-level alignment ----------------------------------------------


def instance_norm(feat: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    """Standardize each channel over its spatial positions (biased variance)."""
    if feat.shape[-1] * feat.shape[-2] < 2:
        raise ShapeError("instance_norm needs at least 2 spatial positions")
    mean = feat.mean(dim=(-2, -1), keepdim=True)
    var = feat.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (feat - mean) / torch.sqrt(var + eps)


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C h w)`` with ``F`` the ``C x hw`` flattening; batched over leading dims."""
    c, h, w = feat.shape[-3:]
    flat = feat.reshape(*feat.shape[:-3], c, h * w)
    return flat @ flat.transpose(-1, -2) / (c * h * w)


def structural_loss(feat_translated, feat_source):
    return ((instance_norm(feat_translated) - instance_norm(feat_source)) ** 2).mean()


def style_loss(feat_translated, feat_source):
    return ((gram_matrix(feat_translated) - gram_matrix(feat_source)) ** 2).mean()


def feature_alignment_loss(feat_translated: torch.Tensor, feat_source: torch.Tensor,
                           lambda_style: float = 0.5) -> torch.Tensor:
    if feat_translated.shape != feat_source.shape:
        raise ShapeError(
            f"feature shapes differ: {tuple(feat_translated.shape)} vs {tuple(feat_source.shape)}"
        )
    return lambda_style * style_loss(feat_translated, feat_source) + structural_loss(feat_translated, feat_source)


# --- label-consistency alignment ------------------------------------------


@dataclass
class LabelFilter:
    q: list = field(default_factory=lambda: [1, 0])
    threshold: float = 0.5

    def __post_init__(self):
        if any(v not in (0, 1) for v in self.q):
            raise InvalidArgumentError(f"label filter must be binary, got {self.q}")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidArgumentError(f"threshold p must lie in (0, 1), got {self.threshold}")

    @classmethod
    def from_names(cls, label_names, selected, threshold=0.5):
        return cls([1 if n in selected else 0 for n in label_names], threshold)

    def as_tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.tensor(self.q, dtype=like.dtype)


def label_consistency_loss(probs_translated: torch.Tensor, probs_source: torch.Tensor,
                           label_filter: LabelFilter, enabled: bool = True,
                           hard_inversion: bool = False) -> torch.Tensor:
    """BCE between inverted translated predictions and thresholded source labels.

    Targets are ``1(source > p)`` on the selected labels.  By default the
    translated probabilities are inverted softly (``1 - prob``) so gradients
    reach the generator; ``hard_inversion`` thresholds them first instead.
    Averaged over selected labels (and batch items).
    """
    q = label_filter.as_tensor(probs_translated)
    if not enabled:
        return probs_translated.sum() * 0.0
    if q.sum() == 0:
        raise InvalidArgumentError("label filter selects no labels")
    if probs_translated.shape != probs_source.shape:
        raise ShapeError("probability vectors differ in shape")
    target = (probs_source.detach() > label_filter.threshold).to(probs_translated.dtype)
    if hard_inversion:
        inverted = 1.0 - (probs_translated > label_filter.threshold).to(probs_translated.dtype)
    else:
        inverted = 1.0 - probs_translated
    inverted = inverted.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(target * torch.log(inverted) + (1.0 - target) * torch.log(1.0 - inverted))
    sel = q.bool()
    return bce[..., sel].mean()
