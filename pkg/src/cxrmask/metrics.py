"""Evaluation metrics: FID, KID, segmentation overlap, classification scores
and mask-localization AUC.

Everything here works on numpy arrays; embeddings come from a pluggable
adapter (see :class:`RandomProjectionEmbedding` for the desk-scale one).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from cxrmask.errors import InvalidArgumentError, UndefinedMetricError


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # N x d
    provenance: str = "unknown"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise InvalidArgumentError(f"embeddings must be N x d, got shape {v.shape}")
        self.vectors = v

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def _as_set(x) -> EmbeddingSet:
    return x if isinstance(x, EmbeddingSet) else EmbeddingSet(x)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a, b) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    The trace of ``(S_a S_b)^{1/2}`` is computed as the trace of the PSD
    square root of ``S_a^{1/2} S_b S_a^{1/2}``, which is symmetric and so
    admits an eigendecomposition with negative eigenvalues clipped to 0.
    """
    a, b = _as_set(a), _as_set(b)
    if a.dim != b.dim:
        raise InvalidArgumentError(f"embedding dims differ: {a.dim} vs {b.dim}")
    if len(a) < 2 or len(b) < 2:
        raise InvalidArgumentError("FID needs at least 2 samples per set")
    mu_a, mu_b = a.vectors.mean(0), b.vectors.mean(0)
    cov_a = np.atleast_2d(np.cov(a.vectors, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.vectors, rowvar=False))
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_covmean = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean
    return float(max(value, 0.0))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise InvalidArgumentError("unbiased MMD needs at least 2 samples per set")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid(a, b, subset_size: int = 100, n_subsets: int = 100, seed: int = 0) -> tuple[float, float]:
    """Kernel distance as ``(mean, std)`` of unbiased MMD^2 over random subsets.

    Subsets are drawn without replacement independently from each set; the
    spread is the population standard deviation across subsets.
    """
    a, b = _as_set(a), _as_set(b)
    if a.dim != b.dim:
        raise InvalidArgumentError(f"embedding dims differ: {a.dim} vs {b.dim}")
    if n_subsets < 1:
        raise InvalidArgumentError("n_subsets must be >= 1")
    if subset_size < 2 or subset_size > min(len(a), len(b)):
        raise InvalidArgumentError(
            f"subset_size {subset_size} must lie in [2, {min(len(a), len(b))}]"
        )
    rng = np.random.default_rng(seed)
    vals = np.empty(n_subsets)
    for i in range(n_subsets):
        ia = rng.choice(len(a), subset_size, replace=False)
        ib = rng.choice(len(b), subset_size, replace=False)
        vals[i] = mmd2_unbiased(a.vectors[ia], b.vectors[ib])
    return float(vals.mean()), float(vals.std())


class RandomProjectionEmbedding:
    """Seeded stand-in for an Inception-style embedding.

    Images are area-pooled to ``pool x pool``, flattened and passed through
    a fixed random two-layer projection with a ReLU in between.
    """

    def __init__(self, dim: int = 32, pool: int = 16, hidden: int = 128, seed: int = 0, in_channels: int = 1):
        rng = np.random.default_rng(seed)
        n_in = in_channels * pool * pool
        self.pool = pool
        self.dim = dim
        self.seed = seed
        self.w1 = rng.normal(size=(n_in, hidden)) / np.sqrt(n_in)
        self.w2 = rng.normal(size=(hidden, dim)) / np.sqrt(hidden)

    @property
    def provenance(self):
        return f"random-projection(dim={self.dim}, pool={self.pool}, seed={self.seed})"

    def __call__(self, images) -> EmbeddingSet:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float64)
        if x.dim() == 3:
            x = x.unsqueeze(1)
        pooled = F.adaptive_avg_pool2d(x, self.pool).reshape(x.shape[0], -1).numpy()
        hidden = np.maximum(pooled @ self.w1, 0.0)
        return EmbeddingSet(hidden @ self.w2, self.provenance)


# --- segmentation ---------------------------------------------------------


def _binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if np.issubdtype(arr.dtype, np.integer) and arr.size and arr.max() <= 1 and arr.min() >= 0:
        return arr.astype(bool)
    return arr >= 0.5


def _check_same_shape(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise InvalidArgumentError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")


def iou_per_class(pred, gt) -> dict[str, float | None]:
    """IoU for foreground and background; ``None`` where the union is empty."""
    _check_same_shape(pred, gt)
    p, g = _binary(pred), _binary(gt)
    out = {}
    for name, pc, gc in (("foreground", p, g), ("background", ~p, ~g)):
        union = np.logical_or(pc, gc).sum()
        out[name] = None if union == 0 else float(np.logical_and(pc, gc).sum() / union)
    return out


def miou(pred, gt) -> float:
    """Mean IoU over {foreground, background}, skipping classes absent from both masks.

    Soft masks are binarized at 0.5.
    """
    vals = [v for v in iou_per_class(pred, gt).values() if v is not None]
    return float(np.mean(vals))


def sensitivity(pred, gt) -> float:
    _check_same_shape(pred, gt)
    p, g = _binary(pred), _binary(gt)
    positives = g.sum()
    if positives == 0:
        raise UndefinedMetricError("sensitivity undefined: ground truth has no foreground")
    return float(np.logical_and(p, g).sum() / positives)


# --- classification -------------------------------------------------------


@dataclass
class ClassificationScores:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: list[str] = field(default_factory=list)


def classification_metrics(pred_labels, true_labels) -> ClassificationScores:
    """Confusion-matrix scores; undefined ratios are ``None`` and listed in ``undefined``."""
    p = np.asarray(pred_labels).astype(bool).ravel()
    t = np.asarray(true_labels).astype(bool).ravel()
    if p.shape != t.shape:
        raise InvalidArgumentError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise InvalidArgumentError("empty label vectors")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    undefined = []
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None:
        undefined.append("precision")
    if recall is None:
        undefined.append("recall")
    if precision is None or recall is None:
        f1 = None
        undefined.append("f1")
    else:
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ClassificationScores((tp + tn) / p.size, precision, recall, f1, tp, fp, fn, tn, undefined)


# --- mask interpretability ------------------------------------------------


def mask_localization_auc(mask01, gt_opacity_mask) -> float:
    """ROC AUC of mask values as a per-pixel detector of ground-truth foreground.

    Ties count one half (Mann-Whitney with average ranks), so a constant
    mask scores exactly 0.5.
    """
    _check_same_shape(mask01, gt_opacity_mask)
    scores = np.asarray(mask01, dtype=np.float64).ravel()
    gt = _binary(gt_opacity_mask).ravel()
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: ground truth has a single class")
    ranks = rankdata(scores)
    u = ranks[gt].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
