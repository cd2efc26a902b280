"""Glue between config, data, prior, trainer and metrics used by the CLI and
the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from cxrmask import metrics
from cxrmask.cdam import PhantomClassifier, train_prior
from cxrmask.config import RunConfig
from cxrmask.errors import ConfigError, DataIOError
from cxrmask.generator import MaskGenerator, translate
from cxrmask.phantom import (
    DatasetHandle,
    Domain,
    PhantomDataset,
    collate,
    derive_seed,
    load_domain_dir,
    manifest_datasets,
)
from cxrmask.trainer import BatchStream, build_state, fit

logger = logging.getLogger(__name__)

# Sub-seed tags keep every phantom split disjoint.
_TRAIN, _PRIOR_TRAIN, _PRIOR_VAL, _HOLDOUT = 10, 11, 12, 30
PRIOR_SET_SIZE = 512
PRIOR_VAL_SIZE = 128


@dataclass
class DomainPair:
    opacity: DatasetHandle
    nonopacity: DatasetHandle


def phantom_pair(config: RunConfig, tag: int, n: int) -> DomainPair:
    d = config.data
    seed = derive_seed(config.seed, tag)
    return DomainPair(
        PhantomDataset(Domain.OPACITY, n, seed, d.image_size, d.max_opacities),
        PhantomDataset(Domain.NON_OPACITY, n, seed, d.image_size, d.max_opacities),
    )


def training_data(config: RunConfig) -> DomainPair:
    d = config.data
    if d.source == "phantom":
        return phantom_pair(config, _TRAIN, d.n_train)
    if d.source == "manifest":
        if not d.manifest:
            raise ConfigError("data.source = manifest requires data.manifest")
        handles = manifest_datasets(d.manifest)
        missing = [dom.value for dom in Domain if dom not in handles]
        if missing:
            raise DataIOError(f"manifest {d.manifest} has no images for {missing}")
        return DomainPair(handles[Domain.OPACITY], handles[Domain.NON_OPACITY])
    if not d.opacity_dir or not d.nonopacity_dir:
        raise ConfigError("data.source = dirs requires data.opacity_dir and data.nonopacity_dir")
    return DomainPair(load_domain_dir(d.opacity_dir, Domain.OPACITY),
                      load_domain_dir(d.nonopacity_dir, Domain.NON_OPACITY))


def holdout_data(config: RunConfig, n: int | None = None) -> DomainPair:
    return phantom_pair(config, _HOLDOUT, n or config.data.n_holdout)


def prepare_prior(config: RunConfig) -> tuple[PhantomClassifier, float]:
    """Train (or load) the desk-scale classifier prior on disjoint phantom splits."""
    c = config.cdam
    if c.prior_checkpoint:
        path = Path(c.prior_checkpoint)
        if not path.is_file():
            raise DataIOError(f"prior checkpoint not found: {path}")
        prior = PhantomClassifier(width=c.prior_width, input_size=config.data.image_size)
        prior.load_state_dict(torch.load(path, weights_only=True))
        return prior.freeze(), float("nan")
    train = phantom_pair(config, _PRIOR_TRAIN, PRIOR_SET_SIZE)
    val = phantom_pair(config, _PRIOR_VAL, PRIOR_VAL_SIZE)
    prior, acc = train_prior(train.opacity, train.nonopacity, val.opacity, val.nonopacity,
                             seed=derive_seed(config.seed, 13), width=c.prior_width,
                             input_size=config.data.image_size, target_accuracy=c.prior_target_accuracy,
                             max_epochs=c.prior_max_epochs)
    logger.info("classifier prior validation accuracy %.4f", acc)
    return prior, acc


def needs_prior(config: RunConfig) -> bool:
    return config.ablation.fa or config.ablation.lca


def run_training(config: RunConfig, run_dir=None, prior=None, state=None, iterations=None, callback=None):
    """Train from scratch (or continue ``state``) up to ``iterations``."""
    if state is None:
        if prior is None and needs_prior(config):
            prior, _ = prepare_prior(config)
        state = build_state(config, prior)
    data = training_data(config)
    stream = BatchStream(data.opacity, data.nonopacity, config)
    total = config.train.iterations if iterations is None else iterations
    return fit(state, stream, total, run_dir=run_dir, checkpoint_every=config.train.checkpoint_every,
               log_every=config.train.log_every, callback=callback)


@torch.no_grad()
def translate_all(gen: MaskGenerator, handle: DatasetHandle, batch_size: int = 32):
    """Translate every image of ``handle``; returns ``(translated, mask01)`` arrays."""
    outs, masks = [], []
    gen.eval()
    for start in range(0, len(handle), batch_size):
        items = [handle.load(i) for i in range(start, min(start + batch_size, len(handle)))]
        y, m = translate(gen, collate(items))
        outs.append(y.numpy())
        masks.append(m.numpy())
    gen.train()
    return np.concatenate(outs), np.concatenate(masks)


def evaluate_generator(gen: MaskGenerator, holdout: DomainPair, embedding_dim: int = 32,
                       embedding_seed: int = 0, gen_b: MaskGenerator | None = None) -> dict:
    """Mask localization, activation contrast and desk-FID for generator A.

    With ``gen_b`` the reverse direction's FID and the mean over both
    directions are added.
    """
    translated, masks_op = translate_all(gen, holdout.opacity)
    _, masks_nonop = translate_all(gen, holdout.nonopacity)
    aucs = []
    for i in range(len(holdout.opacity)):
        gt = holdout.opacity.load(i).gt_opacity_mask
        aucs.append(metrics.mask_localization_auc(masks_op[i, 0], gt))
    embed = metrics.RandomProjectionEmbedding(dim=embedding_dim, seed=embedding_seed)
    real_nonop = collate(list(holdout.nonopacity)).numpy()
    out = {
        "mask_auc": float(np.mean(aucs)),
        "mask_mean_opacity": float(masks_op.mean()),
        "mask_mean_nonopacity": float(masks_nonop.mean()),
        "desk_fid": metrics.fid(embed(translated), embed(real_nonop)),
    }
    if gen_b is not None:
        translated_b, _ = translate_all(gen_b, holdout.nonopacity)
        real_op = collate(list(holdout.opacity)).numpy()
        out["desk_fid_b"] = metrics.fid(embed(translated_b), embed(real_op))
        out["desk_fid_mean"] = (out["desk_fid"] + out["desk_fid_b"]) / 2
    return out
