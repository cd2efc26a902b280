"""Total objective, alternating optimization, checkpoints and the training loop."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from cxrmask import aaspm, cdam
from cxrmask.adversarial import (
    DiscriminatorConfig,
    PatchDiscriminator,
    adv_loss_discriminator,
    adv_loss_generator,
    cycle_reconstruction_loss,
    init_discriminator,
)
from cxrmask.cdam import ClassifierPrior, LabelFilter, PhantomClassifier
from cxrmask.config import AblationSection, RunConfig, WeightsSection
from cxrmask.errors import DataIOError, InvalidArgumentError, NumericError
from cxrmask.generator import Direction, GeneratorConfig, MaskGenerator, blend, init_generator, normalize_mask
from cxrmask.phantom import BatchItem, DatasetHandle, Domain, augment, collate, derive_seed, sample_batch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cxrmask-checkpoint"
CHECKPOINT_VERSION = 1

LossWeights = WeightsSection
AblationFlags = AblationSection

# Which weight scales each sub-loss, and which ablation flag switches it.
TERM_WEIGHTS = {
    "upper": "lambda_penalties",
    "repul": "lambda_penalties",
    "bam": "lambda_bam",
    "feature": "lambda_feature",
    "classifier": "lambda_classifier",
    "adv": "lambda_adv",
    "rec": "lambda_rec",
}
TERM_FLAGS = {"upper": "aaspm", "repul": "aaspm", "bam": "baml", "feature": "fa", "classifier": "lca"}

# The ablation lattice, one row per evaluated configuration:
# (AASPM, FA, LCA, BAML).
ABLATION_ROWS = (
    (False, False, False, False),
    (True, False, False, False),
    (False, True, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
)


def ablation_row(index: int) -> AblationFlags:
    aaspm_on, fa, lca, baml = ABLATION_ROWS[index]
    return AblationFlags(aaspm=aaspm_on, fa=fa, lca=lca, baml=baml)


def active_terms(flags: AblationFlags) -> list[str]:
    return [t for t in TERM_WEIGHTS if t not in TERM_FLAGS or getattr(flags, TERM_FLAGS[t])]


def total_generator_loss(parts: Mapping[str, object], weights: LossWeights):
    """Weighted sum of the generator sub-losses.

    Missing parts contribute nothing, which is how disabled components drop
    out.  Works on tensors (keeping the graph) or plain floats.
    """
    total = 0.0
    for name, value in parts.items():
        if name not in TERM_WEIGHTS:
            raise InvalidArgumentError(f"unknown loss term {name!r}")
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite ({v})", term=name)
        total = total + getattr(weights, TERM_WEIGHTS[name]) * value
    return total


def lr_schedule(iteration: int, base_lr: float = 1e-4, decay_every: int = 100_000,
                decay_factor: float = 0.1) -> float:
    """Step decay: multiply by ``decay_factor`` every ``decay_every`` iterations."""
    if iteration < 0:
        raise InvalidArgumentError("iteration must be >= 0")
    return base_lr * decay_factor ** (iteration // decay_every)


@dataclass
class TrainMetrics:
    iteration: int
    lr: float
    losses: dict
    d_loss: float
    total: float

    def record(self, wall_time: float | None = None) -> dict:
        rec = {"iteration": self.iteration, "lr": self.lr, **self.losses, "d_adv": self.d_loss, "total": self.total}
        if wall_time is not None:
            rec["wall_time"] = wall_time
        return rec


@dataclass
class TrainState:
    config: RunConfig
    g_a: MaskGenerator
    g_b: MaskGenerator
    d_a: PatchDiscriminator  # judges the Opacity domain
    d_b: PatchDiscriminator  # judges the NonOpacity domain
    prior: ClassifierPrior | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    iteration: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def flags(self) -> AblationFlags:
        return self.config.ablation

    @property
    def label_filter(self) -> LabelFilter:
        return LabelFilter(list(self.config.cdam.q), self.config.cdam.threshold_p)

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"g_a": self.g_a, "g_b": self.g_b, "d_a": self.d_a, "d_b": self.d_b}
        if self.prior is not None:
            mods["prior"] = self.prior
        return mods


def _make_optimizers(cfg: RunConfig, g_a, g_b, d_a, d_b):
    betas = (cfg.train.beta1, cfg.train.beta2)
    opt_g = torch.optim.Adam(list(g_a.parameters()) + list(g_b.parameters()), lr=cfg.train.base_lr, betas=betas)
    opt_d = torch.optim.Adam(list(d_a.parameters()) + list(d_b.parameters()), lr=cfg.train.base_lr, betas=betas)
    return opt_g, opt_d


def build_state(config: RunConfig, prior: ClassifierPrior | None = None) -> TrainState:
    """Fresh networks and optimizers; initial weights derive from ``config.run.seed``."""
    if (config.ablation.fa or config.ablation.lca) and prior is None:
        raise InvalidArgumentError("feature/label alignment is enabled but no classifier prior was given")
    if prior is not None:
        prior.freeze()
    seed = config.seed
    gcfg = config.generator
    g_a = init_generator(GeneratorConfig(gcfg.width, gcfg.depth, gcfg.n_res, derive_seed(seed, 101)), Direction.A)
    g_b = init_generator(GeneratorConfig(gcfg.width, gcfg.depth, gcfg.n_res, derive_seed(seed, 102)), Direction.B)
    dcfg = config.discriminator
    d_a = init_discriminator(DiscriminatorConfig(dcfg.width, dcfg.n_blocks, derive_seed(seed, 201)), Domain.OPACITY)
    d_b = init_discriminator(DiscriminatorConfig(dcfg.width, dcfg.n_blocks, derive_seed(seed, 202)), Domain.NON_OPACITY)
    opt_g, opt_d = _make_optimizers(config, g_a, g_b, d_a, d_b)
    return TrainState(config, g_a, g_b, d_a, d_b, prior, opt_g, opt_d)


def _split(labels: Sequence[Domain], domain: Domain) -> torch.Tensor:
    return torch.tensor([i for i, lab in enumerate(labels) if lab is domain], dtype=torch.long)


def _generator_parts(state: TrainState, xa, labels_a, xb, labels_b, inter_a, inter_b):
    """Sub-losses for both translation directions given first-hop batches."""
    cfg, flags = state.config, state.flags
    form = cfg.adv.loss_form
    out_a, out_b = state.g_a(xa), state.g_b(xb)
    mask_a, mask_b = normalize_mask(out_a.raw_mask, check=False), normalize_mask(out_b.raw_mask, check=False)
    y_a, y_b = blend(out_a.synth_image, mask_a, xa), blend(out_b.synth_image, mask_b, xb)

    parts = {}
    zero = xa.sum() * 0.0
    adv, rec = zero, zero
    feature, classifier = zero, zero
    # (translated, source images, generator back to source, critic of target domain)
    hops = []
    if len(inter_a):
        hops.append((y_a[inter_a], xa[inter_a], state.g_b, state.d_b))
    if len(inter_b):
        hops.append((y_b[inter_b], xb[inter_b], state.g_a, state.d_a))
    for fake, src, back, critic in hops:
        adv = adv + adv_loss_generator(critic(fake), form)
        cycled, _ = _translate(back, fake)
        rec = rec + cycle_reconstruction_loss(src, cycled)
        if flags.fa or flags.lca:
            feat_fake, prob_fake = state.prior(fake)
            with torch.no_grad():
                feat_src, prob_src = state.prior(src)
            if flags.fa:
                feature = feature + cdam.feature_alignment_loss(feat_fake, feat_src, cfg.cdam.lambda_style)
            if flags.lca:
                classifier = classifier + cdam.label_consistency_loss(
                    prob_fake, prob_src, state.label_filter, hard_inversion=cfg.cdam.hard_inversion)
    if flags.aaspm:
        pen = cfg.aaspm
        parts["upper"] = (aaspm.upper_bound_penalty(mask_a, pen.f_upper, pen.reduction)
                          + aaspm.upper_bound_penalty(mask_b, pen.f_upper, pen.reduction))
        parts["repul"] = sum(
            aaspm.central_repulsion_penalty(m, pen.f_central, pen.f_height, pen.epsilon, pen.reduction)
            for m in (mask_a, mask_b)
        )
    if flags.baml:
        parts["bam"] = (aaspm.bam_loss_batch(mask_a, labels_a, Domain.NON_OPACITY)
                        + aaspm.bam_loss_batch(mask_b, labels_b, Domain.OPACITY))
    if flags.fa:
        parts["feature"] = feature
    if flags.lca:
        parts["classifier"] = classifier
    parts["adv"] = adv
    parts["rec"] = rec
    return parts, y_a, y_b


def _translate(gen, x):
    out = gen(x)
    m = normalize_mask(out.raw_mask, check=False)
    return blend(out.synth_image, m, x), m


def _snapshot(state: TrainState):
    return ({k: copy.deepcopy(m.state_dict()) for k, m in state.modules().items()},
            copy.deepcopy(state.opt_g.state_dict()), copy.deepcopy(state.opt_d.state_dict()))


def _restore(state: TrainState, snap):
    mods, og, od = snap
    for k, m in state.modules().items():
        m.load_state_dict(mods[k])
    state.opt_g.load_state_dict(og)
    state.opt_d.load_state_dict(od)


def train_step(state: TrainState, batch_a: Sequence[BatchItem], batch_b: Sequence[BatchItem]):
    """One discriminator update followed by one generator update.

    ``batch_a`` is generator A's expanded stream (Opacity items plus
    intra-domain NonOpacity items), ``batch_b`` the mirror image for
    generator B.  On a non-finite loss the state is rolled back and
    :class:`NumericError` is raised.
    """
    if not batch_a or not batch_b:
        raise InvalidArgumentError("train_step needs non-empty batches")
    cfg = state.config
    form = cfg.adv.loss_form
    labels_a = [Domain(it.domain_label) for it in batch_a]
    labels_b = [Domain(it.domain_label) for it in batch_b]
    xa, xb = collate(batch_a), collate(batch_b)
    if xa.shape[1:] != xb.shape[1:]:
        raise InvalidArgumentError(f"batch shapes differ: {tuple(xa.shape)} vs {tuple(xb.shape)}")
    inter_a, inter_b = _split(labels_a, Domain.OPACITY), _split(labels_b, Domain.NON_OPACITY)
    everything = torch.cat([xa, xb])
    all_labels = labels_a + labels_b
    real_op = everything[_split(all_labels, Domain.OPACITY)]
    real_nonop = everything[_split(all_labels, Domain.NON_OPACITY)]

    lr = lr_schedule(state.iteration, cfg.train.base_lr, cfg.train.decay_every, cfg.train.decay_factor)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr

    snap = _snapshot(state)
    try:
        # discriminators
        with torch.no_grad():
            fake_nonop = _translate(state.g_a, xa[inter_a])[0] if len(inter_a) else None
            fake_op = _translate(state.g_b, xb[inter_b])[0] if len(inter_b) else None
        d_loss = xa.new_zeros(())
        for critic, real, fake in ((state.d_b, real_nonop, fake_nonop), (state.d_a, real_op, fake_op)):
            if fake is not None and len(real):
                d_loss = d_loss + adv_loss_discriminator(critic(real), critic(fake), form)
        if not torch.isfinite(d_loss):
            raise NumericError(f"discriminator loss is not finite ({float(d_loss.detach())})", term="d_adv")
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()

        # generators
        parts, _, _ = _generator_parts(state, xa, labels_a, xb, labels_b, inter_a, inter_b)
        total = total_generator_loss(parts, cfg.weights)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        for critic in (state.d_a, state.d_b):
            critic.zero_grad(set_to_none=True)
    except NumericError:
        _restore(state, snap)
        raise

    metrics = TrainMetrics(
        iteration=state.iteration,
        lr=lr,
        losses={k: float(v.detach()) for k, v in parts.items()},
        d_loss=float(d_loss.detach()),
        total=float(total.detach()),
    )
    state.iteration += 1
    return state, metrics


def generator_loss_on_batch(state: TrainState, batch_a, batch_b) -> float:
    """Total generator objective on a fixed batch without updating anything."""
    labels_a = [Domain(it.domain_label) for it in batch_a]
    labels_b = [Domain(it.domain_label) for it in batch_b]
    xa, xb = collate(batch_a), collate(batch_b)
    inter_a, inter_b = _split(labels_a, Domain.OPACITY), _split(labels_b, Domain.NON_OPACITY)
    with torch.no_grad():
        parts, _, _ = _generator_parts(state, xa, labels_a, xb, labels_b, inter_a, inter_b)
        return float(total_generator_loss(parts, state.config.weights))


# --- data streams ---------------------------------------------------------


class BatchStream:
    """Deterministic per-iteration batches for both generators.

    The batch for iteration ``i`` depends only on ``(seed, i)``, so a
    resumed run sees exactly the batches an uninterrupted one would.
    """

    def __init__(self, opacity: DatasetHandle, nonopacity: DatasetHandle, config: RunConfig):
        self.opacity = opacity
        self.nonopacity = nonopacity
        self.config = config

    def _augment(self, items, seed):
        d = self.config.data
        out = []
        for k, it in enumerate(items):
            img = augment(it.image, derive_seed(seed, k), d.image_size, (d.crop_min, d.crop_max))
            out.append(BatchItem(img.astype(np.float32), it.domain_label))
        return out

    def batches(self, iteration: int) -> tuple[list[BatchItem], list[BatchItem]]:
        d, bs, seed = self.config.data, self.config.train.batch_size, self.config.seed
        sa, sb = derive_seed(seed, iteration, 1), derive_seed(seed, iteration, 2)
        batch_a = sample_batch(self.opacity, self.nonopacity, bs, d.rho, sa)
        batch_b = sample_batch(self.nonopacity, self.opacity, bs, d.rho, sb)
        return self._augment(batch_a, sa), self._augment(batch_b, sb)


def fit(state: TrainState, stream: BatchStream, iterations: int, run_dir: str | Path | None = None,
        checkpoint_every: int | None = None, log_every: int = 1,
        callback: Callable[[TrainMetrics], None] | None = None) -> TrainState:
    """Train until ``state.iteration == iterations``.

    With ``run_dir`` set, metrics are appended to ``metrics.log`` (one JSON
    record per line) and checkpoints go to ``checkpoints/``.  If a step
    fails numerically, the pre-step state is saved as ``last_good.ckpt``
    before the error propagates.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "metrics.log", "a")
    start = time.perf_counter()
    try:
        while state.iteration < iterations:
            batch_a, batch_b = stream.batches(state.iteration)
            try:
                state, metrics = train_step(state, batch_a, batch_b)
            except NumericError:
                if run_dir is not None:
                    save_checkpoint(state, run_dir / "checkpoints" / "last_good.ckpt")
                raise
            state.history.append(metrics)
            if callback is not None:
                callback(metrics)
            if log_fh is not None and (metrics.iteration % log_every == 0 or state.iteration == iterations):
                log_fh.write(json.dumps(metrics.record(round(time.perf_counter() - start, 3))) + "\n")
                log_fh.flush()
            if run_dir is not None and checkpoint_every and (
                state.iteration % checkpoint_every == 0 or state.iteration == iterations
            ):
                save_checkpoint(state, run_dir / "checkpoints" / f"iter_{state.iteration:07d}.ckpt")
                save_checkpoint(state, run_dir / "checkpoints" / "latest.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# --- checkpoints ----------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> dict:
    sd = opt.state_dict()
    for idx, slots in sd["state"].items():
        for key, val in slots.items():
            arrays[f"{prefix}/state/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return {"param_groups": sd["param_groups"], "state_keys": sorted(str(k) for k in sd["state"])}


def _unflatten_optimizer(prefix: str, meta: dict, arrays: dict) -> dict:
    state = {}
    for key, arr in arrays.items():
        if not key.startswith(prefix + "/state/"):
            continue
        _, _, idx, slot = key.split("/", 3)
        state.setdefault(int(idx), {})[slot] = torch.from_numpy(arr.copy())
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else g for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def _prior_header(prior: ClassifierPrior | None):
    if prior is None:
        return None
    if isinstance(prior, PhantomClassifier):
        return {"kind": "phantom", "width": prior.width, "input_size": prior.input_size,
                "labels": list(prior.label_names)}
    return {"kind": "external", "class": type(prior).__name__, "labels": list(prior.label_names)}


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write every parameter, optimizer moment, counter and flag to one archive.

    Entries are stored uncompressed with fixed timestamps in sorted order,
    so identical states produce identical bytes.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, mod in state.modules().items():
        for key, val in mod.state_dict().items():
            arrays[f"{name}/{key}"] = val.detach().cpu().numpy()
    opt_meta = {
        "opt_g": _flatten_optimizer("opt_g", state.opt_g, arrays),
        "opt_d": _flatten_optimizer("opt_d", state.opt_d, arrays),
    }
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "generators": {"g_a": state.g_a.header(), "g_b": state.g_b.header()},
        "discriminators": {"d_a": state.d_a.header(), "d_b": state.d_b.header()},
        "prior": _prior_header(state.prior),
        "optimizers": opt_meta,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(arrays.items())},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", _ZIP_DATE), json.dumps(header, sort_keys=True, indent=1))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.array(arrays[key], order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{key}.npy", _ZIP_DATE), buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("header.json"))
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise DataIOError(f"cannot read checkpoint header from {path}: {exc}") from exc


def load_checkpoint(path: str | Path, prior: ClassifierPrior | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` saved by :func:`save_checkpoint`.

    Phantom priors are reconstructed from the archive.  An external prior
    must be passed in; the stored parameters are loaded into it.
    """
    header = read_checkpoint_header(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataIOError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataIOError(
            f"{path}: checkpoint version {header.get('version')!r} unsupported (expected {CHECKPOINT_VERSION}); "
            f"iteration={header.get('iteration')}"
        )
    arrays = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for key, spec in header["arrays"].items():
                arr = np.load(io.BytesIO(zf.read(f"arrays/{key}.npy")), allow_pickle=False)
                if list(arr.shape) != spec["shape"] or str(arr.dtype) != spec["dtype"]:
                    raise DataIOError(f"{path}: array {key} has shape {arr.shape}/{arr.dtype}, header says {spec}")
                arrays[key] = arr
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise DataIOError(f"{path}: corrupt checkpoint (iteration={header.get('iteration')}): {exc}") from exc

    config = RunConfig.from_dict(header["config"])
    prior_meta = header.get("prior")
    if prior is None and prior_meta is not None:
        if prior_meta["kind"] != "phantom":
            raise DataIOError(f"{path}: checkpoint uses external prior {prior_meta.get('class')}; pass it explicitly")
        prior = PhantomClassifier(width=prior_meta["width"], input_size=prior_meta["input_size"])
    state = build_state(config, prior) if prior is not None else build_state(
        config.replace(ablation={"fa": False, "lca": False}))
    state.config = config
    for name, mod in state.modules().items():
        sd = {key[len(name) + 1:]: torch.from_numpy(arr.copy()) for key, arr in arrays.items()
              if key.startswith(name + "/")}
        try:
            mod.load_state_dict(sd)
        except RuntimeError as exc:
            raise DataIOError(f"{path}: parameters for {name} do not match: {exc}") from exc
    if state.prior is not None:
        state.prior.freeze()
    opt_meta = header["optimizers"]
    state.opt_g.load_state_dict(_unflatten_optimizer("opt_g", opt_meta["opt_g"], arrays))
    state.opt_d.load_state_dict(_unflatten_optimizer("opt_d", opt_meta["opt_d"], arrays))
    state.iteration = int(header["iteration"])
    return state
