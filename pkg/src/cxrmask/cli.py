"""Command-line entry point: ``cxrmask synth | train | translate | evaluate``.

Every command resolves its configuration (defaults, preset, file, seed),
writes the resolved snapshot to ``<out>/config.ini`` and keeps all outputs
under ``<out>``.  Exit codes: 0 ok, 2 configuration error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from cxrmask import metrics, pipeline
from cxrmask.config import PRESETS, RunConfig, load_config
from cxrmask.errors import (
    ConfigError,
    CxrMaskError,
    DataIOError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)
from cxrmask.phantom import (
    DatasetHandle,
    Domain,
    collate,
    decode_mask,
    load_domain_dir,
    read_manifest,
    save_image,
    save_mask01,
    write_phantom_dataset,
)
from cxrmask.trainer import load_checkpoint

logger = logging.getLogger("cxrmask")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _resolve(args) -> RunConfig:
    return load_config(args.config, preset=args.preset, seed=args.seed)


def _prepare_out(out: str, cfg: RunConfig) -> Path:
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.ini").write_text(cfg.to_ini())
    except OSError as exc:
        raise DataIOError(f"cannot write to output directory {root}: {exc}") from exc
    return root


def write_report(path: Path, values: dict) -> None:
    """One ``key = value`` line per metric, in insertion order."""
    lines = []
    for key, val in values.items():
        if isinstance(val, float):
            val = f"{val:.10g}"
        lines.append(f"{key} = {val}")
    path.write_text("\n".join(lines) + "\n")


# --- synth ----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    n = cfg.synth.n_samples if args.n is None else args.n
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    out = _prepare_out(args.out, cfg)
    try:
        manifest = write_phantom_dataset(out, n, cfg.seed, cfg.data.image_size,
                                         cfg.synth.opacity_fraction, cfg.data.max_opacities)
    except OSError as exc:
        raise DataIOError(f"cannot write phantoms to {out}: {exc}") from exc
    print(manifest)
    return EXIT_OK


# --- train ----------------------------------------------------------------


def cmd_train(args) -> int:
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.config
        logger.info("resuming from %s at iteration %d", args.resume, state.iteration)
    else:
        cfg = _resolve(args)
        if args.manifest:
            cfg = cfg.replace(data={"source": "manifest", "manifest": args.manifest})
    if args.iterations is not None:
        cfg = cfg.replace(train={"iterations": args.iterations})
        if state is not None:
            state.config = cfg
    out = _prepare_out(args.out, cfg)
    prior_acc = None
    prior = None
    if state is None and pipeline.needs_prior(cfg):
        prior, prior_acc = pipeline.prepare_prior(cfg)
    state = pipeline.run_training(cfg, run_dir=out, prior=prior, state=state)
    report = {"iterations": state.iteration, "seed": cfg.seed}
    if prior_acc is not None:
        report["prior_val_accuracy"] = prior_acc
    if state.history:
        last = state.history[-1]
        report.update({f"final_{k}": v for k, v in last.losses.items()})
    if cfg.data.source == "phantom":
        report.update(pipeline.evaluate_generator(state.g_a, pipeline.holdout_data(cfg), cfg.eval.embedding_dim,
                                                  cfg.eval.embedding_seed, gen_b=state.g_b))
    write_report(out / "report.txt", report)
    print(out / "report.txt")
    return EXIT_OK


# --- translate ------------------------------------------------------------


def cmd_translate(args) -> int:
    if not args.checkpoint:
        raise ConfigError("translate requires --checkpoint")
    if not args.input:
        raise ConfigError("translate requires --input")
    state = load_checkpoint(args.checkpoint)
    out = _prepare_out(args.out, state.config)
    images = out / "images"
    images.mkdir(exist_ok=True)
    handle = load_domain_dir(args.input, Domain.OPACITY)
    translated, masks = pipeline.translate_all(state.g_a, handle)
    for path, y, m in zip(handle.paths, translated, masks):
        save_image(images / f"{path.stem}_translated.png", y)
        save_mask01(images / f"{path.stem}_mask.png", m)
    logger.info("translated %d images into %s", len(handle), images)
    return EXIT_OK


# --- evaluate -------------------------------------------------------------


def _image_stack(handle: DatasetHandle) -> np.ndarray:
    shapes = {handle.load(i).image.shape for i in range(len(handle))}
    if len(shapes) > 1:
        raise ShapeError(f"images have inconsistent shapes: {sorted(shapes)}")
    return collate(list(handle)).numpy()


def _distribution_metrics(cfg: RunConfig, real_dir: str, fake_dir: str, report: dict, flags: list):
    real = _image_stack(load_domain_dir(real_dir, Domain.NON_OPACITY))
    fake = _image_stack(load_domain_dir(fake_dir, Domain.NON_OPACITY))
    embed = metrics.RandomProjectionEmbedding(dim=cfg.eval.embedding_dim, seed=cfg.eval.embedding_seed)
    ea, eb = embed(real), embed(fake)
    report["embedding"] = ea.provenance
    report["n_real"], report["n_fake"] = len(real), len(fake)
    report["fid"] = metrics.fid(ea, eb)
    subset = min(cfg.eval.kid_subset_size, len(real), len(fake))
    if subset < cfg.eval.kid_subset_size:
        flags.append(f"kid subset size reduced to {subset}")
    if subset >= 2:
        mean, std = metrics.kid(ea, eb, subset, cfg.eval.kid_n_subsets, seed=cfg.seed)
        report["kid_mean"], report["kid_std"] = mean, std
    else:
        flags.append("kid undefined: fewer than 2 images")
    return real, fake


def _manifest_masks(path: str):
    """``(domain labels, mask paths)`` for every row; missing masks raise."""
    root = Path(path).parent
    labels, masks = [], []
    for rec in read_manifest(path):
        if not rec.mask:
            raise DataIOError(f"{path}: record for {rec.image} has no mask")
        p = root / rec.mask
        if not p.is_file():
            raise DataIOError(f"missing mask file: {p}")
        labels.append(rec.domain_label)
        masks.append(p)
    return labels, masks


def _mask_metrics(pred_manifest: str, gt_manifest: str, report: dict, flags: list):
    gt_labels, gt_paths = _manifest_masks(gt_manifest)
    _, pred_paths = _manifest_masks(pred_manifest)
    if len(gt_paths) != len(pred_paths):
        raise ShapeError(f"manifests differ in length: {len(pred_paths)} predictions vs {len(gt_paths)} references")
    ious, sens, skipped = [], [], 0
    pred_present = []
    for pp, gp in zip(pred_paths, gt_paths):
        pred, gt = decode_mask(pp), decode_mask(gp)
        if pred.shape != gt.shape:
            raise ShapeError(f"mask shapes differ: {pp} {pred.shape} vs {gp} {gt.shape}")
        ious.append(metrics.miou(pred, gt))
        try:
            sens.append(metrics.sensitivity(pred, gt))
        except UndefinedMetricError:
            skipped += 1
        pred_present.append(int(pred.any()))
    report["n_masks"] = len(ious)
    report["miou"] = float(np.mean(ious))
    if sens:
        report["sensitivity"] = float(np.mean(sens))
    else:
        report["sensitivity"] = "undefined"
    if skipped:
        flags.append(f"sensitivity skipped {skipped} masks with empty ground truth")
    # image-level opacity detection: any predicted pixel vs reference domain label
    truth = [int(lab is Domain.OPACITY) for lab in gt_labels]
    scores = metrics.classification_metrics(pred_present, truth)
    for name in ("accuracy", "precision", "recall", "f1"):
        value = getattr(scores, name)
        report[name] = "undefined" if value is None else value
    if scores.undefined:
        flags.append(f"undefined classification metrics: {', '.join(scores.undefined)}")


def _checkpoint_metrics(cfg: RunConfig, checkpoint: str, report: dict):
    state = load_checkpoint(checkpoint)
    report["checkpoint_iteration"] = state.iteration
    holdout = pipeline.holdout_data(state.config.replace(run={"seed": cfg.seed}))
    report.update(pipeline.evaluate_generator(state.g_a, holdout, cfg.eval.embedding_dim, cfg.eval.embedding_seed,
                                              gen_b=state.g_b))


def _plots(out: Path, real, fake):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(-1, 1, 65)
    ax.hist(real.ravel(), bins=bins, alpha=0.6, density=True, label="real")
    ax.hist(fake.ravel(), bins=bins, alpha=0.6, density=True, label="fake")
    ax.set_xlabel("intensity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "intensity_hist.png", dpi=100)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    if not (args.real or args.fake or args.pred or args.gt or args.checkpoint):
        raise ConfigError("evaluate needs --real/--fake, --pred/--gt or --checkpoint")
    if bool(args.real) != bool(args.fake):
        raise ConfigError("--real and --fake must be given together")
    if bool(args.pred) != bool(args.gt):
        raise ConfigError("--pred and --gt must be given together")
    out = _prepare_out(args.out, cfg)
    report: dict = {}
    flags: list[str] = []
    if args.real:
        real, fake = _distribution_metrics(cfg, args.real, args.fake, report, flags)
        if args.plots or cfg.eval.plots:
            _plots(out, real, fake)
    if args.pred:
        _mask_metrics(args.pred, args.gt, report, flags)
    if args.checkpoint:
        _checkpoint_metrics(cfg, args.checkpoint, report)
    report["partial"] = "; ".join(flags) if flags else "none"
    write_report(out / "report.txt", report)
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration preset")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cxrmask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a phantom dataset with manifest")
    p.add_argument("--n", type=int, help="number of phantoms (default: synth.n_samples)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train both generators and discriminators")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, help="overrides train.iterations")
    p.add_argument("--manifest", help="train on a manifest instead of generated phantoms")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="translate a directory with generator A")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--input", help="directory of input images")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="compute metrics and write report.txt")
    p.add_argument("--real", help="directory of reference images")
    p.add_argument("--fake", help="directory of generated images")
    p.add_argument("--pred", help="manifest of predicted masks")
    p.add_argument("--gt", help="manifest of reference masks")
    p.add_argument("--checkpoint", help="score generator A on held-out phantoms")
    p.add_argument("--plots", action="store_true", help="also write intensity histograms")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error in term {exc.term!r}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIOError, ShapeError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CxrMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
