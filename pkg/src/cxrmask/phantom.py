"""Two-domain data: procedural phantoms, image directories and batch mixing.

Phantoms are a stand-in for chest radiographs with pixel-exact opacity
ground truth: an elliptical thorax, two darker lung fields and optional
bright Gaussian blobs ("opacities") placed inside the lungs.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from cxrmask.errors import DataIOError, InvalidArgumentError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

# Blob width as a fraction of the image side; chosen so that two blobs on a
# 64x64 canvas cover 0.5%..30% of the pixels (checked over 1000 seeds).
BLOB_SIGMA_RANGE = (0.035, 0.08)
BLOB_AMPLITUDE_RANGE = (0.55, 0.85)


class Domain(str, enum.Enum):
    OPACITY = "Opacity"
    NON_OPACITY = "NonOpacity"

    @property
    def other(self) -> "Domain":
        return Domain.NON_OPACITY if self is Domain.OPACITY else Domain.OPACITY


@dataclass
class PhantomSample:
    image: np.ndarray  # float32, 1 x H x W, in [-1, 1]
    gt_opacity_mask: np.ndarray  # uint8, H x W, {0, 1}
    domain_label: Domain


@dataclass
class BatchItem:
    image: np.ndarray
    domain_label: Domain
    gt_opacity_mask: np.ndarray | None = None


def _seed_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def derive_seed(*keys: int) -> int:
    """Collapse a tuple of integers into one 32-bit seed."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


def _ellipse_radius(xx, yy, cx, cy, rx, ry):
    return np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)


def _soft_inside(r, edge):
    # Smooth step at r = 1 so edges are not aliased.
    return 1.0 / (1.0 + np.exp((r - 1.0) / edge))


def synth_phantom(seed: int, size: int = 64, n_opacities: int = 0) -> PhantomSample:
    """Render one phantom radiograph.

    The anatomy (thorax, lungs, texture) depends only on ``seed`` and
    ``size``; blobs are drawn from a separate stream so the same seed with
    and without opacities gives the same underlying body.
    """
    if size < 16:
        raise InvalidArgumentError(f"size must be >= 16, got {size}")
    if n_opacities < 0:
        raise InvalidArgumentError(f"n_opacities must be >= 0, got {n_opacities}")

    rng = _seed_rng(seed, size, 0)
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    edge = 2.0 / size

    img = np.full((size, size), -0.9)
    thorax_r = _ellipse_radius(
        xx, yy, rng.uniform(-0.03, 0.03), rng.uniform(0.0, 0.06),
        rng.uniform(0.78, 0.86), rng.uniform(0.85, 0.92),
    )
    img += 1.25 * _soft_inside(thorax_r, edge)

    lungs = []
    lung_field = np.zeros_like(img)
    for side in (-1.0, 1.0):
        lung = (
            side * rng.uniform(0.33, 0.39),
            rng.uniform(-0.12, 0.0),
            rng.uniform(0.21, 0.26),
            rng.uniform(0.45, 0.53),
        )
        lungs.append(lung)
        lung_field = np.maximum(lung_field, _soft_inside(_ellipse_radius(xx, yy, *lung), edge))
    img -= 0.8 * lung_field

    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 32.0)
    texture /= texture.std() + 1e-12
    img += 0.04 * texture

    gt = np.zeros((size, size), dtype=bool)
    blob_rng = _seed_rng(seed, size, 1)
    for _ in range(n_opacities):
        cx, cy, rx, ry = lungs[blob_rng.integers(2)]
        # Rejection-sample a center well inside the chosen lung field.
        while True:
            u, v = blob_rng.uniform(-1.0, 1.0, size=2)
            if u * u + v * v <= 0.7**2:
                break
        bx, by = cx + u * rx, cy + v * ry
        sigma = blob_rng.uniform(*BLOB_SIGMA_RANGE) * 2.0  # normalized coords span 2
        amp = blob_rng.uniform(*BLOB_AMPLITUDE_RANGE)
        profile = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2.0 * sigma**2))
        img += amp * profile
        gt |= profile > 0.5

    image = np.clip(img, -1.0, 1.0).astype(np.float32)[None]
    label = Domain.OPACITY if n_opacities > 0 else Domain.NON_OPACITY
    return PhantomSample(image=image, gt_opacity_mask=gt.astype(np.uint8), domain_label=label)


class DatasetHandle:
    """Read-only, lazily evaluated collection of images from one domain."""

    domain: Domain

    def __len__(self) -> int:
        raise NotImplementedError

    def load(self, index: int) -> BatchItem:
        raise NotImplementedError

    def __iter__(self) -> Iterator[BatchItem]:
        for i in range(len(self)):
            yield self.load(i)


class PhantomDataset(DatasetHandle):
    """``n`` phantoms of one domain; opacity samples carry 1..max_opacities blobs."""

    def __init__(self, domain: Domain, n: int, seed: int, size: int = 64, max_opacities: int = 3):
        if n < 1:
            raise InvalidArgumentError("phantom dataset needs n >= 1")
        self.domain = Domain(domain)
        self.n = n
        self.seed = seed
        self.size = size
        self.max_opacities = max_opacities

    def __len__(self):
        return self.n

    def sample(self, index: int) -> PhantomSample:
        if not 0 <= index < self.n:
            raise IndexError(index)
        domain_code = 1 if self.domain is Domain.OPACITY else 2
        sample_seed = derive_seed(self.seed, domain_code, index)
        n_op = 0
        if self.domain is Domain.OPACITY:
            n_op = 1 + derive_seed(sample_seed, 7) % self.max_opacities
        return synth_phantom(sample_seed, self.size, n_op)

    def load(self, index):
        s = self.sample(index)
        return BatchItem(s.image, s.domain_label, s.gt_opacity_mask)


def decode_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a grayscale image to float32 ``1 x H x W`` in [-1, 1].

    8-bit images are scaled by 255 and 16-bit by 65535; color images are
    converted to luminance first.
    """
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0
        else:
            if im.mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64)
            scale = 255.0
    out = np.clip(arr / scale, 0.0, 1.0) * 2.0 - 1.0
    return out.astype(np.float32)[None]


def decode_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def to_png_uint8(values01: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] values to 8 bits, rounding half up."""
    return np.floor(np.clip(values01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a ``[1 x] H x W`` image in [-1, 1] as 8-bit grayscale PNG."""
    arr = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    Image.fromarray(to_png_uint8((arr + 1.0) / 2.0), mode="L").save(path)


def save_mask01(path: str | os.PathLike, mask01: np.ndarray) -> None:
    arr = np.asarray(mask01, dtype=np.float64).reshape(mask01.shape[-2:])
    Image.fromarray(to_png_uint8(arr), mode="L").save(path)


class ImageDirDataset(DatasetHandle):
    def __init__(self, paths: Sequence[Path], domain: Domain, skipped: int = 0,
                 mask_paths: Sequence[Path | None] | None = None):
        self.paths = list(paths)
        self.domain = Domain(domain)
        self.skipped = skipped
        self.mask_paths = list(mask_paths) if mask_paths is not None else [None] * len(self.paths)

    def __len__(self):
        return len(self.paths)

    def load(self, index):
        mask_path = self.mask_paths[index]
        mask = decode_mask(mask_path) if mask_path is not None else None
        return BatchItem(decode_image(self.paths[index]), self.domain, mask)


def load_domain_dir(path: str | os.PathLike, domain: Domain) -> ImageDirDataset:
    """Index every decodable image in ``path`` (non-recursive, sorted by name).

    Files that cannot be identified as images are skipped with a warning and
    counted in ``handle.skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataIOError(f"not a directory: {root}")
    good, skipped = [], 0
    for p in sorted(root.iterdir()):
        if not p.is_file():
            continue
        try:
            with Image.open(p) as im:
                im.verify()
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            skipped += 1
            warnings.warn(f"skipping undecodable file {p.name}: {exc}", stacklevel=2)
            continue
        good.append(p)
    if not good:
        raise DataIOError(f"no decodable images in {root}")
    return ImageDirDataset(good, domain, skipped=skipped)


def augment(image: np.ndarray, seed: int, out_size: int = 512,
            crop_fraction_range: tuple[float, float] = (0.8, 1.0)) -> np.ndarray:
    """Random square crop followed by a bilinear resize to ``out_size``."""
    lo, hi = crop_fraction_range
    if not (0.0 < lo <= hi <= 1.0):
        raise InvalidArgumentError(f"crop_fraction_range must lie in (0, 1], got {crop_fraction_range}")
    if out_size < 8:
        raise InvalidArgumentError(f"out_size must be >= 8, got {out_size}")
    rng = np.random.default_rng(seed)
    h, w = image.shape[-2:]
    frac = rng.uniform(lo, hi) if hi > lo else lo
    side = max(1, int(round(frac * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = np.asarray(image)[..., top:top + side, left:left + side]
    t = torch.from_numpy(np.ascontiguousarray(crop)).reshape(1, -1, side, side)
    if side == out_size:
        out = t
    else:
        out = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return out.reshape(*image.shape[:-2], out_size, out_size).numpy().clip(-1.0, 1.0)


def sample_batch(source: DatasetHandle, target: DatasetHandle, batch_size: int,
                 rho: float, seed: int) -> list[BatchItem]:
    """Draw a batch from the expanded source domain.

    Each item comes from ``target`` with probability ``rho`` (an intra-domain
    example for a generator whose output domain is ``target``), otherwise
    from ``source``.  Items keep the label of the handle they came from.
    """
    if not 0.0 <= rho <= 1.0:
        raise InvalidArgumentError(f"rho must be in [0, 1], got {rho}")
    if len(source) == 0 or len(target) == 0:
        raise InvalidArgumentError("cannot sample from an empty dataset")
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(batch_size):
        handle = target if rng.random() < rho else source
        items.append(handle.load(int(rng.integers(len(handle)))))
    return items


def collate(items: Sequence[BatchItem], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([it.image for it in items])).to(dtype)


# --- manifests ------------------------------------------------------------


@dataclass
class ManifestRecord:
    image: str
    domain_label: Domain
    mask: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {"image": self.image, "domain_label": self.domain_label.value, "mask": self.mask}
        return json.dumps(rec, sort_keys=True)


def read_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    p = Path(path)
    if not p.is_file():
        raise DataIOError(f"manifest not found: {p}")
    records = []
    with p.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append(ManifestRecord(rec["image"], Domain(rec["domain_label"]), rec.get("mask")))
            except (ValueError, KeyError) as exc:
                raise DataIOError(f"{p}:{lineno}: bad manifest record ({exc})") from exc
    return records


def manifest_datasets(path: str | os.PathLike) -> dict[Domain, ImageDirDataset]:
    """Split a manifest into one lazily-decoded handle per domain."""
    root = Path(path).parent
    by_domain: dict[Domain, tuple[list, list]] = {d: ([], []) for d in Domain}
    for rec in read_manifest(path):
        img = root / rec.image
        if not img.is_file():
            raise DataIOError(f"missing image file: {img}")
        by_domain[rec.domain_label][0].append(img)
        by_domain[rec.domain_label][1].append(root / rec.mask if rec.mask else None)
    out = {}
    for dom, (imgs, masks) in by_domain.items():
        if imgs:
            out[dom] = ImageDirDataset(imgs, dom, mask_paths=masks)
    return out


def write_phantom_dataset(out_dir: str | os.PathLike, n: int, seed: int, size: int = 64,
                          opacity_fraction: float = 0.5, max_opacities: int = 3) -> Path:
    """Render ``n`` phantoms as PNGs plus ``manifest.jsonl``; returns the manifest path."""
    if n < 1:
        raise InvalidArgumentError(f"sample count must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_op = int(round(n * opacity_fraction))
    opacity = PhantomDataset(Domain.OPACITY, max(n_op, 1), seed, size, max_opacities)
    clear = PhantomDataset(Domain.NON_OPACITY, max(n - n_op, 1), seed, size, max_opacities)
    lines = []
    width = max(4, int(math.log10(n)) + 1)
    for i in range(n):
        ds, j = (opacity, i) if i < n_op else (clear, i - n_op)
        s = ds.sample(j)
        stem = f"{'op' if ds.domain is Domain.OPACITY else 'nop'}_{i:0{width}d}"
        img_name, mask_name = f"images/{stem}.png", f"masks/{stem}_mask.png"
        save_image(out / img_name, s.image)
        Image.fromarray(s.gt_opacity_mask * 255, mode="L").save(out / mask_name)
        lines.append(ManifestRecord(img_name, s.domain_label, mask_name).to_json())
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    logger.info("wrote %d phantoms to %s", n, out)
    return manifest
