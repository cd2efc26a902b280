"""Run configuration: sectioned ``key = value`` files, presets and validation.

Every section is a dataclass; keys not declared on it are rejected.  The
fully resolved configuration is written back next to each run's outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields

from cxrmask.errors import ConfigError


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    source: str = "phantom"  # phantom | manifest | dirs
    manifest: str = ""
    opacity_dir: str = ""
    nonopacity_dir: str = ""
    image_size: int = 64
    n_train: int = 512  # phantoms per domain
    n_holdout: int = 64
    max_opacities: int = 3
    rho: float = 0.25
    crop_min: float = 0.8
    crop_max: float = 1.0


@dataclass
class SynthSection:
    n_samples: int = 100
    opacity_fraction: float = 0.5


@dataclass
class GeneratorSection:
    width: int = 32
    depth: int = 2
    n_res: int = 2


@dataclass
class DiscriminatorSection:
    width: int = 32
    n_blocks: int = 3


@dataclass
class AaspmSection:
    f_upper: float = 0.75
    f_central: float = 0.1
    f_height: float = 0.2
    epsilon: float = 0.01
    reduction: str = "mean"


@dataclass
class CdamSection:
    lambda_style: float = 0.5
    threshold_p: float = 0.5
    q: list = field(default_factory=lambda: [1, 0])
    hard_inversion: bool = False
    prior_width: int = 16
    prior_target_accuracy: float = 0.95
    prior_max_epochs: int = 40
    prior_checkpoint: str = ""


@dataclass
class AdvSection:
    loss_form: str = "least_squares"


@dataclass
class WeightsSection:
    lambda_penalties: float = 0.01
    lambda_bam: float = 0.1
    lambda_feature: float = 0.5
    lambda_classifier: float = 0.5
    lambda_adv: float = 2.0
    lambda_rec: float = 1.0


@dataclass
class AblationSection:
    aaspm: bool = True
    fa: bool = True
    lca: bool = True
    baml: bool = True


@dataclass
class TrainSection:
    iterations: int = 250_000
    batch_size: int = 2
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9999
    decay_every: int = 100_000
    decay_factor: float = 0.1
    checkpoint_every: int = 10_000
    log_every: int = 1


@dataclass
class EvalSection:
    embedding_dim: int = 32
    embedding_seed: int = 0
    kid_subset_size: int = 100
    kid_n_subsets: int = 100
    plots: bool = False


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "synth": SynthSection,
    "generator": GeneratorSection,
    "discriminator": DiscriminatorSection,
    "aaspm": AaspmSection,
    "cdam": CdamSection,
    "adv": AdvSection,
    "weights": WeightsSection,
    "ablation": AblationSection,
    "train": TrainSection,
    "eval": EvalSection,
}

PRESETS = {
    "paper": {
        "data": {"image_size": 512},
        "train": {"iterations": 250_000, "batch_size": 2, "checkpoint_every": 10_000},
    },
    "desk": {
        "data": {"image_size": 64},
        "generator": {"width": 16},
        "discriminator": {"width": 16},
        "train": {"iterations": 2000, "batch_size": 8, "checkpoint_every": 500, "base_lr": 2e-4},
    },
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    aaspm: AaspmSection = field(default_factory=AaspmSection)
    cdam: CdamSection = field(default_factory=CdamSection)
    adv: AdvSection = field(default_factory=AdvSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for section, values in data.items():
            apply_section(cfg, section, values)
        cfg.validate()
        return cfg

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"iterations": 5})``."""
        cfg = RunConfig.from_dict(self.to_dict())
        for section, values in sections.items():
            apply_section(cfg, section, values)
        cfg.validate()
        return cfg

    def validate(self):
        d, t = self.data, self.train
        if d.source not in ("phantom", "manifest", "dirs"):
            raise ConfigError(f"data.source must be phantom, manifest or dirs, got {d.source!r}")
        if not 0.0 <= d.rho <= 1.0:
            raise ConfigError("data.rho must lie in [0, 1]")
        if not 0.0 < d.crop_min <= d.crop_max <= 1.0:
            raise ConfigError("data.crop_min/crop_max must satisfy 0 < min <= max <= 1")
        if d.image_size % (2 ** max(self.generator.depth, self.discriminator.n_blocks)):
            raise ConfigError("data.image_size must be divisible by the generator/discriminator strides")
        if t.iterations < 0 or t.batch_size < 1:
            raise ConfigError("train.iterations must be >= 0 and train.batch_size >= 1")
        if self.adv.loss_form not in ("least_squares", "hinge"):
            raise ConfigError(f"adv.loss_form must be least_squares or hinge, got {self.adv.loss_form!r}")
        if self.aaspm.reduction not in ("mean", "sum"):
            raise ConfigError("aaspm.reduction must be mean or sum")
        if any(v not in (0, 1) for v in self.cdam.q):
            raise ConfigError("cdam.q must be a list of 0/1 values")
        if self.ablation.lca and not any(self.cdam.q):
            raise ConfigError("cdam.q selects no label while LCA is enabled")
        if not 0.0 < self.cdam.threshold_p < 1.0:
            raise ConfigError("cdam.threshold_p must lie in (0, 1)")
        for f in fields(self.weights):
            if getattr(self.weights, f.name) < 0:
                raise ConfigError(f"weights.{f.name} must be >= 0")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            parser[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def _to_int(raw) -> int:
    # accepts "250000" as well as "2.5e5"
    if isinstance(raw, str) and "e" in raw.lower():
        val = float(raw)
        if not val.is_integer():
            raise ValueError(raw)
        return int(val)
    return int(raw)


def _parse(raw, default, key):
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return _to_int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            if isinstance(raw, (list, tuple)):
                return [int(v) for v in raw]
            return [int(v) for v in str(raw).replace("[", "").replace("]", "").split(",") if v.strip()]
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def apply_section(cfg: RunConfig, section: str, values: dict):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    known = {f.name for f in fields(sec)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(sec, key, _parse(raw, getattr(sec, key), f"{section}.{key}"))


def load_config(path: str | os.PathLike | None = None, preset: str | None = None,
                seed: int | None = None) -> RunConfig:
    """Defaults, then ``preset``, then the file at ``path``, then ``seed``."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for section, values in PRESETS[preset].items():
            apply_section(cfg, section, values)
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            apply_section(cfg, section, dict(parser[section]))
    if seed is not None:
        cfg.run.seed = seed
    cfg.validate()
    return cfg
