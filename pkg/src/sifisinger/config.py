"""Hierarchical run configuration: dataclasses, YAML round trip, ``--key=value`` overrides.

Three presets ship with the package:

* ``paper``: the full-size model (hidden 192, filter 768, 8 posterior
  layers, generator [8, 8, 4, 2] / hidden 256, batch 16, 500k steps).
* ``desk``: the same architecture at reduced width and depth, sized so that
  a few thousand steps on one CPU core finish in well under an hour.
* ``tiny``: smallest sensible widths, for unit tests.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dsp import DSPConfig
from .generator import DiscriminatorConfig, GeneratorConfig
from .pitch import PitchNetConfig
from .posterior import PosteriorConfig
from .prior import EncoderConfig
from .source import SourceConfig


@dataclass
class ModelConfig:
    prior: EncoderConfig = field(default_factory=EncoderConfig)
    posterior: PosteriorConfig = field(default_factory=PosteriorConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass
class TrainConfig:
    batch_size: int = 16
    total_steps: int = 500_000
    learning_rate: float = 2e-4
    betas: list = field(default_factory=lambda: [0.8, 0.99])
    adam_eps: float = 1e-9
    weight_decay: float = 0.01
    lr_decay: float = 0.999
    steps_per_epoch: int = 0          # 0: ceil(n_utterances / batch_size)
    grad_clip: float = 5.0
    seed: int = 1234
    segment_frames: int = 16          # 16 * 512 = 8192 samples
    lambda1: float = 1.0              # LF0 MSE in the acoustic loss
    lambda2: float = 1.0              # mcep L1 in the acoustic loss
    lambda_vuv: float = 1.0           # voicing BCE folded into the acoustic loss
    lambda_mel: float = 45.0
    lambda_fm: float = 2.0
    lambda_f0: float = 1.0
    lambda_mcep: float = 1.0
    diff_recon: bool = True           # False drops the F0 / mcep reconstruction terms
    f0_loss_scale: str = "log"
    log_every: int = 10
    checkpoint_every: int = 5000
    infer_noise_scale: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("Adam betas must lie in (0, 1)")
        for name in ("lambda1", "lambda2", "lambda_mel", "lambda_fm", "lambda_f0", "lambda_mcep"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Config:
    dsp: DSPConfig = field(default_factory=DSPConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pitch: PitchNetConfig = field(default_factory=PitchNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        p, q, g = self.model.prior, self.model.posterior, self.model.generator
        if not (p.latent_size == q.latent_size == g.latent_size):
            raise ValueError("prior, posterior and generator latent sizes must agree")
        if g.hop != self.dsp.hop:
            raise ValueError(f"generator upsampling product {g.hop} must equal the frame hop {self.dsp.hop}")
        if self.source.sample_rate != self.dsp.sample_rate:
            raise ValueError("source sample rate must equal the waveform sample rate")
        if p.mcep_dims != self.dsp.mcep_dims or q.mcep_dims != self.dsp.mcep_dims:
            raise ValueError("mcep dimensionality mismatch")
        return self

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).write_text(self.to_yaml())


def _build(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in (data or {}).items():
        if k not in hints:
            raise KeyError(f"unknown config key {cls.__name__}.{k}")
        default = hints[k].default_factory() if hints[k].default_factory is not dataclasses.MISSING else hints[k].default
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v)
        elif isinstance(default, tuple) and isinstance(v, list):
            kwargs[k] = tuple(v)
        elif isinstance(default, float) and isinstance(v, (str, int)) and not isinstance(v, bool):
            # YAML 1.1 reads "5e-4" as a string
            try:
                kwargs[k] = float(v)
            except ValueError:
                raise ValueError(f"{cls.__name__}.{k} expects a number, got {v!r}") from None
        else:
            kwargs[k] = v
    return cls(**kwargs)


def from_dict(data) -> Config:
    return _build(Config, data).validate()


def load_config(path) -> Config:
    return from_dict(yaml.safe_load(Path(path).read_text()) or {})


def apply_overrides(cfg: Config, overrides) -> Config:
    """Apply ``["train.learning_rate=1e-4", "source.alpha=0.2", ...]``; values are YAML-parsed."""
    data = cfg.to_dict()
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def paper_config() -> Config:
    return Config().validate()


def desk_config() -> Config:
    cfg = Config(
        model=ModelConfig(
            prior=EncoderConfig(hidden_size=64, filter_channels=256, encoder_layers=2, decoder_layers=2,
                                am_layers=2, latent_size=64, duration_filter=64, dropout=0.0),
            posterior=PosteriorConfig(hidden_size=64, n_layers=4, latent_size=64),
            generator=GeneratorConfig(latent_size=64, hidden=128, resblock_kernel_sizes=[3, 7],
                                      resblock_dilations=[[1, 3, 5], [1, 3, 5]]),
            discriminator=DiscriminatorConfig(period_channels=[8, 16, 32, 64, 64], spec_channels=8),
        ),
        train=TrainConfig(batch_size=2, total_steps=2000, learning_rate=1e-3, lr_decay=0.9995,
                          steps_per_epoch=1, segment_frames=16, log_every=10, checkpoint_every=1000),
    )
    return cfg.validate()


def tiny_config() -> Config:
    cfg = desk_config()
    p = cfg.model.prior
    p.hidden_size, p.filter_channels, p.latent_size, p.duration_filter = 16, 32, 8, 16
    p.encoder_layers = p.decoder_layers = p.am_layers = 1
    cfg.model.posterior = PosteriorConfig(hidden_size=16, n_layers=2, latent_size=8)
    cfg.model.generator = GeneratorConfig(latent_size=8, hidden=32, resblock_kernel_sizes=[3],
                                          resblock_dilations=[[1, 3]])
    cfg.model.discriminator = DiscriminatorConfig(period_channels=[4, 4, 8, 8, 8], spec_channels=4)
    cfg.train.batch_size = 1
    cfg.train.segment_frames = 8
    return cfg.validate()


PRESETS = {"paper": paper_config, "desk": desk_config, "tiny": tiny_config}


def preset(name: str) -> Config:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
