"""Experiment configuration: one flat-keyed YAML file, overridable by flags."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import yaml

from .data import SynthSpec
from .losses import LossWeights
from .model import ConfigError, GeneratorConfig
from .trainer import TrainConfig, config_hash

DETERMINISTIC_ENV = "MDT_DETERMINISTIC"


@dataclass
class ExperimentConfig:
    """Everything one experiment needs, with desk-scale defaults.

    Keys in a config file use dotted paths (``train.epochs``) or nested
    mappings; both flatten to the same field names.
    """
    seed: int = 1
    out: str = "runs/mdt"
    dataset: Optional[str] = None
    image_size: int = 64
    domains: int = 3
    # generator / discriminator
    base_channels: int = 32
    num_downsample: int = 3
    num_res_blocks: int = 3
    disc_base_channels: int = 16
    # training
    epochs: int = 20
    lr: float = 2e-4
    lambda_rec: float = 10.0
    lambda_idt: float = 10.0
    iters: Optional[int] = None
    batch_size: int = 1
    identity_fakes: bool = True
    # synthetic data
    train_per_domain: int = 150
    test_per_domain: int = 99
    data_seed: int = 0
    # metrics
    blocks: int = 100
    block_size: int = 50
    embed_dim: int = 64
    classifier_epochs: int = 8

    KEYS = {
        "model.base_channels": "base_channels", "model.num_downsample": "num_downsample",
        "model.num_res_blocks": "num_res_blocks", "model.disc_base_channels": "disc_base_channels",
        "train.epochs": "epochs", "train.lr": "lr", "train.lambda_rec": "lambda_rec",
        "train.lambda_idt": "lambda_idt", "train.iters": "iters", "train.batch_size": "batch_size",
        "train.identity_fakes": "identity_fakes",
        "synth.train_per_domain": "train_per_domain", "synth.test_per_domain": "test_per_domain",
        "synth.seed": "data_seed",
        "metrics.blocks": "blocks", "metrics.block_size": "block_size",
        "metrics.embed_dim": "embed_dim", "metrics.classifier_epochs": "classifier_epochs",
    }

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(num_domains=self.domains, image_size=self.image_size,
                               base_channels=self.base_channels, num_downsample=self.num_downsample,
                               num_res_blocks=self.num_res_blocks)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr0=self.lr, batch_size=self.batch_size,
                           loss_weights=LossWeights(self.lambda_rec, self.lambda_idt), seed=self.seed,
                           iterations_per_epoch="auto" if self.iters is None else self.iters,
                           identity_fakes=self.identity_fakes, disc_base_channels=self.disc_base_channels)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(num_domains=self.domains, image_size=self.image_size,
                         train_per_domain=self.train_per_domain, test_per_domain=self.test_per_domain,
                         seed=self.data_seed)

    def validate(self):
        try:
            self.generator_config().validate()
            self.train_config().validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.blocks < 1 or self.block_size < 2:
            raise ConfigError("KID needs blocks >= 1 and block_size >= 2")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def model_hash(self) -> str:
        """Hash of the settings that define a checkpoint; shared with the trainer."""
        return config_hash(self.generator_config(), self.train_config())

    def hash(self) -> str:
        """Hash of the whole experiment (data and metric settings too, not the output path)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, mapping, base: Optional["ExperimentConfig"] = None):
        values = base.to_dict() if base is not None else {}
        names = cls.field_names()
        for key, value in flatten(mapping).items():
            name = cls.KEYS.get(key, key)
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            values[name] = value
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, overrides=None):
        """Read a YAML file and apply ``overrides`` (flags win over the file)."""
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        cfg = cls.from_mapping(raw)
        return cfg.from_mapping(overrides or {}, base=cfg)


def flatten(mapping, prefix=""):
    out = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


def deterministic_mode(env=None) -> bool:
    """Honour the deterministic-mode env var: one thread, deterministic kernels."""
    env = os.environ if env is None else env
    on = env.get(DETERMINISTIC_ENV, "").strip().lower() not in ("", "0", "false", "no")
    if on:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return on
