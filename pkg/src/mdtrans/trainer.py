"""Alternating discriminator / generator training over unpaired bags.

Each iteration draws one bag, updates all discriminators against the current
translations, then updates the encoder and every decoder together in a
single backward pass.
"""

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import torch
import torch.nn as nn
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from . import losses as L
from .data import MultiDomainDataset, UnpairedBag, sample_bag
from .losses import LossRecord, LossWeights
from .model import (ConfigError, DiscriminatorConfig, GeneratorBundle, GeneratorConfig,
                    build_discriminators, build_generator)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingHalted(RuntimeError):
    def __init__(self, message, record=None, checkpoint_path=None):
        super().__init__(message)
        self.record = record
        self.checkpoint_path = checkpoint_path


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr0: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    iterations_per_epoch: Union[int, str] = "auto"
    identity_fakes: bool = True
    disc_base_channels: Optional[int] = None

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        ipe = self.iterations_per_epoch
        if ipe != "auto" and (not isinstance(ipe, int) or ipe < 1):
            raise ConfigError(f"iterations_per_epoch must be 'auto' or a positive int, got {ipe!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` for the first half of training, then linear decay to zero."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    half = cfg.epochs / 2
    if epoch < half:
        return cfg.lr0
    return cfg.lr0 * (1.0 - (epoch - half) / half)


def config_hash(gen_cfg: GeneratorConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"generator": gen_cfg.to_dict(), "train": train_cfg.to_dict()},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    """Everything needed to continue a run: models, optimizers, RNG, progress."""
    gen_cfg: GeneratorConfig
    train_cfg: TrainConfig
    disc_cfg: DiscriminatorConfig
    generator: GeneratorBundle
    discriminators: nn.ModuleList
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    epoch: int = 0          # completed epochs
    iteration: int = 0      # completed iterations
    meta: dict = field(default_factory=dict)  # free-form, JSON-serializable (e.g. domain names)

    @property
    def config_hash(self):
        return config_hash(self.gen_cfg, self.train_cfg)


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2),
                            eps=cfg.adam_eps, weight_decay=0.0)


def init_state(gen_cfg: GeneratorConfig, train_cfg: TrainConfig,
               disc_cfg: Optional[DiscriminatorConfig] = None, dtype=torch.float32) -> TrainState:
    gen_cfg.validate()
    train_cfg.validate()
    disc_cfg = disc_cfg or DiscriminatorConfig.matching(gen_cfg, train_cfg.disc_base_channels)
    disc_cfg.validate(gen_cfg.image_size)
    gen = build_generator(gen_cfg, train_cfg.seed).to(dtype)
    discs = build_discriminators(disc_cfg, gen_cfg.num_domains, train_cfg.seed + 1).to(dtype)
    rng = torch.Generator().manual_seed(train_cfg.seed + 2)
    return TrainState(gen_cfg, train_cfg, disc_cfg, gen, discs,
                      _adam(gen.parameters(), train_cfg), _adam(discs.parameters(), train_cfg), rng)


def set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


# -- one iteration ----------------------------------------------------------

def translate_bag(gen: GeneratorBundle, bag: UnpairedBag) -> List[torch.Tensor]:
    """``fakes[j]`` stacks ``G_j(x_i)`` for every source ``i`` (domain-major rows)."""
    x = torch.cat(bag.images)
    latent, skips = gen.encode(x)
    return [gen.decode(j, latent, skips) for j in range(gen.num_domains)]


def _split(t: torch.Tensor, n: int) -> List[torch.Tensor]:
    return list(t.chunk(n))


def _sources(i, n, identity_fakes):
    return [j for j in range(n) if identity_fakes or j != i]


def _disc_outputs(d, batch: torch.Tensor, n: int, keep: Sequence[int]):
    out = d(batch)
    patches, scores = _split(out.patch_map, n), _split(out.global_score, n)
    return [L.DiscriminatorOutput(patches[j], scores[j]) for j in keep]


def discriminator_step(bag: UnpairedBag, state: TrainState, lr: float,
                       fakes: Optional[List[torch.Tensor]] = None) -> List[float]:
    """Update every ``D_i`` once on its real ``x_i`` and its translated fakes."""
    n = state.gen_cfg.num_domains
    if fakes is None:
        with torch.no_grad():
            fakes = translate_bag(state.generator, bag)
    fakes = [f.detach() for f in fakes]
    set_lr(state.opt_d, lr)
    state.opt_d.zero_grad(set_to_none=True)
    per_domain = []
    for i, d in enumerate(state.discriminators):
        real = d(bag.images[i])
        fake_outs = _disc_outputs(d, fakes[i], n, _sources(i, n, state.train_cfg.identity_fakes))
        per_domain.append(L.adv_loss_d(real, fake_outs))
    total = sum(per_domain)
    if not torch.isfinite(total):
        raise TrainingHalted(f"non-finite discriminator loss: {[v.item() for v in per_domain]}")
    total.backward()
    state.opt_d.step()
    return [v.item() for v in per_domain]


def generator_objective(bag: UnpairedBag, state: TrainState,
                        fakes: Optional[List[torch.Tensor]] = None):
    """Total generator loss and its per-domain terms, discriminators frozen.

    Returns ``(total, adv_g, rec, idt)`` with the last three as lists of
    scalar tensors indexed by domain.
    """
    n = state.gen_cfg.num_domains
    w = state.train_cfg.loss_weights
    gen = state.generator
    if fakes is None:
        fakes = translate_bag(gen, bag)
    for p in state.discriminators.parameters():
        p.requires_grad_(False)
    try:
        adv_g = []
        for i, d in enumerate(state.discriminators):
            outs = _disc_outputs(d, fakes[i], n, _sources(i, n, state.train_cfg.identity_fakes))
            adv_g.append(L.adv_loss_g(outs))
    finally:
        for p in state.discriminators.parameters():
            p.requires_grad_(True)

    split = [_split(f, n) for f in fakes]      # split[j][i] = G_j(x_i)
    idt = [L.identity_loss(bag.images[i], split[i][i]) for i in range(n)]

    with torch.set_grad_enabled(torch.is_grad_enabled() and w.lambda_rec != 0):
        # G_i(G_j(x_i)) for every j != i, encoded as one batch grouped by i
        order = [(i, j) for i in range(n) for j in range(n) if j != i]
        latent, skips = gen.encode(torch.cat([split[j][i] for i, j in order]))
        rec = []
        for i in range(n):
            b = bag.images[i].shape[0]
            rows = slice(i * (n - 1) * b, (i + 1) * (n - 1) * b)
            recovered = _split(gen.decode(i, latent[rows], [s[rows] for s in skips]), n - 1)
            rec.append(L.reconstruction_loss(bag.images[i], recovered))

    total = L.total_generator_loss(sum(adv_g), sum(rec), sum(idt), w)
    return total, adv_g, rec, idt


def generator_step(bag: UnpairedBag, state: TrainState, lr: float,
                   fakes: Optional[List[torch.Tensor]] = None, iteration=0, epoch=0,
                   adv_d: Optional[List[float]] = None) -> LossRecord:
    """Update the encoder and all decoders in one backward pass."""
    n = state.gen_cfg.num_domains
    total, adv_g, rec, idt = generator_objective(bag, state, fakes)
    record = LossRecord.from_terms(adv_d or [math.nan] * n, [v.item() for v in adv_g],
                                   [v.item() for v in rec], [v.item() for v in idt],
                                   state.train_cfg.loss_weights, iter=iteration, epoch=epoch)
    if not torch.isfinite(total):
        raise TrainingHalted("non-finite generator loss", record)
    set_lr(state.opt_g, lr)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    return record


def train_iteration(bag: UnpairedBag, state: TrainState, lr: float, iteration=0, epoch=0) -> LossRecord:
    # one generator forward serves both phases; generator weights do not move in between
    fakes = translate_bag(state.generator, bag)
    adv_d = discriminator_step(bag, state, lr, fakes)
    return generator_step(bag, state, lr, fakes, iteration, epoch, adv_d)


# -- full run ---------------------------------------------------------------

class Sink:
    """Receives per-iteration records and per-epoch means; override what you need."""

    def on_iteration(self, record: LossRecord):
        pass

    def on_epoch(self, epoch: int, mean: LossRecord, state: TrainState):
        pass


class JsonlSink(Sink):
    def __init__(self, path, config_hash=None, append=False):
        self.path = Path(path)
        self.config_hash = config_hash
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("")

    def on_iteration(self, record):
        d = record.to_json_dict()
        if self.config_hash:
            d["config_hash"] = self.config_hash
        with self.path.open("a") as f:
            f.write(json.dumps(d) + "\n")


class ListSink(Sink):
    def __init__(self):
        self.records: List[LossRecord] = []
        self.epochs = []

    def on_iteration(self, record):
        self.records.append(record)

    def on_epoch(self, epoch, mean, state):
        self.epochs.append((epoch, mean))


class CallbackSink(Sink):
    def __init__(self, fn: Callable[[int, LossRecord, TrainState], None]):
        self.fn = fn

    def on_epoch(self, epoch, mean, state):
        self.fn(epoch, mean, state)


def iterations_per_epoch(dataset: MultiDomainDataset, cfg: TrainConfig) -> int:
    if cfg.iterations_per_epoch == "auto":
        return math.ceil(max(dataset.sizes()) / cfg.batch_size)
    return int(cfg.iterations_per_epoch)


def train(dataset: MultiDomainDataset, gen_cfg: GeneratorConfig, train_cfg: TrainConfig,
          sinks: Sequence[Sink] = (), out_dir=None, resume: Optional[TrainState] = None,
          stop_after_epoch: Optional[int] = None, dtype=torch.float32) -> TrainState:
    """Run (or continue) training and return the final state.

    With ``out_dir`` a checkpoint is written after every epoch as
    ``epoch_XXXX.ckpt`` and ``latest.ckpt``. ``stop_after_epoch`` ends the run
    early, which is how an interruption is simulated.
    """
    train_cfg.validate()
    if dataset.num_domains != gen_cfg.num_domains:
        raise ConfigError(f"dataset has {dataset.num_domains} domains, config expects {gen_cfg.num_domains}")
    for name, size in zip(dataset.names, dataset.sizes()):
        if size == 0:
            raise ConfigError(f"domain {name!r} is empty")
    if tuple(dataset.image_shape) != (gen_cfg.in_channels, gen_cfg.image_size, gen_cfg.image_size):
        raise ConfigError(f"dataset images {dataset.image_shape} do not match generator config")
    state = resume or init_state(gen_cfg, train_cfg, dtype=dtype)
    if resume is not None and (resume.gen_cfg != gen_cfg or resume.train_cfg != train_cfg):
        raise ConfigMismatchError("resume state was produced with a different configuration")
    out_dir = Path(out_dir) if out_dir is not None else None
    iters = iterations_per_epoch(dataset, train_cfg)
    last = train_cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, train_cfg.epochs)

    for epoch in range(state.epoch, last):
        lr = lr_at_epoch(epoch, train_cfg)
        records = []
        for _ in range(iters):
            bag = sample_bag(dataset, state.rng, train_cfg.batch_size, dtype)
            try:
                record = train_iteration(bag, state, lr, state.iteration, epoch)
            except TrainingHalted as exc:
                if out_dir is not None:
                    exc.checkpoint_path = save_checkpoint(state, out_dir / "halted.ckpt")
                log.error("training halted at epoch %d iteration %d: %s", epoch, state.iteration, exc)
                raise
            state.iteration += 1
            records.append(record)
            for s in sinks:
                s.on_iteration(record)
        state.epoch = epoch + 1
        if out_dir is not None:
            save_checkpoint(state, out_dir / f"epoch_{state.epoch:04d}.ckpt")
            save_checkpoint(state, out_dir / "latest.ckpt")
        mean = LossRecord.mean(records)
        log.info("epoch %d/%d lr=%.2e total_g=%.4f", state.epoch, train_cfg.epochs, lr, mean.total_g)
        for s in sinks:
            s.on_epoch(epoch, mean, state)
    return state


# -- checkpoints ------------------------------------------------------------

def _optimizer_tensors(prefix, opt, named_params):
    """Flatten Adam moments into named tensors keyed by parameter name."""
    out, meta = {}, {}
    index = {id(p): name for name, p in named_params}
    for p, st in opt.state.items():
        name = index[id(p)]
        for key, value in st.items():
            if torch.is_tensor(value):
                out[f"{prefix}.{name}.{key}"] = value.detach().clone()
            else:
                meta[f"{name}.{key}"] = value
    return out, meta


def _restore_optimizer(prefix, opt, named_params, tensors):
    for name, p in named_params:
        entries = {k[len(prefix) + len(name) + 2:]: v for k, v in tensors.items()
                   if k.startswith(f"{prefix}.{name}.")}
        if entries:
            opt.state[p] = {k: v.clone() for k, v in entries.items()}


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a zip holding ``manifest.json`` and ``tensors.safetensors``.

    The manifest records the format version, configs, config hash, progress
    and the SHA-256 of the tensor payload.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for k, v in state.generator.state_dict().items():
        tensors[k] = v.detach().clone().contiguous()
    for k, v in state.discriminators.state_dict().items():
        tensors[f"discriminator.{k}"] = v.detach().clone().contiguous()
    g_t, g_meta = _optimizer_tensors("opt_g", state.opt_g, state.generator.named_parameters())
    d_t, d_meta = _optimizer_tensors("opt_d", state.opt_d, state.discriminators.named_parameters())
    tensors.update(g_t)
    tensors.update(d_t)
    tensors["rng.bag"] = state.rng.get_state()
    payload = st_save(tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": state.config_hash,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "generator_config": state.gen_cfg.to_dict(),
        "train_config": state.train_cfg.to_dict(),
        "discriminator_config": state.disc_cfg.to_dict(),
        "optimizer_meta": {"opt_g": g_meta, "opt_d": d_meta},
        "dtype": str(next(state.generator.parameters()).dtype),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": state.meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr("tensors.safetensors", payload)
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: corrupt checkpoint ({exc})") from exc


def load_checkpoint(path, expect_gen_cfg: Optional[GeneratorConfig] = None) -> TrainState:
    """Load and verify a checkpoint; nothing is built unless every check passes."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("tensors.safetensors")
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise ChecksumError(f"{path}: corrupt checkpoint ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise ChecksumError(f"{path}: tensor payload checksum mismatch")
    gen_cfg = GeneratorConfig(**manifest["generator_config"])
    train_cfg = TrainConfig.from_dict(manifest["train_config"])
    disc_cfg = DiscriminatorConfig(**manifest["discriminator_config"])
    if expect_gen_cfg is not None and expect_gen_cfg != gen_cfg:
        raise ConfigMismatchError(
            f"checkpoint generator config {gen_cfg} does not match expected {expect_gen_cfg}")
    if config_hash(gen_cfg, train_cfg) != manifest["config_hash"]:
        raise ChecksumError(f"{path}: config hash does not match stored configs")
    tensors = st_load(payload)
    dtype = getattr(torch, manifest.get("dtype", "torch.float32").split(".")[-1])
    state = init_state(gen_cfg, train_cfg, disc_cfg, dtype=dtype)
    gen_sd = {k: v for k, v in tensors.items() if k.startswith(("encoder.", "decoder."))}
    disc_sd = {k[len("discriminator."):]: v for k, v in tensors.items() if k.startswith("discriminator.")}
    state.generator.load_state_dict(gen_sd, strict=True)
    state.discriminators.load_state_dict(disc_sd, strict=True)
    _restore_optimizer("opt_g", state.opt_g, state.generator.named_parameters(), tensors)
    _restore_optimizer("opt_d", state.opt_d, state.discriminators.named_parameters(), tensors)
    state.rng.set_state(tensors["rng.bag"])
    state.epoch = manifest["epoch"]
    state.iteration = manifest["iteration"]
    state.meta = dict(manifest.get("meta", {}))
    return state
