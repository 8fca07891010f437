"""Shared-encoder / multi-decoder generator and dual-output patch discriminators.

One encoder embeds an image from any domain into a common latent space; one
decoder per domain renders that latent (plus the encoder's skip features) in
its own domain. Every domain also owns a discriminator with a per-patch head
and a whole-image head.
"""

import copy
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class DomainError(IndexError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    num_domains: int = 3
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 64
    num_downsample: int = 3
    num_res_blocks: int = 6
    lrelu_slope: float = 0.2

    def validate(self):
        if self.num_domains < 2:
            raise ConfigError(f"need at least 2 domains, got {self.num_domains}")
        if self.num_downsample < 1:
            raise ConfigError("num_downsample must be >= 1")
        if self.num_res_blocks < 0:
            raise ConfigError("num_res_blocks must be >= 0")
        if min(self.image_size, self.in_channels, self.base_channels) <= 0:
            raise ConfigError("image_size, in_channels and base_channels must be positive")
        if self.image_size % (2 ** self.num_downsample):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2**{self.num_downsample}")
        # instance norm needs more than one spatial element at the bottleneck
        if self.image_size // (2 ** self.num_downsample) < 2:
            raise ConfigError("bottleneck would be 1x1; lower num_downsample")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    base_channels: int = 64
    num_downsample: int = 3
    max_channels: int = 512
    lrelu_slope: float = 0.2

    def validate(self, image_size=None):
        if self.num_downsample < 1 or self.base_channels <= 0 or self.in_channels <= 0:
            raise ConfigError("invalid discriminator config")
        if image_size is not None and image_size // (2 ** self.num_downsample) < 3:
            raise ConfigError(
                f"image_size {image_size} too small for {self.num_downsample} down-sampling stages")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def matching(cls, gen_cfg: GeneratorConfig, base_channels=None, num_downsample=3):
        """Discriminator settings compatible with a generator config."""
        max_down = 1
        while gen_cfg.image_size // (2 ** (max_down + 1)) >= 3:
            max_down += 1
        return cls(in_channels=gen_cfg.in_channels,
                   base_channels=base_channels or gen_cfg.base_channels,
                   num_downsample=min(num_downsample, max_down),
                   lrelu_slope=gen_cfg.lrelu_slope)


def init_weights(module: nn.Module, generator: torch.Generator, std=0.02):
    """Zero-mean Gaussian weights, zero biases, drawn from ``generator``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()


def _norm(ch):
    # per-sample statistics in train and eval alike
    return nn.InstanceNorm2d(ch, affine=False, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, ch, slope=0.2):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1), _norm(ch), nn.LeakyReLU(slope),
            nn.Conv2d(ch, ch, 3, 1, 1), _norm(ch),
        )

    def forward(self, x):
        return x + self.body(x)


def _channels(cfg: GeneratorConfig) -> List[int]:
    """Feature counts after each down-sampling stage, finest first."""
    return [cfg.base_channels * 2 ** k for k in range(cfg.num_downsample)]


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = _channels(cfg)
        stages, prev = [], cfg.in_channels
        for ch in chans:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, ch, 4, 2, 1), _norm(ch), nn.LeakyReLU(cfg.lrelu_slope)))
            prev = ch
        self.down = nn.ModuleList(stages)
        self.res = nn.Sequential(*[ResidualBlock(prev, cfg.lrelu_slope)
                                   for _ in range(cfg.num_res_blocks)])

    def forward(self, x) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        skips = []
        for stage in self.down:
            x = stage(x)
            skips.append(x)
        return self.res(x), skips


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = _channels(cfg)
        self.res = nn.Sequential(*[ResidualBlock(chans[-1], cfg.lrelu_slope)
                                   for _ in range(cfg.num_res_blocks)])
        stages = []
        prev = chans[-1]
        # coarsest first; each stage consumes [features, skip] concatenated
        for k in reversed(range(cfg.num_downsample)):
            out = chans[k - 1] if k > 0 else cfg.in_channels
            layers = [nn.ConvTranspose2d(prev + chans[k], out, 4, 2, 1)]
            if k > 0:
                layers += [_norm(out), nn.LeakyReLU(cfg.lrelu_slope)]
            stages.append(nn.Sequential(*layers))
            prev = out
        self.up = nn.ModuleList(stages)

    def forward(self, latent, skips):
        x = self.res(latent)
        for stage, skip in zip(self.up, reversed(skips)):
            x = stage(torch.cat([x, skip], dim=1))
        return torch.tanh(x)


class GeneratorBundle(nn.Module):
    """The shared encoder plus ``num_domains`` decoders.

    Tensors are batched ``(B, C, H, W)``; a single ``(C, H, W)`` image is
    accepted and returned unbatched.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.config = cfg.validate()
        self.encoder = Encoder(cfg)
        self.decoder = nn.ModuleList([Decoder(cfg) for _ in range(cfg.num_domains)])

    @property
    def num_domains(self):
        return self.config.num_domains

    def _check_input(self, x):
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.dim() not in (3, 4) or tuple(x.shape[-3:]) != expected:
            raise InputError(f"expected image of shape {expected}, got {tuple(x.shape)}")

    def encode(self, x):
        self._check_input(x)
        single = x.dim() == 3
        latent, skips = self.encoder(x.unsqueeze(0) if single else x)
        if single:
            return latent[0], [s[0] for s in skips]
        return latent, skips

    def decode(self, domain: int, latent, skips):
        if not 0 <= domain < self.num_domains:
            raise DomainError(f"domain {domain} out of range [0, {self.num_domains})")
        single = latent.dim() == 3
        if single:
            latent, skips = latent.unsqueeze(0), [s.unsqueeze(0) for s in skips]
        out = self.decoder[domain](latent, skips)
        return out[0] if single else out

    def translate(self, x, target: int):
        return self.decode(target, *self.encode(x))

    def translate_all(self, x):
        """Translate ``x`` into every domain, encoding it only once."""
        latent, skips = self.encode(x)
        return [self.decode(j, latent, skips) for j in range(self.num_domains)]

    def forward(self, x, target: int):
        return self.translate(x, target)


def build_generator(config: GeneratorConfig, seed: int) -> GeneratorBundle:
    """Build a bundle whose decoders all start from one shared random init."""
    config.validate()
    g = torch.Generator().manual_seed(seed)
    bundle = GeneratorBundle(config)
    init_weights(bundle.encoder, g)
    init_weights(bundle.decoder[0], g)
    for j in range(1, config.num_domains):
        bundle.decoder[j].load_state_dict(bundle.decoder[0].state_dict())
    return bundle


class DiscriminatorOutput(NamedTuple):
    patch_map: torch.Tensor
    global_score: torch.Tensor


class Discriminator(nn.Module):
    """PatchGAN trunk with a per-patch head and a whole-image head.

    With the default three stride-2 stages the patch head sees 70x70
    receptive fields (256x256 input gives a 30x30 map).
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.config = cfg.validate()
        s = cfg.lrelu_slope
        ch = cfg.base_channels
        layers = [nn.Conv2d(cfg.in_channels, ch, 4, 2, 1), nn.LeakyReLU(s)]
        for _ in range(cfg.num_downsample - 1):
            nxt = min(ch * 2, cfg.max_channels)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), _norm(nxt), nn.LeakyReLU(s)]
            ch = nxt
        nxt = min(ch * 2, cfg.max_channels)
        layers += [nn.Conv2d(ch, nxt, 4, 1, 1), _norm(nxt), nn.LeakyReLU(s)]
        self.trunk = nn.Sequential(*layers)
        self.patch_head = nn.Conv2d(nxt, 1, 4, 1, 1)
        self.global_head = nn.Conv2d(nxt, 1, 4, 2, 1)

    def forward(self, x) -> DiscriminatorOutput:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise InputError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        h = self.trunk(x)
        patch = torch.sigmoid(self.patch_head(h))
        scalar = torch.sigmoid(self.global_head(h).mean(dim=(1, 2, 3)))
        return DiscriminatorOutput(patch, scalar)


def build_discriminator(config: DiscriminatorConfig, seed: int) -> Discriminator:
    g = torch.Generator().manual_seed(seed)
    d = Discriminator(config)
    init_weights(d, g)
    return d


def build_discriminators(config: DiscriminatorConfig, num_domains: int, seed: int) -> nn.ModuleList:
    """One discriminator per domain, all starting from the same weights."""
    first = build_discriminator(config, seed)
    return nn.ModuleList([first] + [copy.deepcopy(first) for _ in range(num_domains - 1)])


def discriminate(d: Discriminator, x) -> DiscriminatorOutput:
    if x.dim() == 3:
        out = d(x.unsqueeze(0))
        return DiscriminatorOutput(out.patch_map[0], out.global_score[0])
    return d(x)


def patch_map_size(image_size: int, num_downsample: int = 3) -> int:
    """Side length of the patch map from conv shape arithmetic."""
    size = image_size
    for _ in range(num_downsample):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = (size + 2 - 4) // 1 + 1
    return size


def receptive_field(num_downsample: int = 3) -> int:
    strides = [2] * num_downsample + [1, 1]
    rf, jump = 1, 1
    for s in strides:
        rf += 3 * jump
        jump *= s
    return rf
