"""Adversarial, reconstruction and identity objectives.

Discriminator outputs are probabilities; both heads are scored with binary
cross entropy (patch map averaged over its elements) and the two heads are
weighted equally.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import torch

from .model import DiscriminatorOutput, InputError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 10.0
    lambda_idt: float = 10.0

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_idt < 0:
            raise ValueError("loss weights must be non-negative")


def bce(p: torch.Tensor, target: float) -> torch.Tensor:
    """Mean binary cross entropy of probabilities ``p`` against a constant label."""
    p = p.clamp(EPS, 1 - EPS)
    if target == 1:
        return -torch.log(p).mean()
    if target == 0:
        return -torch.log1p(-p).mean()
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def head_bce(out: DiscriminatorOutput, target: float) -> torch.Tensor:
    return 0.5 * bce(out.patch_map, target) + 0.5 * bce(out.global_score, target)


def adv_loss_d(real_out: DiscriminatorOutput, fake_outs: Sequence[DiscriminatorOutput]) -> torch.Tensor:
    """Real scored once against 1, plus the mean over fakes scored against 0."""
    if not fake_outs:
        raise ValueError("need at least one fake output")
    fake = sum(head_bce(f, 0.0) for f in fake_outs) / len(fake_outs)
    return head_bce(real_out, 1.0) + fake


def adv_loss_g(fake_outs: Sequence[DiscriminatorOutput]) -> torch.Tensor:
    if not fake_outs:
        raise ValueError("need at least one fake output")
    return sum(head_bce(f, 1.0) for f in fake_outs) / len(fake_outs)


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def reconstruction_loss(x_i: torch.Tensor, recovered: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over the N-1 cycle recoveries ``G_i(G_j(x_i))`` of their mean L1 error."""
    if not recovered:
        raise ValueError("need at least one recovered image")
    return sum(l1(r, x_i) for r in recovered)


def identity_loss(x_i: torch.Tensor, self_translated: torch.Tensor) -> torch.Tensor:
    return l1(self_translated, x_i)


def total_generator_loss(adv_g_sum, rec_sum, idt_sum, w: LossWeights):
    return adv_g_sum + w.lambda_rec * rec_sum + w.lambda_idt * idt_sum


@dataclass
class LossRecord:
    adv_d: List[float]
    adv_g: List[float]
    rec: List[float]
    idt: List[float]
    total_g: float
    iter: int = 0
    epoch: int = 0

    @classmethod
    def from_terms(cls, adv_d, adv_g, rec, idt, w: LossWeights, iter=0, epoch=0):
        adv_d, adv_g, rec, idt = (list(map(float, v)) for v in (adv_d, adv_g, rec, idt))
        total = float(total_generator_loss(math.fsum(adv_g), math.fsum(rec), math.fsum(idt), w))
        return cls(adv_d, adv_g, rec, idt, total, iter, epoch)

    def is_finite(self):
        vals = self.adv_d + self.adv_g + self.rec + self.idt + [self.total_g]
        return all(math.isfinite(v) for v in vals)

    def to_json_dict(self) -> Dict[str, float]:
        d = {"iter": self.iter, "epoch": self.epoch}
        for key in ("adv_d", "adv_g", "rec", "idt"):
            for i, v in enumerate(getattr(self, key)):
                d[f"{key}.{i}"] = v
        d["total_g"] = self.total_g
        return d

    @classmethod
    def from_json_dict(cls, d):
        def collect(key):
            out, i = [], 0
            while f"{key}.{i}" in d:
                out.append(d[f"{key}.{i}"])
                i += 1
            return out
        return cls(collect("adv_d"), collect("adv_g"), collect("rec"), collect("idt"),
                   d["total_g"], d.get("iter", 0), d.get("epoch", 0))

    @staticmethod
    def mean(records: Sequence["LossRecord"]) -> "LossRecord":
        n = len(records)
        def avg(key):
            return [math.fsum(v) / n for v in zip(*(getattr(r, key) for r in records))]
        return LossRecord(avg("adv_d"), avg("adv_g"), avg("rec"), avg("idt"),
                          math.fsum(r.total_g for r in records) / n,
                          records[-1].iter, records[-1].epoch)
