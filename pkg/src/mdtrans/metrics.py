"""Image-quality and distribution metrics computed on a pluggable embedder.

SSIM works on raw pixels in [-1, 1]. FID, KID, cosine feature distance and
the diversity score work on :class:`FeatureSet` rows produced by an
:class:`Embedder`; feature sets from different embedders are never compared.
"""

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 2.0        # images live in [-1, 1]


class MetricError(ValueError):
    pass


class InsufficientSamples(MetricError):
    pass


# -- SSIM -------------------------------------------------------------------

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_components(x: torch.Tensor, y: torch.Tensor, data_range=DATA_RANGE):
    """Per-window luminance and contrast-structure maps, shape ``(B, C, h, w)``.

    Windows are 'valid' (no padding), so the maps are ``H - 10`` by ``W - 10``.
    """
    if x.shape != y.shape:
        raise InputError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise InputError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x, y = x.double().contiguous(), y.double().contiguous()
    c = x.shape[1]
    win = gaussian_window().expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim_batch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """SSIM of each pair in a ``(B, C, H, W)`` batch."""
    lum, cs = ssim_components(x, y)
    return (lum * cs).mean(dim=(1, 2, 3))


def ssim(x: torch.Tensor, y: torch.Tensor) -> float:
    """Windowed SSIM of two ``(C, H, W)`` images, averaged over windows and channels."""
    if x.dim() != 3:
        raise InputError("ssim expects single (C, H, W) images; use ssim_batch for batches")
    return float(ssim_batch(x, y)[0])


# -- feature sets -----------------------------------------------------------

@dataclass
class FeatureSet:
    features: np.ndarray       # (M, D)
    embedder_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise MetricError("features must be an (M, D) matrix")
        if not np.all(np.isfinite(self.features)):
            raise MetricError("features contain non-finite values")

    def __len__(self):
        return len(self.features)

    def subset(self, rows) -> "FeatureSet":
        return FeatureSet(self.features[rows], self.embedder_id)


def _same_embedder(a: FeatureSet, b: FeatureSet):
    if a.embedder_id != b.embedder_id:
        raise MetricError(f"feature sets come from different embedders: {a.embedder_id} vs {b.embedder_id}")
    if a.features.shape[1] != b.features.shape[1]:
        raise MetricError("feature dimensions differ")


class Embedder:
    """A deterministic image -> vector map with a stable identifier."""

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], dim: int, embedder_id: str,
                 input_shape: Optional[Tuple[int, int, int]] = None):
        self.fn = fn
        self.dim = dim
        self.id = embedder_id
        self.input_shape = input_shape

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return self.fn(images)


def embed(images, embedder: Embedder, batch_size=128) -> FeatureSet:
    """Embed a ``(K, C, H, W)`` tensor (or list of images) row by row."""
    if isinstance(images, (list, tuple)):
        images = torch.stack(list(images))
    if embedder.input_shape is not None and tuple(images.shape[1:]) != tuple(embedder.input_shape):
        raise InputError(f"embedder expects {embedder.input_shape}, got {tuple(images.shape[1:])}")
    rows = [embedder(images[k:k + batch_size]) for k in range(0, len(images), batch_size)]
    feats = torch.cat(rows) if rows else torch.zeros(0, embedder.dim)
    return FeatureSet(feats.double().numpy(), embedder.id)


# -- FID --------------------------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid_from_stats(mu_a, cov_a, mu_b, cov_b, eps=1e-6) -> float:
    """Frechet distance between two Gaussians, with ``eps * I`` added to both covariances."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a = np.atleast_2d(cov_a).astype(np.float64) + eps * np.eye(len(mu_a))
    cov_b = np.atleast_2d(cov_b).astype(np.float64) + eps * np.eye(len(mu_b))
    root_a = _sqrtm_psd(cov_a)
    # Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), the inner product being symmetric PSD
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sum(np.sqrt(np.clip(w, 0, None)))
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross
    return float(max(value, 0.0))


def fid(a: FeatureSet, b: FeatureSet, eps=1e-6) -> float:
    _same_embedder(a, b)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples("FID needs at least 2 rows per set")
    fa, fb = a.features, b.features
    return fid_from_stats(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False), eps)


# -- KID --------------------------------------------------------------------

def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    # the estimator ignores a common offset; removing one curbs cancellation
    ref = kxy[0, 0]
    kxx, kyy, kxy = kxx - ref, kyy - ref, kxy - ref
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def _digest(fs: FeatureSet) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(fs.features).tobytes()).digest()


def kid(a: FeatureSet, b: FeatureSet, block_size=50, blocks=100,
        rng: Optional[np.random.Generator] = None) -> Tuple[float, float]:
    """Block-averaged unbiased squared MMD; returns ``(mean, std)`` over blocks."""
    _same_embedder(a, b)
    if block_size < 2 or len(a) < block_size or len(b) < block_size:
        raise InsufficientSamples(
            f"KID needs at least block_size={block_size} >= 2 rows per set, got {len(a)} and {len(b)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    # subsample in content order so kid(a, b) == kid(b, a) for the same rng
    first, second = sorted((a, b), key=_digest)
    vals = []
    for _ in range(blocks):
        ia = rng.choice(len(first), block_size, replace=False)
        ib = rng.choice(len(second), block_size, replace=False)
        vals.append(mmd2_unbiased(first.features[ia], second.features[ib]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std())


# -- paired / diversity distances ------------------------------------------

def _cosine_distance_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """1 - cos per row; NaN where either vector has zero norm."""
    nu, nv = np.linalg.norm(u, axis=1), np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    out = np.full(len(u), np.nan)
    out[ok] = 1.0 - np.sum(u[ok] * v[ok], axis=1) / (nu[ok] * nv[ok])
    return np.clip(out, 0.0, 2.0)


def cosine_feature_distance(real_fs: FeatureSet, fake_fs: FeatureSet, pairing=None) -> float:
    """Mean ``1 - cos`` between each fake row and its paired real row.

    ``pairing[k]`` is the real row matched to fake row ``k`` (identity when None).
    """
    _same_embedder(real_fs, fake_fs)
    idx = np.arange(len(fake_fs)) if pairing is None else np.asarray(pairing)
    if len(idx) != len(fake_fs):
        raise MetricError("pairing must have one entry per fake row")
    d = _cosine_distance_rows(fake_fs.features, real_fs.features[idx])
    if np.isnan(d).any():
        warnings.warn(f"skipping {int(np.isnan(d).sum())} pair(s) with a zero-norm feature")
    if np.isnan(d).all():
        raise MetricError("no valid pairs")
    return float(np.nanmean(d))


def diversity_score(outputs: Sequence[FeatureSet]) -> float:
    """Mean pairwise ``1 - cos`` between one input's translations into different domains.

    ``outputs[t]`` holds, row for row, the embeddings of the same inputs
    translated into target domain ``t``. Zero means every domain's output
    embeds identically (collapse).
    """
    if len(outputs) < 2:
        raise MetricError("need outputs for at least 2 target domains")
    m = len(outputs[0])
    for fs in outputs[1:]:
        _same_embedder(outputs[0], fs)
        if len(fs) != m:
            raise MetricError("every target domain needs the same number of rows")
    dists = []
    for s in range(len(outputs)):
        for t in range(s + 1, len(outputs)):
            u, v = outputs[s].features, outputs[t].features
            same = np.all(u == v, axis=1)
            d = _cosine_distance_rows(u, v)
            d[same] = 0.0
            dists.append(np.nan_to_num(d, nan=0.0))
    return float(np.mean(dists))


# -- FR-IQA exceedance curve -----------------------------------------------

@dataclass
class IqaCurve:
    thresholds: List[float]
    fractions: List[float]

    def pairs(self):
        return list(zip(self.thresholds, self.fractions))

    def to_csv(self) -> str:
        lines = ["threshold,fraction"]
        lines += [f"{t:.6g},{f:.6g}" for t, f in self.pairs()]
        return "\n".join(lines) + "\n"


def iqa_curve(values, thresholds) -> IqaCurve:
    """Fraction of ``values`` strictly above each threshold."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise MetricError("values must be non-empty")
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise MetricError("thresholds must be sorted ascending")
    frac = (vals[None, :] > th[:, None]).mean(axis=1)
    return IqaCurve(th.tolist(), frac.tolist())


# -- domain classifier ------------------------------------------------------

class DomainClassifier(nn.Module):
    """Small conv net; its penultimate activations double as the default embedder."""

    def __init__(self, num_domains, in_channels=3, embed_dim=64, width=16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 4, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
            nn.Linear(width * 4 * 16, embed_dim), nn.ReLU(),
        )
        self.head = nn.Linear(embed_dim, num_domains)
        self.num_domains = num_domains
        self.embed_dim = embed_dim

    def embed(self, x):
        return self.features(x)

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, x, batch_size=256):
        self.eval()
        return torch.cat([self(x[k:k + batch_size]).argmax(1) for k in range(0, len(x), batch_size)])


def _state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:12]


def train_domain_classifier(dataset, embed_dim=64, epochs=8, seed=0, batch_size=32, lr=1e-3):
    """Fit a :class:`DomainClassifier` on every real image of ``dataset``.

    Returns the classifier and an :class:`Embedder` over its penultimate layer.
    """
    if dataset.num_domains < 2:
        raise MetricError("need at least 2 domains")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    c = dataset.image_shape[0]
    clf = DomainClassifier(dataset.num_domains, c, embed_dim)
    x = torch.cat([dataset.domain_images(d) for d in range(dataset.num_domains)])
    y = torch.cat([torch.full((n,), d, dtype=torch.long) for d, n in enumerate(dataset.sizes())])
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    clf.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=g)
        for k in range(0, len(x), batch_size):
            idx = perm[k:k + batch_size]
            opt.zero_grad()
            F.cross_entropy(clf(x[idx]), y[idx]).backward()
            opt.step()
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    emb = Embedder(clf.embed, embed_dim, f"domain-classifier-{_state_digest(clf)}", dataset.image_shape)
    return clf, emb


def classification_accuracy(classifier, images, target_labels) -> float:
    """Fraction of argmax predictions equal to the targets.

    ``classifier`` is a module or any callable returning per-class scores.
    """
    if len(images) == 0:
        raise MetricError("images must be non-empty")
    if isinstance(classifier, DomainClassifier):
        pred = classifier.predict(images)
    else:
        with torch.no_grad():
            pred = torch.as_tensor(classifier(images)).argmax(-1)
    target = torch.as_tensor(target_labels).reshape(-1)
    return float((pred.reshape(-1) == target).double().mean())
