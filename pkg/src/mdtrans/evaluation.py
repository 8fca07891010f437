"""Many-to-many evaluation of a trained bundle on a test split."""

from typing import Dict, List, Optional

import numpy as np
import torch

from . import metrics as M
from .data import MultiDomainDataset
from .model import GeneratorBundle

ACROSS = "across_all_domains"


@torch.no_grad()
def translate_split(gen: GeneratorBundle, split: MultiDomainDataset, batch_size=64) -> List[List[torch.Tensor]]:
    """``out[i][j]`` holds every test image of domain ``i`` translated into domain ``j``."""
    gen.eval()
    dtype = next(gen.parameters()).dtype
    out = []
    for i in range(split.num_domains):
        x = split.domain_images(i, dtype)
        chunks = [gen.translate_all(x[k:k + batch_size]) for k in range(0, len(x), batch_size)]
        out.append([torch.cat([c[j] for c in chunks]).float() for j in range(gen.num_domains)])
    return out


def ground_truth(split: MultiDomainDataset, source: int, target: int) -> torch.Tensor:
    idx = [split.partner(source, k, target) for k in range(split.sizes()[source])]
    return split.domain_images(target)[idx]


def evaluate(fakes: List[List[torch.Tensor]], split: MultiDomainDataset, classifier,
             embedder: M.Embedder, task="translation", block_size=50, blocks=100, seed=0,
             thresholds=None) -> Dict:
    """Score translations ``fakes[i][j]`` against the real test split.

    Paired metrics (SSIM, cosine distance, SSIM exceedance curve) need
    ``split`` to carry a pairing table and are reported as ``None`` otherwise.
    """
    n = split.num_domains
    names = split.names
    thresholds = np.round(np.linspace(0, 1, 101), 2).tolist() if thresholds is None else thresholds
    rng = np.random.default_rng(seed)
    real_fs = [M.embed(split.domain_images(d), embedder) for d in range(n)]

    rows, all_ssim, per_target_hits = {}, [], {j: [] for j in range(n)}
    fake_fs = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            fake_fs[i][j] = M.embed(fakes[i][j], embedder)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            fake = fakes[i][j]
            row = {}
            pred = classifier.predict(fake) if hasattr(classifier, "predict") else None
            hits = (pred == j).double() if pred is not None else torch.as_tensor(
                [M.classification_accuracy(classifier, fake[k:k + 1], [j]) for k in range(len(fake))])
            per_target_hits[j].append(hits)
            row["accuracy"] = float(hits.mean())
            row["fid"] = M.fid(fake_fs[i][j], real_fs[j])
            bs = min(block_size, len(fake), len(real_fs[j]))
            row["kid_mean"], row["kid_std"] = M.kid(fake_fs[i][j], real_fs[j], bs, blocks, rng)
            if split.paired:
                gt = ground_truth(split, i, j)
                s = M.ssim_batch(fake, gt).numpy()
                all_ssim.append(s)
                row["ssim_mean"], row["ssim_std"] = float(s.mean()), float(s.std())
                pairing = [split.partner(i, k, j) for k in range(len(fake))]
                row["cosine_distance"] = M.cosine_feature_distance(real_fs[j], fake_fs[i][j], pairing)
            else:
                row["ssim_mean"] = row["ssim_std"] = row["cosine_distance"] = None
            rows[f"{names[i]}->{names[j]}"] = row

    pair_rows = list(rows.values())
    across = {
        "accuracy": float(np.mean([r["accuracy"] for r in pair_rows])),
        "fid": M.fid(_stack([fake_fs[i][j] for i in range(n) for j in range(n) if i != j]),
                     _stack(real_fs)),
    }
    pooled_fake = _stack([fake_fs[i][j] for i in range(n) for j in range(n) if i != j])
    pooled_real = _stack(real_fs)
    bs = min(block_size, len(pooled_fake), len(pooled_real))
    across["kid_mean"], across["kid_std"] = M.kid(pooled_fake, pooled_real, bs, blocks, rng)
    if split.paired:
        s = np.concatenate(all_ssim)
        across["ssim_mean"], across["ssim_std"] = float(s.mean()), float(s.std())
        across["cosine_distance"] = float(np.mean([r["cosine_distance"] for r in pair_rows]))
        curve = M.iqa_curve(s, thresholds)
    else:
        across["ssim_mean"] = across["ssim_std"] = across["cosine_distance"] = None
        curve = None
    across["diversity"] = float(np.mean([M.diversity_score(fake_fs[i]) for i in range(n)]))
    rows[ACROSS] = across

    per_target = {names[j]: float(torch.cat(per_target_hits[j]).mean()) for j in range(n)}
    return {
        "embedder": embedder.id,
        "seed": seed,
        "kid": {"block_size": block_size, "blocks": blocks},
        "results": {task: rows},
        "target_accuracy": {task: per_target},
        "curves": {"ssim": curve},
    }


def _stack(sets: List[M.FeatureSet]) -> M.FeatureSet:
    return M.FeatureSet(np.concatenate([s.features for s in sets]), sets[0].embedder_id)
