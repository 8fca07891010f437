"""Desk-scale synthetic experiments: the end-to-end run and the loss ablation.

Training results are cached by configuration hash so that scoring can be
repeated without retraining; metrics are always recomputed from the saved
checkpoint.
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .config import ExperimentConfig
from .data import SynthDataset, synth_generate
from .evaluation import ACROSS, evaluate, translate_split
from .metrics import train_domain_classifier
from .trainer import JsonlSink, TrainState, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

# (lambda_rec, lambda_idt) per loss variant
ABLATIONS = {"GAN": (0.0, 0.0), "GAN+idt": (0.0, 10.0), "GAN+rec": (10.0, 0.0), "full": (10.0, 10.0)}


def desk_config(**overrides) -> ExperimentConfig:
    """The configuration of the end-to-end synthetic run."""
    return replace(ExperimentConfig(), **overrides).validate()


def variant_config(base: ExperimentConfig, variant: str, seed: int) -> ExperimentConfig:
    lam_rec, lam_idt = ABLATIONS[variant]
    return replace(base, lambda_rec=lam_rec, lambda_idt=lam_idt, seed=seed).validate()


def run_key(cfg: ExperimentConfig) -> str:
    """Identifies a trained model: model/optimizer settings plus the data it saw."""
    blob = json.dumps({"model": cfg.model_hash(), "data": cfg.synth_spec().to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    config: ExperimentConfig
    state: TrainState
    train_seconds: float
    cached: bool
    log_path: Path


def run_training(cfg: ExperimentConfig, dataset: SynthDataset, cache_dir) -> RunResult:
    """Train ``cfg`` on ``dataset.train`` or reuse a finished run from ``cache_dir``."""
    cache_dir = Path(cache_dir)
    key = run_key(cfg)
    ckpt, meta_path, log_path = (cache_dir / f"{key}.ckpt", cache_dir / f"{key}.json",
                                 cache_dir / f"{key}.jsonl")
    if ckpt.exists() and meta_path.exists():
        state = load_checkpoint(ckpt, expect_gen_cfg=cfg.generator_config())
        meta = json.loads(meta_path.read_text())
        if state.epoch == cfg.epochs and state.config_hash == cfg.model_hash():
            return RunResult(cfg, state, meta["train_seconds"], True, log_path)
        log.warning("ignoring stale cache entry %s", ckpt)
    cache_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state = train(dataset.train.without_pairing(), cfg.generator_config(), cfg.train_config(),
                  sinks=[JsonlSink(log_path, cfg.model_hash())])
    seconds = time.perf_counter() - t0
    save_checkpoint(state, ckpt)
    meta_path.write_text(json.dumps({"train_seconds": seconds, "config": cfg.to_dict(),
                                     "config_hash": cfg.model_hash()}, indent=2, sort_keys=True))
    return RunResult(cfg, state, seconds, False, log_path)


def judge(dataset: SynthDataset, cfg: ExperimentConfig):
    """The fixed domain classifier (and its embedder) every run is scored with."""
    return train_domain_classifier(dataset.train, embed_dim=cfg.embed_dim,
                                   epochs=cfg.classifier_epochs, seed=0)


def score(state: TrainState, dataset: SynthDataset, judged, cfg: ExperimentConfig) -> Dict:
    classifier, embedder = judged
    fakes = translate_split(state.generator, dataset.test)
    report = evaluate(fakes, dataset.test, classifier, embedder, block_size=cfg.block_size,
                      blocks=cfg.blocks, seed=cfg.seed)
    report["config_hash"] = state.config_hash
    return report


def summary(report: Dict) -> Dict:
    rows = report["results"]["translation"]
    return {
        "ssim": rows[ACROSS]["ssim_mean"],
        "pair_ssim": {k: v["ssim_mean"] for k, v in rows.items() if k != ACROSS},
        "target_accuracy": report["target_accuracy"]["translation"],
        "diversity": rows[ACROSS]["diversity"],
    }


def ablation(base: ExperimentConfig, seeds, cache_dir, dataset: Optional[SynthDataset] = None,
             judged=None) -> Dict[str, Dict[int, float]]:
    """Mean test SSIM per loss variant and seed."""
    dataset = dataset or synth_generate(base.synth_spec())
    judged = judged or judge(dataset, base)
    out = {v: {} for v in ABLATIONS}
    for seed in seeds:
        for variant in ABLATIONS:
            cfg = variant_config(base, variant, seed)
            result = run_training(cfg, dataset, cache_dir)
            out[variant][seed] = summary(score(result.state, dataset, judged, cfg))["ssim"]
            log.info("ablation %s seed %d: ssim %.4f", variant, seed, out[variant][seed])
    return out


def ablation_verdict(table: Dict[str, Dict[int, float]]) -> Dict:
    seeds = sorted(table["full"])
    wins = sum(table["full"][s] > table["GAN"][s] for s in seeds)
    means = {v: float(np.mean([table[v][s] for s in seeds])) for v in table}
    return {"full_beats_gan": wins, "seeds": len(seeds), "means": means,
            "passed": wins >= 2 and means["full"] >= means["GAN+idt"]}
