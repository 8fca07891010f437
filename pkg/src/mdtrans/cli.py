"""Command-line entry point: ``mdtrans synth | train | translate | evaluate``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .config import ExperimentConfig, deterministic_mode
from .data import DataError, decode_image, denormalize, load_split, synth_generate, write_synth
from .evaluation import evaluate, translate_split
from .metrics import MetricError, train_domain_classifier
from .model import ConfigError
from .trainer import (CheckpointError, ConfigMismatchError, JsonlSink, Sink, TrainingHalted, init_state,
                      load_checkpoint, read_manifest, train)

log = logging.getLogger("mdtrans")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_HALT, EXIT_IO = 0, 2, 3, 4, 5


def save_image(u8_chw: torch.Tensor, path, config_hash=None):
    """Write a uint8 (C,H,W) tensor as PNG, tagging it with the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = u8_chw.permute(1, 2, 0).contiguous().numpy()
    info = PngInfo()
    if config_hash:
        info.add_text("config_hash", config_hash)
    Image.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr).save(path, pnginfo=info)


def sample_grid(gen, exemplars: torch.Tensor) -> torch.Tensor:
    """Row ``i``: exemplar of domain ``i`` followed by its translation into every domain."""
    gen.eval()
    with torch.no_grad():
        outs = gen.translate_all(exemplars.to(next(gen.parameters()).dtype))
    gen.train()
    rows = [torch.cat([exemplars[i]] + [outs[j][i] for j in range(len(outs))], dim=2)
            for i in range(len(exemplars))]
    return denormalize(torch.cat(rows, dim=1).float())


class GridSink(Sink):
    def __init__(self, out_dir, exemplars, config_hash):
        self.out_dir = Path(out_dir)
        self.exemplars = exemplars
        self.config_hash = config_hash

    def on_epoch(self, epoch, mean, state):
        save_image(sample_grid(state.generator, self.exemplars),
                   self.out_dir / f"epoch_{epoch + 1:04d}.png", self.config_hash)


# -- config resolution ------------------------------------------------------

FLAG_FIELDS = {
    "seed": "seed", "out": "out", "image_size": "image_size", "domains": "domains",
    "epochs": "epochs", "lr": "lr", "lambda_rec": "lambda_rec", "lambda_idt": "lambda_idt",
    "iters": "iters", "dataset": "dataset", "blocks": "blocks", "block_size": "block_size",
}


def resolve_config(args) -> ExperimentConfig:
    overrides = {FLAG_FIELDS[k]: v for k, v in vars(args).items() if k in FLAG_FIELDS and v is not None}
    if args.command == "synth" and "seed" in overrides:
        overrides["data_seed"] = overrides.pop("seed")
    if args.config:
        cfg = ExperimentConfig.load(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_mapping(overrides)
    return cfg.validate()


def _load_dataset(cfg: ExperimentConfig):
    """Return (train split, test split or None); synthesizes in memory without --dataset."""
    if cfg.dataset is None:
        ds = synth_generate(cfg.synth_spec())
        return ds.train, ds.test
    root = Path(cfg.dataset)
    train_split = load_split(root, "train", cfg.image_size, with_pairing=False)
    test = load_split(root, "test", cfg.image_size) if (root / "test").is_dir() else None
    return train_split, test


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, args) -> Path:
    spec = cfg.synth_spec()
    try:
        spec.validate()
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    root = write_synth(synth_generate(spec), cfg.out)
    meta = json.loads((root / "spec.json").read_text())
    meta["config_hash"] = cfg.hash()
    (root / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"wrote synthetic dataset to {root}")
    return root


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    out = Path(cfg.out)
    train_split, test = _load_dataset(cfg)
    gen_cfg, train_cfg = cfg.generator_config(), cfg.train_config()
    if args.resume:
        state = load_checkpoint(args.resume, expect_gen_cfg=gen_cfg)
        if state.config_hash != cfg.model_hash():
            raise ConfigMismatchError(f"{args.resume} was written with config {state.config_hash}, "
                                      f"current config is {cfg.model_hash()}")
        _truncate_log(out / "log.jsonl", state.iteration)
    else:
        state = init_state(gen_cfg, train_cfg)
        state.meta["domain_names"] = list(train_split.names)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    source = test if test is not None else train_split
    exemplars = torch.stack([source.image(d, 0) for d in range(source.num_domains)])
    sinks = [JsonlSink(out / "log.jsonl", state.config_hash, append=bool(args.resume)),
             GridSink(out / "samples", exemplars, state.config_hash)]
    state = train(train_split.without_pairing(), gen_cfg, train_cfg, sinks=sinks,
                  out_dir=out / "checkpoints", resume=state)
    print(f"trained {state.epoch} epochs ({state.iteration} iterations); checkpoints in {out / 'checkpoints'}")
    return out / "checkpoints" / "latest.ckpt"


def _truncate_log(path: Path, iterations: int):
    """Drop log lines past the resumed checkpoint so the log matches an uninterrupted run."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["iter"] < iterations]
    path.write_text("".join(line + "\n" for line in keep))


def cmd_translate(cfg: ExperimentConfig, args):
    if not args.checkpoint:
        raise ConfigError("translate needs --checkpoint")
    state = load_checkpoint(args.checkpoint)
    gen = state.generator.eval()
    names = state.meta.get("domain_names") or [f"d{k}" for k in range(gen.num_domains)]
    out = Path(cfg.out)
    written = []
    for p in map(Path, args.inputs):
        try:
            raw = p.read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"{p}: no such file") from exc
        x = decode_image(raw, state.gen_cfg.image_size)
        with torch.no_grad():
            outs = gen.translate_all(x.to(next(gen.parameters()).dtype))
        for name, y in zip(names, outs):
            dest = out / f"{p.stem}.to_{name}.png"
            save_image(denormalize(y.float()), dest, state.config_hash)
            written.append(dest)
    print(f"wrote {len(written)} images to {out}")
    return written


def cmd_evaluate(cfg: ExperimentConfig, args) -> Path:
    if not args.checkpoint or not cfg.dataset:
        raise ConfigError("evaluate needs --checkpoint and --dataset")
    manifest = read_manifest(args.checkpoint)
    if args.config and manifest["config_hash"] != cfg.model_hash():
        raise ConfigMismatchError(f"checkpoint config {manifest['config_hash']} does not match "
                                  f"evaluation config {cfg.model_hash()}")
    state = load_checkpoint(args.checkpoint)
    root = Path(cfg.dataset)
    size = state.gen_cfg.image_size
    test = load_split(root, "test", size)
    train_split = load_split(root, "train", size, with_pairing=False) if (root / "train").is_dir() else test
    if test.num_domains != state.gen_cfg.num_domains:
        raise ConfigMismatchError(f"dataset has {test.num_domains} domains, checkpoint has "
                                  f"{state.gen_cfg.num_domains}")
    if not test.paired:
        log.warning("no pairing table in %s; paired metrics reported as null", root)
    classifier, embedder = train_domain_classifier(train_split, embed_dim=cfg.embed_dim,
                                                   epochs=cfg.classifier_epochs, seed=cfg.seed)
    fakes = translate_split(state.generator, test)
    report = evaluate(fakes, test, classifier, embedder, block_size=cfg.block_size,
                      blocks=cfg.blocks, seed=cfg.seed)
    curve = report["curves"]["ssim"]
    report["curves"]["ssim"] = "curves.csv" if curve is not None else None
    report["config_hash"] = state.config_hash
    report["experiment_hash"] = cfg.hash()
    report["checkpoint"] = {"path": str(args.checkpoint), "epoch": state.epoch, "iteration": state.iteration}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    header = f"# config_hash={state.config_hash}\n"
    (out / "curves.csv").write_text(header + (curve.to_csv() if curve is not None else "threshold,fraction\n"))
    summary = report["results"]["translation"]["across_all_domains"]
    print(json.dumps({k: summary[k] for k in ("ssim_mean", "accuracy", "fid", "kid_mean", "diversity")}))
    return out / "report.json"


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML file with flat (dotted) or nested keys")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--image-size", type=int)
    shared.add_argument("--domains", type=int, help="number of domains N")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mdtrans", description="Multi-domain image translation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[shared], help="write the synthetic paired dataset")

    p = sub.add_parser("train", parents=[shared], help="train a model")
    p.add_argument("--dataset", help="dataset root (default: synthesize in memory)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-rec", type=float)
    p.add_argument("--lambda-idt", type=float)
    p.add_argument("--iters", type=int, help="iterations per epoch (default: largest domain / batch)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("translate", parents=[shared], help="translate images into every domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="input images; no domain label needed")

    p = sub.add_parser("evaluate", parents=[shared], help="score a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--blocks", type=int, help="KID subsets")
    p.add_argument("--block-size", type=int, help="KID subset size")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    deterministic_mode()
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except TrainingHalted as exc:
        print(f"error: training halted: {exc} (checkpoint: {exc.checkpoint_path})", file=sys.stderr)
        return EXIT_HALT
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
