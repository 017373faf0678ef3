"""Command line entry point: generate | train | eval | gradcheck | predict."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, restore_model
from .config import ConfigError, RunConfig
from .gradcheck import model_gradcheck
from .synthetic import build_dataset, load_samples
from .text import template_vocab
from .training import Dataset, Trainer, build_model, evaluate_model, prediction_records

log = logging.getLogger("dmmi")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _manifest(cfg: RunConfig, split: str) -> Path:
    path = Path(cfg.data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"data_dir: manifest {path} not found (run `generate` first)")
    return path


def _load_model(cfg: RunConfig, checkpoint):
    if checkpoint is None:
        raise ConfigError("--checkpoint is required")
    vocab = template_vocab()
    model = build_model(cfg, vocab)
    restore_model(model, load_checkpoint(checkpoint).tensors)
    return model, vocab


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.data_dir)
    data = cfg.data
    if args.seed is not None:
        data.seed = args.seed
    paths = build_dataset(data, out)
    template_vocab().save(out / "vocab.json")
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    vocab = template_vocab()
    data = Dataset.from_samples(load_samples(_manifest(cfg, "train")), vocab, cfg.max_len)
    trainer = Trainer(cfg, data, vocab)
    if args.checkpoint:
        trainer.resume(args.checkpoint)
        log.info("resumed at step %d", trainer.step)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "config.json").write_text(cfg.to_json())
    trainer.run()
    path = trainer.save()
    trainer.save(Path(cfg.out_dir) / "final.ckpt")
    print(json.dumps({"checkpoint": str(path), "step": trainer.step, "log": str(trainer.log_path)}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, vocab = _load_model(cfg, args.checkpoint)
    data = Dataset.from_samples(load_samples(_manifest(cfg, args.split)), vocab, cfg.max_len)
    overall, by_setting = evaluate_model(model, data)
    report = {"overall": overall.to_dict(), "by_setting": {k: v.to_dict() for k, v in by_setting.items()}}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(text)
    print(text)
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    model, vocab = _load_model(cfg, args.checkpoint)
    data = Dataset.from_samples(load_samples(_manifest(cfg, args.split)), vocab, cfg.max_len)
    lines = [json.dumps(r) for r in prediction_records(model, data)]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "predictions.jsonl").write_text("".join(l + "\n" for l in lines))
    else:
        sys.stdout.write("".join(l + "\n" for l in lines))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else None
    report = model_gradcheck(cfg, seed=args.seed or 0)
    worst = max(report.values())
    text = json.dumps({"max_rel_err": worst, "groups": report}, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(text)
    print(text)
    return 0 if worst < 1e-3 else 1


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmmi", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--checkpoint", help="checkpoint to resume from / evaluate")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="test", choices=["train", "test"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command != "gradcheck" and not args.config:
        print("error: --config is required", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
