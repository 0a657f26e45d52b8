#!/usr/bin/env python
"""Train a guided and an unguided model identically and compare them on the stress set."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from guided_attention import tensor as T
from guided_attention.config import load_config, resolve_seed
from guided_attention.errors import GuidedAttentionError
from guided_attention.metrics import evaluate
from guided_attention.model import GuidedAttentionModel
from guided_attention.serialization import load_checkpoint
from guided_attention.synth import generate_corpus, load_corpus
from guided_attention.tokens import Vocabulary
from guided_attention.training import train


def run(config_path: Path, data_dir: Path, out_dir: Path, seed: int) -> int:
    cfg = dataclasses.replace(load_config(config_path), seed=seed)
    T.set_default_dtype(cfg.precision)

    if not (data_dir / "train" / "manifest.txt").is_file():
        print(f"Generating the default corpus in {data_dir}...")
        generate_corpus(data_dir, {"train": 2000, "val": 200, "test": 200, "stress": 100}, seed=seed)

    train_set = load_corpus(data_dir, "train")
    val_set = load_corpus(data_dir, "val")
    splits = {name: load_corpus(data_dir, name) for name in ("test", "stress")}

    variants = {
        "guided": cfg.decoder,
        "baseline": dataclasses.replace(cfg.decoder, self_guide=False, neighbor_guide=False),
    }
    print("=" * 60)
    print(f"{'model':<10} {'split':<8} {'ExpRate':>8} {'<=1':>8} {'StruRate':>9}")
    print("=" * 60)
    for name, decoder_cfg in variants.items():
        run_cfg = dataclasses.replace(cfg, decoder=decoder_cfg)
        model = GuidedAttentionModel(Vocabulary(), run_cfg.encoder, decoder_cfg, seed=seed)
        train(model, run_cfg, train_set, val_set, checkpoint=out_dir / f"{name}.ckpt")
        model, _ = load_checkpoint(out_dir / f"{name}.ckpt")
        for split, samples in splits.items():
            preds = model.recognize_batch([s.image for s in samples], jobs=run_cfg.jobs)
            report = evaluate(preds, [s.tokens for s in samples])
            print(f"{name:<10} {split:<8} {report.exprate:8.2f} {report.exprate_le1:8.2f} {report.strurate:9.2f}")
    return 0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=Path("configs/desk.yaml"))
    parser.add_argument("--data", type=Path, default=Path("data"))
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    try:
        return run(args.config, args.data, args.out, resolve_seed(args.seed))
    except GuidedAttentionError as exc:
        print(f"✗ {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
