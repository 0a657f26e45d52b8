"""Command-line entry point: ``gen``, ``train``, ``eval``, ``score`` and ``dump-attention``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Sequence

from . import tensor as T
from .attention import FusionOrder
from .config import RunConfig, load_config, resolve_seed, with_overrides
from .decoder import DecoderConfig, autoregressive_decode
from .decoder import with_overrides as decoder_overrides
from .errors import DataError, GuidedAttentionError, InputError
from .imaging import read_pgm
from .metrics import evaluate, evaluate_manifests, write_predictions, write_report
from .model import GuidedAttentionModel
from .serialization import load_checkpoint
from .synth import generate_corpus, load_corpus
from .tokens import Vocabulary, join_tokens
from .trace import AttentionTrace
from .training import train

logger = logging.getLogger("guided_attention.cli")

ALPHA_RANGE = (0.0, 5.0)
TABLE2_ALPHAS = (1.0, 2.5, 5.0)


def _switch(value: str | None) -> bool | None:
    return None if value is None else value == "on"


# ----------------------------------------------------------------------
# gen
# ----------------------------------------------------------------------
def cmd_gen(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    counts = {"train": args.train, "val": args.val, "test": args.test, "stress": args.stress}
    written = generate_corpus(args.out, counts, seed=seed)
    print(f"Corpus written to {args.out} (seed {seed})")
    for split, count in written.items():
        print(f"  {split:<7} {count:>6}")
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------
def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then flag overrides; the seed follows flag → env → file."""

    cfg = load_config(args.config)
    if args.d_model is not None:
        cfg = dataclasses.replace(
            cfg,
            encoder=dataclasses.replace(cfg.encoder, out_dim=args.d_model),
            decoder=dataclasses.replace(cfg.decoder, d_model=args.d_model),
        )
    if args.num_layers is not None:
        layers = args.num_layers
        decoder = cfg.decoder
        cfg = dataclasses.replace(
            cfg,
            decoder=dataclasses.replace(
                decoder,
                num_layers=layers,
                self_guide_layers=tuple(i for i in decoder.self_guide_layers if i <= layers),
                neighbor_guide_layers=tuple(i for i in decoder.neighbor_guide_layers if i < layers),
            ),
        )
    guidance = _switch(args.guidance)
    return with_overrides(
        cfg,
        seed=resolve_seed(args.seed, default=cfg.seed),
        epochs=args.epochs,
        precision=args.precision,
        jobs=args.jobs,
        optimizer__lr=args.lr,
        optimizer__weight_decay=args.weight_decay,
        optimizer__momentum=args.momentum,
        data__batch_size=args.batch_size,
        data__augment=False if args.no_augment else None,
        encoder__growth_rate=args.growth_rate,
        encoder__layers_per_block=args.layers_per_block,
        encoder__dropout=args.encoder_dropout,
        decoder__heads=args.heads,
        decoder__d_ff=args.d_ff,
        decoder__dropout=args.dropout,
        decoder__alpha=args.alpha,
        decoder__self_guide=guidance,
        decoder__neighbor_guide=guidance,
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    T.set_default_dtype(cfg.precision)
    model = GuidedAttentionModel(Vocabulary(), cfg.encoder, cfg.decoder, seed=cfg.seed)
    train_set = load_corpus(args.data, "train")
    try:
        val_set = load_corpus(args.data, "val")
    except DataError as exc:
        logger.warning("no validation split, keeping the lowest-loss epoch (%s)", exc)
        val_set = []

    print(f"Training on {len(train_set)} samples, {len(val_set)} for validation")
    print(f"  parameters: {model.num_parameters()}")
    print(f"  seed:       {cfg.seed}")
    result = train(
        model,
        cfg,
        train_set,
        val_set,
        checkpoint=args.out,
        progress=None if not args.quiet else False,
    )
    for stats in result.history:
        val = "-" if stats.val_exprate is None else f"{stats.val_exprate:.2f}"
        print(f"  epoch {stats.epoch:>3}  loss {stats.loss:.4f}  val ExpRate {val}")
    print(f"Best epoch {result.best_epoch}; checkpoint saved to {args.out}")
    return 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------
def grid_configs(base: DecoderConfig, grid: str) -> List[Dict[str, Any]]:
    """Decoder configurations of an evaluation grid, each with its row label.

    ``table1`` crosses self- and neighbor-guidance on/off, applying neighbor
    guidance first when both are on; ``table2`` crosses the fusion order with
    ``alpha`` in {1, 2.5, 5}. Only runtime switches change, so every row runs
    on the same weights.
    """

    if grid == "none":
        return [{"label": {}, "cfg": base}]
    rows: List[Dict[str, Any]] = []
    if grid == "table1":
        for use_self in (False, True):
            for use_neighbor in (False, True):
                order = FusionOrder.NEIGHBOR_FIRST if use_self and use_neighbor else base.fusion_order
                cfg = decoder_overrides(base, self_guide=use_self, neighbor_guide=use_neighbor, fusion_order=order)
                rows.append({"label": {"self": use_self, "neighbor": use_neighbor}, "cfg": cfg})
        return rows
    for order in FusionOrder:
        for alpha in TABLE2_ALPHAS:
            cfg = decoder_overrides(base, self_guide=True, neighbor_guide=True, fusion_order=order, alpha=alpha)
            rows.append({"label": {"order": order.value, "alpha": alpha}, "cfg": cfg})
    return rows


def _format_row(label: Dict[str, Any], report) -> str:
    parts = []
    for key, value in label.items():
        if isinstance(value, bool):
            value = "✓" if value else "-"
        parts.append(f"{key}={value}")
    return f"  {' '.join(parts) or 'run':<32} {report.exprate:7.2f} {report.exprate_le1:7.2f} {report.strurate:7.2f}"


def cmd_eval(args: argparse.Namespace) -> int:
    model, run_cfg = load_checkpoint(args.ckpt)
    base = model.decoder_cfg
    changes: Dict[str, Any] = {}
    if args.alpha is not None:
        if not ALPHA_RANGE[0] <= args.alpha <= ALPHA_RANGE[1]:
            logger.warning("alpha %.3g is outside the tested range [0, 5]", args.alpha)
        changes["alpha"] = args.alpha
    if args.order is not None:
        changes["fusion_order"] = FusionOrder(args.order)
    if args.self_guide is not None:
        changes["self_guide"] = _switch(args.self_guide)
    if args.neighbor is not None:
        changes["neighbor_guide"] = _switch(args.neighbor)
    if args.max_len is not None:
        changes["max_len"] = args.max_len
    base = decoder_overrides(base, **changes)

    samples = load_corpus(args.data, args.split)
    if args.limit is not None:
        samples = samples[: args.limit]
    refs = [s.tokens for s in samples]
    grids = [model.features(s.image) for s in samples]
    jobs = args.jobs or run_cfg.jobs

    print(f"Evaluating {len(samples)} '{args.split}' samples (beam {args.beam})")
    print(f"  {'configuration':<32} {'ExpRate':>7} {'<=1':>7} {'StruRate':>7}")
    rows: List[Dict[str, Any]] = []
    for i, row in enumerate(grid_configs(base, args.grid)):
        preds = model.recognize_batch([], row["cfg"], beam=args.beam, jobs=jobs, grids=grids)
        report = evaluate(preds, refs)
        print(_format_row(row["label"], report))
        if report.malformed:
            logger.info("%d of %d predictions do not parse", report.malformed, report.count)
        rows.append({**row["label"], **report.as_dict()})
        if i == 0 and args.predictions:
            write_predictions(args.predictions, {s.id: p for s, p in zip(samples, preds)})

    if args.report:
        meta = {"checkpoint": str(args.ckpt), "split": args.split, "beam": args.beam, "grid": args.grid}
        write_report(args.report, rows, **meta)
        print(f"Report written to {args.report}")
    return 0


# ----------------------------------------------------------------------
# score
# ----------------------------------------------------------------------
def cmd_score(args: argparse.Namespace) -> int:
    report = evaluate_manifests(args.pred, args.ref)
    print(f"Scored {report.count} references against {args.pred}")
    print(f"  {'ExpRate':>7} {'<=1':>7} {'StruRate':>7}")
    print(f"  {report.exprate:7.2f} {report.exprate_le1:7.2f} {report.strurate:7.2f}")
    if report.malformed:
        print(f"  {report.malformed} predictions do not parse")
    if args.report:
        write_report(args.report, report, predictions=str(args.pred), references=str(args.ref))
        print(f"Report written to {args.report}")
    return 0


# ----------------------------------------------------------------------
# dump-attention
# ----------------------------------------------------------------------
def cmd_dump_attention(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    cfg = model.decoder_cfg
    if args.alpha is not None:
        cfg = decoder_overrides(cfg, alpha=args.alpha)
    grid = model.features(read_pgm(args.image))
    out_dir = Path(args.out)
    partial: List = []
    exit_code = 0
    try:
        hyp = autoregressive_decode(model.decoder, grid, cfg, record_trace=True, partial_trace=partial)
        trace = AttentionTrace.from_hypothesis(hyp, (grid.h0, grid.w0), model.vocab.decode(hyp.output_tokens()))
    except (GuidedAttentionError, ArithmeticError) as exc:
        trace = AttentionTrace((grid.h0, grid.w0), [s for s in partial if s is not None], error=str(exc))
        exit_code = getattr(exc, "exit_code", 3)
        print(f"✗ Decoding failed after {trace.num_steps} steps: {exc}", file=sys.stderr)

    trace.to_json(out_dir / "trace.json")
    maps = trace.write_heatmaps(out_dir)
    print(f"Decoded: {join_tokens(trace.tokens)}")
    print(f"  steps: {trace.num_steps}, heatmaps: {len(maps)} in {out_dir}")
    return exit_code


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guided-attn",
        description="Train and evaluate guided-attention expression recognizers on synthetic data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log warnings; no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic corpus")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--train", type=int, default=2000, help="Training samples (default: 2000)")
    gen.add_argument("--val", type=int, default=200, help="Validation samples (default: 200)")
    gen.add_argument("--test", type=int, default=200, help="Test samples (default: 200)")
    gen.add_argument("--stress", type=int, default=100, help="Repeated-script stress samples (default: 100)")
    gen.add_argument("--seed", type=int, default=None, help="Seed (default: $GUIDED_ATTN_SEED or 7)")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="Train a model and keep the best checkpoint")
    tr.add_argument("--config", default=None, help="YAML or JSON run configuration")
    tr.add_argument("--data", required=True, help="Corpus directory written by 'gen'")
    tr.add_argument("--out", required=True, help="Checkpoint path")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--precision", choices=("float64", "float32"), default=None)
    tr.add_argument("--jobs", type=int, default=None, help="Decoding threads for validation")
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--weight-decay", type=float, default=None)
    tr.add_argument("--momentum", type=float, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--no-augment", action="store_true", help="Disable scale augmentation")
    tr.add_argument("--growth-rate", type=int, default=None)
    tr.add_argument("--layers-per-block", type=int, default=None)
    tr.add_argument("--encoder-dropout", type=float, default=None)
    tr.add_argument("--d-model", type=int, default=None)
    tr.add_argument("--num-layers", type=int, default=None)
    tr.add_argument("--heads", type=int, default=None)
    tr.add_argument("--d-ff", type=int, default=None)
    tr.add_argument("--dropout", type=float, default=None, help="Decoder dropout")
    tr.add_argument("--alpha", type=float, default=None, help="Neighbor-guidance strength")
    tr.add_argument("--guidance", choices=("on", "off"), default=None, help="Self- and neighbor-guidance")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Score a checkpoint on a corpus split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=("test", "stress", "val", "train"), default="test")
    ev.add_argument("--beam", type=int, default=1)
    ev.add_argument("--alpha", type=float, default=None)
    ev.add_argument("--order", choices=[o.value for o in FusionOrder], default=None)
    ev.add_argument("--self", dest="self_guide", choices=("on", "off"), default=None)
    ev.add_argument("--neighbor", choices=("on", "off"), default=None)
    ev.add_argument("--max-len", type=int, default=None)
    ev.add_argument("--grid", choices=("none", "table1", "table2"), default="none")
    ev.add_argument("--jobs", type=int, default=None)
    ev.add_argument("--limit", type=int, default=None, help="Evaluate only the first N samples")
    ev.add_argument("--report", default=None, help="Write a YAML report here")
    ev.add_argument("--predictions", default=None, help="Write 'id<TAB>tokens' predictions here")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("score", help="Score a predictions manifest against a reference manifest")
    sc.add_argument("--pred", required=True, help="'id<TAB>tokens' predictions, e.g. from 'eval --predictions'")
    sc.add_argument("--ref", required=True, help="Reference manifest, e.g. data/test/manifest.txt")
    sc.add_argument("--report", default=None, help="Write a YAML report here")
    sc.set_defaults(func=cmd_score)

    dump = sub.add_parser("dump-attention", help="Export attention and guidance maps of one decode")
    dump.add_argument("--ckpt", required=True)
    dump.add_argument("--image", required=True, help="PGM image")
    dump.add_argument("--out", required=True, help="Output directory")
    dump.add_argument("--alpha", type=float, default=None)
    dump.set_defaults(func=cmd_dump_attention)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 1
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except GuidedAttentionError as exc:
        print(f"✗ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"✗ InputError: {exc}", file=sys.stderr)
        return InputError.exit_code
    except KeyboardInterrupt:  # pragma: no cover - interactive
        print("Interrupted.", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
