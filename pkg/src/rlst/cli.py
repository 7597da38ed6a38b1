"""Command-line entry point: ``rlst {build-vocab,train,evaluate,translate,trace}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import FIELD_TYPES, ConfigError, RunConfig, parse_config
from .data import build_vocab, encode_pairs, load_parallel_corpus
from .episode import infer_batch, rollout_infer
from .metrics import REPORT_COLUMNS, TRACE_COLUMNS, evaluate, trace_actions
from .training import TrainingError, _fmt, load_datasets, train_run

log = logging.getLogger("rlst")


def _add_config_flags(p):
    p.add_argument("--config", help="flat 'key = value' configuration file")
    for key in FIELD_TYPES:
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        p.add_argument(*flags, dest=f"cfg_{key}", metavar="VALUE", default=None)


def _overrides(args):
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _dataset_pairs(ckpt, args):
    if args.data:
        corpus, _ = load_parallel_corpus(args.data)
    else:
        config = RunConfig(**ckpt.meta["config"])
        splits = load_datasets(config)
        corpus = getattr(splits, args.split)
    return encode_pairs(corpus, ckpt.src_vocab, ckpt.trg_vocab)


def cmd_build_vocab(args):
    corpus, skipped = load_parallel_corpus(args.corpus)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = build_vocab(corpus.sources, args.min_freq)
    trg = build_vocab(corpus.targets, args.min_freq)
    src.save(out / "src.vocab")
    trg.save(out / "trg.vocab")
    print(f"pairs={len(corpus)} skipped={skipped} src_vocab={len(src)} trg_vocab={len(trg)}")


def cmd_train(args):
    config = parse_config(args.config, _overrides(args))
    print("\n".join(config.lines()), file=sys.stderr)

    def progress(epoch, row, bleu):
        print(f"epoch {epoch}: n={row['minibatch_n']} loss_m={row['loss_m']:.4f} "
              f"loss_e={row['loss_e']:.4f} val_bleu={bleu:.4f} ({100 * bleu:.2f})",
              file=sys.stderr, flush=True)

    result = train_run(config, progress=progress)
    rep = result.test_report
    print(f"best_epoch={result.best_epoch} best_val_bleu={result.best_val_bleu:.6f} "
          f"test_bleu={rep.bleu:.6f} ({100 * rep.bleu:.2f}) "
          f"test_token_accuracy={rep.token_accuracy:.6f}")


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _dataset_pairs(ckpt, args)
    smoothing = args.smoothing or ckpt.meta.get("config", {}).get("bleu_smoothing", "off")
    report = evaluate(ckpt.net, pairs, smoothing=smoothing)
    row = report.as_row()
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def cmd_translate(args):
    ckpt = load_checkpoint(args.checkpoint)
    for line in sys.stdin:
        z = rollout_infer(ckpt.net, ckpt.src_vocab.encode(line.strip()), max_out=args.max_out)
        sys.stdout.write(ckpt.trg_vocab.decode(z) + "\n")
        sys.stdout.flush()


def cmd_trace(args):
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _dataset_pairs(ckpt, args)
    # source length counts words, not the terminal EOS
    sources = [x for x, _ in pairs if len(x) - 1 == args.len]
    rows = []
    if sources:
        rows = trace_actions(infer_batch(ckpt.net, sources))
    else:
        log.warning("no source sentences of length %d", args.len)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([r.t, r.reads, r.writes, r.active])
    finally:
        if args.out:
            out.close()
    if args.figure and rows:
        from .plotting import plot_trace
        plot_trace(rows, args.figure, title=f"{len(sources)} sources of length {args.len}")


def build_parser():
    parser = argparse.ArgumentParser(prog="rlst", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="write src.vocab / trg.vocab for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--min-freq", "--min_freq", type=int, default=3)
    p.add_argument("--out-dir", "--out_dir", default=".")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model; every config key is also a flag")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("evaluate", cmd_evaluate, "score a checkpoint"),
                             ("trace", cmd_trace, "READ/WRITE timing per decision step")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="tab-separated corpus (default: split from the run config)")
        p.add_argument("--split", choices=("train", "valid", "test"), default="valid")
        if name == "evaluate":
            p.add_argument("--smoothing", choices=("off", "add-one"))
        else:
            p.add_argument("--len", type=int, default=15, help="source length in words")
            p.add_argument("--out", help="CSV path (default: stdout)")
            p.add_argument("--figure", help="PNG path for the READ/WRITE plot")
        p.set_defaults(func=func)

    p = sub.add_parser("translate", help="translate stdin line by line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-out", "--max_out", type=int, default=None)
    p.set_defaults(func=cmd_translate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"rlst: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
