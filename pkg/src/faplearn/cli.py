"""Command-line pipeline: synth, prepare, extract-fap, train, eval,
fap-stats, export-embeddings.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
Every subcommand is deterministic given its flags, inputs and seeds.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import corpus as corpus_mod
from . import evaluate as evaluate_mod
from . import fap as fap_mod
from . import synth as synth_mod
from .gru import KIND_CLASSIFICATION, KIND_FAP, MultiTaskModel
from .numeric import NumericError
from .training import REGIMES, DivergedLoss, TrainConfig, TrainingLog, run_regime

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="faplearn", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser,
                       help="generate a synthetic corpus TSV")
    p.add_argument("--spec", default="default",
                   help="spec file, or the builtin 'default' / 'fine-grained'")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out", required=True, help="output corpus TSV")

    p = sub.add_parser("prepare", parser_class=_Parser,
                       help="split a corpus and build the vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-family", type=int, default=1,
                   help="drop families with fewer samples than this")
    p.add_argument("--min-token-count", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("extract-fap", parser_class=_Parser,
                       help="per-trace FAP supervision CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fap-stats", parser_class=_Parser,
                       help="aggregated family,fap_text,fap_id,count CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parser_class=_Parser, help="train a regime")
    p.add_argument("--regime", required=True, choices=REGIMES)
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data-dir", required=True, help="directory written by prepare")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log", default=None, help="optional training log CSV")

    p = sub.add_parser("eval", parser_class=_Parser, help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--task", required=True, choices=("cls", "fap", "both"))
    p.add_argument("--data-dir", required=True)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--out", required=True,
                   help="text report path; a CSV is written next to it as <out>.csv")

    p = sub.add_parser("export-embeddings", parser_class=_Parser,
                       help="context vectors as id,family,c0..c{H-1} CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--out", required=True)
    return parser


def _load_split(data_dir: str, seed: int = 0) -> corpus_mod.CorpusSplit:
    def part(name):
        path = os.path.join(data_dir, f"{name}.tsv")
        if not os.path.exists(path):
            raise corpus_mod.CorpusError(f"missing split file {path}")
        return tuple(corpus_mod.load_corpus(path))

    return corpus_mod.CorpusSplit(part("train"), part("validation"), part("test"), seed)


def _cmd_synth(args) -> int:
    if args.spec == "default":
        spec = synth_mod.default_benchmark_spec()
    elif args.spec == "fine-grained":
        spec = synth_mod.fine_grained_spec()
    else:
        spec = synth_mod.load_spec(args.spec)
    if args.seed is not None:
        spec = synth_mod.SynthSpec(spec.profiles, spec.counts, args.seed)
    corpus_mod.save_corpus(synth_mod.generate_corpus(spec), args.out)
    print(f"wrote {spec.total} traces to {args.out}")
    return EXIT_OK


def _cmd_prepare(args) -> int:
    traces = corpus_mod.load_corpus(args.corpus)
    traces = corpus_mod.drop_rare_families(traces, args.min_family)
    split = corpus_mod.split_corpus(traces, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    corpus_mod.save_corpus(split.train, os.path.join(args.out_dir, "train.tsv"))
    corpus_mod.save_corpus(split.validation, os.path.join(args.out_dir, "validation.tsv"))
    corpus_mod.save_corpus(split.test, os.path.join(args.out_dir, "test.tsv"))
    vocab = corpus_mod.build_vocabulary(list(split.train), args.min_token_count)
    vocab.save(os.path.join(args.out_dir, "vocab.tsv"))
    with open(os.path.join(args.out_dir, "families.txt"), "w", encoding="utf-8") as fh:
        for fam in corpus_mod.family_labels(traces):
            fh.write(fam + "\n")
    print(f"split {len(traces)} traces into {len(split.train)}/"
          f"{len(split.validation)}/{len(split.test)}; vocabulary size {vocab.size}")
    return EXIT_OK


def _cmd_extract_fap(args) -> int:
    traces = corpus_mod.load_corpus(args.corpus)
    fap_mod.write_fap_csv(traces, args.out)
    print(f"wrote {len(traces)} FAP rows to {args.out}")
    return EXIT_OK


def _cmd_fap_stats(args) -> int:
    traces = corpus_mod.load_corpus(args.corpus)
    fap_mod.write_fap_stats_csv(traces, args.out)
    print(f"wrote FAP statistics for {len(traces)} traces to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    vocab_path = os.path.join(args.data_dir, "vocab.tsv")
    if not os.path.exists(vocab_path):
        raise corpus_mod.CorpusError(f"missing vocabulary file {vocab_path}")
    vocab = corpus_mod.Vocabulary.load(vocab_path)
    split = _load_split(args.data_dir, config.seed)
    log = TrainingLog()
    model = run_regime(args.regime, split, vocab, config,
                       bidirectional=args.bidirectional, log=log)
    model.save(args.out_ckpt)
    if args.log:
        log.save(args.log)
    print(f"trained regime {args.regime}"
          f"{' (bidirectional)' if args.bidirectional else ''}; "
          f"checkpoint at {args.out_ckpt}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        raise corpus_mod.CorpusError(f"missing checkpoint {args.ckpt}")
    model = MultiTaskModel.load(args.ckpt)
    split = _load_split(args.data_dir)
    traces = {"train": split.train, "val": split.validation, "test": split.test}[args.split]
    reports = []
    if args.task in ("cls", "both"):
        if KIND_CLASSIFICATION not in model.decoders:
            raise corpus_mod.CorpusError("checkpoint has no classification decoder")
        reports.append(evaluate_mod.classification_accuracy(
            model, traces, args.max_len, split=args.split))
    if args.task in ("fap", "both"):
        if KIND_FAP not in model.decoders:
            raise corpus_mod.CorpusError("checkpoint has no FAP decoder")
        reports.append(evaluate_mod.fap_accuracy(
            model, traces, args.max_len, split=args.split))
    evaluate_mod.write_reports(reports, args.out, args.out + ".csv")
    for r in reports:
        print(f"{r.task} {r.split} accuracy {r.accuracy:.4f}")
    return EXIT_OK


def _cmd_export_embeddings(args) -> int:
    if not os.path.exists(args.ckpt):
        raise corpus_mod.CorpusError(f"missing checkpoint {args.ckpt}")
    model = MultiTaskModel.load(args.ckpt)
    traces = corpus_mod.load_corpus(args.corpus)
    evaluate_mod.export_embeddings(model, traces, args.out, args.max_len)
    print(f"wrote {len(traces)} embedding rows to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "prepare": _cmd_prepare,
    "extract-fap": _cmd_extract_fap,
    "fap-stats": _cmd_fap_stats,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "export-embeddings": _cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except DivergedLoss as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (corpus_mod.CorpusError, fap_mod.FapError, NumericError, OSError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
