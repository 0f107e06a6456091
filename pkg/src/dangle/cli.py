"""Command-line entry points.

Subcommands: toy, gen-data, split, train, eval, metrics. All accept
--config for the flat key=value experiment file; --set applies single
key overrides. Exit status 0 on success, nonzero with a message on
stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .data import MiniGrammar, build_depth_split, generate_nested, load_tsv, save_tsv
from .entangle import (
    collect_hidden_states,
    dump_for_projection,
    entanglement_ratio,
    load_projection,
)
from .checkpoint import load_checkpoint
from .vocab import Vocab


def _load_config(args, extra=None):
    overrides = dict(extra or {})
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not _:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["training.seeds"] = args.seed
    return harness.parse_config(args.config, overrides)


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a single config key")
    parser.add_argument("--seed", help="override training.seeds (comma-separated)")


def cmd_toy(args):
    cfg = _load_config(args, {"task.kind": "toy"})
    result = harness.run_experiment(cfg)
    print(json.dumps(result.to_json(), indent=2))
    return 0


def cmd_gen_data(args):
    counts = {}
    for part in args.counts.split(","):
        depth, n = part.split(":")
        counts[int(depth)] = int(n)
    examples = []
    for depth, count in sorted(counts.items()):
        examples.extend(generate_nested(MiniGrammar(), {depth: 1.0}, count, seed=args.data_seed + depth))
    save_tsv(examples, args.out)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_split(args):
    dataset = load_tsv(args.input)
    split = build_depth_split(dataset, args.depth)
    save_tsv(split.train, args.train_out)
    save_tsv(split.gen, args.gen_out)
    print(f"train: {len(split.train)} examples (depth <= {args.depth}); gen: {len(split.gen)}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    result = harness.run_experiment(cfg)
    print(json.dumps(result.aggregate, indent=2))
    return 0


def _rebuild_model(cfg, checkpoint):
    train_examples, gen_examples = harness.build_dataset(cfg)
    if cfg.model_shared_vocab:
        vocab = Vocab.from_examples(train_examples + gen_examples, side="both")
        src_vocab = tgt_vocab = vocab
    else:
        src_vocab = Vocab.from_examples(train_examples + gen_examples, side="source")
        tgt_vocab = Vocab.from_examples(train_examples + gen_examples, side="target")
    model_obj = harness.build_model(cfg, src_vocab, tgt_vocab, np.random.default_rng(0))
    load_checkpoint(model_obj, checkpoint)
    return model_obj, train_examples, gen_examples, src_vocab, tgt_vocab


def cmd_eval(args):
    cfg = _load_config(args)
    model_obj, train_examples, gen_examples, src_vocab, tgt_vocab = _rebuild_model(
        cfg, args.checkpoint
    )
    examples = gen_examples if args.split == "gen" else train_examples
    em, by_type = harness.evaluate_exact_match(
        model_obj, examples, src_vocab, tgt_vocab, cfg.dangle_max_decode_length
    )
    print(json.dumps({"split": args.split, "exact_match": em, "by_gen_type": by_type}, indent=2))
    return 0


def cmd_metrics(args):
    if args.dump and not args.checkpoint:
        records = load_projection(args.dump)
        print(json.dumps(entanglement_ratio(records).to_json(), indent=2))
        return 0
    cfg = _load_config(args)
    model_obj, train_examples, gen_examples, src_vocab, tgt_vocab = _rebuild_model(
        cfg, args.checkpoint
    )
    examples = gen_examples if args.split == "gen" else train_examples
    examples = examples[: cfg.metrics_max_examples]
    records = collect_hidden_states(
        model_obj, examples, src_vocab, tgt_vocab, cfg.tracked_classes()
    )
    if args.dump:
        dump_for_projection(records, args.dump)
    print(json.dumps(entanglement_ratio(records).to_json(), indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dangle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="run the relation-composition toy regimes")
    _add_common(p)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("gen-data", help="generate the synthetic nested-PP dataset as TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="0:800,1:800,2:800,3:300,4:300",
                   help="depth:count pairs, comma-separated")
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="partition a TSV dataset by recursion depth")
    p.add_argument("--input", required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--train-out", required=True)
    p.add_argument("--gen-out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train per the config and report aggregates")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "gen"), default="gen")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="entanglement report and projection dump")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "gen"), default="gen")
    p.add_argument("--dump", help="projection TSV to write (or to read with no checkpoint)")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
