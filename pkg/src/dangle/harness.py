"""Reproducible experiment runner.

A run is fully determined by (config, seed): data generation, splits,
initialization, batch order, and evaluation all derive from them. Config
files are flat ``section.key = value`` lines; unknown keys are errors.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as dmodel
from . import toy as dtoy
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Seq2SeqExample,
    build_depth_split,
    exact_match_accuracy,
    generate_nested,
    load_tsv,
    MiniGrammar,
)
from .entangle import collect_hidden_states, entanglement_ratio
from .optim import Adam
from .transformer import ModelConfig, Seq2SeqTransformer
from .vocab import EOS_ID, Vocab

TASKS = ("toy", "synthetic_depth", "cogs_tsv")
MODEL_TYPES = ("baseline_transformer", "dangle_encoder_only", "dangle_encoder_decoder")


@dataclass
class ExperimentConfig:
    task_kind: str = "synthetic_depth"
    task_train_path: str = ""
    task_gen_path: str = ""
    task_data_seed: int = 0
    task_depth_counts: str = "0:800,1:800,2:800,3:300,4:300"
    task_boundary: int = 2
    toy_size_r1: int = 10
    toy_size_r2: int = 10
    toy_r_train: int = 0
    toy_steps: int = 2000
    toy_lr: float = 1e-3
    toy_regimes: str = "joint,separate,marking"
    model_type: str = "dangle_encoder_only"
    model_d_model: int = 300
    model_d_ffn: int = 512
    model_n_heads: int = 6
    model_n_encoder_layers: int = 2
    model_n_decoder_layers: int = 2
    model_position_mode: str = "absolute"
    model_relative_clip: int = 16
    model_dropout: float = 0.0
    model_shared_vocab: bool = True
    dangle_n_target_informed_layers: int = 4
    dangle_n_source_only_layers: int = 0
    dangle_head_dims: str = ""
    dangle_max_decode_length: int = 160
    dangle_relative_global_positions: bool = False
    training_steps: int = 4000
    training_batch_tokens: int = 3000
    training_lr: float = 5e-4
    training_warmup_steps: int = 1000
    training_seeds: str = "0"
    eval_every: int = 500
    eval_dev_fraction: float = 0.1
    eval_gen_dev: bool = False
    eval_max_dev_examples: int = 100
    metrics_enabled: bool = False
    metrics_tracked: str = "in,on,beside"
    metrics_max_examples: int = 200
    output_dir: str = ""
    output_name: str = "run"

    def __post_init__(self):
        if self.task_kind not in TASKS:
            raise ValueError(f"task.kind must be one of {TASKS}, got {self.task_kind!r}")
        if self.model_type not in MODEL_TYPES:
            raise ValueError(f"model.type must be one of {MODEL_TYPES}, got {self.model_type!r}")
        if not self.seeds():
            raise ValueError("training.seeds must be nonempty")

    def seeds(self):
        return [int(s) for s in self.training_seeds.split(",") if s.strip() != ""]

    def head_dims(self):
        if not self.dangle_head_dims.strip():
            return None
        return tuple(int(x) for x in self.dangle_head_dims.split(",") if x.strip())

    def tracked_classes(self):
        return [t.strip() for t in self.metrics_tracked.split(",") if t.strip()]

    def resolved_output_dir(self):
        if self.output_dir:
            return self.output_dir
        return os.environ.get("DANGLE_OUTPUT_ROOT", "runs")

    def depth_counts(self):
        out = {}
        for part in self.task_depth_counts.split(","):
            depth, n = part.split(":")
            out[int(depth)] = int(n)
        return out

    def echo(self):
        return {_ATTR_TO_KEY[f.name]: getattr(self, f.name) for f in fields(self)}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_ATTR_TO_KEY = {
    f.name: f.name.replace("_", ".", 1) for f in fields(ExperimentConfig)
}
_KEY_TO_ATTR = {v: k for k, v in _ATTR_TO_KEY.items()}


def parse_config(path=None, overrides=None):
    """Read a flat dotted-key config file, then apply override pairs."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'section.key = value'")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    for key, value in (overrides or {}).items():
        values[key] = value
    kwargs = {}
    for key, value in values.items():
        attr = _KEY_TO_ATTR.get(key)
        if attr is None:
            valid = ", ".join(sorted(_KEY_TO_ATTR))
            raise ValueError(f"unknown config key {key!r}; valid keys: {valid}")
        kind = ExperimentConfig.__dataclass_fields__[attr].type
        if isinstance(value, str):
            if kind == "int":
                value = int(value)
            elif kind == "float":
                value = float(value)
            elif kind == "bool":
                value = _parse_bool(value)
        kwargs[attr] = value
    return ExperimentConfig(**kwargs)


@dataclass
class RunResult:
    task: str
    model_type: str
    per_seed: list
    aggregate: dict
    wall_clock_sec: float
    config: dict
    checkpoints: list = field(default_factory=list)

    def to_json(self):
        return {
            "task": self.task,
            "model_type": self.model_type,
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "wall_clock_sec": self.wall_clock_sec,
            "config": self.config,
            "checkpoints": self.checkpoints,
        }


def build_dataset(cfg: ExperimentConfig):
    """Materialize (train, gen) example lists for a seq2seq task."""
    if cfg.task_kind == "cogs_tsv":
        return load_tsv(cfg.task_train_path), load_tsv(cfg.task_gen_path)
    full = []
    for depth, count in sorted(cfg.depth_counts().items()):
        full.extend(
            generate_nested(MiniGrammar(), {depth: 1.0}, count, seed=cfg.task_data_seed + depth)
        )
    split = build_depth_split(full, cfg.task_boundary)
    return split.train, split.gen


def build_model(cfg: ExperimentConfig, src_vocab, tgt_vocab, rng, dtype=np.float32):
    mcfg = ModelConfig(
        d_model=cfg.model_d_model,
        d_ffn=cfg.model_d_ffn,
        n_heads=cfg.model_n_heads,
        n_encoder_layers=cfg.model_n_encoder_layers,
        n_decoder_layers=cfg.model_n_decoder_layers,
        position_mode=cfg.model_position_mode,
        relative_clip=cfg.model_relative_clip,
        dropout=cfg.model_dropout,
        shared_vocab=cfg.model_shared_vocab,
        src_vocab_size=len(src_vocab),
        tgt_vocab_size=len(tgt_vocab),
    )
    if cfg.model_type == "baseline_transformer":
        return Seq2SeqTransformer(mcfg, rng, dtype)
    dcfg = dmodel.DangleConfig(
        variant="encoder_only" if cfg.model_type == "dangle_encoder_only" else "encoder_decoder",
        n_target_informed_layers=cfg.dangle_n_target_informed_layers,
        n_source_only_layers=(
            0 if cfg.model_type == "dangle_encoder_only" else cfg.dangle_n_source_only_layers
        ),
        head_dims=cfg.head_dims(),
        max_decode_length=cfg.dangle_max_decode_length,
        relative_global_positions=cfg.dangle_relative_global_positions,
    )
    cls = dmodel.DangleEncoderOnly if dcfg.variant == "encoder_only" else dmodel.DangleEncoderDecoder
    return cls(mcfg, dcfg, rng, dtype)


def encode_examples(examples, src_vocab, tgt_vocab):
    """(source ids, EOS-terminated target ids) pairs."""
    out = []
    for ex in examples:
        src = src_vocab.encode(ex.source_tokens)
        tgt = np.concatenate([tgt_vocab.encode(ex.target_tokens), [EOS_ID]]).astype(np.int64)
        out.append((src, tgt))
    return out


def _pad_examples(encoded):
    smax = max(len(s) for s, _ in encoded)
    tmax = max(len(t) for _, t in encoded)
    src = np.zeros((len(encoded), smax), dtype=np.int64)
    tgt = np.zeros((len(encoded), tmax), dtype=np.int64)
    lens = np.zeros(len(encoded), dtype=np.int64)
    for i, (s, t) in enumerate(encoded):
        src[i, : len(s)] = s
        tgt[i, : len(t)] = t
        lens[i] = len(t)
    return src, tgt, lens


def _baseline_batches(encoded, batch_tokens, rng):
    """Token-budget batches of whole examples, length-bucketed per epoch."""
    order = rng.permutation(len(encoded))
    bucket = 2048
    batches = []
    for lo in range(0, len(order), bucket):
        chunk = sorted(order[lo : lo + bucket], key=lambda i: len(encoded[i][0]) + len(encoded[i][1]))
        batch, tokens = [], 0
        for i in chunk:
            cost = len(encoded[i][0]) + len(encoded[i][1])
            if batch and tokens + cost > batch_tokens:
                batches.append(batch)
                batch, tokens = [], 0
            batch.append(i)
            tokens += cost
        if batch:
            batches.append(batch)
    order2 = rng.permutation(len(batches))
    return [batches[i] for i in order2]


def _pair_batches(pair_index, encoded, batch_tokens, rng):
    """Token-budget batches of (example, step) re-encoding pairs."""
    order = rng.permutation(len(pair_index))
    bucket = 8192
    batches = []
    for lo in range(0, len(order), bucket):
        chunk = sorted(
            order[lo : lo + bucket],
            key=lambda k: len(encoded[pair_index[k][0]][0]) + pair_index[k][1],
        )
        batch, tokens = [], 0
        for k in chunk:
            ex, t = pair_index[k]
            cost = len(encoded[ex][0]) + t + 1
            if batch and tokens + cost > batch_tokens:
                batches.append(batch)
                batch, tokens = [], 0
            batch.append((ex, t))
            tokens += cost
        if batch:
            batches.append(batch)
    order2 = rng.permutation(len(batches))
    return [batches[i] for i in order2]


def evaluate_exact_match(model_obj, examples, src_vocab, tgt_vocab, max_len, batch_size=64):
    """Greedy-decode exact match (percent), overall and per gen_type."""
    pairs = []
    by_type = {}
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        sources = [src_vocab.encode(ex.source_tokens) for ex in chunk]
        results = dmodel.greedy_decode_batch(model_obj, sources, max_len=max_len, eos_id=EOS_ID)
        for ex, res in zip(chunk, results):
            predicted = tgt_vocab.decode(res.tokens)
            pairs.append((predicted, ex.target_tokens))
            by_type.setdefault(ex.gen_type, []).append((predicted, ex.target_tokens))
    overall = exact_match_accuracy(pairs)
    per_type = {k: exact_match_accuracy(v) for k, v in sorted(by_type.items())}
    return overall, per_type


def _train_one_seed(cfg: ExperimentConfig, seed, train_examples, gen_examples, out_dir):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_examples))
    n_dev = max(1, int(round(cfg.eval_dev_fraction * len(train_examples))))
    if cfg.eval_gen_dev:
        fit_examples = [train_examples[i] for i in order]
        gen_order = rng.permutation(len(gen_examples))
        dev_examples = [gen_examples[i] for i in gen_order[: cfg.eval_max_dev_examples]]
    else:
        dev_examples = [train_examples[i] for i in order[:n_dev]]
        fit_examples = [train_examples[i] for i in order[n_dev:]]
    dev_examples = dev_examples[: cfg.eval_max_dev_examples]

    if cfg.model_shared_vocab:
        vocab = Vocab.from_examples(train_examples + gen_examples, side="both")
        src_vocab = tgt_vocab = vocab
    else:
        src_vocab = Vocab.from_examples(train_examples + gen_examples, side="source")
        tgt_vocab = Vocab.from_examples(train_examples + gen_examples, side="target")

    model_obj = build_model(cfg, src_vocab, tgt_vocab, rng)
    encoded = encode_examples(fit_examples, src_vocab, tgt_vocab)
    opt = Adam(dict(model_obj.named_parameters()), lr=cfg.training_lr)
    is_baseline = cfg.model_type == "baseline_transformer"
    if not is_baseline:
        pair_index = [(i, t) for i, (_, tgt) in enumerate(encoded) for t in range(len(tgt))]

    max_len = cfg.dangle_max_decode_length
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, f"seed{seed}_best.npz")
    dropout_rng = np.random.default_rng(seed + 1_000_003) if cfg.model_dropout > 0 else None

    best = {"em": -1.0, "step": -1}
    step = 0
    losses = []
    batches = []
    while step < cfg.training_steps:
        if not batches:
            if is_baseline:
                batches = _baseline_batches(encoded, cfg.training_batch_tokens, rng)
            else:
                batches = _pair_batches(pair_index, encoded, cfg.training_batch_tokens, rng)
        batch = batches.pop()
        step += 1
        if cfg.training_warmup_steps > 0:
            opt.lr = cfg.training_lr * min(1.0, step / cfg.training_warmup_steps)
        model_obj.zero_grad()
        if is_baseline:
            src, tgt, lens = _pad_examples([encoded[i] for i in batch])
            loss = model_obj.batch_loss(src, tgt, lens, dropout_rng)
        else:
            pairs = [(encoded[ex][0], encoded[ex][1][:t]) for ex, t in batch]
            golds = [int(encoded[ex][1][t]) for ex, t in batch]
            loss = dmodel.pair_loss(model_obj, pairs, golds, dropout_rng)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"training diverged (seed={seed}, step={step})")
        losses.append(float(loss.data))
        loss.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.training_steps:
            dev_em, _ = evaluate_exact_match(model_obj, dev_examples, src_vocab, tgt_vocab, max_len)
            if dev_em > best["em"]:
                best = {"em": dev_em, "step": step}
                save_checkpoint(model_obj, ckpt_path)

    load_checkpoint(model_obj, ckpt_path)
    gen_em, gen_by_type = evaluate_exact_match(model_obj, gen_examples, src_vocab, tgt_vocab, max_len)
    metrics = {
        "seed": seed,
        "dev_best_em": best["em"],
        "dev_best_step": best["step"],
        "gen_em": gen_em,
        "gen_em_by_type": gen_by_type,
        "final_train_loss": float(np.mean(losses[-50:])),
    }
    if cfg.metrics_enabled:
        tracked = cfg.tracked_classes()
        for split_name, examples in (("train", fit_examples), ("gen", gen_examples)):
            sample = examples[: cfg.metrics_max_examples]
            records = collect_hidden_states(model_obj, sample, src_vocab, tgt_vocab, tracked)
            metrics[f"entanglement_{split_name}"] = entanglement_ratio(records).to_json()
    return metrics, ckpt_path


def _aggregate(per_seed):
    keys = [k for k, v in per_seed[0].items() if isinstance(v, (int, float)) and k != "seed"]
    out = {}
    for k in keys:
        values = [row[k] for row in per_seed]
        out[f"{k}_mean"] = float(np.mean(values))
        out[f"{k}_std"] = float(np.std(values))
    return out


def _run_toy(cfg: ExperimentConfig):
    spec = dtoy.ToySpec(size_r1=cfg.toy_size_r1, size_r2=cfg.toy_size_r2, r_train=cfg.toy_r_train)
    train_cfg = dtoy.ToyTrainConfig(steps=cfg.toy_steps, lr=cfg.toy_lr)
    regimes = [r.strip() for r in cfg.toy_regimes.split(",") if r.strip()]
    rows = []
    for regime in regimes:
        for seed in cfg.seeds():
            result, _ = dtoy.run_regime(regime, spec, train_cfg=train_cfg, seed=seed)
            row = result.to_json()
            row["train_acc_y1"] = result.train_acc_y1
            row["train_acc_y2"] = result.train_acc_y2
            rows.append(row)
    aggregate = {}
    for regime in regimes:
        acc = [r["acc_y2"] for r in rows if r["regime"] == regime]
        aggregate[f"{regime}_acc_y2_mean"] = float(np.mean(acc))
        aggregate[f"{regime}_acc_y2_std"] = float(np.std(acc))
    return rows, aggregate


def run_experiment(cfg: ExperimentConfig):
    started = time.time()
    out_dir = os.path.join(cfg.resolved_output_dir(), cfg.output_name)
    os.makedirs(out_dir, exist_ok=True)
    checkpoints = []
    if cfg.task_kind == "toy":
        per_seed, aggregate = _run_toy(cfg)
    else:
        train_examples, gen_examples = build_dataset(cfg)
        per_seed = []
        for seed in cfg.seeds():
            metrics, ckpt = _train_one_seed(cfg, seed, train_examples, gen_examples, out_dir)
            per_seed.append(metrics)
            checkpoints.append(ckpt)
        aggregate = _aggregate(per_seed)
    result = RunResult(
        task=cfg.task_kind,
        model_type=cfg.model_type,
        per_seed=per_seed,
        aggregate=aggregate,
        wall_clock_sec=time.time() - started,
        config=cfg.echo(),
        checkpoints=checkpoints,
    )
    with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(result.to_json(), fh, indent=2)
    return result
