"""Relation-composition toy experiment.

Five-symbol inputs [e, r1, e, r2, e] carry two relations; the training
set pairs every second relation with a single fixed first relation (plus
all first relations in isolation as three-symbol inputs), and the test
set holds the unseen relation compositions. Three regimes probe how the
composition gap is handled: joint training of both relation classifiers,
separate training of only the second one, and joint training with 0/1
indicator features marking the relation window each pass should attend
to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, Module, embedding_init, parameter
from .optim import Adam
from .transformer import ModelConfig, TransformerEncoder, padding_mask, sinusoid_rows

REGIMES = ("joint", "separate", "marking")

PAD = 0
ENTITY = 1


@dataclass
class ToySpec:
    size_r1: int = 10
    size_r2: int = 10
    r_train: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.size_r1 < 2 or self.size_r2 < 2:
            raise ValueError("relation sets need at least 2 symbols")
        if not 0 <= self.r_train < self.size_r1:
            raise ValueError(f"r_train {self.r_train} outside the first relation set")

    @property
    def vocab_size(self):
        return 2 + self.size_r1 + self.size_r2

    def r1_id(self, i):
        return 2 + i

    def r2_id(self, j):
        return 2 + self.size_r1 + j


@dataclass
class ToyExample:
    symbols: np.ndarray
    label_y1: int = None
    label_y2: int = None


@dataclass
class ToyTrainConfig:
    steps: int = 2000
    lr: float = 1e-3


@dataclass
class RegimeResult:
    regime: str
    seed: int
    acc_y1: float
    acc_y2: float
    per_r1_breakdown: dict
    train_steps: int
    train_acc_y1: float = None
    train_acc_y2: float = None

    def to_json(self):
        return {
            "regime": self.regime,
            "seed": self.seed,
            "acc_y1": self.acc_y1,
            "acc_y2": self.acc_y2,
            "per_r1_breakdown": dict(self.per_r1_breakdown),
            "train_steps": self.train_steps,
        }


def generate_toy_data(spec: ToySpec):
    """Training set: the fixed r1 composed with every r2, plus every r1 in
    isolation. Test set: every composition with the other nine r1 values."""
    e = ENTITY
    train = []
    for j in range(spec.size_r2):
        train.append(
            ToyExample(
                symbols=np.array([e, spec.r1_id(spec.r_train), e, spec.r2_id(j), e]),
                label_y1=spec.r_train,
                label_y2=j,
            )
        )
    for i in range(spec.size_r1):
        train.append(ToyExample(symbols=np.array([e, spec.r1_id(i), e]), label_y1=i))
    test = []
    for i in range(spec.size_r1):
        if i == spec.r_train:
            continue
        for j in range(spec.size_r2):
            test.append(
                ToyExample(
                    symbols=np.array([e, spec.r1_id(i), e, spec.r2_id(j), e]),
                    label_y1=i,
                    label_y2=j,
                )
            )
    return train, test


class ToyModel(Module):
    """Shared encoder with per-relation classification heads over
    concatenated entity states: y1 from positions (1, 3), y2 from (3, 5)."""

    def __init__(self, spec: ToySpec, cfg: ModelConfig, rng, use_y1=True, use_y2=True,
                 use_indicators=False, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.use_indicators = use_indicators
        self.token_table = parameter(embedding_init(rng, spec.vocab_size, cfg.d_model, self.dtype))
        if use_indicators:
            self.indicator_table = parameter(embedding_init(rng, 2, cfg.d_model, self.dtype))
        self.encoder = TransformerEncoder(cfg.n_encoder_layers, cfg, rng, dtype)
        if use_y1:
            self.head_y1 = MLP([2 * cfg.d_model, cfg.d_model, spec.size_r1], rng, dtype)
        if use_y2:
            self.head_y2 = MLP([2 * cfg.d_model, cfg.d_model, spec.size_r2], rng, dtype)
        self._scale = np.sqrt(cfg.d_model)

    def encode(self, symbols, indicators=None):
        emb = T.embedding(self.token_table, symbols)
        if self.use_indicators:
            if indicators is None:
                indicators = np.zeros_like(symbols)
            emb = emb + T.embedding(self.indicator_table, indicators)
        x = emb * self._scale
        positions = np.arange(1, symbols.shape[1] + 1)[None, :] * (symbols != PAD)
        x = x + T.Tensor(sinusoid_rows(positions, self.cfg.d_model, self.dtype))
        return self.encoder(x, padding_mask(symbols, self.dtype))

    def head_inputs(self, hidden, which):
        i, j = (0, 2) if which == "y1" else (2, 4)
        return T.concat([hidden[:, i, :], hidden[:, j, :]], axis=-1)

    def logits_y1(self, symbols, indicators=None):
        return self.head_y1(self.head_inputs(self.encode(symbols, indicators), "y1"))

    def logits_y2(self, symbols, indicators=None):
        return self.head_y2(self.head_inputs(self.encode(symbols, indicators), "y2"))


def _pad_batch(examples):
    width = max(len(ex.symbols) for ex in examples)
    out = np.zeros((len(examples), width), dtype=np.int64)
    for i, ex in enumerate(examples):
        out[i, : len(ex.symbols)] = ex.symbols
    return out


def _mark(symbols, window):
    """Indicator rows: 1 over the selected [entity, relation, entity] window."""
    indicators = np.zeros_like(symbols)
    lo, hi = (0, 3) if window == "y1" else (2, 5)
    indicators[:, lo:hi] = 1
    indicators[symbols == PAD] = 0
    return indicators


def _regime_losses(model, regime, train):
    full = [ex for ex in train if ex.label_y2 is not None]
    full_ids = _pad_batch(full)
    y1_gold = np.array([ex.label_y1 for ex in train])
    y2_gold = np.array([ex.label_y2 for ex in full])
    if regime == "joint":
        all_ids = _pad_batch(train)
        hidden = model.encode(all_ids)
        full_sel = np.array([i for i, ex in enumerate(train) if ex.label_y2 is not None])
        return [
            T.cross_entropy(model.head_y1(model.head_inputs(hidden, "y1")), y1_gold),
            T.cross_entropy(model.head_y2(model.head_inputs(hidden[full_sel], "y2")), y2_gold),
        ]
    if regime == "separate":
        return [T.cross_entropy(model.logits_y2(full_ids), y2_gold)]
    all_ids = _pad_batch(train)
    return [
        T.cross_entropy(model.logits_y1(all_ids, _mark(all_ids, "y1")), y1_gold),
        T.cross_entropy(model.logits_y2(full_ids, _mark(full_ids, "y2")), y2_gold),
    ]


def _predictions(model, regime, examples, which):
    ids = _pad_batch(examples)
    indicators = _mark(ids, which) if regime == "marking" else None
    logits = model.logits_y1(ids, indicators) if which == "y1" else model.logits_y2(ids, indicators)
    return np.argmax(logits.data, axis=-1)


def evaluate_heads(model, regime, examples):
    """Per-head accuracies (percent) plus a per-r1 breakdown of y2 accuracy."""
    out = {"acc_y1": None, "acc_y2": None, "per_r1": {}}
    if regime != "separate":
        with_y1 = [ex for ex in examples if ex.label_y1 is not None]
        preds = _predictions(model, regime, with_y1, "y1")
        gold = np.array([ex.label_y1 for ex in with_y1])
        out["acc_y1"] = 100.0 * float((preds == gold).mean())
    with_y2 = [ex for ex in examples if ex.label_y2 is not None]
    if with_y2:
        preds = _predictions(model, regime, with_y2, "y2")
        gold = np.array([ex.label_y2 for ex in with_y2])
        out["acc_y2"] = 100.0 * float((preds == gold).mean())
        r1_ids = np.array([ex.symbols[1] for ex in with_y2])
        for r1 in sorted(set(r1_ids.tolist())):
            sel = r1_ids == r1
            out["per_r1"][f"r1_{r1 - 2}"] = 100.0 * float((preds[sel] == gold[sel]).mean())
    return out


def toy_model_config(spec: ToySpec):
    return ModelConfig(
        d_model=128, d_ffn=256, n_heads=4, n_encoder_layers=2, n_decoder_layers=0,
        position_mode="absolute", src_vocab_size=spec.vocab_size,
        tgt_vocab_size=spec.vocab_size, shared_vocab=True,
    )


def run_regime(regime, spec: ToySpec, cfg: ModelConfig = None, train_cfg: ToyTrainConfig = None,
               seed=None):
    """Train one regime to completion and score it on the held-out
    compositions. Raises on divergence, echoing the seed."""
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    cfg = cfg or toy_model_config(spec)
    train_cfg = train_cfg or ToyTrainConfig()
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    train, test = generate_toy_data(spec)
    if regime == "separate":
        train = [ex for ex in train if ex.label_y2 is not None]
    model = ToyModel(
        spec, cfg, rng,
        use_y1=regime != "separate", use_y2=True, use_indicators=regime == "marking",
    )
    opt = Adam(dict(model.named_parameters()), lr=train_cfg.lr)
    for step in range(train_cfg.steps):
        model.zero_grad()
        losses = _regime_losses(model, regime, train)
        total = losses[0] if len(losses) == 1 else losses[0] + losses[1]
        if not np.isfinite(total.data):
            raise RuntimeError(f"toy training diverged (regime={regime}, seed={seed}, step={step})")
        total.backward()
        opt.step()
    train_eval = evaluate_heads(model, regime, train)
    test_eval = evaluate_heads(model, regime, test)
    return RegimeResult(
        regime=regime,
        seed=seed,
        acc_y1=test_eval["acc_y1"],
        acc_y2=test_eval["acc_y2"],
        per_r1_breakdown=test_eval["per_r1"],
        train_steps=train_cfg.steps,
        train_acc_y1=train_eval["acc_y1"],
        train_acc_y2=train_eval["acc_y2"],
    ), model
