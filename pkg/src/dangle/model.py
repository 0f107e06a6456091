"""Adaptive re-encoding decoders.

At step t the source and the already-decoded prefix are concatenated
with a trailing query placeholder, the whole context is re-encoded, and
the next token is predicted either from the placeholder's final hidden
state (encoder-only) or by a standard decoder reading the re-computed
source rows (encoder-decoder). Source and target segments keep their
own 1-based position indices and carry distinct type embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, Linear, Module, embedding_init, parameter
from .transformer import (
    NEG,
    PAD_ID,
    ModelConfig,
    TransformerDecoder,
    TransformerEncoder,
    causal_mask,
    check_token_ids,
    padding_mask,
    sinusoid_rows,
)
from .vocab import PH_ID

VARIANTS = ("encoder_only", "encoder_decoder")
SOURCE_TYPE = 0
TARGET_TYPE = 1


@dataclass
class ReencodeContext:
    """Concatenated [source || decoded prefix || placeholder] step input."""

    token_ids: np.ndarray
    type_ids: np.ndarray
    position_ids: np.ndarray

    def __len__(self):
        return len(self.token_ids)


@dataclass
class DangleConfig:
    variant: str = "encoder_only"
    n_target_informed_layers: int = 4
    n_source_only_layers: int = 0
    head_dims: tuple = None
    max_decode_length: int = 160
    relative_global_positions: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "encoder_only" and self.n_source_only_layers != 0:
            raise ValueError("encoder_only variant takes no source-only layers")
        if self.max_decode_length < 1:
            raise ValueError("max_decode_length must be >= 1")


@dataclass
class StepOutput:
    logits: np.ndarray
    source_slice: np.ndarray
    hidden: np.ndarray


@dataclass
class DecodeResult:
    tokens: list
    truncated: bool = False


def build_context(source_ids, prefix_ids, ph_id=PH_ID):
    """Step-t context: tokens [x_1..x_n, y_1..y_{t-1}, PH], target positions
    restarting at 1 so the first source and first target token share an index."""
    source_ids = np.asarray(source_ids, dtype=np.int64)
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    n = source_ids.shape[0]
    t = prefix_ids.shape[0] + 1
    if n == 0:
        raise ValueError("build_context: empty source")
    if prefix_ids.size and (np.any(prefix_ids == ph_id) or np.any(prefix_ids == PAD_ID)):
        raise ValueError("build_context: prefix contains placeholder or padding ids")
    tokens = np.concatenate([source_ids, prefix_ids, [ph_id]])
    types = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(t, dtype=np.int64)])
    positions = np.concatenate([np.arange(1, n + 1), np.arange(1, t + 1)])
    return ReencodeContext(tokens, types, positions)


def _pack_contexts(contexts, global_rel):
    """Right-pad a list of contexts into [B, L] arrays plus bookkeeping."""
    b = len(contexts)
    lengths = np.array([len(c) for c in contexts])
    lmax = int(lengths.max())
    tokens = np.zeros((b, lmax), dtype=np.int64)
    types = np.zeros((b, lmax), dtype=np.int64)
    positions = np.zeros((b, lmax), dtype=np.int64)
    rel_positions = np.zeros((b, lmax), dtype=np.int64)
    for i, c in enumerate(contexts):
        l = len(c)
        tokens[i, :l] = c.token_ids
        types[i, :l] = c.type_ids
        positions[i, :l] = c.position_ids
        rel_positions[i, :l] = np.arange(1, l + 1) if global_rel else c.position_ids
    return tokens, types, positions, rel_positions, lengths


class _ReencoderBase(Module):
    def __init__(self, cfg: ModelConfig, dangle_cfg: DangleConfig, rng, dtype=np.float32):
        super().__init__()
        if cfg.src_vocab_size < 1 or cfg.tgt_vocab_size < 1:
            raise ValueError("vocabulary sizes must be set on ModelConfig")
        self.cfg = cfg
        self.dangle_cfg = dangle_cfg
        self.dtype = np.dtype(dtype)
        self.src_table = parameter(embedding_init(rng, cfg.src_vocab_size, cfg.d_model, self.dtype))
        if cfg.shared_vocab:
            if cfg.src_vocab_size != cfg.tgt_vocab_size:
                raise ValueError("shared_vocab requires equal vocabulary sizes")
            object.__setattr__(self, "tgt_table", self.src_table)
        else:
            self.tgt_table = parameter(embedding_init(rng, cfg.tgt_vocab_size, cfg.d_model, self.dtype))
        self.type_table = parameter(embedding_init(rng, 2, cfg.d_model, self.dtype))
        self._scale = np.sqrt(cfg.d_model)

    def _embed_context(self, tokens, types, positions):
        if self.cfg.shared_vocab:
            check_token_ids(tokens, self.cfg.src_vocab_size, "context")
            tok = T.embedding(self.src_table, tokens)
        else:
            src_part = np.where(types == SOURCE_TYPE, tokens, 0)
            tgt_part = np.where(types == TARGET_TYPE, tokens, 0)
            check_token_ids(src_part, self.cfg.src_vocab_size, "context source segment")
            check_token_ids(tgt_part, self.cfg.tgt_vocab_size, "context target segment")
            src_sel = (types == SOURCE_TYPE).astype(self.dtype)[..., None]
            tok = T.embedding(self.src_table, src_part) * T.Tensor(src_sel) + T.embedding(
                self.tgt_table, tgt_part
            ) * T.Tensor(1.0 - src_sel)
        x = (tok + T.embedding(self.type_table, types)) * self._scale
        if not self.cfg.relative:
            pos = positions * (tokens != PAD_ID)
            x = x + T.Tensor(sinusoid_rows(pos, self.cfg.d_model, self.dtype))
        return x

    def _context_hidden(self, contexts, dropout_rng=None):
        tokens, types, positions, rel_pos, lengths = _pack_contexts(
            contexts, self.dangle_cfg.relative_global_positions
        )
        x = self._embed_context(tokens, types, positions)
        mask = padding_mask(tokens, self.dtype)
        rel = (rel_pos, rel_pos) if self.cfg.relative else None
        hidden = self.reencoder(x, mask, rel, dropout_rng)
        return hidden, tokens, lengths

    def _check_step_length(self, prefix_ids):
        t = len(prefix_ids) + 1
        if t > self.dangle_cfg.max_decode_length:
            raise ValueError(
                f"context length exceeds configured maximum: step {t} > "
                f"max_decode_length {self.dangle_cfg.max_decode_length}"
            )


class DangleEncoderOnly(_ReencoderBase):
    """Predicts each target token from the placeholder's re-encoded state."""

    def __init__(self, cfg, dangle_cfg, rng, dtype=np.float32):
        if dangle_cfg.variant != "encoder_only":
            raise ValueError(f"model requires variant 'encoder_only', got {dangle_cfg.variant!r}")
        super().__init__(cfg, dangle_cfg, rng, dtype)
        self.reencoder = TransformerEncoder(dangle_cfg.n_target_informed_layers, cfg, rng, dtype)
        head_dims = dangle_cfg.head_dims if dangle_cfg.head_dims is not None else (cfg.d_ffn,)
        self.head = MLP([cfg.d_model, *head_dims, cfg.tgt_vocab_size], rng, dtype)

    def pair_logits(self, pairs, dropout_rng=None):
        """Logits [B, V] for a batch of (source_ids, prefix_ids) pairs."""
        contexts = [build_context(src, prefix) for src, prefix in pairs]
        hidden, tokens, lengths = self._context_hidden(contexts, dropout_rng)
        b, lmax, d = hidden.shape
        flat = T.reshape(hidden, (b * lmax, d))
        ph_rows = T.embedding(flat, np.arange(b) * lmax + (lengths - 1))
        return self.head(ph_rows), ph_rows

    def step(self, source_ids, prefix_ids):
        self._check_step_length(prefix_ids)
        hidden, _, _ = self._context_hidden([build_context(source_ids, prefix_ids)])
        h = hidden.data[0]
        logits = self.head(T.Tensor(h[None, -1])).data[0]
        return StepOutput(logits=logits, source_slice=h[: len(source_ids)], hidden=h)

    def step_logits_batch(self, sources, prefixes):
        logits, _ = self.pair_logits(list(zip(sources, prefixes)))
        return logits.data

    def prediction_vectors(self, source_ids, target_ids):
        """Placeholder vectors [m, d] for every teacher-forced step."""
        pairs = [(source_ids, target_ids[:t]) for t in range(len(target_ids))]
        _, ph_rows = self.pair_logits(pairs)
        return ph_rows.data


class DangleEncoderDecoder(_ReencoderBase):
    """Re-encodes the context, refines the source rows with source-only
    layers, and lets a standard decoder read them."""

    def __init__(self, cfg, dangle_cfg, rng, dtype=np.float32):
        if dangle_cfg.variant != "encoder_decoder":
            raise ValueError(f"model requires variant 'encoder_decoder', got {dangle_cfg.variant!r}")
        super().__init__(cfg, dangle_cfg, rng, dtype)
        self.reencoder = TransformerEncoder(dangle_cfg.n_target_informed_layers, cfg, rng, dtype)
        self.source_only = TransformerEncoder(dangle_cfg.n_source_only_layers, cfg, rng, dtype)
        self.decoder = TransformerDecoder(cfg.n_decoder_layers, cfg, rng, dtype)
        self.out = Linear(cfg.d_model, cfg.tgt_vocab_size, rng, dtype)

    def _refined_source(self, pairs, dropout_rng=None):
        contexts = [build_context(src, prefix) for src, prefix in pairs]
        hidden, tokens, lengths = self._context_hidden(contexts, dropout_rng)
        b, lmax, d = hidden.shape
        src_lens = np.array([len(src) for src, _ in pairs])
        n_max = int(src_lens.max())
        # gather each pair's first n_i rows; overhang rows are masked away
        col = np.minimum(np.arange(n_max)[None, :], lmax - 1)
        idx = np.arange(b)[:, None] * lmax + col
        flat = T.reshape(hidden, (b * lmax, d))
        slice_rows = T.reshape(T.embedding(flat, idx.reshape(-1)), (b, n_max, d))
        src_tokens = np.zeros((b, n_max), dtype=np.int64)
        for i, (src, _) in enumerate(pairs):
            src_tokens[i, : len(src)] = np.asarray(src)
        src_mask = padding_mask(src_tokens, self.dtype)
        rel = None
        if self.cfg.relative:
            pos = np.arange(1, n_max + 1)[None, :].repeat(b, 0)
            rel = (pos, pos)
        refined = self.source_only(slice_rows, src_mask, rel, dropout_rng)
        return refined, src_mask, slice_rows

    def pair_logits(self, pairs, dropout_rng=None):
        refined, src_mask, _ = self._refined_source(pairs, dropout_rng)
        b = len(pairs)
        t_lens = np.array([len(prefix) + 1 for _, prefix in pairs])
        t_max = int(t_lens.max())
        dec_input = np.zeros((b, t_max), dtype=np.int64)
        dec_input[:, 0] = PH_ID
        for i, (_, prefix) in enumerate(pairs):
            dec_input[i, 1 : len(prefix) + 1] = np.asarray(prefix)
        x = self._embed_context(
            dec_input, np.ones_like(dec_input), np.arange(1, t_max + 1)[None, :].repeat(b, 0)
        )
        self_mask = causal_mask(t_max, self.dtype) + padding_mask(dec_input, self.dtype)
        rel = None
        if self.cfg.relative:
            pos = np.arange(1, t_max + 1)[None, :].repeat(b, 0)
            rel = (pos, pos)
        hidden = self.decoder(x, refined, self_mask, src_mask, rel, dropout_rng)
        flat = T.reshape(hidden, (b * t_max, self.cfg.d_model))
        rows = T.embedding(flat, np.arange(b) * t_max + (t_lens - 1))
        return self.out(rows), rows

    def step(self, source_ids, prefix_ids):
        self._check_step_length(prefix_ids)
        pairs = [(source_ids, prefix_ids)]
        contexts = [build_context(source_ids, prefix_ids)]
        hidden, _, _ = self._context_hidden(contexts)
        logits, _ = self.pair_logits(pairs)
        h = hidden.data[0]
        return StepOutput(logits=logits.data[0], source_slice=h[: len(source_ids)], hidden=h)

    def step_logits_batch(self, sources, prefixes):
        logits, _ = self.pair_logits(list(zip(sources, prefixes)))
        return logits.data

    def prediction_vectors(self, source_ids, target_ids):
        pairs = [(source_ids, target_ids[:t]) for t in range(len(target_ids))]
        _, rows = self.pair_logits(pairs)
        return rows.data


def pair_loss(model, pairs, golds, dropout_rng=None):
    """Mean cross-entropy over (source, prefix) pairs against gold next tokens."""
    if not pairs:
        raise ValueError("pair_loss: empty batch")
    logits, _ = model.pair_logits(pairs, dropout_rng)
    return T.cross_entropy(logits, np.asarray(golds, dtype=np.int64))


def expand_pairs(source_ids, target_ids):
    """All (prefix, gold) teacher-forcing pairs of one EOS-terminated target."""
    target_ids = np.asarray(target_ids)
    return [
        ((source_ids, target_ids[:t]), int(target_ids[t]))
        for t in range(len(target_ids))
    ]


def train_step(model, batch, dropout_rng=None):
    """Teacher-forced loss of a batch of (source_ids, target_ids) examples.

    Each example contributes one re-encoding context per target position,
    built from the gold prefix; the loss is the mean over all pairs.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    pairs, golds = [], []
    for source_ids, target_ids in batch:
        if len(target_ids) == 0:
            raise ValueError("train_step: target must be EOS-terminated, got empty target")
        for pair, gold in expand_pairs(source_ids, target_ids):
            pairs.append(pair)
            golds.append(gold)
    return pair_loss(model, pairs, golds, dropout_rng)


def greedy_decode(model, source_ids, max_len=None, eos_id=1):
    """Deterministic argmax decoding; ties resolve to the lowest token id."""
    results = greedy_decode_batch(model, [source_ids], max_len=max_len, eos_id=eos_id)
    return results[0]


def greedy_decode_batch(model, sources, max_len=None, eos_id=1):
    """Lockstep greedy decoding of many sources over a shared frozen model."""
    if max_len is None:
        dangle_cfg = getattr(model, "dangle_cfg", None)
        max_len = dangle_cfg.max_decode_length if dangle_cfg is not None else 160
    sources = [np.asarray(s, dtype=np.int64) for s in sources]
    outputs = [[] for _ in sources]
    truncated = [False] * len(sources)
    active = list(range(len(sources)))
    for _ in range(max_len):
        with T.no_grad():
            logits = model.step_logits_batch(
                [sources[i] for i in active],
                [np.array(outputs[i], dtype=np.int64) for i in active],
            )
        # reserved ids are never valid output tokens
        logits[:, PAD_ID] = -np.inf
        logits[:, PH_ID] = -np.inf
        picks = np.argmax(logits, axis=-1)
        still = []
        for row, i in enumerate(active):
            tok = int(picks[row])
            if tok == eos_id:
                continue
            outputs[i].append(tok)
            if len(outputs[i]) >= max_len:
                truncated[i] = True
            else:
                still.append(i)
        active = still
        if not active:
            break
    return [DecodeResult(tokens=outputs[i], truncated=truncated[i]) for i in range(len(sources))]
