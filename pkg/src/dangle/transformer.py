"""Transformer building blocks shared by the baseline and re-encoding models.

Post-norm layers in the original arrangement, absolute-sinusoidal or
relative (clipped-distance, keys-only) position handling, padding id 0.
Inputs are integer numpy arrays [batch, length]; masks are additive
float arrays with 0 for allowed and a large negative for disallowed
positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, ModuleList, embedding_init, parameter

PAD_ID = 0
NEG = -1e9

POSITION_MODES = ("absolute", "relative")


@dataclass
class ModelConfig:
    d_model: int = 300
    d_ffn: int = 512
    n_heads: int = 6
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    position_mode: str = "absolute"
    relative_clip: int = 16
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    shared_vocab: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.position_mode not in POSITION_MODES:
            raise ValueError(f"position_mode must be one of {POSITION_MODES}, got {self.position_mode!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.position_mode == "relative" and self.relative_clip < 1:
            raise ValueError(f"relative_clip must be >= 1, got {self.relative_clip}")

    @property
    def relative(self):
        return self.position_mode == "relative"


def sinusoidal_encoding(position, d_model):
    """Even entries sin(pos / 10000^(2i/d)), odd entries the matching cos."""
    if d_model % 2 != 0:
        raise ValueError(f"sinusoidal encoding needs even d_model, got {d_model}")
    i = np.arange(d_model // 2)
    angles = position / np.power(10000.0, 2 * i / d_model)
    out = np.empty(d_model)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


_SIN_TABLES = {}


def sinusoid_rows(position_ids, d_model, dtype):
    """Constant [B, L, d] table lookup of sinusoidal encodings."""
    key = (d_model, np.dtype(dtype).str)
    table = _SIN_TABLES.get(key)
    needed = int(np.max(position_ids)) + 1 if position_ids.size else 1
    if table is None or table.shape[0] < needed:
        size = max(64, 1 << int(np.ceil(np.log2(max(needed, 2)))))
        full = np.stack([sinusoidal_encoding(p, d_model) for p in range(size)])
        table = full.astype(dtype)
        _SIN_TABLES[key] = table
    return table[position_ids]


def padding_mask(ids, dtype):
    """Additive [B, 1, 1, L] mask blocking attention to padding keys."""
    blocked = (ids == PAD_ID)
    mask = np.zeros((ids.shape[0], 1, 1, ids.shape[1]), dtype=dtype)
    mask[:, 0, 0, :][blocked] = NEG
    return mask


def causal_mask(length, dtype):
    """Additive [1, 1, L, L] mask blocking keys strictly after the query."""
    mask = np.triu(np.full((length, length), NEG, dtype=dtype), k=1)
    return mask[None, None]


def check_token_ids(ids, vocab_size, where):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)].ravel()[0]
        raise IndexError(f"{where}: token id {int(bad)} outside vocabulary of size {vocab_size}")
    return ids


def relative_index(q_positions, k_positions, clip):
    """Clipped-distance table indices from 1-based position ids."""
    dist = k_positions[:, None, :].astype(np.int64) - q_positions[:, :, None].astype(np.int64)
    return np.clip(dist, -clip, clip) + clip


class MultiHeadAttention(Module):
    """Scaled dot-product attention over heads; in relative mode a learned
    embedding of the clipped key-query distance is added to each key."""

    def __init__(self, d_model, n_heads, rng, dtype, relative_clip=None):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.relative_clip = relative_clip
        self.wq = Linear(d_model, d_model, rng, dtype)
        # a key bias shifts every score in a row equally, which softmax
        # cancels exactly; leaving it in creates dead parameters
        self.wk = Linear(d_model, d_model, rng, dtype, bias=False)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)
        if relative_clip is not None:
            self.rel_table = parameter(embedding_init(rng, 2 * relative_clip + 1, self.d_head, dtype))

    def _heads(self, x):
        b, l, d = x.shape
        return T.swapaxes(T.reshape(x, (b, l, self.n_heads, self.d_head)), 1, 2)

    def __call__(self, query, memory, mask, rel_positions=None):
        row_max = np.max(mask, axis=-1)
        if np.any(row_max <= NEG / 2):
            raise ValueError("attention: a query row has no attendable key positions")
        b, lq, d = query.shape
        lk = memory.shape[1]
        qh = self._heads(self.wq(query))
        kh = self._heads(self.wk(memory))
        vh = self._heads(self.wv(memory))
        scores = T.matmul(qh, T.swapaxes(kh, -1, -2))
        if self.relative_clip is not None:
            if rel_positions is None:
                raise ValueError("attention: relative mode needs position ids")
            q_pos, k_pos = rel_positions
            idx = relative_index(q_pos, k_pos, self.relative_clip)
            rel = T.embedding(self.rel_table, idx)
            scores = scores + T.relative_scores(qh, rel)
        scores = scores * (1.0 / np.sqrt(self.d_head)) + T.Tensor(mask)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, vh)
        merged = T.reshape(T.swapaxes(ctx, 1, 2), (b, lq, d))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, d_model, d_ffn, rng, dtype):
        super().__init__()
        self.lin1 = Linear(d_model, d_ffn, rng, dtype)
        self.lin2 = Linear(d_ffn, d_model, rng, dtype)

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        clip = cfg.relative_clip if cfg.relative else None
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype, clip)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng, dtype)
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.dropout = cfg.dropout

    def __call__(self, x, mask, rel_positions=None, dropout_rng=None):
        a = self.attn(x, x, mask, rel_positions)
        if dropout_rng is not None and self.dropout > 0:
            a = T.dropout(a, self.dropout, dropout_rng)
        x = self.ln1(x + a)
        f = self.ffn(x)
        if dropout_rng is not None and self.dropout > 0:
            f = T.dropout(f, self.dropout, dropout_rng)
        return self.ln2(x + f)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        clip = cfg.relative_clip if cfg.relative else None
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype, clip)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype, None)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng, dtype)
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ln3 = LayerNorm(cfg.d_model, dtype)
        self.dropout = cfg.dropout

    def __call__(self, y, memory, self_mask, cross_mask, rel_positions=None, dropout_rng=None):
        a = self.self_attn(y, y, self_mask, rel_positions)
        if dropout_rng is not None and self.dropout > 0:
            a = T.dropout(a, self.dropout, dropout_rng)
        y = self.ln1(y + a)
        c = self.cross_attn(y, memory, cross_mask)
        if dropout_rng is not None and self.dropout > 0:
            c = T.dropout(c, self.dropout, dropout_rng)
        y = self.ln2(y + c)
        f = self.ffn(y)
        if dropout_rng is not None and self.dropout > 0:
            f = T.dropout(f, self.dropout, dropout_rng)
        return self.ln3(y + f)


class TransformerEncoder(Module):
    def __init__(self, n_layers, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.layers = ModuleList([EncoderLayer(cfg, rng, dtype) for _ in range(n_layers)])

    def __call__(self, x, mask, rel_positions=None, dropout_rng=None):
        for layer in self.layers:
            x = layer(x, mask, rel_positions, dropout_rng)
        return x


class TransformerDecoder(Module):
    def __init__(self, n_layers, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.layers = ModuleList([DecoderLayer(cfg, rng, dtype) for _ in range(n_layers)])

    def __call__(self, y, memory, self_mask, cross_mask, rel_positions=None, dropout_rng=None):
        for layer in self.layers:
            y = layer(y, memory, self_mask, cross_mask, rel_positions, dropout_rng)
        return y


class Seq2SeqTransformer(Module):
    """Encode-once / decode-autoregressively baseline.

    The reserved query token (vocab id 2) starts the decoder input, so
    logits row t-1 predicts target position t from strictly earlier
    target tokens plus the source encoding.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32, query_id=2):
        super().__init__()
        if cfg.src_vocab_size < 1 or cfg.tgt_vocab_size < 1:
            raise ValueError("vocabulary sizes must be set on ModelConfig")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.query_id = query_id
        self.src_table = parameter(embedding_init(rng, cfg.src_vocab_size, cfg.d_model, self.dtype))
        if cfg.shared_vocab:
            if cfg.src_vocab_size != cfg.tgt_vocab_size:
                raise ValueError("shared_vocab requires equal vocabulary sizes")
            object.__setattr__(self, "tgt_table", self.src_table)
        else:
            self.tgt_table = parameter(embedding_init(rng, cfg.tgt_vocab_size, cfg.d_model, self.dtype))
        self.encoder = TransformerEncoder(cfg.n_encoder_layers, cfg, rng, dtype)
        self.decoder = TransformerDecoder(cfg.n_decoder_layers, cfg, rng, dtype)
        self.out = Linear(cfg.d_model, cfg.tgt_vocab_size, rng, dtype)
        self._scale = np.sqrt(cfg.d_model)

    def _embed(self, table, ids, vocab_size, where):
        check_token_ids(ids, vocab_size, where)
        x = T.embedding(table, ids) * self._scale
        if not self.cfg.relative:
            positions = np.arange(1, ids.shape[1] + 1)[None, :] * (ids != PAD_ID)
            x = x + T.Tensor(sinusoid_rows(positions, self.cfg.d_model, self.dtype))
        return x

    def encode(self, src_ids, dropout_rng=None):
        src_ids = np.asarray(src_ids)
        x = self._embed(self.src_table, src_ids, self.cfg.src_vocab_size, "encoder")
        mask = padding_mask(src_ids, self.dtype)
        rel = None
        if self.cfg.relative:
            positions = np.arange(1, src_ids.shape[1] + 1)[None, :].repeat(src_ids.shape[0], 0)
            rel = (positions, positions)
        return self.encoder(x, mask, rel, dropout_rng), mask

    def _decode_rows(self, dec_input, memory, cross_mask, dropout_rng=None):
        x = self._embed(self.tgt_table, dec_input, self.cfg.tgt_vocab_size, "decoder")
        self_mask = causal_mask(dec_input.shape[1], self.dtype) + padding_mask(dec_input, self.dtype)
        rel = None
        if self.cfg.relative:
            positions = np.arange(1, dec_input.shape[1] + 1)[None, :].repeat(dec_input.shape[0], 0)
            rel = (positions, positions)
        return self.decoder(x, memory, self_mask, cross_mask, rel, dropout_rng)

    def decoder_forward(self, tgt_ids, memory, cross_mask, dropout_rng=None):
        """Teacher-forced logits [B, m, V]; row t-1 predicts target position t."""
        tgt_ids = np.asarray(tgt_ids)
        if tgt_ids.ndim != 2 or tgt_ids.shape[1] == 0:
            raise ValueError("decoder_forward: empty target")
        dec_input = np.concatenate(
            [np.full((tgt_ids.shape[0], 1), self.query_id, dtype=tgt_ids.dtype), tgt_ids[:, :-1]],
            axis=1,
        )
        hidden = self._decode_rows(dec_input, memory, cross_mask, dropout_rng)
        return self.out(hidden)

    def forward_logits(self, src_ids, tgt_ids, dropout_rng=None):
        memory, cross_mask = self.encode(src_ids, dropout_rng)
        return self.decoder_forward(tgt_ids, memory, cross_mask, dropout_rng)

    def batch_loss(self, src_ids, tgt_ids, tgt_lens, dropout_rng=None):
        """Mean cross-entropy over the real (non-pad) target positions."""
        logits = self.forward_logits(src_ids, tgt_ids, dropout_rng)
        b, m, v = logits.shape
        rows, cols = np.nonzero(np.arange(m)[None, :] < np.asarray(tgt_lens)[:, None])
        flat = T.reshape(logits, (b * m, v))
        picked = T.embedding(flat, rows * m + cols)
        return T.cross_entropy(picked, np.asarray(tgt_ids)[rows, cols])

    def step_logits_batch(self, sources, prefixes):
        """Next-token logits [B, V] given per-example decoded prefixes."""
        b = len(sources)
        smax = max(len(s) for s in sources)
        src_ids = np.zeros((b, smax), dtype=np.int64)
        for i, s in enumerate(sources):
            src_ids[i, : len(s)] = s
        lens = np.array([len(p) for p in prefixes])
        width = int(lens.max()) + 1
        dec_input = np.zeros((b, width), dtype=np.int64)
        dec_input[:, 0] = self.query_id
        for i, p in enumerate(prefixes):
            dec_input[i, 1 : len(p) + 1] = p
        memory, cross_mask = self.encode(src_ids)
        hidden = self._decode_rows(dec_input, memory, cross_mask)
        picked = T.embedding(
            T.reshape(hidden, (b * width, self.cfg.d_model)), np.arange(b) * width + lens
        )
        return self.out(picked).data

    def prediction_vectors(self, src_ids, tgt_ids, tgt_lens):
        """Last-layer decoder vectors feeding each real target position's logits."""
        memory, cross_mask = self.encode(src_ids)
        tgt_ids = np.asarray(tgt_ids)
        dec_input = np.concatenate(
            [np.full((tgt_ids.shape[0], 1), self.query_id, dtype=tgt_ids.dtype), tgt_ids[:, :-1]],
            axis=1,
        )
        hidden = self._decode_rows(dec_input, memory, cross_mask)
        return hidden.data
