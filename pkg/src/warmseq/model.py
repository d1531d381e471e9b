"""BERT-style encoder, causal decoder with cross-attention, and parameter accounting.

Parameter names follow one canonical layout that archives and mapping rules
target::

    embeddings/{word,position,token_type,ln_gain,ln_bias}     shared block
    encoder/embeddings/..., decoder/embeddings/...           two-block models
    encoder/layer_{i}/self/{query,key,value,output}_{w,b}, self/ln_{gain,bias}
    encoder/layer_{i}/ffn/{inner,outer}_{w,b}, ffn/ln_{gain,bias}
    decoder/layer_{i}/self/..., decoder/layer_{i}/cross/..., decoder/layer_{i}/ffn/...
    output/w, output/b                                       untied head only

Dense weights are stored ``[in, out]`` and applied as ``x @ w``. Layers use
the post-norm residual arrangement.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .errors import DegenerateBatchError, LengthError, ShapeError

ATTENTION_PARAMS = ("query_w", "query_b", "key_w", "key_b", "value_w", "value_b",
                    "output_w", "output_b", "ln_gain", "ln_bias")
FFN_PARAMS = ("inner_w", "inner_b", "outer_w", "outer_b", "ln_gain", "ln_bias")
EMBEDDING_PARAMS = ("word", "position", "token_type", "ln_gain", "ln_bias")


def truncated_normal(rng, shape, std):
    """Normal(0, std) resampled until every value lies within two deviations."""
    values = rng.standard_normal(shape)
    bad = np.abs(values) > 2.0
    while bad.any():
        values[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(values) > 2.0
    return values * std


def param_rng(seed, name):
    # per-tensor streams: a tensor's initial value depends only on (seed, name)
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def embedding_prefix(config, side):
    if config.share_embeddings or config.decoder_only:
        return "embeddings"
    return f"{side}/embeddings"


def layer_prefix(stack, i):
    return f"{stack}/layer_{i}"


@dataclass
class Batch:
    src_ids: np.ndarray
    src_mask: np.ndarray
    tgt_ids: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self):
        return self.tgt_ids.shape[0]


class Seq2SeqModel:
    """Parameter store plus forward machinery.

    ``params`` maps every name, aliases included, to its tensor; shared
    parameters are the same :class:`~warmseq.autodiff.Tensor` object under
    two names. ``aliases`` maps each alias to its canonical name.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.aliases = {}
        self._allocate()

    # construction ---------------------------------------------------------

    def _new(self, name, shape, kind):
        if kind == "normal":
            data = truncated_normal(param_rng(self.seed, name), shape, self.config.init_std)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        self.params[name] = ad.Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    def _alias(self, name, target):
        self.params[name] = self.params[target]
        self.aliases[name] = target

    def _embedding_block(self, prefix, vocab):
        c = self.config
        h = c.hidden_size
        self._new(f"{prefix}/word", (vocab, h), "normal")
        self._new(f"{prefix}/position", (c.max_positions, h), "normal")
        self._new(f"{prefix}/token_type", (2, h), "normal")
        self._new(f"{prefix}/ln_gain", (h,), "ones")
        self._new(f"{prefix}/ln_bias", (h,), "zeros")

    def _attention_block(self, prefix):
        h = self.config.hidden_size
        for part in ("query", "key", "value", "output"):
            self._new(f"{prefix}/{part}_w", (h, h), "normal")
            self._new(f"{prefix}/{part}_b", (h,), "zeros")
        self._new(f"{prefix}/ln_gain", (h,), "ones")
        self._new(f"{prefix}/ln_bias", (h,), "zeros")

    def _ffn_block(self, prefix):
        h, f = self.config.hidden_size, self.config.filter_size
        self._new(f"{prefix}/inner_w", (h, f), "normal")
        self._new(f"{prefix}/inner_b", (f,), "zeros")
        self._new(f"{prefix}/outer_w", (f, h), "normal")
        self._new(f"{prefix}/outer_b", (h,), "zeros")
        self._new(f"{prefix}/ln_gain", (h,), "ones")
        self._new(f"{prefix}/ln_bias", (h,), "zeros")

    def _allocate(self):
        c = self.config
        if c.decoder_only or c.share_embeddings:
            self._embedding_block("embeddings", c.output_vocab_size)
        else:
            self._embedding_block("encoder/embeddings", c.input_vocab_size)
            self._embedding_block("decoder/embeddings", c.output_vocab_size)
        if not c.decoder_only:
            for i in range(c.num_layers):
                self._attention_block(f"encoder/layer_{i}/self")
                self._ffn_block(f"encoder/layer_{i}/ffn")
        for i in range(c.num_layers):
            dec = layer_prefix("decoder", i)
            if c.share_encoder_decoder and not c.decoder_only:
                enc = layer_prefix("encoder", i)
                for p in ATTENTION_PARAMS:
                    self._alias(f"{dec}/self/{p}", f"{enc}/self/{p}")
                for p in FFN_PARAMS:
                    self._alias(f"{dec}/ffn/{p}", f"{enc}/ffn/{p}")
            else:
                self._attention_block(f"{dec}/self")
                self._ffn_block(f"{dec}/ffn")
            if not c.decoder_only:
                self._attention_block(f"{dec}/cross")
        if not c.tie_output_to_embedding:
            self._new("output/w", (c.hidden_size, c.output_vocab_size), "normal")
            self._new("output/b", (c.output_vocab_size,), "zeros")

    # parameter views --------------------------------------------------------

    def unique_params(self):
        """Canonical name -> tensor, one entry per storage."""
        return {n: t for n, t in self.params.items() if n not in self.aliases}

    def num_params(self):
        return sum(t.size for t in self.unique_params().values())

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.unique_params().items()}

    def load_state_dict(self, state, strict=True):
        for name, value in state.items():
            if name not in self.params:
                if strict:
                    raise ShapeError(f"unknown parameter {name}")
                continue
            target = self.params[name]
            if target.shape != value.shape:
                raise ShapeError(f"shape {value.shape} for {name}, model has {target.shape}")
            target.data = np.array(value, dtype=self.dtype)

    def canonical(self, name):
        return self.aliases.get(name, name)

    def zero_grad(self):
        for t in self.unique_params().values():
            t.grad = None

    # forward ----------------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def embed(self, ids, side="encoder", rng=None):
        """Token + position + token-type(row 0) embeddings, then layer norm."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        length = ids.shape[1]
        if length > self.config.max_positions:
            raise LengthError(f"sequence length {length} exceeds max_positions {self.config.max_positions}")
        prefix = embedding_prefix(self.config, side)
        x = ad.take_rows(self._p(f"{prefix}/word"), ids)
        x = x + ad.take_rows(self._p(f"{prefix}/position"), np.arange(length))
        x = x + ad.take_rows(self._p(f"{prefix}/token_type"), np.zeros(1, dtype=np.int64))
        x = ad.layer_norm(x, self._p(f"{prefix}/ln_gain"), self._p(f"{prefix}/ln_bias"))
        return ad.dropout(x, self.config.dropout, rng)

    def _attention(self, prefix, x, memory, mask, rng):
        c = self.config
        p = self._p
        batch, q_len, h = x.shape
        k_len = memory.shape[1]
        heads, d = c.num_heads, c.head_size

        def project(src, part, length):
            y = ad.matmul(src, p(f"{prefix}/{part}_w")) + p(f"{prefix}/{part}_b")
            return ad.transpose(y.reshape(batch, length, heads, d), (0, 2, 1, 3))

        q = project(x, "query", q_len)
        k = project(memory, "key", k_len)
        v = project(memory, "value", k_len)
        scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(d))
        scores = ad.masked_fill(scores, mask[:, None, :, :])
        probs = ad.dropout(ad.softmax(scores, axis=-1), c.dropout, rng)
        context = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)).reshape(batch, q_len, h)
        out = ad.matmul(context, p(f"{prefix}/output_w")) + p(f"{prefix}/output_b")
        out = ad.dropout(out, c.dropout, rng)
        return ad.layer_norm(x + out, p(f"{prefix}/ln_gain"), p(f"{prefix}/ln_bias"))

    def _ffn(self, prefix, x, rng):
        p = self._p
        hidden = ad.gelu(ad.matmul(x, p(f"{prefix}/inner_w")) + p(f"{prefix}/inner_b"))
        out = ad.matmul(hidden, p(f"{prefix}/outer_w")) + p(f"{prefix}/outer_b")
        out = ad.dropout(out, self.config.dropout, rng)
        return ad.layer_norm(x + out, p(f"{prefix}/ln_gain"), p(f"{prefix}/ln_bias"))

    def encoder_forward(self, src_ids, src_mask=None, rng=None):
        """Bidirectional encoder; padded keys get zero attention weight."""
        if self.config.decoder_only:
            raise ShapeError("decoder-only model has no encoder")
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        src_mask = np.ones(src_ids.shape, dtype=bool) if src_mask is None else np.atleast_2d(np.asarray(src_mask, dtype=bool))
        if src_mask.shape != src_ids.shape:
            raise ShapeError(f"source mask {src_mask.shape} does not match ids {src_ids.shape}")
        if not src_mask.any(axis=1).all():
            raise DegenerateBatchError("source sequence with no real tokens")
        x = self.embed(src_ids, "encoder", rng)
        key_mask = src_mask[:, None, :]
        for i in range(self.config.num_layers):
            x = self._attention(f"encoder/layer_{i}/self", x, x, key_mask, rng)
            x = self._ffn(f"encoder/layer_{i}/ffn", x, rng)
        return x

    def output_logits(self, hidden):
        c = self.config
        if c.tie_output_to_embedding:
            table = self._p(f"{embedding_prefix(c, 'decoder')}/word")
            return ad.matmul(hidden, ad.transpose(table, (1, 0)))
        return ad.matmul(hidden, self._p("output/w")) + self._p("output/b")

    def mlm_logits(self, memory):
        """Encoder states scored against the input-side word embeddings."""
        table = self._p(f"{embedding_prefix(self.config, 'encoder')}/word")
        return ad.matmul(memory, ad.transpose(table, (1, 0)))

    def _decoder_stack(self, x, memory, memory_mask, rng):
        length = x.shape[1]
        causal = np.tril(np.ones((length, length), dtype=bool))[None]
        for i in range(self.config.num_layers):
            prefix = layer_prefix("decoder", i)
            x = self._attention(f"{prefix}/self", x, x, causal, rng)
            if memory is not None:
                x = self._attention(f"{prefix}/cross", x, memory, memory_mask[:, None, :], rng)
            x = self._ffn(f"{prefix}/ffn", x, rng)
        return x

    def decoder_forward(self, tgt_ids, memory=None, src_mask=None, rng=None):
        """Causal decoder; returns logits ``[batch, len, output_vocab]``.

        ``memory`` is None only for decoder-only models, where any source is
        handled by :meth:`forward` as a prefix of the same stream.
        """
        tgt_ids = np.atleast_2d(np.asarray(tgt_ids, dtype=np.int64))
        if memory is None:
            if not self.config.decoder_only:
                raise ShapeError("encoder-decoder model needs encoder memory")
            memory_mask = None
        else:
            if self.config.decoder_only:
                raise ShapeError("decoder-only model takes no encoder memory")
            memory_mask = (np.ones(memory.shape[:2], dtype=bool) if src_mask is None
                           else np.atleast_2d(np.asarray(src_mask, dtype=bool)))
            if memory_mask.shape != memory.shape[:2]:
                raise ShapeError(f"memory {memory.shape[:2]} and source mask {memory_mask.shape} disagree")
            if memory.shape[0] != tgt_ids.shape[0]:
                raise ShapeError("memory and targets have different batch sizes")
        x = self.embed(tgt_ids, "decoder", rng)
        x = self._decoder_stack(x, memory, memory_mask, rng)
        return self.output_logits(x)

    def forward(self, src_ids, src_mask, tgt_in, rng=None):
        """Logits aligned with ``tgt_in`` for either architecture."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        src_mask = np.atleast_2d(np.asarray(src_mask, dtype=bool))
        if not self.config.decoder_only:
            memory = self.encoder_forward(src_ids, src_mask, rng)
            return self.decoder_forward(tgt_in, memory, src_mask, rng)
        stream, index = prefix_stream(src_ids, src_mask, tgt_in)
        logits = self.decoder_forward(stream, None, None, rng)
        return ad.gather(logits, index)


def prefix_stream(src_ids, src_mask, tgt_in):
    """Concatenate each real source with its target input for decoder-only models.

    Returns the right-padded stream and the (row, position) index of every
    target-input slot inside it.
    """
    batch, tgt_len = tgt_in.shape
    lengths = src_mask.sum(axis=1) if src_ids.size else np.zeros(batch, dtype=np.int64)
    total = int(lengths.max(initial=0)) + tgt_len
    stream = np.zeros((batch, total), dtype=np.int64)
    for row in range(batch):
        n = int(lengths[row])
        stream[row, :n] = src_ids[row][src_mask[row]]
        stream[row, n:n + tgt_len] = tgt_in[row]
    rows = np.repeat(np.arange(batch), tgt_len).reshape(batch, tgt_len)
    cols = lengths[:, None] + np.arange(tgt_len)[None, :]
    return stream, (rows, cols)


def lm_loss(model, batch, rng=None):
    """Teacher-forced cross-entropy predicting ``tgt[1:]`` from ``tgt[:-1]``."""
    tgt = np.asarray(batch.tgt_ids)
    if tgt.shape[1] < 2:
        raise DegenerateBatchError("targets need at least BOS and one more token")
    logits = model.forward(batch.src_ids, batch.src_mask, tgt[:, :-1], rng)
    return ad.cross_entropy(logits, tgt[:, 1:], np.asarray(batch.tgt_mask)[:, 1:])


# parameter accounting -------------------------------------------------------

@dataclass(frozen=True)
class ParamReport:
    """Parameter counts; ``embedding`` is the token matrices alone and
    ``embedding_block`` adds positions, token types and the embedding norm."""

    total: int
    embedding: int
    embedding_block: int
    encoder: int
    decoder: int
    cross_attention: int
    output_head: int
    warm_started: int
    random: int

    def row(self, label=""):
        def m(n):
            return f"{n / 1e6:.1f}M" if n else "0"
        cells = [m(self.total), m(self.embedding), m(self.warm_started), m(self.random)]
        return f"{label:<13}" + "".join(f"{c:>10}" for c in cells)


def layer_param_count(h, f):
    attention = 4 * (h * h + h)
    ffn = (h * f + f) + (f * h + h)
    norms = 2 * (2 * h)
    return attention + ffn + norms


def cross_param_count(h):
    return 4 * (h * h + h) + 2 * h


def count_params(config, scheme=None):
    """Closed-form parameter accounting, optionally split by warm-start plan.

    ``scheme`` needs ``encoder_source``, ``decoder_source``,
    ``embeddings_only``, ``layers_only`` and ``layer_subset`` attributes
    (see :class:`warmseq.schemes.InitScheme`).
    """
    c = config
    h, L, p = c.hidden_size, c.num_layers, c.max_positions
    layer = layer_param_count(h, c.filter_size)
    word = {"encoder": c.input_vocab_size * h, "decoder": c.output_vocab_size * h}
    block_rest = p * h + 2 * h + 2 * h

    # components keyed by storage so aliased tensors are counted once
    one_block = c.share_embeddings or c.decoder_only
    emb_key = {side: ("emb", "shared" if one_block else side) for side in ("encoder", "decoder")}
    stacks = {}
    if not c.decoder_only:
        stacks["encoder"] = ("layers", "encoder")
    stacks["decoder"] = ("layers", "encoder") if (c.share_encoder_decoder and not c.decoder_only) else ("layers", "decoder")

    embedding = word["decoder"] if one_block else word["encoder"] + word["decoder"]
    embedding_block = embedding + (block_rest if one_block else 2 * block_rest)
    encoder = 0 if c.decoder_only else L * layer
    decoder = 0 if (c.share_encoder_decoder and not c.decoder_only) else L * layer
    cross = 0 if c.decoder_only else L * cross_param_count(h)
    head = 0 if c.tie_output_to_embedding else h * c.output_vocab_size + c.output_vocab_size
    total = embedding_block + encoder + decoder + cross + head

    warm = 0
    if scheme is not None:
        seen = set()
        sides = []
        if getattr(scheme, "encoder_source", None) and not c.decoder_only:
            sides.append("encoder")
        if getattr(scheme, "decoder_source", None):
            sides.append("decoder")
        for side in sides:
            if not scheme.embeddings_only:
                key = stacks[side]
                if key not in seen:
                    seen.add(key)
                    n_layers = L if scheme.layer_subset is None else min(L, len(scheme.layer_subset))
                    warm += n_layers * layer
            key = emb_key[side]
            if key not in seen:
                seen.add(key)
                warm += block_rest
                if not scheme.layers_only:
                    warm += word[side] if not one_block else word["decoder"]
    return ParamReport(total=total, embedding=embedding, embedding_block=embedding_block, encoder=encoder, decoder=decoder,
                       cross_attention=cross, output_head=head, warm_started=warm, random=total - warm)
