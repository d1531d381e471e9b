"""Greedy and beam-search decoding.

Hypotheses are scored by their summed token log-probability divided by
``((5 + |Y|) / 6) ** alpha`` where ``|Y|`` counts generated tokens including
EOS; a hypothesis cut off at ``max_output_length`` has ``|Y| = max_output_length``.
Returned token ids exclude BOS and EOS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass(frozen=True)
class DecodeParams:
    bos_id: int
    eos_id: int
    beam_size: int = 4
    alpha: float = 0.6
    max_output_length: int = 64

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_output_length < 1:
            raise ConfigError("max_output_length must be positive")


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple
    score: float
    logprob: float
    finished: bool


def length_penalty(length, alpha):
    return ((5.0 + length) / 6.0) ** alpha


def normalized_score(logprob, length, alpha):
    return logprob / length_penalty(length, alpha)


class _StepScorer:
    """Next-token log-probabilities for a batch of prefixes of one source."""

    def __init__(self, model, source_ids):
        self.model = model
        self.source = np.asarray(source_ids, dtype=np.int64).reshape(1, -1)
        self.memory = None
        if not model.config.decoder_only:
            with ad.no_grad():
                self.memory = model.encoder_forward(self.source).data

    def __call__(self, prefixes):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        n = prefixes.shape[0]
        with ad.no_grad():
            if self.memory is None:
                stream = np.concatenate([np.repeat(self.source, n, axis=0), prefixes], axis=1)
                logits = self.model.decoder_forward(stream)
            else:
                memory = ad.Tensor(np.repeat(self.memory, n, axis=0))
                logits = self.model.decoder_forward(prefixes, memory)
        return ad.log_softmax_array(logits.data[:, -1, :].astype(np.float64))


@dataclass(frozen=True)
class GreedyResult:
    ids: tuple
    logprob: float
    hit_max_length: bool


def greedy_decode(model, source_ids, params):
    """Append the argmax token (lowest id on ties) until EOS or the length cap."""
    scorer = _StepScorer(model, source_ids)
    prefix = [params.bos_id]
    total = 0.0
    for _ in range(params.max_output_length):
        logp = scorer(np.asarray([prefix]))[0]
        token = int(np.argmax(logp))
        total += float(logp[token])
        if token == params.eos_id:
            return GreedyResult(tuple(prefix[1:]), total, False)
        prefix.append(token)
    return GreedyResult(tuple(prefix[1:]), total, True)


def greedy_decode_batch(model, sources, params, pad_id=0):
    """Greedy decoding of many sources at once (used for evaluation during training)."""
    if not sources:
        return []
    if model.config.decoder_only:
        return [greedy_decode(model, s, params).ids for s in sources]
    width = max(len(s) for s in sources)
    src = np.full((len(sources), width), pad_id, dtype=np.int64)
    mask = np.zeros(src.shape, dtype=bool)
    for i, s in enumerate(sources):
        src[i, :len(s)] = s
        mask[i, :len(s)] = True
    with ad.no_grad():
        memory = model.encoder_forward(src, mask)
        out = np.full((len(sources), 1), params.bos_id, dtype=np.int64)
        done = np.zeros(len(sources), dtype=bool)
        for _ in range(params.max_output_length):
            logits = model.decoder_forward(out, memory, mask).data[:, -1, :]
            token = np.argmax(logits, axis=-1)
            token[done] = params.eos_id
            out = np.concatenate([out, token[:, None]], axis=1)
            done |= token == params.eos_id
            if done.all():
                break
    results = []
    for row in out[:, 1:]:
        ids = list(row)
        if params.eos_id in ids:
            ids = ids[:ids.index(params.eos_id)]
        results.append(tuple(int(t) for t in ids))
    return results


def beam_decode(model, source_ids, params):
    """Beam search returning hypotheses best-first.

    Each step keeps the ``k`` best extensions by raw log-probability (ties
    broken by token ids), where ``k`` is the beam size minus the number of
    hypotheses already finished. Finished and length-capped hypotheses are
    then ranked by length-normalised score.
    """
    scorer = _StepScorer(model, source_ids)
    alive = [((), 0.0)]
    finished = []
    for _ in range(params.max_output_length):
        width = params.beam_size - len(finished)
        if width <= 0 or not alive:
            break
        prefixes = np.asarray([(params.bos_id, *toks) for toks, _ in alive])
        logp = scorer(prefixes)
        candidates = []
        for row, (toks, total) in enumerate(alive):
            scores = total + logp[row]
            for token in range(scores.shape[0]):
                candidates.append((-float(scores[token]), toks + (token,)))
        candidates.sort()
        alive = []
        for neg_score, toks in candidates[:width]:
            if toks[-1] == params.eos_id:
                finished.append(Hypothesis(toks[:-1], normalized_score(-neg_score, len(toks), params.alpha),
                                           -neg_score, True))
            else:
                alive.append((toks, -neg_score))
    for toks, total in alive:
        finished.append(Hypothesis(toks, normalized_score(total, len(toks), params.alpha), total, False))
    return sorted(finished, key=lambda h: (-h.score, h.ids))


def sequence_logprob(model, source_ids, output_ids, params, finished=True):
    """Teacher-forced log-probability of ``output_ids`` (plus EOS when ``finished``)."""
    target = [params.bos_id, *output_ids] + ([params.eos_id] if finished else [])
    src = np.asarray(source_ids, dtype=np.int64).reshape(1, -1)
    with ad.no_grad():
        logits = model.forward(src, np.ones(src.shape, dtype=bool), np.asarray([target[:-1]]))
    logp = ad.log_softmax_array(logits.data[0].astype(np.float64))
    return float(sum(logp[i, t] for i, t in enumerate(target[1:])))
