"""Fine-tuning loop, learning-rate schedule, freezing and toy pre-training."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import TensorArchive
from .config import ModelConfig
from .data import collate, frame, pad
from .errors import ConfigError, DegenerateDatasetError, TrainingError
from .model import Seq2SeqModel, lm_loss
from .optim import Adam
from .tokenizer import tokenize


@dataclass(frozen=True)
class TrainSchedule:
    base_rate: float = 0.05
    warmup_steps: int = 400
    hidden_size: int = 768
    total_steps: int = 2000
    batch_size: int = 32

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.base_rate <= 0 or self.hidden_size < 1 or self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("schedule needs positive base_rate, hidden_size and batch_size")


def learning_rate(schedule, step):
    """Linear warmup, then inverse square-root decay, scaled by hidden_size ** -0.5."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    warm = step * schedule.warmup_steps ** -1.5
    decay = step ** -0.5
    return schedule.base_rate * schedule.hidden_size ** -0.5 * min(warm, decay)


@dataclass(frozen=True)
class FreezeSpec:
    """Parameters matching ``globs`` get no update while ``step < unfreeze_at_step``."""

    globs: tuple
    unfreeze_at_step: int

    @classmethod
    def from_report(cls, report, unfreeze_at_step):
        return cls(tuple(sorted(report.warm_names())), unfreeze_at_step)

    def frozen_names(self, model):
        """Canonical names frozen by this spec (an alias match freezes its storage)."""
        out = set()
        for name in model.params:
            if any(fnmatch.fnmatchcase(name, g) for g in self.globs):
                out.add(model.canonical(name))
        return out


@dataclass
class TrainResult:
    model: Seq2SeqModel
    curve: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def batches(examples, batch_size, rng):
    """Endless stream of shuffled batches; each pass is a fresh permutation."""
    n = len(examples)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = order[start:start + batch_size]
            yield [examples[i] for i in chunk]


def train(model, examples, schedule, freeze=None, seed=0, log_every=10, callback=None,
          src_pad=0, tgt_pad=0):
    """Teacher-forced Adam training over encoded ``(source_ids, target_ids)`` pairs.

    ``callback(step, model)`` runs after every update; returning True stops
    training early.
    """
    if not examples:
        raise DegenerateDatasetError("training set is empty")
    if freeze is not None and freeze.unfreeze_at_step > schedule.total_steps + 1:
        raise ConfigError("unfreeze_at_step lies beyond total_steps")
    params = model.unique_params()
    optimizer = Adam(params)
    frozen = freeze.frozen_names(model) if freeze is not None else set()
    data_rng = np.random.default_rng([seed, 0])
    dropout_rng = np.random.default_rng([seed, 1])
    stream = batches(examples, schedule.batch_size, data_rng)
    result = TrainResult(model)
    for step in range(1, schedule.total_steps + 1):
        batch = collate(next(stream), src_pad, tgt_pad)
        lr = learning_rate(schedule, step)
        optimizer.zero_grad()
        try:
            loss = lm_loss(model, batch, dropout_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", step=step)
            ad.backward(loss)
            skip = frozen if freeze is not None and step < freeze.unfreeze_at_step else ()
            optimizer.step(lr, frozen=skip)
        except ad.NumericalError as exc:
            raise TrainingError(str(exc), step=step) from None
        if step % log_every == 0 or step == 1 or step == schedule.total_steps:
            result.curve.append((step, value, lr))
        result.steps = step
        if callback is not None and callback(step, model):
            result.stopped_early = True
            break
    return result


def write_curve(path, curve, header=None):
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(header + "\n")
        handle.write("step,loss,lr\n")
        for step, loss, lr in curve:
            handle.write(f"{step},{loss:.6f},{lr:.9g}\n")


def subsample(dataset, fraction, seed):
    """Uniform sample without replacement of ``round(fraction * N)`` items.

    The same seed yields nested samples: a smaller fraction is always a
    prefix of the same permutation as a larger one.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    size = int(math.floor(fraction * n + 0.5))
    if size == 0:
        raise DegenerateDatasetError(f"fraction {fraction} of {n} examples is empty")
    order = np.random.default_rng(seed).permutation(n)
    return [dataset[i] for i in order[:size]]


# toy pre-training ----------------------------------------------------------------

MASK_RATE = 0.15


def mask_tokens(batch_ids, batch_mask, vocab, rng):
    """Pick 15% of the non-special positions (at least one per row) as targets.

    A chosen position becomes the mask token 80% of the time, a random
    ordinary token 10% of the time and stays unchanged otherwise, so the
    encoder keeps an identity signal for unmasked input.
    """
    special = np.isin(batch_ids, list(vocab.special_ids))
    candidates = batch_mask & ~special
    chosen = (rng.random(batch_ids.shape) < MASK_RATE) & candidates
    for row in range(batch_ids.shape[0]):
        if not chosen[row].any() and candidates[row].any():
            cols = np.flatnonzero(candidates[row])
            chosen[row, cols[rng.integers(len(cols))]] = True
    action = rng.random(batch_ids.shape)
    ordinary = np.setdiff1d(np.arange(len(vocab)), sorted(vocab.special_ids))
    random_ids = ordinary[rng.integers(len(ordinary), size=batch_ids.shape)]
    masked = np.where(chosen & (action < 0.8), vocab.mask_id, batch_ids)
    masked = np.where(chosen & (action >= 0.9), random_ids, masked)
    return masked, chosen


@dataclass
class PretrainResult:
    model: Seq2SeqModel
    curve: list
    archive: TensorArchive


def _encode_corpus(corpus, vocab, max_len):
    seqs = [frame(tokenize(line, vocab), vocab, max_len) for line in corpus if line.strip()]
    if not seqs:
        raise DegenerateDatasetError("pre-training corpus is empty")
    return seqs


def _export(model, objective, seed):
    keep = {}
    stack = "encoder" if objective == "masked" else "decoder"
    for name, value in model.state_dict().items():
        if name.startswith("embeddings/"):
            keep[name] = value
        elif name.startswith(f"{stack}/layer_") and "/cross/" not in name:
            keep[name] = value
    family = "bert-like" if objective == "masked" else "gpt-like"
    return TensorArchive(keep, family, {"objective": objective, "seed": str(seed)})


def pretrain_model(config, corpus, vocab, objective="masked", steps=1000, seed=0, schedule=None, log_every=10):
    """Train a toy encoder-only (masked) or decoder-only (causal) model."""
    if objective not in ("masked", "causal"):
        raise ConfigError(f"objective must be masked or causal, got {objective!r}")
    if config.input_vocab_size != len(vocab) or config.output_vocab_size != len(vocab):
        raise ConfigError("pre-training config vocabulary sizes must match the vocabulary")
    config = config.replace(share_embeddings=True, share_encoder_decoder=False,
                            decoder_only=objective == "causal", tie_output_to_embedding=True)
    schedule = schedule or TrainSchedule(hidden_size=config.hidden_size, total_steps=steps)
    seqs = _encode_corpus(corpus, vocab, config.max_positions)
    model = Seq2SeqModel(config, seed=seed)
    params = {n: t for n, t in model.unique_params().items()
              if objective == "causal" or not n.startswith("decoder/")}
    optimizer = Adam(params)
    data_rng = np.random.default_rng([seed, 0])
    dropout_rng = np.random.default_rng([seed, 1])
    mask_rng = np.random.default_rng([seed, 2])
    stream = batches(seqs, schedule.batch_size, data_rng)
    curve = []
    for step in range(1, steps + 1):
        ids, real = pad(next(stream), vocab.pad_id)
        lr = learning_rate(schedule, step)
        optimizer.zero_grad()
        try:
            if objective == "masked":
                masked, chosen = mask_tokens(ids, real, vocab, mask_rng)
                memory = model.encoder_forward(masked, real, dropout_rng)
                loss = ad.cross_entropy(model.mlm_logits(memory), ids, chosen)
            else:
                logits = model.decoder_forward(ids[:, :-1], None, None, dropout_rng)
                loss = ad.cross_entropy(logits, ids[:, 1:], real[:, 1:])
            ad.backward(loss)
            optimizer.step(lr)
        except ad.NumericalError as exc:
            raise TrainingError(str(exc), step=step) from None
        if step % log_every == 0 or step == 1 or step == steps:
            curve.append((step, float(loss.data), lr))
    return PretrainResult(model, curve, _export(model, objective, seed))


def toy_pretrain(config, corpus, vocab, objective="masked", steps=1000, seed=0, schedule=None):
    """Pre-train on ``corpus`` and return a warm-start archive."""
    return pretrain_model(config, corpus, vocab, objective, steps, seed, schedule).archive


def masked_token_accuracy(model, corpus, vocab, seed=0, max_len=512):
    """Fraction of masked positions whose argmax prediction is the original token."""
    seqs = _encode_corpus(corpus, vocab, min(max_len, model.config.max_positions))
    rng = np.random.default_rng([seed, 3])
    ids, real = pad(seqs, vocab.pad_id)
    masked, chosen = mask_tokens(ids, real, vocab, rng)
    with ad.no_grad():
        logits = model.mlm_logits(model.encoder_forward(masked, real)).data
    predicted = logits.argmax(axis=-1)
    return float((predicted[chosen] == ids[chosen]).mean())


def causal_perplexity(model, corpus, vocab, max_len=512):
    seqs = _encode_corpus(corpus, vocab, min(max_len, model.config.max_positions))
    ids, real = pad(seqs, vocab.pad_id)
    with ad.no_grad():
        logits = model.decoder_forward(ids[:, :-1])
        loss = ad.cross_entropy(logits, ids[:, 1:], real[:, 1:])
    return float(np.exp(loss.data))


def pretrain_config(config):
    """The encoder-only or decoder-only config a given model config pre-trains with."""
    return ModelConfig(config.num_layers, config.hidden_size, config.filter_size, config.num_heads,
                       config.input_vocab_size, config.input_vocab_size, config.max_positions,
                       dropout=config.dropout, init_std=config.init_std)
