"""``warmseq`` command-line entry point.

Usage::

    warmseq {pretrain|train|predict|evaluate|convert|count-params|generate-data}
            --config <path> [--seed N] [--out <dir>]

Configs are flat ``section.key=value`` files. Relative paths inside a
config resolve against the config file's directory; ``{out}`` in a path
stands for the output directory, so a pipeline can be redirected with
``--out``. Every output file
starts with a ``#!`` header carrying the config hash and seed; archives
carry the same pair in their metadata. ``WARMSEQ_THREADS`` caps the
BLAS thread pool.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import synthetic
from .checkpoint import (MappingRules, convert_foreign, embeddings_only, load_archive, model_archive,
                         parse_layer_list, save_archive, select_layer_subset)
from .config import ModelConfig, load_flat_config
from .data import encode_pairs, read_pairs
from .decode import DecodeParams, beam_decode
from .errors import ConfigError, FormatError, WarmseqError
from .metrics import EvalExample, evaluate
from .model import Seq2SeqModel, count_params
from .schemes import SCHEMES, build_model, get_scheme
from .tokenizer import detokenize, load_vocab, tokenize
from .training import FreezeSpec, TrainSchedule, pretrain_model, subsample, train, write_curve

BASE_COUNT_CONFIG = dict(num_layers=12, hidden_size=768, filter_size=3072, num_heads=12,
                         input_vocab_size=30522, output_vocab_size=30522, max_positions=512)


class Experiment:
    """A parsed config plus the seed, output directory and header line."""

    def __init__(self, path, seed=None, out=None):
        self.path = Path(path)
        self.values = load_flat_config(path)
        self.root = self.path.parent
        self.seed = seed if seed is not None else self.values.get_int("seed", 0)
        # --out is relative to the working directory, output.dir to the config
        # absolute, so paths derived from it are never re-anchored
        self.out = (Path(out) if out else self.resolve(self.values.get("output.dir", "out"))).absolute()
        self.header = f"#! config_hash={self.values.digest()} seed={self.seed}"

    def resolve(self, raw):
        if "{out}" in raw:
            raw = raw.replace("{out}", str(self.out))
        path = Path(raw)
        return path if path.is_absolute() else self.root / path

    def input_path(self, key, default=None):
        raw = self.values.get(key, default)
        if raw is None:
            raise ConfigError(f"missing required key {key!r}")
        path = self.resolve(raw)
        if not path.exists():
            raise ConfigError(f"{key}: no such file {path}", self.values.lines.get(key))
        return path

    def output(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def metadata(self, **extra):
        return {"config_hash": self.values.digest(), "seed": str(self.seed), **extra}

    def model_config(self, vocab_sizes=None):
        values = dict(self.values)
        if vocab_sizes is not None:
            values.setdefault("model.input_vocab", str(vocab_sizes[0]))
            values.setdefault("model.output_vocab", str(vocab_sizes[1]))
        try:
            return ModelConfig.from_flat(values)
        except ConfigError as exc:
            raise ConfigError(f"{self.path}: {exc}") from None

    def schedule(self, hidden_size, prefix="train."):
        v = self.values
        return TrainSchedule(base_rate=v.get_float(prefix + "base_rate", 0.05),
                             warmup_steps=v.get_int(prefix + "warmup_steps", 400),
                             hidden_size=hidden_size,
                             total_steps=v.get_int(prefix + "total_steps", 2000),
                             batch_size=v.get_int(prefix + "batch_size", 32))

    def decode_params(self, vocab):
        v = self.values
        return DecodeParams(vocab.bos_id, vocab.eos_id,
                            beam_size=v.get_int("decode.beam_size", 4),
                            alpha=v.get_float("decode.alpha", 0.6),
                            max_output_length=v.get_int("decode.max_output_length", 64))


def _vocabs(exp):
    source = load_vocab(exp.input_path("vocab.input"))
    target = load_vocab(exp.input_path("vocab.output")) if "vocab.output" in exp.values else source
    return source, target


def _read_lines(path):
    with open(path, encoding="utf-8") as handle:
        return [line.rstrip("\n") for line in handle if line.strip() and not line.startswith("#!")]


def cmd_pretrain(exp):
    vocab = load_vocab(exp.input_path("vocab.input"))
    config = exp.model_config((len(vocab), len(vocab)))
    corpus = _read_lines(exp.input_path("pretrain.corpus"))
    objective = exp.values.get_str("pretrain.objective", "masked")
    schedule = exp.schedule(config.hidden_size, "pretrain.")
    result = pretrain_model(config, corpus, vocab, objective, schedule.total_steps, exp.seed, schedule,
                            exp.values.get_int("pretrain.log_every", 10))
    archive = result.archive
    archive.metadata.update(exp.metadata(objective=objective))
    target = exp.output("pretrain.wsck")
    save_archive(archive, target)
    write_curve(exp.output("pretrain_curve.csv"), result.curve, exp.header)
    return [target]


def _archives(exp):
    out = {}
    for side in ("encoder", "decoder"):
        key = f"archive.{side}"
        if key in exp.values:
            out[side] = load_archive(exp.input_path(key))
    return out


def _scheme(exp):
    v = exp.values
    scheme = get_scheme(v.get_str("scheme.name", "RND2RND"))
    subset = v.get("scheme.layer_subset")
    return scheme.with_modifiers(embeddings_only=v.get_bool("scheme.embeddings_only", False),
                                 layers_only=v.get_bool("scheme.layers_only", False),
                                 layer_subset=parse_layer_list(subset) if subset else None)


def _encoded(exp, key, source_vocab, target_vocab):
    pairs = read_pairs(exp.input_path(key))
    return encode_pairs(pairs, source_vocab, target_vocab,
                        exp.values.get_int("data.max_source_length", 128),
                        exp.values.get_int("data.max_target_length", 128))


def cmd_train(exp):
    source_vocab, target_vocab = _vocabs(exp)
    config = exp.model_config((len(source_vocab), len(target_vocab)))
    scheme = _scheme(exp)
    model, report = build_model(config, scheme, _archives(exp), seed=exp.seed)
    dataset = _encoded(exp, "data.train", source_vocab, target_vocab)
    fraction = exp.values.get_float("data.fraction", 1.0)
    if fraction < 1.0:
        dataset = subsample(dataset, fraction, exp.seed)
    schedule = exp.schedule(config.hidden_size)
    freeze = None
    if "train.unfreeze_at_step" in exp.values:
        freeze = FreezeSpec.from_report(report, exp.values.get_int("train.unfreeze_at_step"))
    result = train(model, dataset, schedule, freeze=freeze, seed=exp.seed,
                   log_every=exp.values.get_int("train.log_every", 10),
                   src_pad=source_vocab.pad_id, tgt_pad=target_vocab.pad_id)
    flat = {k: v for k, v in model.config.to_flat().items()}
    archive = model_archive(model, "native", exp.metadata(scheme=scheme.name, **flat))
    target = exp.output("model.wsck")
    save_archive(archive, target)
    write_curve(exp.output("loss.csv"), result.curve, exp.header)
    exp.output("init_report.txt").write_text(f"{exp.header}\nscheme={scheme.name}\n{report.summary()}\n",
                                             encoding="utf-8")
    return [target]


def load_trained(path):
    """Rebuild a model from an archive written by ``train``."""
    archive = load_archive(path)
    if archive.family != "native" or "model.hidden_size" not in archive.metadata:
        raise FormatError(f"{path} is not a trained-model archive")
    config = ModelConfig.from_flat(archive.metadata)
    model = Seq2SeqModel(config)
    model.load_state_dict(archive.tensors)
    return model


def cmd_predict(exp):
    source_vocab, target_vocab = _vocabs(exp)
    model = load_trained(exp.input_path("predict.model", str(exp.out / "model.wsck")))
    pairs = read_pairs(exp.input_path("data.test"))
    params = exp.decode_params(target_vocab)
    max_src = exp.values.get_int("data.max_source_length", 128)
    target = exp.output("predictions.tsv")
    with open(target, "w", encoding="utf-8") as handle:
        handle.write(exp.header + "\n")
        for source, _ in pairs:
            ids = tokenize(source, source_vocab)[:max(0, max_src - 2)]
            framed = [source_vocab.bos_id, *ids, source_vocab.eos_id]
            best = beam_decode(model, framed, params)[0]
            handle.write(f"{source}\t{detokenize(best.ids, target_vocab)}\t{best.score:.6f}\n")
    return [target]


def cmd_evaluate(exp):
    predictions = exp.input_path("evaluate.predictions", str(exp.out / "predictions.tsv"))
    references = read_pairs(exp.input_path("data.test"))
    rows = _read_lines(predictions)
    if len(rows) != len(references):
        raise FormatError(f"{len(rows)} predictions for {len(references)} references")
    examples = []
    for row, (source, reference) in zip(rows, references):
        fields = row.split("\t")
        if len(fields) < 2:
            raise FormatError(f"{predictions}: expected source<TAB>prediction")
        examples.append(EvalExample(source, fields[1], tuple(reference.split("|||"))))
    names = tuple(exp.values.get_str("evaluate.metrics", "sari,bleu,rouge1,rouge2,rougeL,exact_match").split(","))
    reports = evaluate(examples, names, cased=exp.values.get_bool("evaluate.cased", False))
    summary = exp.output("metrics.txt")
    with open(summary, "w", encoding="utf-8") as handle:
        handle.write(exp.header + "\n")
        for report in reports:
            handle.write("\n".join(report.lines()) + "\n")
    per_example = exp.output("metrics.csv")
    with_rows = [r for r in reports if r.per_example]
    with open(per_example, "w", encoding="utf-8") as handle:
        handle.write(exp.header + "\n")
        handle.write(",".join(["index", *(r.metric for r in with_rows)]) + "\n")
        for i in range(len(examples)):
            handle.write(",".join([str(i), *(f"{r.per_example[i]:.6f}" for r in with_rows)]) + "\n")
    for report in reports:
        print(f"{report.metric}={report.score:.4f}")
    return [summary, per_example]


def cmd_convert(exp):
    v = exp.values
    archive = load_archive(exp.input_path("convert.input"))
    if "convert.rules" in v:
        rules = MappingRules.load(exp.input_path("convert.rules"))
        if v.get_bool("convert.inverse", False):
            rules = rules.inverse()
        archive = convert_foreign(archive, rules, v.get("convert.family"), v.get_bool("convert.strict", False))
    elif "convert.family" in v:
        archive = archive.with_tensors(archive.tensors)
        archive.family = v["convert.family"]
    if v.get_bool("convert.embeddings_only", False):
        archive = embeddings_only(archive)
    if "convert.layers" in v:
        archive = select_layer_subset(archive, parse_layer_list(v["convert.layers"]), v.get("convert.stack"))
    archive.metadata.update(exp.metadata())
    target = exp.output(v.get_str("convert.output", "converted.wsck"))
    save_archive(archive, target)
    return [target]


def cmd_count_params(exp):
    v = exp.values
    base = {**BASE_COUNT_CONFIG}
    for key, field in (("layers", "num_layers"), ("hidden", "hidden_size"), ("filter", "filter_size"),
                       ("heads", "num_heads"), ("max_positions", "max_positions")):
        if f"model.{key}" in v:
            base[field] = v.get_int(f"model.{key}")
    sizes = {"bert": v.get_int("count.vocab_bert", 30522), "gpt": v.get_int("count.vocab_gpt", 50257)}
    names = v.get_str("count.schemes", "all")
    chosen = list(SCHEMES) if names == "all" else [n.strip() for n in names.split(",")]
    lines = [exp.header, f"{'scheme':<13}{'total':>10}{'embed.':>10}{'init.':>10}{'random':>10}"]
    for name in chosen:
        scheme = get_scheme(name)
        config = scheme.configure(ModelConfig(**base), sizes)
        lines.append(count_params(config, scheme).row(scheme.name))
    text = "\n".join(lines) + "\n"
    target = exp.output("params.txt")
    target.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return [target]


def cmd_generate_data(exp):
    v = exp.values
    sizes = {k: v.get_int(f"generate.{k}", d) for k, d in (("train", 4000), ("dev", 200), ("test", 200))}
    synthetic.write_bundle(exp.out, exp.seed, sizes)
    return [exp.out]


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "convert": cmd_convert,
    "count-params": cmd_count_params,
    "generate-data": cmd_generate_data,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="warmseq", description="Warm-started seq2seq experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    return parser


def thread_cap():
    raw = os.environ.get("WARMSEQ_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"WARMSEQ_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("WARMSEQ_THREADS must be >= 1")
    return value


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=thread_cap()):
            exp = Experiment(args.config, args.seed, args.out)
            for path in COMMANDS[args.command](exp):
                print(f"wrote {path}", file=sys.stderr)
    except WarmseqError as exc:
        print(f"warmseq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
