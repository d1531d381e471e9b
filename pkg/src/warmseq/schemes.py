"""The ten encoder/decoder initialization setups, as data.

A scheme names where each side's weights come from (``"bert"``,
``"roberta"``, ``"gpt"`` or nothing), the sharing flags, and which
vocabulary family each side reads. Ablation modifiers (embeddings only,
layers only, a layer subset) compose with any scheme through
:meth:`InitScheme.with_modifiers`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .checkpoint import InitReport, embeddings_only, select_layer_subset, warm_start, without_word_embeddings
from .errors import SchemeError
from .model import Seq2SeqModel, count_params

SOURCE_FAMILY = {"bert": "bert-like", "roberta": "bert-like", "gpt": "gpt-like"}
SOURCE_VOCAB = {"bert": "bert", "roberta": "gpt", "gpt": "gpt"}


@dataclass(frozen=True)
class InitScheme:
    name: str
    encoder_source: str | None = None
    decoder_source: str | None = None
    share_encoder_decoder: bool = False
    decoder_only: bool = False
    share_embeddings: bool = True
    input_vocab: str = "bert"
    output_vocab: str = "bert"
    embeddings_only: bool = False
    layers_only: bool = False
    layer_subset: tuple | None = None

    def __post_init__(self):
        if self.decoder_only and self.encoder_source:
            raise SchemeError(f"{self.name}: decoder-only scheme cannot warm-start an encoder")
        if self.share_encoder_decoder and self.encoder_source != self.decoder_source:
            raise SchemeError(f"{self.name}: shared stacks need one checkpoint source")
        if (self.share_encoder_decoder or self.decoder_only or self.share_embeddings) and \
                self.input_vocab != self.output_vocab:
            raise SchemeError(f"{self.name}: sharing requires a single vocabulary")
        if self.embeddings_only and self.layers_only:
            raise SchemeError("embeddings_only and layers_only exclude each other")

    def with_modifiers(self, embeddings_only=False, layers_only=False, layer_subset=None):
        subset = tuple(layer_subset) if layer_subset is not None else None
        return dataclasses.replace(self, embeddings_only=embeddings_only, layers_only=layers_only,
                                   layer_subset=subset)

    def apply_flags(self, config):
        """``config`` with this scheme's sharing and architecture flags set."""
        return config.replace(share_encoder_decoder=self.share_encoder_decoder,
                              decoder_only=self.decoder_only,
                              share_embeddings=self.share_embeddings)

    def configure(self, config, vocab_sizes):
        """Set flags and pick vocabulary sizes from ``{"bert": n, "gpt": m}``."""
        try:
            sized = config.replace(input_vocab_size=vocab_sizes[self.input_vocab],
                                   output_vocab_size=vocab_sizes[self.output_vocab],
                                   share_encoder_decoder=False, decoder_only=False,
                                   share_embeddings=False)
        except KeyError as exc:
            raise SchemeError(f"{self.name}: no size for vocabulary {exc}") from None
        return self.apply_flags(sized)

    def sources(self):
        out = {}
        if self.encoder_source:
            out["encoder"] = self.encoder_source
        if self.decoder_source:
            out["decoder"] = self.decoder_source
        return out


SCHEMES = {s.name: s for s in (
    InitScheme("RND2RND"),
    InitScheme("BERT2RND", encoder_source="bert"),
    InitScheme("RND2BERT", decoder_source="bert"),
    InitScheme("BERT2BERT", encoder_source="bert", decoder_source="bert"),
    InitScheme("BERTSHARE", encoder_source="bert", decoder_source="bert", share_encoder_decoder=True),
    InitScheme("ROBERTASHARE", encoder_source="roberta", decoder_source="roberta",
               share_encoder_decoder=True, input_vocab="gpt", output_vocab="gpt"),
    InitScheme("GPT", decoder_source="gpt", decoder_only=True, input_vocab="gpt", output_vocab="gpt"),
    InitScheme("RND2GPT", decoder_source="gpt", input_vocab="gpt", output_vocab="gpt"),
    InitScheme("BERT2GPT", encoder_source="bert", decoder_source="gpt", share_embeddings=False,
               input_vocab="bert", output_vocab="gpt"),
    InitScheme("ROBERTA2GPT", encoder_source="roberta", decoder_source="gpt", share_embeddings=False,
               input_vocab="gpt", output_vocab="gpt"),
)}


def get_scheme(name):
    try:
        return SCHEMES[name.upper()]
    except KeyError:
        raise SchemeError(f"unknown scheme {name!r}; choose from {', '.join(SCHEMES)}") from None


def _prepare(archive, scheme, side):
    if scheme.embeddings_only:
        archive = embeddings_only(archive)
    elif scheme.layers_only:
        archive = without_word_embeddings(archive)
    if scheme.layer_subset is not None and not scheme.embeddings_only:
        archive = select_layer_subset(archive, list(scheme.layer_subset))
    return archive


def build_model(config, scheme, archives=None, seed=0, dtype=np.float32):
    """Assemble a model per ``scheme`` and warm-start it from ``archives``.

    ``archives`` maps ``"encoder"`` / ``"decoder"`` to a
    :class:`~warmseq.checkpoint.TensorArchive`; shared schemes may give
    either key. Every side the scheme warm-starts needs an archive of the
    matching family (``native`` archives are accepted anywhere).
    """
    archives = dict(archives or {})
    config = scheme.apply_flags(config)
    if scheme.share_encoder_decoder:
        shared = archives.get("encoder") or archives.get("decoder")
        if shared is not None:
            archives = {"encoder": shared, "decoder": shared}
    model = Seq2SeqModel(config, seed=seed, dtype=dtype)
    report = InitReport()
    for side, source in scheme.sources().items():
        archive = archives.get(side)
        if archive is None:
            raise SchemeError(f"{scheme.name}: no {source} archive given for the {side}")
        expected = SOURCE_FAMILY[source]
        if archive.family not in (expected, "native"):
            raise SchemeError(f"{scheme.name}: {side} needs a {expected} archive, got {archive.family}")
        if archive.family != "native" and not archive.layer_indices() and not scheme.embeddings_only:
            raise SchemeError(f"{scheme.name}: {side} archive holds no layers")
        warm_start(model, _prepare(archive, scheme, side), side, report)
    report.finalize(model)
    return model, report


def predicted_report(config, scheme):
    return count_params(scheme.apply_flags(config), scheme)
