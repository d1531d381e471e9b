"""Shared builders for scheme and training tests."""

import numpy as np

from warmseq.checkpoint import TensorArchive
from warmseq.model import Seq2SeqModel

SIZES = {"bert": 11, "gpt": 13}


def source_archive(config, source, seed=0):
    """An encoder-only (bert/roberta) or decoder-only (gpt) archive of matching shapes."""
    vocab = SIZES["bert" if source == "bert" else "gpt"]
    decoder_only = source == "gpt"
    model = Seq2SeqModel(config.replace(input_vocab_size=vocab, output_vocab_size=vocab, share_embeddings=True,
                                        share_encoder_decoder=False, decoder_only=decoder_only), seed=seed + 100)
    stack = "decoder/" if decoder_only else "encoder/"
    keep = {n: v for n, v in model.state_dict().items()
            if n.startswith("embeddings/") or (n.startswith(stack) and "/cross/" not in n)}
    return TensorArchive(keep, "gpt-like" if decoder_only else "bert-like", {})


def archives_for(scheme, config):
    return {side: source_archive(config, source) for side, source in scheme.sources().items()}


def assert_partition(model, report, predicted):
    assert report.total == model.num_params() == predicted.total
    assert report.warm_started_count == predicted.warm_started
    assert report.random_count == predicted.random
    return True
