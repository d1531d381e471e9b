"""Dataset files and batching.

Dataset files are UTF-8 TSV, one ``source<TAB>target`` example per line.
Leading lines starting with ``#!`` are header comments.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .model import Batch
from .tokenizer import tokenize


def read_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#!"):
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise FormatError(f"{path}:{number}: expected source<TAB>target")
            pairs.append((fields[0], fields[1]))
    return pairs


def write_pairs(path, pairs, header=None):
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(header + "\n")
        for src, tgt in pairs:
            handle.write(f"{src}\t{tgt}\n")


def frame(ids, vocab, max_len):
    """``[BOS] ids [EOS]``, truncating the middle part to fit ``max_len``."""
    body = list(ids)[:max(0, max_len - 2)]
    return [vocab.bos_id, *body, vocab.eos_id]


def encode_pairs(pairs, input_vocab, output_vocab, max_source_length=128, max_target_length=128):
    return [(frame(tokenize(src, input_vocab), input_vocab, max_source_length),
             frame(tokenize(tgt, output_vocab), output_vocab, max_target_length))
            for src, tgt in pairs]


def pad(seqs, pad_id):
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def collate(examples, src_pad=0, tgt_pad=0):
    src_ids, src_mask = pad([e[0] for e in examples], src_pad)
    tgt_ids, tgt_mask = pad([e[1] for e in examples], tgt_pad)
    return Batch(src_ids, src_mask, tgt_ids, tgt_mask)
