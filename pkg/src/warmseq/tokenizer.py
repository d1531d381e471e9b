"""Vocabulary files and greedy longest-match subword tokenization.

Vocabulary files are UTF-8 with one token per line; the line index is the
token id. Lines starting with ``#!`` are header directives, currently only
``#! uncased`` / ``#! cased``. Word-internal pieces carry the ``##`` prefix.
"""

from __future__ import annotations

from pathlib import Path

from .errors import FormatError, ShapeError

PAD, UNK, BOS, EOS, MASK = "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"
RESERVED = (PAD, UNK, BOS, EOS)
CONTINUATION = "##"


class Vocabulary:
    def __init__(self, tokens, uncased=False):
        tokens = list(tokens)
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise FormatError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            index[tok] = i
        missing = [t for t in RESERVED if t not in index]
        if missing:
            raise FormatError(f"vocabulary lacks reserved tokens {missing}")
        self.tokens = tokens
        self.index = index
        self.uncased = uncased
        self._max_piece = max(len(t) for t in tokens)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.uncased == other.uncased

    def __hash__(self):
        return hash((tuple(self.tokens), self.uncased))

    def id_of(self, token):
        return self.index[token]

    def lookup(self, i):
        if not 0 <= i < len(self.tokens):
            raise ShapeError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[i]

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def mask_id(self):
        return self.index.get(MASK, self.unk_id)

    @property
    def special_ids(self):
        return {self.index[t] for t in (*RESERVED, MASK) if t in self.index}

    def save(self, path):
        header = "#! uncased\n" if self.uncased else "#! cased\n"
        Path(path).write_text(header + "".join(t + "\n" for t in self.tokens), encoding="utf-8")


def load_vocab(path):
    uncased = False
    tokens = []
    text = Path(path).read_text(encoding="utf-8")
    for line in text.splitlines():
        if line.startswith("#!"):
            directive = line[2:].strip().lower()
            if directive == "uncased":
                uncased = True
            elif directive == "cased":
                uncased = False
            else:
                raise FormatError(f"unknown vocabulary directive {line!r}")
            continue
        tokens.append(line)
    return Vocabulary(tokens, uncased=uncased)


def _split_word(word, vocab):
    pieces = []
    start = 0
    while start < len(word):
        end = min(len(word), start + vocab._max_piece)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.index:
                match = vocab.index[piece]
                break
            end -= 1
        if match is None:
            return [vocab.unk_id]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text, vocab):
    """Whitespace split, then greedy longest match inside each word."""
    if vocab.uncased:
        text = text.lower()
    ids = []
    for word in text.split():
        ids.extend(_split_word(word, vocab))
    return ids


def detokenize(ids, vocab):
    words = []
    for i in ids:
        tok = vocab.lookup(int(i))
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)
