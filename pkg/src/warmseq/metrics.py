"""Text-generation metrics over whitespace tokens.

Text is normalised before tokenization: curly quotes become ASCII quotes
and, when a metric runs uncased, everything is lowercased. Noun compounds
are never split and ROUGE does no stemming.

Score ranges: SARI and BLEU in [0, 100]; ROUGE F1 and exact match in [0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DegenerateBatchError, FormatError

_QUOTES = str.maketrans({"“": '"', "”": '"', "„": '"', "‟": '"',
                         "‘": "'", "’": "'", "‚": "'", "‛": "'",
                         "«": '"', "»": '"'})


@dataclass(frozen=True)
class EvalExample:
    source: str
    prediction: str
    references: tuple

    def __post_init__(self):
        if not self.references:
            raise FormatError("an evaluation example needs at least one reference")


@dataclass
class MetricReport:
    metric: str
    score: float
    per_example: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def lines(self):
        out = [f"{self.metric}={self.score:.6f}"]
        out += [f"{self.metric}.{k}={v}" for k, v in self.config.items()]
        return out


def normalize(text, cased=True):
    text = text.translate(_QUOTES)
    return text if cased else text.lower()


def words(text, cased=True):
    return normalize(text, cased).split()


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _nonempty(examples):
    examples = list(examples)
    if not examples:
        raise DegenerateBatchError("no examples to score")
    return examples


# SARI -------------------------------------------------------------------------

def _ratio(numerator, denominator, other_empty):
    # empty/empty counts as perfect agreement; one-sided emptiness as zero
    if denominator == 0:
        return 1.0 if other_empty else 0.0
    return numerator / denominator


def _f1(true_pos, selected, relevant):
    precision = _ratio(true_pos, selected, relevant == 0)
    recall = _ratio(true_pos, relevant, selected == 0)
    if precision > 0 and recall > 0:
        return 2 * precision * recall / (precision + recall)
    return 0.0


def _total(counter):
    return sum(counter.values())


def sari_components(source, prediction, references, n):
    """(add F1, keep F1, delete precision) for one n-gram order."""
    src = ngrams(source, n)
    pred = ngrams(prediction, n)
    ref_sets = [ngrams(r, n) for r in references]
    nonempty = [r for r in ref_sets if r]
    # reference n-grams weighted by the share of references containing them
    weighted = Counter()
    for r in nonempty:
        weighted.update(r)
    if nonempty:
        weighted = Counter({g: c / len(nonempty) for g, c in weighted.items()})
    ref_any = Counter({g: 1 for g in weighted})

    added = pred - src
    add_tp = _total(added & ref_any)
    add = _f1(add_tp, _total(added), _total(ref_any - src))

    kept_pred = src & pred
    kept_ref = src & weighted
    keep = _f1(_total(kept_pred & kept_ref), _total(kept_pred), _total(kept_ref))

    deleted_pred = src - pred
    deleted_ref = src - weighted
    delete = _ratio(_total(deleted_pred & deleted_ref), _total(deleted_pred), _total(deleted_ref) == 0)
    return add, keep, delete


def sari_sentence(source, prediction, references, max_n=4, cased=True):
    src = words(source, cased)
    pred = words(prediction, cased)
    refs = [words(r, cased) for r in references]
    add = keep = delete = 0.0
    for n in range(1, max_n + 1):
        a, k, d = sari_components(src, pred, refs, n)
        add += a
        keep += k
        delete += d
    return 100.0 * (add + keep + delete) / (3 * max_n)


def sari(examples, max_n=4, cased=True):
    """Mean sentence SARI over the corpus."""
    examples = _nonempty(examples)
    scores = [sari_sentence(e.source, e.prediction, e.references, max_n, cased) for e in examples]
    return MetricReport("sari", sum(scores) / len(scores), scores, {"max_n": max_n, "cased": cased})


# BLEU -------------------------------------------------------------------------

def _closest_ref_length(candidate_len, ref_lengths):
    return min(ref_lengths, key=lambda r: (abs(r - candidate_len), r))


def bleu_corpus(examples, max_n=4, cased=True):
    """Corpus BLEU: clipped n-gram precisions pooled over the corpus, geometric
    mean, and one brevity penalty from the total lengths."""
    examples = _nonempty(examples)
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for e in examples:
        cand = words(e.prediction, cased)
        refs = [words(r, cased) for r in e.references]
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), [len(r) for r in refs])
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += _total(counts & max_ref)
            totals[n - 1] += _total(counts)
    if cand_len == 0:
        raise DegenerateBatchError("all predictions are empty")
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if min(precisions) == 0:
        score = 0.0
    else:
        log_mean = sum(math.log(p) for p in precisions) / max_n
        brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
        score = 100.0 * brevity * math.exp(log_mean)
    return MetricReport("bleu", score, [], {"max_n": max_n, "cased": cased,
                                             "precisions": " ".join(f"{p:.6f}" for p in precisions),
                                             "hyp_len": cand_len, "ref_len": ref_len})


# ROUGE ------------------------------------------------------------------------

def _prf(overlap, pred_total, ref_total):
    precision = overlap / pred_total if pred_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_scores(prediction, reference, variant, cased=True):
    """(precision, recall, F1) of one prediction against one reference."""
    pred = words(prediction, cased)
    ref = words(reference, cased)
    if variant in ("L", "l"):
        return _prf(lcs_length(pred, ref), len(pred), len(ref))
    n = int(variant)
    p, r = ngrams(pred, n), ngrams(ref, n)
    return _prf(_total(p & r), _total(p), _total(r))


def rouge(examples, variant="1", cased=True):
    """Mean per-example F1; with several references the best one counts."""
    examples = _nonempty(examples)
    variant = str(variant).upper()
    if variant not in ("1", "2", "L"):
        raise ValueError(f"ROUGE variant must be 1, 2 or L, got {variant}")
    scores = [max(rouge_scores(e.prediction, r, variant, cased)[2] for r in e.references)
              for e in examples]
    return MetricReport(f"rouge{variant}", sum(scores) / len(scores), scores, {"cased": cased})


# exact match --------------------------------------------------------------------

def exact_match(examples, cased=True):
    examples = _nonempty(examples)
    hits = []
    for e in examples:
        pred = " ".join(words(e.prediction, cased))
        hits.append(float(any(pred == " ".join(words(r, cased)) for r in e.references)))
    return MetricReport("exact_match", sum(hits) / len(hits), hits, {"cased": cased})


METRICS = {
    "sari": sari,
    "bleu": bleu_corpus,
    "rouge1": lambda ex, cased=True: rouge(ex, "1", cased),
    "rouge2": lambda ex, cased=True: rouge(ex, "2", cased),
    "rougeL": lambda ex, cased=True: rouge(ex, "L", cased),
    "exact_match": exact_match,
}


def evaluate(examples, names=("sari", "bleu", "rouge1", "rouge2", "rougeL", "exact_match"), cased=True):
    examples = _nonempty(examples)
    out = []
    for name in names:
        if name not in METRICS:
            raise ValueError(f"unknown metric {name!r}")
        out.append(METRICS[name](examples, cased=cased))
    return out


def read_eval_file(path):
    """TSV lines ``source<TAB>prediction<TAB>ref1|||ref2...``; ``#!`` lines are headers."""
    examples = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#!"):
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise FormatError(f"{path}:{number}: expected source, prediction and references")
            examples.append(EvalExample(fields[0], fields[1], tuple(fields[2].split("|||"))))
    return examples
