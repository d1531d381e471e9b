"""Seeded generators for the bundled toy datasets.

* fusion-toy: two short sentences about the same person fused into one,
  with the repeated name replaced by its gendered pronoun and a connective
  chosen by the second sentence's discourse marker ("john eats apples . however , john hates tea ." ->
  "john eats apples , but he hates tea .").
* split-toy: the same pairs reversed.
* copy: random word sequences that map to themselves.

The pre-training corpus is unlabelled text from the same grammar in which
pronouns follow their antecedent names, so a masked-LM learns name gender
without ever seeing a fusion pair. Most names are rare in the labelled
data but well attested in the corpus.
"""

from __future__ import annotations

import os

import numpy as np

from .data import write_pairs
from .tokenizer import MASK, RESERVED, Vocabulary

MALE = tuple("""
john paul mark peter james david tom steve frank henry carl oscar louis victor simon ben
adam alan albert alex andrew arthur barry bill bruce chris colin dan dennis derek edgar
edward eric felix fred gary george gordon greg harry hugo ian ivan jack jake jason jeff
jim joe karl keith kevin larry leo liam luke martin matt max mike neil nick noah oliver
owen patrick philip ralph ray rick robert roger ryan sam scott sean ted tim tony walter
""".split())
FEMALE = tuple("""
mary anna lisa emma sarah kate julia grace helen nora alice clara diana irene laura ruth
amy angela beth betty carol chloe claire daisy donna doris ella ellen emily eva fiona
flora gina hannah holly iris jane jenny jessica joan judy karen lily linda lucy maria
megan molly nancy nina olivia paula penny rachel rita rosa rose sally sandra sophie susan
tina vera wendy zoe amber bella cathy dora edith gloria heidi ingrid janet kelly lena
""".split())
VERBS = ("eats", "likes", "buys", "sells", "paints", "finds", "hates", "wants", "cooks", "needs",
         "reads", "washes")
OBJECTS = ("apples", "tea", "books", "bread", "flowers", "cakes", "shoes", "maps", "coffee",
           "letters", "fish", "rice", "hats", "toys", "lamps", "chairs", "songs", "plums")


def invented_names(count, seed=0):
    """Pronounceable two-syllable names, distinct from every other toy word."""
    rng = np.random.default_rng([seed, 29])
    onsets, vowels, codas = "bdfgklmnprstvz", "aeiou", ("", "n", "l", "r", "s")
    taken = set(MALE + FEMALE + VERBS + OBJECTS)
    out = []
    while len(out) < count:
        name = "".join(onsets[rng.integers(len(onsets))] + vowels[rng.integers(len(vowels))] for _ in range(2))
        name += codas[rng.integers(len(codas))]
        if name not in taken:
            taken.add(name)
            out.append(name)
    return tuple(out)


# extra names make most genders rare in the labelled data but well attested
# in the unlabelled corpus
EXTRA_NAMES = invented_names(444)
MALE = MALE + EXTRA_NAMES[0::2]
FEMALE = FEMALE + EXTRA_NAMES[1::2]
# marker in the second sentence -> connective in the fused sentence
MARKERS = {None: "and", "however": "but", "so": "so", "meanwhile": "while"}
PRONOUN = {**{n: "he" for n in MALE}, **{n: "she" for n in FEMALE}}
NAMES = MALE + FEMALE


# every name has a habit, a (verb, object) pair it favours; distinct
# contexts keep names from collapsing onto one embedding during pre-training
HABIT = {name: (VERBS[i % len(VERBS)], OBJECTS[(i // len(VERBS) + 5 * (i % len(VERBS))) % len(OBJECTS)])
         for i, name in enumerate(NAMES)}
HABIT_RATE = 0.5
# fused pairs share their subject, so fusion needs the subject's gender
SAME_SUBJECT_RATE = 1.0


def _clause(rng, subject=None):
    subject = subject or NAMES[rng.integers(len(NAMES))]
    if rng.random() < HABIT_RATE:
        return (subject, *HABIT[subject])
    return subject, VERBS[rng.integers(len(VERBS))], OBJECTS[rng.integers(len(OBJECTS))]


def fusion_pair(rng):
    first = _clause(rng)
    same = rng.random() < SAME_SUBJECT_RATE
    second = _clause(rng, first[0] if same else None)
    markers = list(MARKERS)
    marker = markers[rng.integers(len(markers))]
    opener = f"{marker} , " if marker else ""
    source = f"{' '.join(first)} . {opener}{' '.join(second)} ."
    subject = PRONOUN[second[0]] if second[0] == first[0] else second[0]
    joint = MARKERS[marker]
    comma = "" if joint == "and" else " ,"
    target = f"{' '.join(first)}{comma} {joint} {subject} {second[1]} {second[2]} ."
    return source, target


def fusion_dataset(n, seed):
    rng = np.random.default_rng([seed, 11])
    return [fusion_pair(rng) for _ in range(n)]


def split_dataset(n, seed):
    return [(t, s) for s, t in fusion_dataset(n, seed)]


def copy_dataset(n, seed, min_len=3, max_len=8):
    rng = np.random.default_rng([seed, 13])
    words = NAMES + VERBS + OBJECTS
    out = []
    for _ in range(n):
        length = rng.integers(min_len, max_len + 1)
        text = " ".join(words[i] for i in rng.integers(len(words), size=length))
        out.append((text, text))
    return out


def _story_sentence(rng, first, second):
    kind = rng.integers(4)
    pronoun = PRONOUN[first[0]]
    if kind == 0:
        return f"{' '.join(first)} . later , {pronoun} {second[1]} {second[2]} ."
    if kind == 1:
        return f"{' '.join(first)} . later , {first[0]} {second[1]} {second[2]} ."
    if kind == 2:
        return f"{' '.join(first)} and {pronoun} {second[1]} {second[2]} ."
    return f"{' '.join(first)} . {second[0]} {second[1]} {first[2]} too ."


def pretrain_corpus(n, seed):
    """Unlabelled lines of one or two short stories each.

    Names and objects recur within a line, so a masked mention is often
    recoverable from its earlier occurrence; pronouns tie each name to its
    gender and habits give each name a distinctive context.
    """
    rng = np.random.default_rng([seed, 17])
    lines = []
    for _ in range(n):
        parts = [_story_sentence(rng, _clause(rng), _clause(rng)) for _ in range(1 + rng.integers(2))]
        lines.append(" ".join(parts))
    return lines


def toy_vocabulary():
    words = set(NAMES + VERBS + OBJECTS + tuple(PRONOUN.values()))
    words |= {m for m in MARKERS if m} | set(MARKERS.values()) | {".", ",", "later", "too"}
    return Vocabulary([*RESERVED, MASK, *sorted(words)], uncased=True)


def write_bundle(root, seed=0, sizes=None):
    """Write the three toy datasets, the vocabulary and the pre-training corpus."""
    sizes = {"train": 4000, "dev": 200, "test": 200, **(sizes or {})}
    header = f"#! generator=warmseq.synthetic seed={seed}"
    makers = {"fusion-toy": fusion_dataset, "split-toy": split_dataset, "copy": copy_dataset}
    for name, make in makers.items():
        folder = os.path.join(root, name)
        os.makedirs(folder, exist_ok=True)
        pairs = make(sum(sizes.values()), seed)
        start = 0
        for split in ("train", "dev", "test"):
            write_pairs(os.path.join(folder, f"{split}.tsv"), pairs[start:start + sizes[split]], header)
            start += sizes[split]
    toy_vocabulary().save(os.path.join(root, "vocab.txt"))
    with open(os.path.join(root, "pretrain.txt"), "w", encoding="utf-8") as handle:
        handle.write(header + "\n")
        handle.write("\n".join(pretrain_corpus(20000, seed)) + "\n")
