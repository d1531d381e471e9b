import json
import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warmseq import metrics as m
from warmseq.errors import DegenerateBatchError, FormatError

import oracles

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def fixture_examples():
    return m.read_eval_file(FIXTURES / "metrics_fixture.tsv")


def ex(pred, refs, src=""):
    return m.EvalExample(src, pred, tuple(refs))


@pytest.mark.parametrize("cased", [True, False])
def test_fixture_matches_oracles_and_frozen(fixture_examples, cased):
    frozen = json.loads((FIXTURES / "metrics_expected.json").read_text())["cased" if cased else "uncased"]
    oracle = {"sari": oracles.sari(fixture_examples, cased),
              "bleu": oracles.bleu(fixture_examples, cased=cased),
              "rouge1": oracles.rouge(fixture_examples, "1", cased),
              "rouge2": oracles.rouge(fixture_examples, "2", cased),
              "rougeL": oracles.rouge(fixture_examples, "L", cased),
              "exact_match": oracles.exact(fixture_examples, cased)}
    for report in m.evaluate(fixture_examples, cased=cased):
        assert abs(report.score - oracle[report.metric]) <= 1e-9
        assert abs(report.score - frozen[report.metric]) <= 1e-9


def test_bleu_identity_is_100():
    examples = [ex("the cat sat on the mat", ["the cat sat on the mat"]), ex("a b c d e", ["a b c d e"])]
    assert m.bleu_corpus(examples).score == pytest.approx(100.0, abs=1e-12)


def test_bleu_clipped_unigram():
    report = m.bleu_corpus([ex("the the the", ["the cat"])], max_n=1)
    assert report.config["precisions"] == f"{1 / 3:.6f}"


def test_bleu_brevity_penalty():
    report = m.bleu_corpus([ex("a b", ["a b c d"])], max_n=1)
    assert report.score == pytest.approx(100 * math.exp(1 - 2), abs=1e-12)


def test_bleu_zero_length_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        m.bleu_corpus([ex("", ["a"])])


def test_rouge_hand_values():
    assert m.rouge_scores("the cat", "the cat sat", "1") == pytest.approx((1.0, 2 / 3, 0.8))
    assert m.rouge_scores("a b c d", "a x c y", "L") == pytest.approx((0.5, 0.5, 0.5))
    for variant in ("1", "2", "L"):
        assert m.rouge([ex("x y z", ["x y z"])], variant).score == 1.0
    assert m.rouge([ex("", ["x"])], "1").score == 0.0


def test_sari_components():
    assert m.sari_components(["a", "b"], ["a", "b"], [["a", "b"]], 1)[1] == 1.0
    # reference deletes "c"; prediction does the same
    assert m.sari_components(["a", "b", "c"], ["a", "b"], [["a", "b"]], 1)[2] == 1.0
    add, keep, _ = m.sari_components(["a", "b"], [], [["a", "c"]], 1)
    assert add == 0.0 and keep == 0.0


def test_exact_match_fraction():
    examples = [ex("a", ["a"]), ex("b", ["c"]), ex("d", ["e"]), ex("f", ["g"])]
    assert m.exact_match(examples).score == 0.25


def test_curly_quotes_normalised():
    assert m.exact_match([ex("he said “hi”", ['he said "hi"'])]).score == 1.0


def test_monotonicity():
    perfect = [ex("the cat sat on the mat", ["the cat sat on the mat"])]
    longer = [ex("the cat sat on the mat zebra", ["the cat sat on the mat"])]
    assert m.bleu_corpus(longer).score < m.bleu_corpus(perfect).score
    assert m.rouge_scores(longer[0].prediction, longer[0].references[0], "1")[0] < 1.0


def test_eval_file_errors(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("only\ttwo\n")
    with pytest.raises(FormatError):
        m.read_eval_file(bad)
    with pytest.raises(FormatError):
        m.EvalExample("s", "p", ())


sentence = st.lists(st.sampled_from("a b c d e".split()), max_size=7).map(" ".join)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(sentence, sentence, st.lists(sentence, min_size=1, max_size=3)), min_size=1, max_size=5))
def test_random_corpora_match_oracles(rows):
    examples = [m.EvalExample(s, p, tuple(r)) for s, p, r in rows]
    assert abs(m.sari(examples).score - oracles.sari(examples)) < 1e-9
    for variant in ("1", "2", "L"):
        assert abs(m.rouge(examples, variant).score - oracles.rouge(examples, variant)) < 1e-9
    if any(p for _, p, _ in rows):
        assert abs(m.bleu_corpus(examples).score - oracles.bleu(examples)) < 1e-9
    scores = [m.sari(examples).score, m.bleu_corpus(examples).score if any(p for _, p, _ in rows) else 0.0]
    assert all(0 <= s <= 100 for s in scores)
    reordered = list(reversed(examples))
    assert m.sari(reordered).score == pytest.approx(m.sari(examples).score, abs=1e-9)
