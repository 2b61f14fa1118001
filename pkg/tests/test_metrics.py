import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrescore import metrics as ME
from oracles import brute_force_alignment, enumerate_all_alignments

words = st.lists(st.sampled_from(["aa", "bb", "cc", "dd"]), min_size=0, max_size=7)


def test_wer_examples():
    w = ME.wer("turn on the light", "turn on the light")
    assert (w.substitutions, w.insertions, w.deletions, w.ref_words, w.rate) == (0, 0, 0, 4, 0.0)

    w = ME.wer("turn on the light", "turn off the light")
    assert (w.substitutions, w.insertions, w.deletions, w.ref_words, w.rate) == (1, 0, 0, 4, 0.25)

    w = ME.wer("a b", "a x b")
    assert (w.substitutions, w.insertions, w.deletions, w.ref_words, w.rate) == (0, 1, 0, 2, 0.5)


def test_wer_empty_cases():
    assert ME.wer("", "").rate == 0.0
    w = ME.wer("", "x y")
    assert (w.insertions, w.ref_words, w.rate) == (2, 0, 2.0)
    w = ME.wer("x y", "")
    assert (w.deletions, w.rate) == (2, 1.0)


def test_wer_prefers_substitutions():
    # "a b" vs "b a" admits (S=2) or (I=1, D=1); canonical is max substitutions.
    w = ME.wer("a b", "b a")
    assert (w.substitutions, w.insertions, w.deletions) == (2, 0, 0)


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_wer_symmetry_swaps_ins_del(ref, hyp):
    fwd = ME.align_words(ref, hyp)
    rev = ME.align_words(hyp, ref)
    assert fwd.substitutions == rev.substitutions
    assert fwd.insertions == rev.deletions
    assert fwd.deletions == rev.insertions
    assert fwd.errors == rev.errors


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_wer_matches_brute_force(ref, hyp):
    got = ME.align_words(ref, hyp)
    assert (got.substitutions, got.insertions, got.deletions) == \
        brute_force_alignment(tuple(ref), tuple(hyp))


def test_brute_force_oracle_agrees_with_full_enumeration():
    vocab = ("x", "y")
    seqs = [seq for n in range(4) for seq in itertools.product(vocab, repeat=n)]
    for ref in seqs:
        for hyp in seqs:
            paths = list(enumerate_all_alignments(ref, hyp))
            best = min(paths, key=lambda sid: (sum(sid), sid[1] + sid[2]))
            assert brute_force_alignment(ref, hyp) == best


def test_cwer_examples():
    block = {"the", "a"}
    assert ME.cwer("turn on the light", "turn on a light", block).rate == 0.0
    ref, hyp = "x the y", "x a z"
    assert ME.cwer(ref, hyp, set()).rate == ME.wer(ref, hyp).rate

    degenerate = ME.cwer("the a the", "a the", {"the", "a"})
    assert degenerate.rate == 0.0
    assert degenerate.ref_words == 0


@settings(max_examples=100, deadline=None)
@given(words, words)
def test_cwer_empty_blocklist_is_wer(ref, hyp):
    r, h = " ".join(ref), " ".join(hyp)
    assert ME.cwer(r, h, set()) == ME.wer(r, h)


def test_corpus_pooling():
    scored = [
        ("u1", "a b c d", "a b c x"),   # 1 error / 4 words
        ("u2", "p q r s t u", "p q r s t u"),  # 0 / 6
    ]
    report = ME.corpus_report(scored, set())
    assert report.wer == pytest.approx(0.10)
    assert report.ref_words == 10
    assert report.substitutions == 1
    assert len(report.per_utterance) == 2
    assert report.per_utterance[0]["rate"] == pytest.approx(0.25)


def test_report_serialization():
    report = ME.corpus_report([("u1", "a b", "a b")], set())
    assert "WER" in report.table()
    assert '"wer": 0.0' in report.to_json()
