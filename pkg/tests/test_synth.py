import hashlib
from pathlib import Path

import numpy as np
import pytest

from mmrescore import synth
from mmrescore.data import DataError, read_features, read_nbest, read_train_pairs

SMALL = synth.SynthConfig(train_count=30, dev_count=10, test_count=10)


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_same_seed_is_byte_identical(tmp_path):
    synth.generate(SMALL, seed=7, out_dir=tmp_path / "a")
    synth.generate(SMALL, seed=7, out_dir=tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    synth.generate(SMALL, seed=7, out_dir=tmp_path / "a")
    synth.generate(SMALL, seed=8, out_dir=tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return synth.generate(SMALL, seed=7, out_dir=out)


def test_frames_match_word_count(corpus):
    for pair in read_train_pairs(corpus.train_file)[:10]:
        feats = read_features(corpus.out_dir / pair.features_path)
        assert feats.frames == len(pair.text.split()) * SMALL.frames_per_token
        assert feats.dims == SMALL.feature_dims


def test_reference_always_present_and_scores_finite(corpus):
    for path in (corpus.dev_file, corpus.test_file):
        for entry in read_nbest(path):
            texts = [h.text for h in entry.hypotheses]
            assert entry.reference in texts
            assert 2 <= len(texts) <= SMALL.nbest_depth
            assert all(np.isfinite(h.first_pass_score) for h in entry.hypotheses)


def test_nearest_prototype_decoding_recovers_words(corpus):
    protos = corpus.prototypes
    index = {w: i for i, w in enumerate(corpus.words)}
    total = correct = 0
    for pair in read_train_pairs(corpus.train_file):
        feats = read_features(corpus.out_dir / pair.features_path)
        words = pair.text.split()
        per_tok = feats.values.reshape(len(words), SMALL.frames_per_token, -1).mean(axis=1)
        guesses = np.linalg.norm(per_tok[:, None, :] - protos[None], axis=-1).argmin(axis=1)
        total += len(words)
        correct += sum(int(g) == index[w] for g, w in zip(guesses, words))
    assert correct / total >= 0.99


def test_vocab_covers_all_words(corpus):
    from mmrescore.data import Vocab

    vocab = Vocab.load(corpus.vocab_file)
    for pair in read_train_pairs(corpus.train_file):
        assert all(w in vocab for w in pair.text.split())
    for entry in read_nbest(corpus.test_file):
        for h in entry.hypotheses:
            assert all(w in vocab for w in h.text.split())


def test_blocklist_holds_function_words(corpus):
    from mmrescore.data import read_blocklist

    block = read_blocklist(corpus.blocklist_file)
    assert len(block) == SMALL.function_words
    assert all(w not in block for a, b in corpus.pairs for w in (a, b))


def test_unknown_confusable_pair_rejected(tmp_path):
    cfg = synth.SynthConfig(train_count=1, dev_count=1, test_count=1,
                            word_pairs=[("nosuch", "word")])
    with pytest.raises(DataError, match="unknown words"):
        synth.generate(cfg, seed=1, out_dir=tmp_path)


def test_explicit_pairs_accepted(tmp_path):
    content, _ = synth._word_inventory(SMALL)
    cfg = synth.SynthConfig(train_count=5, dev_count=3, test_count=3,
                            word_pairs=[(content[0], content[1]), (content[2], content[3])])
    layout = synth.generate(cfg, seed=1, out_dir=tmp_path)
    assert layout.pairs == [(content[0], content[1]), (content[2], content[3])]
