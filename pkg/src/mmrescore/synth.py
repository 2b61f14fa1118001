"""Deterministic synthetic corpus generator.

Every word carries a fixed random prototype vector; an utterance's audio is
the per-word repetition of its prototype plus Gaussian noise, so the acoustics
genuinely disambiguate word identity. Texts are drawn from a seeded first-order
Markov chain over the word inventory, which gives hypotheses a weak lexical
plausibility signal on top of the strong acoustic one. N-best hypotheses are
built by swapping members of confusable word pairs: textually plausible,
acoustically wrong. First-pass scores are noisy enough that the top-1 is
correct only about half the time, leaving headroom for rescoring.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AudioFeatures,
    DataError,
    Hypothesis,
    NBestEntry,
    RESERVED_TOKENS,
    TrainPair,
    Vocab,
    write_features,
    write_nbest,
    write_train_pairs,
)

_SYLLABLES = ("ba", "de", "ki", "lo", "mu", "na", "po", "ra", "su", "ta")
_FUNCTION_WORDS = ("the", "a", "to", "of", "and", "in", "on", "at", "is", "it")


@dataclass
class SynthConfig:
    content_words: int = 50
    function_words: int = 10
    confusable_pairs: int = 10
    min_len: int = 3
    max_len: int = 8
    frames_per_token: int = 8
    feature_dims: int = 16
    noise_sigma: float = 0.1
    train_count: int = 2000
    dev_count: int = 200
    test_count: int = 200
    nbest_depth: int = 5
    # Noise on simulated first-pass scores, sized so the first-pass top-1 is
    # correct for only about half the entries (leaves rescoring headroom).
    score_noise_sigma: float = 1.1
    # Dev/test utterances must contain this many confusable-word occurrences,
    # so entries carry enough competing hypotheses to fill the n-best depth.
    min_confusable: int = 3
    # Markov text structure: each word prefers a small next-word set.
    preferred_next: int = 6
    preferred_mass: float = 0.45
    # Optional explicit confusable pairs (word, word); validated against the
    # inventory. None means pairs are drawn from the content words.
    word_pairs: list[tuple[str, str]] | None = None


@dataclass
class CorpusLayout:
    """Where the generated corpus lives, plus in-memory extras for checks."""

    out_dir: Path
    train_file: Path
    dev_file: Path
    test_file: Path
    vocab_file: Path
    blocklist_file: Path
    words: list[str] = field(default_factory=list)
    prototypes: np.ndarray | None = None
    pairs: list[tuple[str, str]] = field(default_factory=list)


def _word_inventory(cfg: SynthConfig) -> tuple[list[str], list[str]]:
    if cfg.content_words > len(_SYLLABLES) ** 2:
        raise DataError(f"at most {len(_SYLLABLES) ** 2} content words supported")
    if cfg.function_words > len(_FUNCTION_WORDS):
        raise DataError(f"at most {len(_FUNCTION_WORDS)} function words supported")
    content = [
        _SYLLABLES[i // len(_SYLLABLES)] + _SYLLABLES[i % len(_SYLLABLES)]
        for i in range(cfg.content_words)
    ]
    return content, list(_FUNCTION_WORDS[: cfg.function_words])


def _prototypes(rng: np.random.Generator, n_words: int, dims: int) -> np.ndarray:
    """Uniform[-1, 1] prototypes, redrawn until pairwise distances >= 1."""
    protos = rng.uniform(-1.0, 1.0, size=(n_words, dims))
    for _ in range(100):
        dists = np.linalg.norm(protos[:, None, :] - protos[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        bad = np.unique(np.where(dists < 1.0)[0])
        if bad.size == 0:
            return protos
        protos[bad] = rng.uniform(-1.0, 1.0, size=(bad.size, dims))
    raise DataError("could not separate word prototypes")


def _transition_matrix(rng: np.random.Generator, n_words: int, cfg: SynthConfig) -> np.ndarray:
    k = min(cfg.preferred_next, n_words - 1)
    probs = np.empty((n_words, n_words))
    base = (1.0 - cfg.preferred_mass) / (n_words - k)
    for w in range(n_words):
        candidates = np.delete(np.arange(n_words), w)
        preferred = rng.choice(candidates, size=k, replace=False)
        probs[w] = base
        probs[w, preferred] = cfg.preferred_mass / k
        probs[w, w] = 0.0
        probs[w] /= probs[w].sum()
    return probs


def _sample_utterance(rng: np.random.Generator, trans: np.ndarray, cfg: SynthConfig) -> list[int]:
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    seq = [int(rng.integers(len(trans)))]
    for _ in range(length - 1):
        seq.append(int(rng.choice(len(trans), p=trans[seq[-1]])))
    return seq


def _swap_variants(words: list[str], pair_of: dict[str, str], depth: int) -> list[tuple[list[str], int]]:
    """Hypothesis texts from flipping confusable occurrences, smallest flips
    first; each variant carries its substitution count."""
    slots = [i for i, w in enumerate(words) if w in pair_of]
    variants: list[tuple[list[str], int]] = []
    seen = {" ".join(words)}
    for size in range(1, len(slots) + 1):
        for combo in itertools.combinations(slots, size):
            alt = list(words)
            for i in combo:
                alt[i] = pair_of[alt[i]]
            key = " ".join(alt)
            if key in seen:
                continue
            seen.add(key)
            variants.append((alt, size))
            if len(variants) >= depth - 1:
                return variants
    return variants


def _render_audio(
    rng: np.random.Generator,
    word_ids: list[int],
    protos: np.ndarray,
    cfg: SynthConfig,
) -> AudioFeatures:
    clean = np.repeat(protos[word_ids], cfg.frames_per_token, axis=0)
    noise = rng.normal(0.0, cfg.noise_sigma, size=clean.shape)
    return AudioFeatures(clean + noise)


def generate(cfg: SynthConfig, seed: int, out_dir: str | Path) -> CorpusLayout:
    """Write train pairs, dev/test n-best files, vocab and blocklist.

    Fully deterministic given (cfg, seed): the same inputs produce
    byte-identical files.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    content, function = _word_inventory(cfg)
    words = content + function
    index = {w: i for i, w in enumerate(words)}

    if cfg.word_pairs is not None:
        for a, b in cfg.word_pairs:
            if a not in index or b not in index:
                raise DataError(f"confusable pair ({a}, {b}) references unknown words")
        pairs = [tuple(p) for p in cfg.word_pairs]
    else:
        chosen = rng.choice(len(content), size=2 * cfg.confusable_pairs, replace=False)
        pairs = [(content[chosen[2 * j]], content[chosen[2 * j + 1]]) for j in range(cfg.confusable_pairs)]
    pair_of: dict[str, str] = {}
    for a, b in pairs:
        pair_of[a] = b
        pair_of[b] = a

    protos = _prototypes(rng, len(words), cfg.feature_dims)
    trans = _transition_matrix(rng, len(words), cfg)

    vocab = Vocab(list(RESERVED_TOKENS) + sorted(words))
    vocab.save(out / "vocab.txt")
    (out / "blocklist.txt").write_text("\n".join(function) + "\n", encoding="utf-8")

    train_pairs: list[TrainPair] = []
    for i in range(cfg.train_count):
        ids = _sample_utterance(rng, trans, cfg)
        text = " ".join(words[j] for j in ids)
        rel = f"features/train_{i:05d}.matf"
        write_features(out / rel, _render_audio(rng, ids, protos, cfg))
        train_pairs.append(TrainPair(f"train_{i:05d}", text, rel))
    write_train_pairs(out / "train.jsonl", train_pairs)

    def make_split(name: str, count: int) -> Path:
        entries = []
        for i in range(count):
            for _ in range(1000):
                ids = _sample_utterance(rng, trans, cfg)
                utt_words = [words[j] for j in ids]
                if sum(w in pair_of for w in utt_words) >= cfg.min_confusable:
                    break
            else:
                raise DataError("could not sample an utterance with confusable words")
            uid = f"{name}_{i:05d}"
            rel = f"features/{uid}.matf"
            write_features(out / rel, _render_audio(rng, ids, protos, cfg))
            reference = " ".join(utt_words)
            choices = [(utt_words, 0)] + _swap_variants(utt_words, pair_of, cfg.nbest_depth)
            scored = [
                (" ".join(w), -float(errs) + rng.normal(0.0, cfg.score_noise_sigma))
                for w, errs in choices
            ]
            scored.sort(key=lambda ts: -ts[1])
            hyps = [
                Hypothesis(text=t, first_pass_score=s, original_rank=r)
                for r, (t, s) in enumerate(scored)
            ]
            entries.append(NBestEntry(uid, reference, rel, hyps))
        path = out / f"{name}.jsonl"
        write_nbest(path, entries)
        return path

    dev_file = make_split("dev", cfg.dev_count)
    test_file = make_split("test", cfg.test_count)

    return CorpusLayout(
        out_dir=out,
        train_file=out / "train.jsonl",
        dev_file=dev_file,
        test_file=test_file,
        vocab_file=out / "vocab.txt",
        blocklist_file=out / "blocklist.txt",
        words=words,
        prototypes=protos,
        pairs=pairs,
    )
