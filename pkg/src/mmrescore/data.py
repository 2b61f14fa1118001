"""Vocabulary, tokenization, and the on-disk corpus formats.

Three file formats live here: MATF binary feature matrices, JSON-Lines n-best
lists, and plain-text vocab/blocklist files. All readers validate eagerly and
raise DataError so the CLI can map bad inputs to a distinct exit code.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_MATF_MAGIC = b"MATF"
_NORM_RE = re.compile(r"[^a-z0-9' ]+")


class DataError(ValueError):
    """Malformed or missing input data (CLI exit code 2)."""


def normalize_text(text: str) -> str:
    """Lowercase, drop punctuation except apostrophes, collapse whitespace."""
    return " ".join(_NORM_RE.sub(" ", text.lower()).split())


class Vocab:
    """Token inventory with the five reserved symbols pinned to ids 0-4."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:5]) != RESERVED_TOKENS:
            raise DataError(f"vocab must start with reserved tokens {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocab file: {exc}") from exc
        if len(lines) < 5:
            raise DataError("vocab file too short for reserved tokens")
        return cls(lines)


def build_vocab(texts: list[str], min_count: int = 1) -> Vocab:
    """Vocab from whitespace-split lowercased words with frequency >= min_count,
    ordered by (frequency desc, lexicographic)."""
    if not texts:
        raise DataError("cannot build a vocabulary from an empty text list")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(w for w in text.lower().split() if w not in RESERVED_TOKENS)
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocab(list(RESERVED_TOKENS) + kept)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercased whitespace split; OOV words map to UNK. No CLS/SEP here —
    the encoder assembles those."""
    return [vocab.id_of(w) for w in text.lower().split()]


def detokenize(ids: list[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in ids)


# ---------------------------------------------------------------------------
# audio feature matrices (MATF)
# ---------------------------------------------------------------------------

@dataclass
class AudioFeatures:
    """Acoustic frame sequence as a (frames, dims) real matrix."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"features must be a non-empty 2-D matrix, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DataError("features contain non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


def write_features(path: str | Path, features: AudioFeatures) -> None:
    """MATF: magic, u32-LE rows, u32-LE cols, then row-major f32-LE payload."""
    r, d = features.frames, features.dims
    payload = features.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_MATF_MAGIC)
        fh.write(struct.pack("<II", r, d))
        fh.write(payload)


def read_features(path: str | Path) -> AudioFeatures:
    """Load a MATF file, promoting the stored single-precision to double."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if raw[:4] != _MATF_MAGIC:
        raise DataError(f"not a MATF file: {path}")
    if len(raw) < 12:
        raise DataError(f"corrupt feature file (truncated header): {path}")
    r, d = struct.unpack("<II", raw[4:12])
    if len(raw) - 12 != 4 * r * d:
        raise DataError(f"corrupt feature file (payload size mismatch): {path}")
    values = np.frombuffer(raw, dtype="<f4", offset=12).reshape(r, d).astype(np.float64)
    return AudioFeatures(values)


# ---------------------------------------------------------------------------
# n-best lists
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    text: str
    first_pass_score: float
    original_rank: int


@dataclass
class NBestEntry:
    utterance_id: str
    reference: str
    features_path: str
    hypotheses: list[Hypothesis] = field(default_factory=list)


def _parse_entry(obj: dict, lineno: int) -> NBestEntry:
    for key in ("utterance_id", "reference", "features_path", "hypotheses"):
        if key not in obj:
            raise DataError(f"n-best line {lineno}: missing field '{key}'")
    raw_hyps = obj["hypotheses"]
    if not isinstance(raw_hyps, list) or not raw_hyps:
        raise DataError(f"n-best line {lineno}: empty hypotheses")
    # Duplicate texts merge into the first occurrence, keeping the best
    # first-pass score (their second-pass scores would be identical anyway).
    merged: dict[str, float] = {}
    for h in raw_hyps:
        if not isinstance(h, dict) or "text" not in h or "first_pass_score" not in h:
            raise DataError(f"n-best line {lineno}: hypothesis needs text and first_pass_score")
        score = float(h["first_pass_score"])
        if not math.isfinite(score):
            raise DataError(f"n-best line {lineno}: non-finite first_pass_score")
        text = str(h["text"])
        if text in merged:
            merged[text] = max(merged[text], score)
        else:
            merged[text] = score
    hyps = [
        Hypothesis(text=t, first_pass_score=s, original_rank=i)
        for i, (t, s) in enumerate(merged.items())
    ]
    return NBestEntry(
        utterance_id=str(obj["utterance_id"]),
        reference=str(obj["reference"]),
        features_path=str(obj["features_path"]),
        hypotheses=hyps,
    )


def read_nbest(path: str | Path) -> list[NBestEntry]:
    """JSON Lines, one entry per line; array order defines original_rank."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read n-best file {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"n-best line {lineno}: invalid JSON ({exc})") from exc
        entries.append(_parse_entry(obj, lineno))
    return entries


def write_nbest(path: str | Path, entries: list[NBestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            obj = {
                "utterance_id": e.utterance_id,
                "reference": e.reference,
                "features_path": e.features_path,
                "hypotheses": [
                    {"text": h.text, "first_pass_score": h.first_pass_score}
                    for h in e.hypotheses
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def read_blocklist(path: str | Path) -> set[str]:
    """Function-word blocklist: one word per line."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read blocklist {path}: {exc}") from exc
    return {line.strip().lower() for line in lines if line.strip()}


# ---------------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------------

@dataclass
class TrainPair:
    utterance_id: str
    text: str
    features_path: str


def read_train_pairs(path: str | Path) -> list[TrainPair]:
    """JSON Lines of {utterance_id, text, features_path}."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read training file {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"train line {lineno}: invalid JSON ({exc})") from exc
        for key in ("utterance_id", "text", "features_path"):
            if key not in obj:
                raise DataError(f"train line {lineno}: missing field '{key}'")
        pairs.append(TrainPair(str(obj["utterance_id"]), str(obj["text"]), str(obj["features_path"])))
    return pairs


def write_train_pairs(path: str | Path, pairs: list[TrainPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({
                "utterance_id": p.utterance_id,
                "text": p.text,
                "features_path": p.features_path,
            }) + "\n")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
