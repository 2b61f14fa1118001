"""Second-pass scoring of n-best hypotheses.

A hypothesis score is its pseudo-log-likelihood under the fused model: mask
each token in turn (audio and the remaining tokens visible) and sum the log
probabilities of the true tokens. The final score linearly interpolates the
first-pass confidence with the PLL, and entries are re-ranked by it. The
batched scorer stacks all masked copies of a hypothesis into one forward pass
and must agree with the naive one-copy-at-a-time loop to float precision.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    AudioFeatures,
    DataError,
    MASK,
    NBestEntry,
    normalize_text,
    read_features,
    tokenize,
)
from .metrics import EvalReport, corpus_report
from .model import (
    Model,
    acoustic_positions,
    adapt,
    assemble_tokens,
    encode_fused,
    forward_fused,
    fuse,
    mlm_logits,
    speech_encode,
    subsample,
)
from .tensor import Tensor


@dataclass
class RescoreConfig:
    interp_weight: float = 0.5  # weight on the PLL side, in [0, 1]
    base_dir: Path | None = None  # features_path entries resolve against this
    workers: int = 1
    # Masked copies per forward pass; 0 stacks the whole hypothesis at once.
    copy_batch_size: int = 0

    def __post_init__(self):
        check_interp_weight(self.interp_weight)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.copy_batch_size < 0:
            raise ValueError("copy_batch_size must be >= 0")


@dataclass
class HypothesisScore:
    text: str
    pll: float
    first_pass: float
    final: float
    original_rank: int
    token_count: int


def check_interp_weight(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight must be in [0, 1]: {lam}")
    return float(lam)


def interpolate(first_pass: float, pll: float, lam: float) -> float:
    """Convex combination of first-pass confidence and PLL."""
    check_interp_weight(lam)
    return (1.0 - lam) * first_pass + lam * pll


def encode_acoustic(model: Model, features: AudioFeatures) -> Tensor | None:
    """Audio side of the fused input, computed once per utterance."""
    if model.config.text_only:
        return None
    with T.no_grad():
        states = speech_encode(Tensor(features.values), model.params, model.config)
        return acoustic_positions(adapt(subsample(states, model.params), model.params),
                                  model.params, model.config)


def pll_score(model: Model, features: AudioFeatures | None, token_ids: list[int],
              acoustic: Tensor | None = None, copy_batch_size: int = 0) -> float:
    """Pseudo-log-likelihood: sum over positions k of log P(token_k | audio,
    all other tokens) with position k masked. Stacks the masked copies into
    batched forward passes (`copy_batch_size` per pass, 0 = all at once);
    empty hypotheses score exactly 0."""
    t = len(token_ids)
    if t == 0:
        return 0.0
    ids = np.asarray(token_ids, dtype=np.intp)
    copies = np.tile(assemble_tokens(ids), (t, 1))
    copies[np.arange(t), 1 + np.arange(t)] = MASK
    chunk = t if copy_batch_size == 0 else copy_batch_size
    total = 0.0
    with T.no_grad():
        if acoustic is None and features is not None and not model.config.text_only:
            acoustic = encode_acoustic(model, features)
        head = model.params["mlm_head"].tensors
        for start in range(0, t, chunk):
            block = copies[start:start + chunk]
            b = block.shape[0]
            lex = _embed_copies(model, block)
            if acoustic is not None:
                tiled = Tensor(np.broadcast_to(acoustic.data, (b, *acoustic.shape)).copy())
                fused = fuse(tiled, lex)
            else:
                fused = fuse(None, lex)
            states = encode_fused(fused, model.params, model.config).states.data
            boundary = fused.boundary
            positions = boundary + 1 + start + np.arange(b)
            rows = states[np.arange(b), positions, :]
            logits = rows @ head["w"].data + head["b"].data
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            total += float(logp[np.arange(b), ids[start:start + b]].sum())
    return total


def _embed_copies(model: Model, copies: np.ndarray) -> Tensor:
    from .model import embed_tokens

    return embed_tokens(copies, model.params, model.config)


def pll_score_naive(model: Model, features: AudioFeatures | None,
                    token_ids: list[int]) -> float:
    """Reference implementation: one forward pass per masked position."""
    total = 0.0
    with T.no_grad():
        for k, token in enumerate(token_ids):
            ids = list(token_ids)
            ids[k] = MASK
            feats = None
            if features is not None and not model.config.text_only:
                feats = Tensor(features.values)
            out = forward_fused(model.params, model.config, assemble_tokens(ids), feats)
            boundary = out.states.boundary
            logits = mlm_logits(out.states, [boundary + 1 + k], model.params)
            logp = T.log_softmax(logits)
            total += float(logp.data[0, token])
    return total


def _load_entry_features(entry: NBestEntry, config: RescoreConfig) -> AudioFeatures | None:
    path = Path(entry.features_path)
    if config.base_dir is not None and not path.is_absolute():
        path = config.base_dir / path
    try:
        return read_features(path)
    except DataError as exc:
        raise DataError(f"utterance {entry.utterance_id}: {exc}") from exc


def rescore_nbest(model: Model, entry: NBestEntry, config: RescoreConfig) -> list[HypothesisScore]:
    """Score every hypothesis and rank by final score, breaking ties in favor
    of the better first-pass rank. Deterministic for fixed inputs."""
    features = None if model.config.text_only else _load_entry_features(entry, config)
    acoustic = encode_acoustic(model, features) if features is not None else None
    scored = []
    for hyp in entry.hypotheses:
        ids = tokenize(normalize_text(hyp.text), model.vocab)
        pll = pll_score(model, features, ids, acoustic=acoustic,
                        copy_batch_size=config.copy_batch_size)
        final = interpolate(hyp.first_pass_score, pll, config.interp_weight)
        scored.append(HypothesisScore(hyp.text, pll, hyp.first_pass_score, final,
                                      hyp.original_rank, len(ids)))
    scored.sort(key=lambda s: (-s.final, s.original_rank))
    return scored


def rescore_entries(model: Model, entries: list[NBestEntry],
                    config: RescoreConfig) -> list[list[HypothesisScore]]:
    """Rescore a batch of entries; output order follows input order no matter
    how many workers run."""
    if config.workers == 1:
        return [rescore_nbest(model, e, config) for e in entries]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(lambda e: rescore_nbest(model, e, config), entries))


def write_rescore_output(path: str | Path, entries: list[NBestEntry],
                         results: list[list[HypothesisScore]], lam: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry, ranked in zip(entries, results):
            fh.write(json.dumps({
                "utterance_id": entry.utterance_id,
                "ranked": [
                    {"text": s.text, "pll": s.pll, "first_pass": s.first_pass,
                     "final": s.final}
                    for s in ranked
                ],
                "lambda": lam,
            }) + "\n")


# ---------------------------------------------------------------------------
# sweeps and evaluation
# ---------------------------------------------------------------------------

def _score_cache(model: Model, entries: list[NBestEntry],
                 config: RescoreConfig) -> list[list[tuple[str, float, float, int]]]:
    """(normalized text, first_pass, pll, original_rank) per hypothesis; the
    PLL does not depend on the interpolation weight, so sweeps reuse it."""

    def one(entry: NBestEntry):
        features = None if model.config.text_only else _load_entry_features(entry, config)
        acoustic = encode_acoustic(model, features) if features is not None else None
        rows = []
        for hyp in entry.hypotheses:
            norm = normalize_text(hyp.text)
            ids = tokenize(norm, model.vocab)
            pll = pll_score(model, features, ids, acoustic=acoustic,
                            copy_batch_size=config.copy_batch_size)
            rows.append((norm, hyp.first_pass_score, pll, hyp.original_rank))
        return rows

    if config.workers == 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(one, entries))


def _top_text(rows: list[tuple[str, float, float, int]], lam: float) -> str:
    best = min(rows, key=lambda r: (-((1.0 - lam) * r[1] + lam * r[2]), r[3]))
    return best[0]


def sweep_lambda(model: Model, dev_entries: list[NBestEntry], grid: list[float],
                 config: RescoreConfig) -> tuple[float, list[tuple[float, float]]]:
    """Evaluate rescoring WER at every interpolation weight in the grid;
    returns (best weight, full table). Ties prefer the smaller weight."""
    if not grid:
        raise ValueError("empty interpolation grid")
    values = sorted({check_interp_weight(lam) for lam in grid})
    cache = _score_cache(model, dev_entries, config)
    refs = [normalize_text(e.reference) for e in dev_entries]
    table = []
    for lam in values:
        scored = [(e.utterance_id, ref, _top_text(rows, lam))
                  for e, ref, rows in zip(dev_entries, refs, cache)]
        table.append((lam, corpus_report(scored, set()).wer))
    best = min(table, key=lambda lw: (lw[1], lw[0]))[0]
    return best, table


def evaluate(model: Model, entries: list[NBestEntry], lam: float,
             blocklist: set[str], config: RescoreConfig) -> EvalReport:
    """Rescore every entry at the given weight and pool corpus-level WER/CWER
    of the top hypothesis against the reference. Per-utterance data errors
    skip the utterance and are noted in the report."""
    check_interp_weight(lam)
    scored: list[tuple[str, str, str]] = []
    skipped: list[dict] = []
    run_config = RescoreConfig(lam, config.base_dir, config.workers)

    def one(entry: NBestEntry):
        ranked = rescore_nbest(model, entry, run_config)
        return entry.utterance_id, normalize_text(entry.reference), normalize_text(ranked[0].text)

    if config.workers == 1:
        outcomes = []
        for entry in entries:
            try:
                outcomes.append(one(entry))
            except DataError as exc:
                outcomes.append((entry.utterance_id, None, str(exc)))
    else:
        def safe(entry: NBestEntry):
            try:
                return one(entry)
            except DataError as exc:
                return entry.utterance_id, None, str(exc)

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(safe, entries))

    for uid, ref, top_or_err in outcomes:
        if ref is None:
            skipped.append({"utterance_id": uid, "error": top_or_err})
        else:
            scored.append((uid, ref, top_or_err))
    report = corpus_report(scored, blocklist)
    report.skipped = skipped
    return report
