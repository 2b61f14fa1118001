"""Training objectives and the optimization loop.

BERT-style token corruption feeds the masked-prediction loss; an utterance
-level alignment loss (contrastive over in-batch negatives, or the MSE
ablation) pulls pooled audio and text vectors together. The joint objective is
mlm + alpha * alignment, optimized with Adam under a warmup-then-linear-decay
schedule. All randomness is derived from (seed, step, sample) so runs are
exactly repeatable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import AudioFeatures, MASK
from .model import Model, assemble_tokens, forward_fused
from .tensor import Tensor

ALIGNMENT_KINDS = ("contrastive", "mse", "none")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 3)."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 2e-3
    batch_size: int = 32
    mask_rate: float = 0.15
    corruption_split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # MASK/random/keep
    total_steps: int = 3000
    warmup_fraction: float = 0.1
    seed: int = 0
    alignment: str = "contrastive"
    freeze: tuple[str, ...] = ()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError(f"mask_rate must be in [0, 1]: {self.mask_rate}")
        if abs(sum(self.corruption_split) - 1.0) > 1e-9:
            raise ValueError(f"corruption split must sum to 1: {self.corruption_split}")
        if any(p < 0 for p in self.corruption_split):
            raise ValueError("corruption split probabilities must be non-negative")
        if self.alignment not in ALIGNMENT_KINDS:
            raise ValueError(f"alignment must be one of {ALIGNMENT_KINDS}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        self.freeze = tuple(self.freeze)


@dataclass
class MaskedSample:
    """Token sequence after corruption; positions index into input_ids."""

    input_ids: list[int]
    mask_positions: list[int]
    labels: list[int]


@dataclass
class PooledPair:
    a_bar: Tensor
    l_bar: Tensor
    index: int


@dataclass
class LossBreakdown:
    mlm: float
    alignment: float
    joint: float
    alignment_kind: str


def apply_masking(tokens: Sequence[int], vocab_size: int, config: TrainConfig,
                  rng: np.random.Generator) -> MaskedSample:
    """Select positions independently at mask_rate (forcing one if none hit)
    and corrupt them per the MASK/random/keep split. Random replacements come
    from the non-reserved vocabulary."""
    t = len(tokens)
    if t < 1:
        raise ValueError("cannot mask an empty sequence")
    selected = np.flatnonzero(rng.random(t) < config.mask_rate)
    if selected.size == 0:
        selected = np.array([rng.integers(t)])
    p_mask, p_random, _ = config.corruption_split
    input_ids = list(tokens)
    positions: list[int] = []
    labels: list[int] = []
    for pos in selected.tolist():
        positions.append(pos)
        labels.append(int(tokens[pos]))
        u = rng.random()
        if u < p_mask:
            input_ids[pos] = MASK
        elif u < p_mask + p_random:
            input_ids[pos] = int(rng.integers(5, vocab_size))
        # else: keep the original token
    return MaskedSample(input_ids, positions, labels)


def mlm_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy over all masked positions in the batch."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("mlm_loss needs at least one masked position")
    return T.mean_all(T.cross_entropy(logits, list(labels)))


def pool_pair(a: Tensor, l: Tensor, lexical_valid, index: int = 0) -> PooledPair:
    """Utterance-level average pooling of both towers."""
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("empty acoustic side")
    if l.ndim != 2 or l.shape[0] == 0:
        raise ValueError("empty lexical side")
    a_bar = T.mean_pool(a, np.ones(a.shape[0], dtype=bool))
    l_bar = T.mean_pool(l, lexical_valid)
    return PooledPair(a_bar, l_bar, index)


def similarity_matrix(pairs: Sequence[PooledPair]) -> Tensor:
    a = T.stack([p.a_bar for p in pairs])
    l = T.stack([p.l_bar for p in pairs])
    return T.matmul(a, T.transpose(l))


def _contrastive_from_rows(a_rows: Tensor, l_rows: Tensor) -> Tensor:
    sims = T.matmul(a_rows, T.transpose(l_rows))
    if not np.isfinite(sims.data).all():
        raise ValueError("non-finite similarity")
    n = a_rows.shape[0]
    return T.sum_all(T.cross_entropy(sims, np.arange(n)))


def contrastive_loss(pairs: Sequence[PooledPair]) -> Tensor:
    """Audio-anchored InfoNCE over dot-product similarities: each pooled
    audio vector must prefer its own transcript over the other transcripts in
    the mini-batch. Exactly zero for a single pair."""
    if not pairs:
        raise ValueError("contrastive_loss needs at least one pair")
    return _contrastive_from_rows(T.stack([p.a_bar for p in pairs]),
                                  T.stack([p.l_bar for p in pairs]))


def _mse_from_rows(a_rows: Tensor, l_rows: Tensor) -> Tensor:
    diff = a_rows - l_rows
    n, d = diff.shape
    return T.mul(T.sum_all(T.mul(diff, diff)), 1.0 / (n * d))


def mse_alignment_loss(pairs: Sequence[PooledPair]) -> Tensor:
    """Mean squared distance between pooled towers, scaled by width."""
    if not pairs:
        raise ValueError("mse_alignment_loss needs at least one pair")
    return _mse_from_rows(T.stack([p.a_bar for p in pairs]),
                          T.stack([p.l_bar for p in pairs]))


def joint_loss(mlm: Tensor, alignment: Tensor | None, alpha: float,
               kind: str) -> tuple[Tensor, LossBreakdown]:
    """joint = mlm + alpha * alignment; alignment treated as 0 when absent."""
    if kind == "none" or alignment is None:
        return mlm, LossBreakdown(mlm.item(), 0.0, mlm.item(), "none")
    total = mlm + T.mul(alignment, alpha)
    return total, LossBreakdown(mlm.item(), alignment.item(), total.item(), kind)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float, beta1: float,
             beta2: float, eps: float) -> None:
        self.t += 1
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m[...] = beta1 * m + (1 - beta1) * g
            v[...] = beta2 * v + (1 - beta2) * (g * g)
            m_hat = m / (1 - beta1 ** self.t)
            v_hat = v / (1 - beta2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup for the first tenth of training, linear decay to zero."""
    warmup = max(1, int(round(config.total_steps * config.warmup_fraction)))
    if step <= warmup:
        return config.learning_rate * step / warmup
    span = max(1, config.total_steps - warmup)
    return config.learning_rate * max(0.0, (config.total_steps - step) / span)


# ---------------------------------------------------------------------------
# the training step and loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    """One preprocessed training pair."""

    features: AudioFeatures
    token_ids: list[int]
    text: str


def load_train_samples(train_file, vocab) -> list[TrainSample]:
    """Materialize a training file: features read into memory, texts
    tokenized. Relative feature paths resolve against the file's directory."""
    from pathlib import Path

    from .data import read_features, read_train_pairs, tokenize

    base = Path(train_file).parent
    samples = []
    for pair in read_train_pairs(train_file):
        feats = read_features(base / pair.features_path)
        samples.append(TrainSample(feats, tokenize(pair.text, vocab), pair.text.lower()))
    return samples


def _sample_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, step, index))


def train_step(model: Model, batch: Sequence[TrainSample], opt: AdamState,
               config: TrainConfig, step: int) -> LossBreakdown:
    """Forward/backward/update over one mini-batch. Masking, dropout and the
    update touch only trainable groups; frozen groups stay bit-identical.

    Samples sharing a (frames, tokens) shape run as one stacked forward pass
    (no padding needed), which keeps the tape small — the synthetic corpus has
    only a handful of distinct shapes per batch.
    """
    if not batch:
        raise ValueError("empty batch")
    want_alignment = config.alignment != "none"
    if want_alignment and model.config.text_only:
        raise ValueError("alignment loss requires audio; use --alignment none in text-only mode")

    # Corruption draws stay per-sample so grouping cannot change the data.
    prepared: list[tuple[TrainSample, MaskedSample]] = []
    for i, sample in enumerate(batch):
        if len(sample.token_ids) == 0:
            continue
        rng = _sample_rng(config.seed, step, i)
        prepared.append((sample, apply_masking(sample.token_ids, model.config.vocab_size,
                                               config, rng)))
    if not prepared:
        raise ValueError("batch contained no maskable tokens")

    groups: dict[tuple[int, int], list[tuple[TrainSample, MaskedSample]]] = {}
    for sample, masked in prepared:
        frames = 0 if model.config.text_only else sample.features.frames
        groups.setdefault((frames, len(masked.input_ids)), []).append((sample, masked))

    drop_rng = None
    if model.config.dropout > 0:
        drop_rng = np.random.default_rng((config.seed, 7_654_321, step))

    head = model.params["mlm_head"].tensors
    ce_terms: list[Tensor] = []
    total_positions = 0
    a_rows: list[Tensor] = []
    l_rows: list[Tensor] = []

    for (frames, _), members in groups.items():
        token_matrix = np.stack([assemble_tokens(m.input_ids) for _, m in members])
        feats = None
        if not model.config.text_only:
            feats = Tensor(np.stack([s.features.values for s, _ in members]))
        out = forward_fused(model.params, model.config, token_matrix, feats, rng=drop_rng)
        boundary = out.states.boundary
        states = out.states.states
        b, seq_len, d = states.shape

        flat_idx: list[int] = []
        labels: list[int] = []
        for row, (_, masked) in enumerate(members):
            flat_idx.extend(row * seq_len + boundary + 1 + p for p in masked.mask_positions)
            labels.extend(masked.labels)
        rows = T.take_rows(T.reshape(states, (b * seq_len, d)), flat_idx)
        logits = T.matmul(rows, head["w"]) + head["b"]
        ce_terms.append(T.sum_all(T.cross_entropy(logits, labels)))
        total_positions += len(labels)

        if want_alignment:
            if model.config.pool_tap == "inputs":
                a_side, l_side = out.acoustic, out.lexical
            else:
                a_side = T.narrow(states, 1, 0, boundary)
                l_side = T.narrow(states, 1, boundary, seq_len - boundary)
            a_rows.append(T.mean_over_axis(a_side, 1))
            l_rows.append(T.mean_over_axis(l_side, 1))

    mlm = ce_terms[0]
    for term in ce_terms[1:]:
        mlm = mlm + term
    mlm = T.mul(mlm, 1.0 / total_positions)

    alignment = None
    if want_alignment:
        try:
            a_all = T.concat(a_rows, axis=0) if len(a_rows) > 1 else a_rows[0]
            l_all = T.concat(l_rows, axis=0) if len(l_rows) > 1 else l_rows[0]
            alignment = (_contrastive_from_rows(a_all, l_all) if config.alignment == "contrastive"
                         else _mse_from_rows(a_all, l_all))
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise DivergenceError(f"divergence at step {step}") from exc
            raise

    total, breakdown = joint_loss(mlm, alignment, config.alpha, config.alignment)
    if not np.isfinite(total.data):
        raise DivergenceError(f"divergence at step {step}")

    trainable = model.params.named(trainable_only=True)
    for p in trainable.values():
        p.zero_grad()
    T.backward(total)
    opt.step(trainable, learning_rate(step, config), config.adam_beta1,
             config.adam_beta2, config.adam_eps)
    return breakdown


def draw_batch(samples: Sequence[TrainSample], config: TrainConfig, step: int) -> list[TrainSample]:
    """Sample a mini-batch rejecting duplicate transcripts (duplicates would
    turn in-batch negatives into positives)."""
    rng = np.random.default_rng((config.seed, 1_000_003, step))
    batch: list[TrainSample] = []
    seen: set[str] = set()
    for _ in range(20 * config.batch_size):
        s = samples[int(rng.integers(len(samples)))]
        if s.text in seen:
            continue
        seen.add(s.text)
        batch.append(s)
        if len(batch) == config.batch_size:
            break
    return batch


def train(
    model: Model,
    samples: Sequence[TrainSample],
    config: TrainConfig,
    on_step: Callable[[int, LossBreakdown, float], None] | None = None,
) -> list[LossBreakdown]:
    """Run the full schedule; returns the per-step loss history."""
    if not samples:
        raise ValueError("no training samples")
    model.params.freeze(config.freeze)
    opt = AdamState()
    history: list[LossBreakdown] = []
    for step in range(1, config.total_steps + 1):
        batch = draw_batch(samples, config, step)
        breakdown = train_step(model, batch, opt, config, step)
        history.append(breakdown)
        if on_step is not None:
            on_step(step, breakdown, learning_rate(step, config))
    return history
