"""The fused audio+text masked encoder.

Forward pipeline: a small trainable speech encoder produces frame states, a
strided CNN shortens them (strides 2,1,2 / kernel widths 3,1,1), a bottleneck
adapter projects them into the masked encoder's input space, and the result is
concatenated ahead of the lexical embeddings. A bidirectional pre-norm
transformer runs over the whole fused sequence, so lexical predictions can
attend to the audio. All functions are rank-agnostic where scoring batches
masked copies: (seq, d) or (batch, seq, d).

Parameters are organized in named groups with a trainable flag each, so whole
groups can be frozen (their gradients are exactly zero and the optimizer never
touches them).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import CLS, DataError, SEP, Vocab
from .tensor import Tensor

GROUP_NAMES = (
    "token_embeddings",
    "position_embeddings",
    "segment_embeddings",
    "speech_encoder",
    "cnn_subsampler",
    "adapter",
    "masked_encoder",
    "mlm_head",
)

SUBSAMPLE_STRIDES = (2, 1, 2)
SUBSAMPLE_KERNELS = (3, 1, 1)
ADAPTER_COMPRESSION = 0.5

_CKPT_MAGIC = b"MMCK"


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dims: int = 16
    d_model: int = 64
    encoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    speech_encoder_layers: int = 1
    max_positions: int = 512
    dropout: float = 0.1
    text_only: bool = False
    # Where the alignment loss taps pooled vectors: the encoder inputs
    # (adapter output / lexical embeddings) or the encoder outputs.
    pool_tap: str = "inputs"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for name in ("vocab_size", "feature_dims", "d_model", "encoder_layers",
                     "heads", "ffn_dim", "speech_encoder_layers", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pool_tap not in ("inputs", "outputs"):
            raise ValueError(f"unknown pool_tap: {self.pool_tap}")


@dataclass
class ParamGroup:
    name: str
    tensors: dict[str, Tensor]
    trainable: bool = True

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for t in self.tensors.values():
            t.requires_grad = flag


class ModelParams:
    """All parameter groups of one model instance."""

    def __init__(self, groups: dict[str, ParamGroup]):
        self.groups = groups

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def named(self, trainable_only: bool = False) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for gname in GROUP_NAMES:
            group = self.groups[gname]
            if trainable_only and not group.trainable:
                continue
            for tname, t in group.tensors.items():
                out[f"{gname}/{tname}"] = t
        return out

    def freeze(self, group_names) -> None:
        for name in group_names:
            if name not in self.groups:
                raise ValueError(f"unknown parameter group: {name}")
            self.groups[name].set_trainable(False)

    def num_params(self) -> int:
        return sum(t.size for t in self.named().values())


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _layer_params(rng: np.random.Generator, d: int, ffn: int, i: int) -> dict[str, Tensor]:
    p = {}
    p[f"layer{i}_ln1_g"] = _ones(d)
    p[f"layer{i}_ln1_b"] = _zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        p[f"layer{i}_{name}"] = _normal(rng, (d, d))
        p[f"layer{i}_b{name[1]}"] = _zeros(d)
    p[f"layer{i}_ln2_g"] = _ones(d)
    p[f"layer{i}_ln2_b"] = _zeros(d)
    p[f"layer{i}_ffn1_w"] = _normal(rng, (d, ffn))
    p[f"layer{i}_ffn1_b"] = _zeros(ffn)
    p[f"layer{i}_ffn2_w"] = _normal(rng, (ffn, d))
    p[f"layer{i}_ffn2_b"] = _zeros(d)
    return p


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization; the adapter up-projection starts at zero
    so audio initially contributes layer-normed pass-through content."""
    rng = np.random.default_rng(seed)
    d, ffn = config.d_model, config.ffn_dim
    bottleneck = int(d * ADAPTER_COMPRESSION)

    groups: dict[str, ParamGroup] = {}
    groups["token_embeddings"] = ParamGroup("token_embeddings", {
        "weight": _normal(rng, (config.vocab_size, d)),
    })
    groups["position_embeddings"] = ParamGroup("position_embeddings", {
        "lexical": _normal(rng, (config.max_positions, d)),
        "acoustic": _normal(rng, (config.max_positions, d)),
    })
    groups["segment_embeddings"] = ParamGroup("segment_embeddings", {
        "weight": _normal(rng, (2, d)),
    })

    speech: dict[str, Tensor] = {
        "proj_w": _normal(rng, (config.feature_dims, d)),
        "proj_b": _zeros(d),
    }
    for i in range(config.speech_encoder_layers):
        speech.update(_layer_params(rng, d, ffn, i))
    groups["speech_encoder"] = ParamGroup("speech_encoder", speech)

    cnn: dict[str, Tensor] = {}
    for i, k in enumerate(SUBSAMPLE_KERNELS):
        cnn[f"conv{i}_w"] = _normal(rng, (k, d, d))
        cnn[f"conv{i}_b"] = _zeros(d)
    groups["cnn_subsampler"] = ParamGroup("cnn_subsampler", cnn)

    groups["adapter"] = ParamGroup("adapter", {
        "down_w": _normal(rng, (d, bottleneck)),
        "down_b": _zeros(bottleneck),
        "up_w": _zeros((bottleneck, d)),
        "up_b": _zeros(d),
        "ln_g": _ones(d),
        "ln_b": _zeros(d),
    })

    encoder: dict[str, Tensor] = {}
    for i in range(config.encoder_layers):
        encoder.update(_layer_params(rng, d, ffn, i))
    encoder["final_ln_g"] = _ones(d)
    encoder["final_ln_b"] = _zeros(d)
    groups["masked_encoder"] = ParamGroup("masked_encoder", encoder)

    groups["mlm_head"] = ParamGroup("mlm_head", {
        "w": _normal(rng, (d, config.vocab_size)),
        "b": _zeros(config.vocab_size),
    })
    return ModelParams(groups)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def assemble_tokens(ids: list[int]) -> np.ndarray:
    """Lexical input layout: [CLS] t_1 ... t_T [SEP]."""
    return np.array([CLS] + list(ids) + [SEP], dtype=np.intp)


def embed_tokens(token_ids: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Token + lexical position + lexical segment embeddings."""
    ids = np.asarray(token_ids, dtype=np.intp)
    seq_len = ids.shape[-1]
    if seq_len > config.max_positions:
        raise ValueError(f"exceeds max positions: {seq_len} > {config.max_positions}")
    if ids.size and ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    tok = T.take_rows(params["token_embeddings"].tensors["weight"], ids)
    pos = T.take_rows(params["position_embeddings"].tensors["lexical"], np.arange(seq_len))
    seg = T.take_rows(params["segment_embeddings"].tensors["weight"], np.array([1]))
    return tok + pos + T.reshape(seg, (config.d_model,))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    dh = d // heads
    x = T.reshape(x, (*lead, s, heads, dh))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.reshape(T.transpose(x, axes), (*lead, s, h * dh))


def _encoder_layer(
    x: Tensor,
    p: dict[str, Tensor],
    i: int,
    heads: int,
    mask_bias: np.ndarray | None,
    dropout: float,
    rng: np.random.Generator | None,
) -> Tensor:
    """Pre-norm block: x + Attn(LN(x)); x + FFN(LN(x))."""
    h = T.layer_norm(x, p[f"layer{i}_ln1_g"], p[f"layer{i}_ln1_b"])
    q = T.matmul(h, p[f"layer{i}_wq"]) + p[f"layer{i}_bq"]
    k = T.matmul(h, p[f"layer{i}_wk"]) + p[f"layer{i}_bk"]
    v = T.matmul(h, p[f"layer{i}_wv"]) + p[f"layer{i}_bv"]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
    attn = T.softmax(scores, mask_bias=mask_bias)
    ctx = _merge_heads(T.matmul(attn, vh))
    out = T.matmul(ctx, p[f"layer{i}_wo"]) + p[f"layer{i}_bo"]
    if rng is not None and dropout > 0.0:
        out = T.dropout(out, dropout, rng)
    x = x + out
    h2 = T.layer_norm(x, p[f"layer{i}_ln2_g"], p[f"layer{i}_ln2_b"])
    ffn = T.matmul(T.gelu(T.matmul(h2, p[f"layer{i}_ffn1_w"]) + p[f"layer{i}_ffn1_b"]),
                   p[f"layer{i}_ffn2_w"]) + p[f"layer{i}_ffn2_b"]
    if rng is not None and dropout > 0.0:
        ffn = T.dropout(ffn, dropout, rng)
    return x + ffn


def speech_encode(
    features: Tensor,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Project raw frames to model width and contextualize; length-preserving.
    Accepts (frames, dims) or, for equal-length utterances, (batch, frames, dims)."""
    if features.ndim not in (2, 3):
        raise ValueError("speech_encode expects a (frames, dims) matrix")
    if features.shape[-1] != config.feature_dims:
        raise ValueError(
            f"feature dims {features.shape[-1]} do not match config {config.feature_dims}"
        )
    p = params["speech_encoder"].tensors
    x = T.matmul(features, p["proj_w"]) + p["proj_b"]
    for i in range(config.speech_encoder_layers):
        x = _encoder_layer(x, p, i, config.heads, None, config.dropout, rng)
    return x


def subsample(speech_states: Tensor, params: ModelParams) -> Tensor:
    """Three strided convolutions with GELU between layers; length becomes
    conv_output_length(R, (2, 1, 2))."""
    p = params["cnn_subsampler"].tensors
    x = speech_states
    last = len(SUBSAMPLE_STRIDES) - 1
    for i, stride in enumerate(SUBSAMPLE_STRIDES):
        x = T.conv1d(x, p[f"conv{i}_w"], p[f"conv{i}_b"], stride)
        if i != last:
            x = T.gelu(x)
    return x


def adapt(cnn_out: Tensor, params: ModelParams) -> Tensor:
    """Bottleneck adapter with residual and post-layer-norm; zero-initialized
    projections reduce this to layer_norm(input)."""
    p = params["adapter"].tensors
    inner = T.matmul(T.gelu(T.matmul(cnn_out, p["down_w"]) + p["down_b"]), p["up_w"]) + p["up_b"]
    return T.layer_norm(cnn_out + inner, p["ln_g"], p["ln_b"])


def acoustic_positions(acoustic: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Acoustic side gets its own position indices (restarting at 0) and a
    distinct segment embedding before fusion."""
    r = acoustic.shape[-2]
    if r > config.max_positions:
        raise ValueError(f"exceeds max positions: {r} > {config.max_positions}")
    pos = T.take_rows(params["position_embeddings"].tensors["acoustic"], np.arange(r))
    seg = T.take_rows(params["segment_embeddings"].tensors["weight"], np.array([0]))
    return acoustic + pos + T.reshape(seg, (config.d_model,))


@dataclass
class FusedSequence:
    matrix: Tensor
    boundary: int
    valid_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.matrix.shape[-2], dtype=bool)


def fuse(a: Tensor | None, l: Tensor, lexical_valid: np.ndarray | None = None) -> FusedSequence:
    """Concatenate acoustic rows ahead of lexical rows; boundary = rows(a)."""
    t_lex = l.shape[-2]
    lex_valid = np.ones(t_lex, dtype=bool) if lexical_valid is None else np.asarray(lexical_valid, bool)
    if a is None or a.shape[-2] == 0:
        return FusedSequence(l, 0, lex_valid)
    if a.shape[-1] != l.shape[-1]:
        raise ValueError(f"d_model mismatch: acoustic {a.shape[-1]} vs lexical {l.shape[-1]}")
    boundary = a.shape[-2]
    matrix = T.concat([a, l], axis=a.ndim - 2)
    mask = np.concatenate([np.ones(boundary, dtype=bool), lex_valid])
    return FusedSequence(matrix, boundary, mask)


@dataclass
class ContextualStates:
    states: Tensor
    boundary: int


def encode_fused(
    fused: FusedSequence,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> ContextualStates:
    """Bidirectional pre-norm transformer over the full fused sequence;
    positions outside valid_mask are masked out of attention."""
    seq_len = fused.matrix.shape[-2]
    if seq_len > config.max_positions:
        raise ValueError(f"exceeds max positions: {seq_len} > {config.max_positions}")
    mask_bias = None
    if not fused.valid_mask.all():
        mask_bias = np.where(fused.valid_mask, 0.0, -1e30)
    p = params["masked_encoder"].tensors
    x = fused.matrix
    for i in range(config.encoder_layers):
        x = _encoder_layer(x, p, i, config.heads, mask_bias, config.dropout, rng)
    x = T.layer_norm(x, p["final_ln_g"], p["final_ln_b"])
    return ContextualStates(x, fused.boundary)


def mlm_logits(states: ContextualStates, positions, params: ModelParams) -> Tensor:
    """Vocabulary logits at the requested lexical positions."""
    pos = np.asarray(positions, dtype=np.intp)
    if pos.size and pos.min() < states.boundary:
        raise ValueError("MLM head is lexical-only")
    if states.states.ndim != 2:
        raise ValueError("mlm_logits expects per-utterance (seq, d) states")
    if pos.size and pos.max() >= states.states.shape[0]:
        raise ValueError("position beyond sequence")
    p = params["mlm_head"].tensors
    rows = T.take_rows(states.states, pos)
    return T.matmul(rows, p["w"]) + p["b"]


@dataclass
class FusedForward:
    """One full pass: encoder-input representations plus contextual states."""

    states: ContextualStates
    acoustic: Tensor | None
    lexical: Tensor


def forward_fused(
    params: ModelParams,
    config: ModelConfig,
    token_ids: np.ndarray,
    features: Tensor | None = None,
    rng: np.random.Generator | None = None,
    lexical_valid: np.ndarray | None = None,
) -> FusedForward:
    """speech_encode -> subsample -> adapt -> fuse with embedded tokens ->
    masked encoder. `features` is ignored in text-only mode. A 2-D features
    matrix combined with batched token rows means one audio stream shared by
    every row (the masked-copy layout used for scoring)."""
    lex = embed_tokens(token_ids, params, config)
    acoustic = None
    if not config.text_only and features is not None:
        states = speech_encode(features, params, config, rng)
        acoustic = acoustic_positions(adapt(subsample(states, params), params), params, config)
        if lex.ndim == 3 and acoustic.ndim == 2:
            acoustic = T.reshape(acoustic, (1, *acoustic.shape))
            tile = Tensor(np.ones((lex.shape[0], 1, 1)))
            acoustic = T.mul(acoustic, tile)
    fused = fuse(acoustic, lex, lexical_valid)
    encoded = encode_fused(fused, params, config, rng)
    return FusedForward(encoded, acoustic, lex)


# ---------------------------------------------------------------------------
# model bundle and checkpointing
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: ModelParams
    vocab: Vocab

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.params, self.config, self.vocab.content_hash())

    @classmethod
    def load(cls, path: str | Path, vocab: Vocab) -> "Model":
        params, config, vocab_hash = load_checkpoint(path)
        if vocab_hash != vocab.content_hash():
            raise DataError("checkpoint was trained with a different vocabulary")
        return cls(config, params, vocab)


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig, vocab_hash: str) -> None:
    """Single binary container: JSON header (config, vocab hash, tensor index)
    followed by the concatenated little-endian float64 payloads."""
    index = []
    payloads = []
    for gname in GROUP_NAMES:
        group = params[gname]
        for tname, t in group.tensors.items():
            index.append({"group": gname, "name": tname, "shape": list(t.shape),
                          "trainable": group.trainable})
            payloads.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    header = json.dumps({
        "version": 1,
        "config": asdict(config),
        "vocab_hash": vocab_hash,
        "tensors": index,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig, str]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != _CKPT_MAGIC:
        raise DataError(f"not a model checkpoint: {path}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    offset = 8 + hlen
    groups: dict[str, ParamGroup] = {g: ParamGroup(g, {}) for g in GROUP_NAMES}
    for item in header["tensors"]:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise DataError(f"corrupt checkpoint (truncated payload): {path}")
        values = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset = end
        group = groups[item["group"]]
        group.tensors[item["name"]] = Tensor(values, requires_grad=item["trainable"])
        group.trainable = item["trainable"]
    if offset != len(raw):
        raise DataError(f"corrupt checkpoint (trailing bytes): {path}")
    return ModelParams(groups), config, header["vocab_hash"]
