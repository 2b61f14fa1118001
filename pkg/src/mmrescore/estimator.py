"""Estimator-style facade over the training and rescoring pipeline.

`MlmRescorer` follows the scikit-learn parameter protocol (constructor stores
hyperparameters verbatim; `get_params`/`set_params` round-trip them; fitted
state lives in trailing-underscore attributes), so it composes with tooling
that expects that interface, including `sklearn.base.clone`.
"""

from __future__ import annotations

import inspect

import numpy as np

from .data import AudioFeatures, NBestEntry, build_vocab, normalize_text
from .metrics import EvalReport
from .model import Model, ModelConfig, init_params
from .objectives import TrainConfig, TrainSample, train
from .rescore import (
    HypothesisScore,
    RescoreConfig,
    check_interp_weight,
    evaluate,
    rescore_entries,
    sweep_lambda,
)


def check_features(values, name: str = "features") -> AudioFeatures:
    """Validate one acoustic input: 2-D, finite, at least one frame."""
    if isinstance(values, AudioFeatures):
        return values
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty (frames, dims) matrix")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contain non-finite values")
    return AudioFeatures(arr)


def check_pairs(pairs, text_only: bool) -> list[tuple[AudioFeatures | None, str]]:
    if not pairs:
        raise ValueError("fit needs at least one (features, text) pair")
    checked = []
    for i, (feats, text) in enumerate(pairs):
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"pair {i}: text must be a non-empty string")
        if feats is None:
            if not text_only:
                raise ValueError(f"pair {i}: features required unless text_only=True")
            checked.append((None, text))
        else:
            checked.append((check_features(feats, f"pair {i} features"), text))
    return checked


class MlmRescorer:
    """Fused audio+text masked-LM rescorer with a fit/predict lifecycle.

    fit() builds a vocabulary from the training transcripts, trains the fused
    encoder on the masked-prediction plus alignment objective, and (when dev
    entries are given) tunes the interpolation weight. predict() re-ranks
    n-best entries and returns the top hypothesis per entry.
    """

    def __init__(
        self,
        d_model: int = 64,
        encoder_layers: int = 2,
        heads: int = 4,
        ffn_dim: int = 128,
        speech_encoder_layers: int = 1,
        max_positions: int = 512,
        dropout: float = 0.1,
        pool_tap: str = "inputs",
        alignment: str = "contrastive",
        alpha: float = 1.0,
        learning_rate: float = 2e-3,
        batch_size: int = 32,
        steps: int = 3000,
        mask_rate: float = 0.15,
        warmup_fraction: float = 0.1,
        text_only: bool = False,
        freeze: tuple = (),
        interp_weight: float = 0.5,
        workers: int = 1,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.encoder_layers = encoder_layers
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.speech_encoder_layers = speech_encoder_layers
        self.max_positions = max_positions
        self.dropout = dropout
        self.pool_tap = pool_tap
        self.alignment = alignment
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.mask_rate = mask_rate
        self.warmup_fraction = warmup_fraction
        self.text_only = text_only
        self.freeze = freeze
        self.interp_weight = interp_weight
        self.workers = workers
        self.seed = seed

    # -- scikit-learn parameter protocol ------------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "MlmRescorer":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for MlmRescorer")
            setattr(self, key, value)
        return self

    # -- lifecycle -----------------------------------------------------------

    def fit(self, pairs, dev_entries: list[NBestEntry] | None = None,
            dev_dir=None, on_step=None) -> "MlmRescorer":
        """Train on (features, transcript) pairs.

        dev_entries (n-best lists with references; feature paths resolved
        against dev_dir) trigger an interpolation-weight sweep after training.
        """
        checked = check_pairs(pairs, self.text_only)
        alignment = "none" if self.text_only else self.alignment
        vocab = build_vocab([normalize_text(t) for _, t in checked], min_count=1)
        feature_dims = checked[0][0].dims if checked[0][0] is not None else 1

        config = ModelConfig(
            vocab_size=len(vocab),
            feature_dims=feature_dims,
            d_model=self.d_model,
            encoder_layers=self.encoder_layers,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            speech_encoder_layers=self.speech_encoder_layers,
            max_positions=self.max_positions,
            dropout=self.dropout,
            text_only=self.text_only,
            pool_tap=self.pool_tap,
        )
        self.model_ = Model(config, init_params(config, self.seed), vocab)
        self.vocab_ = vocab

        from .data import tokenize

        samples = []
        for feats, text in checked:
            norm = normalize_text(text)
            if feats is None:
                feats = AudioFeatures(np.zeros((1, feature_dims)))
            samples.append(TrainSample(feats, tokenize(norm, vocab), norm))

        train_config = TrainConfig(
            alpha=self.alpha,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            mask_rate=self.mask_rate,
            total_steps=self.steps,
            warmup_fraction=self.warmup_fraction,
            seed=self.seed,
            alignment=alignment,
            freeze=tuple(self.freeze),
        )
        self.history_ = train(self.model_, samples, train_config, on_step=on_step)

        self.interp_weight_ = check_interp_weight(self.interp_weight)
        if dev_entries:
            grid = [round(0.05 * i, 2) for i in range(21)]
            best, table = sweep_lambda(self.model_, dev_entries, grid,
                                       RescoreConfig(0.0, base_dir=dev_dir,
                                                     workers=self.workers))
            self.interp_weight_ = best
            self.sweep_table_ = table
        return self

    def _require_fitted(self) -> Model:
        model = getattr(self, "model_", None)
        if model is None:
            raise RuntimeError("this MlmRescorer instance is not fitted yet; call fit first")
        return model

    def rescore(self, entries: list[NBestEntry], base_dir=None) -> list[list[HypothesisScore]]:
        model = self._require_fitted()
        config = RescoreConfig(self.interp_weight_, base_dir=base_dir, workers=self.workers)
        return rescore_entries(model, entries, config)

    def predict(self, entries: list[NBestEntry], base_dir=None) -> list[str]:
        """Top hypothesis text per entry after rescoring."""
        return [ranked[0].text for ranked in self.rescore(entries, base_dir=base_dir)]

    def evaluate(self, entries: list[NBestEntry], blocklist: set[str] | None = None,
                 base_dir=None) -> EvalReport:
        model = self._require_fitted()
        config = RescoreConfig(self.interp_weight_, base_dir=base_dir, workers=self.workers)
        return evaluate(model, entries, self.interp_weight_, blocklist or set(), config)

    def score(self, entries: list[NBestEntry], base_dir=None) -> float:
        """Word accuracy (1 - corpus WER) of the re-ranked top hypotheses."""
        return 1.0 - self.evaluate(entries, base_dir=base_dir).wer
