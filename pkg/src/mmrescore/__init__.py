"""Multi-modal masked-LM rescoring of ASR n-best lists."""

__version__ = "0.1.0"

from .data import (
    AudioFeatures,
    DataError,
    Hypothesis,
    NBestEntry,
    TrainPair,
    Vocab,
    build_vocab,
    normalize_text,
    read_blocklist,
    read_features,
    read_nbest,
    read_train_pairs,
    tokenize,
    write_features,
    write_nbest,
    write_train_pairs,
)
from .estimator import MlmRescorer
from .metrics import EvalReport, cwer, wer
from .model import Model, ModelConfig, init_params
from .objectives import DivergenceError, LossBreakdown, TrainConfig, train
from .rescore import (
    HypothesisScore,
    RescoreConfig,
    evaluate,
    interpolate,
    pll_score,
    pll_score_naive,
    rescore_nbest,
    sweep_lambda,
)
from .synth import SynthConfig, generate
from .tensor import Tensor, backward, conv_output_length, grad_check, no_grad

__all__ = [
    "AudioFeatures", "DataError", "DivergenceError", "EvalReport", "Hypothesis",
    "HypothesisScore", "LossBreakdown", "MlmRescorer", "Model", "ModelConfig",
    "NBestEntry", "RescoreConfig", "SynthConfig", "Tensor", "TrainConfig",
    "TrainPair", "Vocab", "backward", "build_vocab", "conv_output_length", "cwer",
    "evaluate", "generate", "grad_check", "init_params", "interpolate", "no_grad",
    "normalize_text", "pll_score", "pll_score_naive", "read_blocklist",
    "read_features", "read_nbest", "read_train_pairs", "rescore_nbest",
    "sweep_lambda", "tokenize", "train", "wer", "write_features", "write_nbest",
    "write_train_pairs",
]
