"""Rank-vector LoRA+MoRA adapters on a tiny trainable decoder.

Modules:
    autodiff    dense float64 matrix ops with a reverse-mode tape
    adapters    LoRA, rotary-compressed MoRA, rank schedules, budgets
    model       causal decoder with adapters on each fused QKV projection
    corpus      seeded synthetic two-domain question answering data
    training    Adam, teacher-forced training, the two-stage forgetting protocol
    evaluation  BLEU / ROUGE / exact-match METEOR and risk-coverage curves
    checkpoint  bit-exact parameter persistence
    config      run configuration loading and validation
    cli         command-line entry points
"""

from .adapters import (
    LoraAdapter,
    MoLoraLayer,
    MoraAdapter,
    RankVector,
    RotaryCodec,
    materialize_delta_w,
    param_count,
    stepped_schedule,
)
from .autodiff import GradTape, Param, grad_check, rng_stream
from .config import RunConfig
from .corpus import SyntheticDomain, Vocab, gen_corpus, standard_corpora
from .evaluation import (
    MetricReport,
    ScoredSample,
    answer_uncertainty,
    bleu,
    meteor_exact,
    reject,
    risk_coverage,
    rouge_1,
    rouge_l,
)
from .model import DecoderConfig, GenerationTrace, TinyDecoder, build_model, generate_greedy
from .training import AdamConfig, RetentionReport, forgetting_experiment, train

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "DecoderConfig", "GenerationTrace", "GradTape", "LoraAdapter",
    "MetricReport", "MoLoraLayer", "MoraAdapter", "Param", "RankVector",
    "RetentionReport", "RotaryCodec", "RunConfig", "ScoredSample", "SyntheticDomain",
    "TinyDecoder", "Vocab", "answer_uncertainty", "bleu", "build_model",
    "forgetting_experiment", "gen_corpus", "generate_greedy", "grad_check",
    "materialize_delta_w", "meteor_exact", "param_count", "reject",
    "risk_coverage", "rng_stream", "rouge_1", "rouge_l", "standard_corpora",
    "stepped_schedule", "train",
]
