"""cograd: a desk-scale multi-task learning engine.

A shared mean-pool encoder feeds per-task heads; training minimizes a
weighted joint loss plus a pairwise gradient-cosine penalty whose exact
gradient is obtained by double backward on a from-scratch tape.
"""

from .autodiff import (
    GradientMap,
    Tape,
    Tensor,
    backward,
    check_gradient,
    flatten_grads,
)
from .data import Example, Round, SyntheticSpec, Vocabulary, generate_synthetic
from .metrics import MetricReport, accuracy, corpus_rouge1, rouge1
from .model import (
    ModelParams,
    encode,
    generate_greedy,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .objective import (
    RegularizerConfig,
    TaskSpec,
    WeightState,
    cosine_penalty,
    cross_entropy,
    joint_loss,
    mse,
    pairwise_cosine,
    sequence_cross_entropy,
    total_loss,
    update_dynamic_weights,
)
from .trainer import (
    EpochRecord,
    TrainConfig,
    evaluate,
    pretrain_shared,
    run_baseline_comparison,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "EpochRecord", "Example", "GradientMap", "MetricReport", "ModelParams",
    "RegularizerConfig", "Round", "SyntheticSpec", "Tape", "TaskSpec",
    "Tensor", "TrainConfig", "Vocabulary", "WeightState", "accuracy",
    "backward", "check_gradient", "corpus_rouge1", "cosine_penalty",
    "cross_entropy", "encode", "evaluate", "flatten_grads", "generate_greedy",
    "generate_synthetic", "init_model", "joint_loss", "load_checkpoint",
    "mse", "pairwise_cosine", "pretrain_shared", "rouge1",
    "run_baseline_comparison", "save_checkpoint", "sequence_cross_entropy",
    "total_loss", "train", "train_step", "update_dynamic_weights",
]
