"""Multi-task objective: per-task losses, weighted joint loss, the
pairwise gradient-cosine penalty, the combined total loss, and the
dynamic task-weight update.

The cosine penalty sums cos(g_t1, g_t2) over unordered task pairs of
flattened shared-parameter gradients. When those gradients are tape
nodes (higher-order backward), the penalty is differentiable and its
gradient w.r.t. the shared parameters involves Hessian-vector products,
which the tape provides via double backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tensor
from .errors import ConfigError, ContractError, TokenIndexError

TASK_KINDS = ("classification", "generation", "regression")
LOSS_KINDS = ("cross_entropy", "sequence_cross_entropy", "mse")
VARIANTS = ("raw", "relu", "abs")
GRAD_MODES = ("exact", "detached")

ALPHA_MIN = 0.1
ALPHA_MAX = 10.0


@dataclass
class TaskSpec:
    """One task's identity: kind, loss, weight and learning rate."""

    id: int
    kind: str
    loss_kind: str
    alpha: float = 1.0
    lr: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task {self.id}: unknown kind '{self.kind}'")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"task {self.id}: unknown loss '{self.loss_kind}'")
        if self.alpha < 0:
            raise ConfigError(f"task {self.id}: alpha must be >= 0")
        # lr 0 is allowed: it freezes the task's head while the shared
        # encoder keeps moving.
        if self.lr < 0:
            raise ConfigError(f"task {self.id}: lr must be >= 0")
        if self.kind == "classification" and self.num_classes < 2:
            raise ConfigError(f"task {self.id}: need at least 2 classes")


def validate_tasks(tasks: Sequence[TaskSpec]) -> list[TaskSpec]:
    """Check ids are 1..T contiguous and weights are usable."""
    ordered = sorted(tasks, key=lambda t: t.id)
    ids = [t.id for t in ordered]
    if ids != list(range(1, len(ordered) + 1)):
        raise ConfigError(f"task ids must be 1..T contiguous, got {ids}")
    if sum(t.alpha for t in ordered) <= 0:
        raise ConfigError("at least one task weight must be positive")
    return ordered


@dataclass
class RegularizerConfig:
    lambda_: float = 0.1
    eps: float = 1e-8
    variant: str = "raw"
    grad_mode: str = "exact"

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError("lambda must be >= 0")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown cosine variant '{self.variant}'")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"unknown grad mode '{self.grad_mode}'")


@dataclass
class WeightState:
    """Current task weights and the history of (alphas, gradient norms)."""

    alphas: list[float]
    history: list[tuple[list[float], list[float]]] = field(default_factory=list)

    @classmethod
    def from_tasks(cls, tasks: Sequence[TaskSpec]) -> "WeightState":
        return cls(alphas=[t.alpha for t in validate_tasks(tasks)])


# ---------------------------------------------------------------------------
# Per-task losses
# ---------------------------------------------------------------------------

def log_softmax_rows(logits: Tensor) -> Tensor:
    """Numerically stable log softmax over the last axis.

    The row max is subtracted as a detached constant, which leaves both
    the value and every derivative of the result unchanged.
    """
    axis = logits.ndim - 1
    row_max = Tensor(np.max(logits.values, axis=axis, keepdims=True))
    shifted = ad.subtract(logits, row_max)
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=axis, keepdims=True))
    return ad.subtract(shifted, lse)


def cross_entropy_rows(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-row cross-entropy in nats, shape [N] for logits [N, C]."""
    n, c = logits.shape
    if len(labels) != n:
        raise ContractError(f"{len(labels)} labels for {n} logit rows")
    onehot = np.zeros((n, c))
    for i, label in enumerate(labels):
        if not 0 <= label < c:
            raise TokenIndexError(f"label {label} out of range [0, {c})")
        onehot[i, label] = 1.0
    logp = log_softmax_rows(logits)
    picked = ad.sum_(ad.multiply(logp, Tensor(onehot)), axis=1)
    return ad.negate(picked)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single logit vector [C]."""
    if logits.ndim != 1:
        raise ContractError(f"cross_entropy expects a vector, got {logits.shape}")
    rows = cross_entropy_rows(ad.reshape(logits, (1, logits.shape[0])), [label])
    return ad.reshape(rows, ())


def sequence_cross_entropy(step_logits: Sequence[Tensor],
                           targets: Sequence[int]) -> Tensor:
    """Mean over steps of per-step cross-entropy (teacher forcing).

    The mean keeps generation losses on the same scale as single-label
    classification losses regardless of sequence length.
    """
    if len(step_logits) != len(targets) or len(targets) == 0:
        raise ContractError(
            f"{len(step_logits)} logit steps vs {len(targets)} targets")
    rows = [ad.reshape(lg, (1, lg.shape[0])) for lg in step_logits]
    stacked = ad.concat(rows, axis=0)
    ce = cross_entropy_rows(stacked, list(targets))
    return ad.mean(ce)


def mse(pred: Tensor, target: float) -> Tensor:
    """(pred - target)^2 for a scalar-shaped prediction."""
    if pred.size != 1:
        raise ContractError(f"mse expects a scalar prediction, got {pred.shape}")
    diff = ad.shift(ad.reshape(pred, ()), -float(target))
    return ad.multiply(diff, diff)


# ---------------------------------------------------------------------------
# Joint loss and the cosine regularizer
# ---------------------------------------------------------------------------

def joint_loss(task_losses: Sequence[Tensor], alphas: Sequence[float]) -> Tensor:
    """Weighted sum of task losses (the alphas are constants)."""
    if len(task_losses) == 0:
        raise ContractError("joint_loss needs at least one task loss")
    if len(task_losses) != len(alphas):
        raise ContractError(
            f"{len(task_losses)} losses vs {len(alphas)} weights")
    if any(a < 0 for a in alphas):
        raise ConfigError("task weights must be >= 0")
    total = ad.scale(task_losses[0], alphas[0])
    for loss, alpha in zip(task_losses[1:], alphas[1:]):
        total = ad.add(total, ad.scale(loss, alpha))
    return total


def pairwise_cosine(g1: Tensor, g2: Tensor, eps: float = 1e-8) -> Tensor:
    """cos(g1, g2) with norms floored at eps, so zero vectors give 0.

    Computed as dot / sqrt(max(|g1|^2, eps^2) * max(|g2|^2, eps^2)); the
    flooring happens on the squared norms, where relu keeps the whole
    expression differentiable.
    """
    if g1.shape != g2.shape or g1.ndim != 1:
        raise ContractError(
            f"pairwise_cosine expects equal-length vectors, got {g1.shape}, {g2.shape}")
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    num = ad.dot(g1, g2)
    s1 = ad.log(ad.maximum_const(ad.dot(g1, g1), eps * eps))
    s2 = ad.log(ad.maximum_const(ad.dot(g2, g2), eps * eps))
    inv_norms = ad.exp(ad.scale(ad.add(s1, s2), -0.5))
    return ad.multiply(num, inv_norms)


def _apply_variant(cos: Tensor, variant: str) -> Tensor:
    if variant == "raw":
        return cos
    if variant == "relu":
        return ad.relu(cos)
    if variant == "abs":
        return ad.add(ad.relu(cos), ad.relu(ad.negate(cos)))
    raise ConfigError(f"unknown cosine variant '{variant}'")


def cosine_penalty(grads: Sequence[GradientMap], eps: float = 1e-8,
                   variant: str = "raw",
                   order: Sequence[Tensor] | None = None) -> Tensor:
    """Sum of pairwise gradient cosines over unordered task pairs.

    All maps must cover the same shared parameters; ``order`` overrides
    the canonical flattening order (default: the first map's parameter
    order). With fewer than two tasks the penalty is exactly zero.
    """
    if len(grads) < 2:
        return Tensor(0.0)
    if order is None:
        order = grads[0].params()
    flats = [ad.flatten_grads(g, order) for g in grads]
    total: Tensor | None = None
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            term = _apply_variant(pairwise_cosine(flats[i], flats[j], eps), variant)
            total = term if total is None else ad.add(total, term)
    return total


def total_loss(loss: Tensor, penalty: Tensor, lambda_: float) -> Tensor:
    """loss + lambda * penalty. With lambda 0 this is exactly the plain
    joint loss (the penalty term is not even added)."""
    if lambda_ < 0:
        raise ConfigError("lambda must be >= 0")
    if lambda_ == 0.0:
        return loss
    return ad.add(loss, ad.scale(penalty, lambda_))


# ---------------------------------------------------------------------------
# Dynamic task weighting
# ---------------------------------------------------------------------------

def update_dynamic_weights(state: WeightState, grad_norms: Sequence[float],
                           eps: float = 1e-8) -> WeightState:
    """Inverse-gradient-norm weights: tasks with small shared-parameter
    gradients get proportionally more weight, keeping the gradient
    contributions balanced.

    raw_t = mean(norms) / max(norm_t, eps); the raws are normalized to
    sum to T and clamped to [0.1, 10]. The rule is scale invariant:
    multiplying all norms by a positive constant leaves the result
    unchanged. Returns a new state; the input is not mutated.
    """
    T = len(state.alphas)
    if len(grad_norms) != T:
        raise ContractError(f"{len(grad_norms)} norms for {T} tasks")
    norms = [float(n) for n in grad_norms]
    if any(n < 0 for n in norms):
        raise ContractError("gradient norms must be >= 0")
    mean_norm = sum(norms) / T
    raw = np.array([mean_norm / max(n, eps) for n in norms])
    if raw.sum() <= 0:
        alphas = np.ones(T)
    else:
        alphas = raw * T / raw.sum()
        alphas = _clamp_to_simplex(alphas, T)
    new_alphas = [float(a) for a in alphas]
    history = state.history + [(new_alphas.copy(), norms)]
    return WeightState(alphas=new_alphas, history=history)


def _clamp_to_simplex(alphas: np.ndarray, target: float) -> np.ndarray:
    """Clamp into [ALPHA_MIN, ALPHA_MAX] while restoring sum == target.

    Coordinates pinned at a bound stay fixed; the remaining mass is
    redistributed proportionally over the free coordinates. Terminates
    in at most T passes.
    """
    alphas = np.clip(alphas, ALPHA_MIN, ALPHA_MAX)
    for _ in range(len(alphas) + 1):
        total = alphas.sum()
        if abs(total - target) <= 1e-12:
            return alphas
        free = (alphas > ALPHA_MIN) & (alphas < ALPHA_MAX)
        if not free.any():
            return alphas * (target / total)
        spare = target - alphas[~free].sum()
        scaled = alphas[free] * (spare / alphas[free].sum())
        alphas = alphas.copy()
        alphas[free] = scaled
        alphas = np.clip(alphas, ALPHA_MIN, ALPHA_MAX)
    return alphas
