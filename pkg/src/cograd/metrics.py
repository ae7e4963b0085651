"""Evaluation metrics: classification accuracy and ROUGE-1.

ROUGE-1 uses clipped multiset unigram overlap; F1 is the headline value
(precision and recall are reported alongside), and corpus scores are
arithmetic means of per-example scores.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError

METRIC_NAMES = ("acc", "rouge1_f", "rouge1_p", "rouge1_r")


@dataclass
class MetricReport:
    task_id: int
    name: str
    value: float
    n_examples: int

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ContractError(f"unknown metric name '{self.name}'")
        if not 0.0 <= self.value <= 1.0:
            raise ContractError(f"metric value {self.value} outside [0, 1]")
        if self.n_examples < 1:
            raise ContractError("a metric needs at least one example")


def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    if len(preds) != len(golds) or len(preds) == 0:
        raise ContractError(
            f"accuracy needs equal non-empty lists, got {len(preds)} and {len(golds)}")
    hits = sum(1 for p, g in zip(preds, golds) if p == g)
    return hits / len(preds)


def rouge1(candidate: Sequence, reference: Sequence) -> tuple[float, float, float]:
    """(precision, recall, f1) from clipped unigram counts.

    Duplicates are clipped: a token contributes at most its count in the
    other side. An empty candidate scores 0; an empty reference is a
    contract error.
    """
    if len(reference) == 0:
        raise ContractError("rouge1 needs a non-empty reference")
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    overlap = sum(min(n, ref_counts[tok]) for tok, n in cand_counts.items())
    precision = overlap / len(candidate) if candidate else 0.0
    recall = overlap / len(reference)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def corpus_rouge1(pairs: Sequence[tuple[Sequence, Sequence]],
                  task_id: int = 0) -> MetricReport:
    """Mean per-pair F1 as the headline corpus score."""
    return corpus_rouge1_components(pairs, task_id)["rouge1_f"]


def corpus_rouge1_components(pairs: Sequence[tuple[Sequence, Sequence]],
                             task_id: int = 0) -> dict[str, MetricReport]:
    """Mean precision, recall and F1 over candidate/reference pairs."""
    if len(pairs) == 0:
        raise ContractError("corpus_rouge1 needs at least one pair")
    totals = {"rouge1_p": 0.0, "rouge1_r": 0.0, "rouge1_f": 0.0}
    for candidate, reference in pairs:
        p, r, f = rouge1(candidate, reference)
        totals["rouge1_p"] += p
        totals["rouge1_r"] += r
        totals["rouge1_f"] += f
    n = len(pairs)
    return {name: MetricReport(task_id=task_id, name=name, value=total / n,
                               n_examples=n)
            for name, total in totals.items()}
