"""Training protocol: optional shared-encoder pretraining, per-round
joint optimization of the regularized multi-task loss, single-task
baseline mode, evaluation, and loss-curve records.

Each optimization step consumes one batch per task (a Round), computes
every task's shared-parameter gradient at the same point, assembles the
weighted joint loss plus the cosine penalty, and applies one plain
gradient-descent update: the shared encoder moves with the base
learning rate, each head with its own task learning rate. Plain descent
keeps the applied update equal to the loss gradient, which is what the
finite-difference acceptance checks verify.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import objective as ob
from .autodiff import Tape, Tensor
from .data import Example, Round, make_rounds
from .errors import ConfigError, ContractError, NumericError
from .metrics import MetricReport, accuracy, corpus_rouge1_components
from .model import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    ClassifierHead,
    EncoderParams,
    GeneratorHead,
    LoraAdapter,
    ModelParams,
    RegressorHead,
    classify_batch,
    encode_batch,
    generate_greedy,
    generate_logits,
    init_model,
)
from .objective import RegularizerConfig, TaskSpec, WeightState

log = logging.getLogger("cograd.trainer")

MODES = ("multi-task", "single-task")


@dataclass
class TrainConfig:
    tasks: list[TaskSpec]
    dims: tuple[int, int, int]  # (V, d, d_h)
    seed: int = 17
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 0.02
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    dynamic_weights: bool = False
    pretrain_epochs: int = 0
    pretrain_lr: float = 0.1
    mode: str = "multi-task"
    single_task: int | None = None
    lora: bool = False
    lora_rank: int = 4
    lora_scale: float = 1.0
    max_decode_len: int = 16

    def __post_init__(self):
        ob.validate_tasks(self.tasks)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.mode == "single-task":
            ids = {t.id for t in self.tasks}
            if self.single_task not in ids:
                raise ConfigError(
                    f"single-task mode needs a task id from {sorted(ids)}")
        if self.lora and self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.max_decode_len < 1:
            raise ConfigError("max_decode_len must be >= 1")

    def active_tasks(self) -> list[TaskSpec]:
        tasks = ob.validate_tasks(self.tasks)
        if self.mode == "single-task":
            return [t for t in tasks if t.id == self.single_task]
        return tasks


@dataclass
class EpochRecord:
    """Per-epoch, per-split curve data (one record per split)."""

    epoch: int
    split: str
    task_losses: dict[int, float]
    task_metrics: dict[int, tuple[str, float]]
    wall_s: float


@dataclass
class StepResult:
    params: ModelParams
    weight_state: WeightState
    task_losses: dict[int, float]
    cosine_value: float


class _AttachedModel:
    """A model view whose tensors are leaves of one tape, with the
    original tensors kept for the update."""

    def __init__(self, tape: Tape, params: ModelParams):
        self.tape = tape
        self.source = params
        self.encoder = EncoderParams(
            *(tape.attach(t) for t in params.encoder.param_list()))
        self.heads = {}
        self.adapters = {}
        for tid, head in params.heads.items():
            clone = copy.copy(head)
            clone.set_params([tape.attach(t) for t in head.param_list()])
            self.heads[tid] = clone
        for tid, adapter in params.adapters.items():
            clone = copy.copy(adapter)
            clone.set_params([tape.attach(t) for t in adapter.param_list()])
            self.adapters[tid] = clone

    def shared_pairs(self) -> list[tuple[Tensor, Tensor]]:
        return list(zip(self.source.encoder.param_list(),
                        self.encoder.param_list()))

    def task_pairs(self, tid: int) -> list[tuple[Tensor, Tensor]]:
        pairs = list(zip(self.source.heads[tid].param_list(),
                         self.heads[tid].param_list()))
        if tid in self.adapters:
            pairs += list(zip(self.source.adapters[tid].param_list(),
                              self.adapters[tid].param_list()))
        return pairs

# ---------------------------------------------------------------------------
# Batch losses
# ---------------------------------------------------------------------------

def _classification_loss(h: Tensor, head: ClassifierHead,
                         batch: Sequence[Example]) -> Tensor:
    logits = classify_batch(h, head)
    ce = ob.cross_entropy_rows(logits, [ex.target for ex in batch])
    return ad.mean(ce)


def _generation_loss(h: Tensor, head: GeneratorHead,
                     batch: Sequence[Example]) -> Tensor:
    """Teacher-forced sequence loss: per-example mean over steps, then
    mean over the batch. All steps of all examples share one matmul."""
    rep_ids: list[int] = []
    prev_ids: list[int] = []
    targets: list[int] = []
    weights: list[float] = []
    for i, ex in enumerate(batch):
        seq = ex.target
        if not isinstance(seq, list) or not seq or seq[-1] != EOS_ID:
            raise ContractError(
                f"generation target must be a token list ending in EOS, got {seq!r}")
        prev = [BOS_ID] + seq[:-1]
        rep_ids.extend([i] * len(seq))
        prev_ids.extend(prev)
        targets.extend(seq)
        weights.extend([1.0 / (len(seq) * len(batch))] * len(seq))
    rows = ad.gather_rows(h, rep_ids)
    logits = generate_logits(rows, prev_ids, head)
    ce = ob.cross_entropy_rows(logits, targets)
    return ad.sum_(ad.multiply(ce, Tensor(np.array(weights))))


def _regression_loss(h: Tensor, head: RegressorHead,
                     batch: Sequence[Example]) -> Tensor:
    preds = ad.matmul(h, head.w)  # [B, 1]
    targets = Tensor(np.array([[float(ex.target)] for ex in batch]))
    diff = ad.subtract(preds, targets)
    return ad.mean(ad.multiply(diff, diff))


def task_batch_loss(model: "_AttachedModel | ModelParams", task: TaskSpec,
                    batch: Sequence[Example]) -> Tensor:
    """Mean per-example loss of one task's batch.

    ``model`` may be a tape-attached view (training) or plain detached
    ModelParams (evaluation, where no gradients are needed).
    """
    if not batch:
        raise ContractError(f"empty batch for task {task.id}")
    adapter = model.adapters.get(task.id)
    h = encode_batch([ex.tokens for ex in batch], model.encoder, adapter)
    head = model.heads[task.id]
    if task.kind == "classification":
        return _classification_loss(h, head, batch)
    if task.kind == "generation":
        return _generation_loss(h, head, batch)
    return _regression_loss(h, head, batch)


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------

def train_step(params: ModelParams, round_: Round, cfg: TrainConfig,
               weight_state: WeightState) -> StepResult:
    """Forward every task's batch, assemble the regularized joint loss,
    and apply one gradient-descent update.

    With grad_mode "exact" the per-task gradients are tape nodes, so the
    update includes the penalty's second-order term; with "detached"
    they are constants and the penalty contributes no gradient.
    """
    tasks = cfg.active_tasks()
    missing = [t.id for t in tasks if t.id not in round_.batches]
    if missing:
        raise ContractError(f"round lacks batches for tasks {missing}")
    reg = cfg.regularizer

    tape = Tape()
    attached = _AttachedModel(tape, params)
    shared_leaves = [leaf for _, leaf in attached.shared_pairs()]

    losses = [task_batch_loss(attached, t, round_.batches[t.id]) for t in tasks]

    need_cosine = reg.lambda_ > 0 and len(tasks) >= 2
    need_grads = need_cosine or cfg.dynamic_weights
    per_task_grads = []
    if need_grads:
        higher = need_cosine and reg.grad_mode == "exact"
        per_task_grads = [ad.backward(loss, shared_leaves, higher_order=higher)
                          for loss in losses]

    if cfg.dynamic_weights:
        norms = [g.norm() for g in per_task_grads]
        weight_state = ob.update_dynamic_weights(weight_state, norms, reg.eps)
        alphas = weight_state.alphas
    else:
        alphas = [t.alpha for t in tasks]

    joint = ob.joint_loss(losses, alphas)
    if need_cosine:
        penalty = ob.cosine_penalty(per_task_grads, eps=reg.eps,
                                    variant=reg.variant, order=shared_leaves)
        total = ob.total_loss(joint, penalty, reg.lambda_)
        cosine_value = float(penalty.values)
    else:
        total = joint
        cosine_value = 0.0

    all_leaves = list(shared_leaves)
    for t in tasks:
        all_leaves.extend(leaf for _, leaf in attached.task_pairs(t.id))
    gmap = ad.backward(total, all_leaves)

    for orig, leaf in attached.shared_pairs():
        orig.values = orig.values - cfg.base_lr * gmap.grad(leaf).values
    for t in tasks:
        for orig, leaf in attached.task_pairs(t.id):
            orig.values = orig.values - t.lr * gmap.grad(leaf).values

    task_losses = {t.id: float(loss.values) for t, loss in zip(tasks, losses)}
    return StepResult(params=params, weight_state=weight_state,
                      task_losses=task_losses, cosine_value=cosine_value)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def pretrain_shared(params: ModelParams, corpus: Sequence[Sequence[int]],
                    epochs: int, lr: float, seed: int,
                    batch_size: int = 16) -> tuple[ModelParams, list[float]]:
    """Masked-token pretraining of the shared encoder.

    One random token per sentence is replaced by UNK and a temporary
    linear head over the representation predicts its id. Only the
    encoder and the temporary head are updated; the head is discarded.
    Returns the params and the mean masked loss per epoch. epochs=0
    leaves the params bit-for-bit unchanged.
    """
    if epochs == 0:
        return params, []
    if not corpus:
        raise ContractError("pretraining needs a non-empty corpus")
    V, d, _ = params.dims
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(d)
    head_w = Tensor(rng.uniform(-bound, bound, size=(d, V)))
    head_b = Tensor(np.zeros(V))

    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch_idx = order[start:start + batch_size]
            masked, labels = [], []
            for i in batch_idx:
                tokens = list(corpus[i])
                pos = int(rng.integers(0, len(tokens)))
                labels.append(tokens[pos])
                tokens[pos] = UNK_ID
                masked.append(tokens)
            tape = Tape()
            attached = _AttachedModel(tape, params)
            w_leaf, b_leaf = tape.attach(head_w), tape.attach(head_b)
            h = encode_batch(masked, attached.encoder)
            logits = ad.add(ad.matmul(h, w_leaf), b_leaf)
            loss = ad.mean(ob.cross_entropy_rows(logits, labels))
            leaves = [leaf for _, leaf in attached.shared_pairs()]
            gmap = ad.backward(loss, leaves + [w_leaf, b_leaf])
            for orig, leaf in attached.shared_pairs():
                orig.values = orig.values - lr * gmap.grad(leaf).values
            head_w.values = head_w.values - lr * gmap.grad(w_leaf).values
            head_b.values = head_b.values - lr * gmap.grad(b_leaf).values
            total += float(loss.values) * len(batch_idx)
            count += len(batch_idx)
        epoch_losses.append(total / count)
    return params, epoch_losses


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(params: ModelParams, split_datasets: dict[int, list[Example]],
             cfg: TrainConfig) -> dict[int, dict]:
    """Per-task mean loss and metric on one split; mutates nothing.

    Classification reports accuracy over argmax predictions, generation
    reports corpus ROUGE-1 (F1 headline) over greedy decodes, and
    regression reports its mean squared error as the metric value.
    """
    results: dict[int, dict] = {}
    for task in cfg.active_tasks():
        examples = split_datasets.get(task.id)
        if not examples:
            raise ContractError(f"no evaluation data for task {task.id}")
        adapter = params.adapters.get(task.id)
        h = encode_batch([ex.tokens for ex in examples], params.encoder, adapter)
        loss = float(task_batch_loss(params, task, examples).values)

        head = params.heads[task.id]
        reports: dict[str, MetricReport] = {}
        if task.kind == "classification":
            logits = classify_batch(h, head)
            preds = [int(np.argmax(row)) for row in logits.values]
            value = accuracy(preds, [ex.target for ex in examples])
            name = "acc"
            reports["acc"] = MetricReport(task_id=task.id, name="acc",
                                          value=value, n_examples=len(examples))
        elif task.kind == "generation":
            pairs = []
            for i, ex in enumerate(examples):
                h_i = ad.reshape(ad.gather_rows(h, [i]), (h.shape[1],))
                decoded = generate_greedy(h_i, head, cfg.max_decode_len)
                reference = [t for t in ex.target if t != EOS_ID]
                pairs.append((decoded, reference))
            reports = corpus_rouge1_components(pairs, task_id=task.id)
            name, value = "rouge1_f", reports["rouge1_f"].value
        else:
            name, value = "mse", loss
        results[task.id] = {"loss": loss, "metric_name": name,
                            "metric_value": value, "reports": reports}
    return results


# ---------------------------------------------------------------------------
# Full training run
# ---------------------------------------------------------------------------

def train(cfg: TrainConfig, datasets: dict[int, dict[str, list[Example]]],
          params: ModelParams | None = None
          ) -> tuple[ModelParams, list[EpochRecord]]:
    """Optional pretraining, then per epoch: build rounds, step through
    them, and evaluate on the train and test splits. Deterministic per
    (cfg, datasets)."""
    tasks = cfg.active_tasks()
    for task in tasks:
        if task.id not in datasets:
            raise ConfigError(f"no dataset for configured task {task.id}")
    if params is None:
        params = init_model(cfg.seed, cfg.dims, cfg.tasks,
                            lora_rank=cfg.lora_rank if cfg.lora else None,
                            lora_scale=cfg.lora_scale)

    if cfg.pretrain_epochs > 0:
        corpus = [ex.tokens for t in tasks for ex in datasets[t.id]["train"]]
        params, pre_losses = pretrain_shared(
            params, corpus, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed,
            cfg.batch_size)
        log.info("pretraining done: masked loss %.4f -> %.4f",
                 pre_losses[0], pre_losses[-1])

    weight_state = WeightState(alphas=[t.alpha for t in tasks])
    records: list[EpochRecord] = []
    train_splits = {t.id: datasets[t.id]["train"] for t in tasks}
    test_splits = {t.id: datasets[t.id]["test"] for t in tasks}

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        rounds = make_rounds(train_splits, cfg.batch_size, cfg.seed, epoch)
        for r_idx, round_ in enumerate(rounds):
            try:
                result = train_step(params, round_, cfg, weight_state)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite value at epoch {epoch}, round {r_idx}: {exc}"
                ) from exc
            params, weight_state = result.params, result.weight_state
        elapsed = time.perf_counter() - started
        for split, split_data in (("train", train_splits), ("test", test_splits)):
            stats = evaluate(params, split_data, cfg)
            records.append(EpochRecord(
                epoch=epoch,
                split=split,
                task_losses={tid: s["loss"] for tid, s in stats.items()},
                task_metrics={tid: (s["metric_name"], s["metric_value"])
                              for tid, s in stats.items()},
                wall_s=elapsed,
            ))
        last = records[-1]
        log.info("epoch %d: test losses %s", epoch,
                 {t: round(v, 4) for t, v in last.task_losses.items()})
    return params, records


# ---------------------------------------------------------------------------
# Baseline comparison
# ---------------------------------------------------------------------------

_KIND_ABBREV = {"classification": "cls", "generation": "gen", "regression": "reg"}


def comparison_run_names(cfg: TrainConfig) -> list[str]:
    names = ["mtl_lambda", "mtl_plain"]
    seen: dict[str, int] = {}
    for task in ob.validate_tasks(cfg.tasks):
        abbrev = _KIND_ABBREV[task.kind]
        seen[abbrev] = seen.get(abbrev, 0) + 1
        suffix = str(task.id) if seen[abbrev] > 1 else ""
        names.append(f"single_{abbrev}{suffix}")
    return names


def run_baseline_comparison(cfg: TrainConfig,
                            datasets: dict[int, dict[str, list[Example]]]
                            ) -> tuple[list[dict], dict[str, list[EpochRecord]]]:
    """Train (a) multi-task with the configured lambda, (b) multi-task
    with lambda 0, and (c) one single-task run per task, all from the
    same seed/dims/epochs, and tabulate test accuracy and ROUGE-1 F1.

    Returns (rows, per-run epoch records). Row order and content are
    deterministic.
    """
    if cfg.mode != "multi-task":
        raise ConfigError("run_baseline_comparison needs a multi-task config")
    names = comparison_run_names(cfg)
    configs: dict[str, TrainConfig] = {
        "mtl_lambda": cfg,
        "mtl_plain": replace(cfg, regularizer=replace(cfg.regularizer, lambda_=0.0)),
    }
    tasks = ob.validate_tasks(cfg.tasks)
    for name, task in zip(names[2:], tasks):
        configs[name] = replace(
            cfg, mode="single-task", single_task=task.id,
            regularizer=replace(cfg.regularizer, lambda_=0.0))

    rows: list[dict] = []
    all_records: dict[str, list[EpochRecord]] = {}
    for name in names:
        run_cfg = configs[name]
        log.info("comparison run '%s' starting", name)
        params, records = train(run_cfg, datasets)
        all_records[name] = records
        stats = evaluate(params, {t.id: datasets[t.id]["test"]
                                  for t in run_cfg.active_tasks()}, run_cfg)
        row = {"run": name, "task": "all" if run_cfg.mode == "multi-task"
               else str(run_cfg.single_task), "acc": None, "rouge1_f": None}
        for tid, s in stats.items():
            if s["metric_name"] in ("acc", "rouge1_f") and row[s["metric_name"]] is None:
                row[s["metric_name"]] = s["metric_value"]
        rows.append(row)
    return rows, all_records


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def curves_csv(records: Sequence[EpochRecord]) -> str:
    """Loss-curve CSV: one row per (epoch, split, task), ordered by
    epoch, then split (train before test), then task id.

    The wall_s column is written as 0 so reruns of the same config are
    byte-identical; measured times live on the EpochRecord only.
    """
    split_rank = {"train": 0, "test": 1}
    ordered = sorted(records, key=lambda r: (r.epoch, split_rank[r.split]))
    lines = ["epoch,split,task,loss,metric_name,metric_value,wall_s"]
    for rec in ordered:
        for tid in sorted(rec.task_losses):
            name, value = rec.task_metrics[tid]
            lines.append(",".join([
                str(rec.epoch), rec.split, str(tid), _fmt(rec.task_losses[tid]),
                name, _fmt(value), _fmt(0.0),
            ]))
    return "\n".join(lines) + "\n"


def comparison_csv(rows: Sequence[dict]) -> str:
    lines = ["run,task,acc,rouge1_f"]
    for row in rows:
        acc = "" if row["acc"] is None else _fmt(row["acc"])
        rouge = "" if row["rouge1_f"] is None else _fmt(row["rouge1_f"])
        lines.append(f"{row['run']},{row['task']},{acc},{rouge}")
    return "\n".join(lines) + "\n"
