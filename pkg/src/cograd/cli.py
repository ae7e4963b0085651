"""Command-line front end.

Commands: gen-data, train, eval, compare, curves. All behavior comes
from a JSON config file (strict schema, unknown keys rejected) with
command-line flag overrides; the only environment variable honored is
COGRAD_LOG (quiet | info | debug).

Exit codes: 0 success, 2 usage/config/data errors, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from typing import Any, Sequence

from . import trainer as tr
from .data import (
    Example,
    SyntheticSpec,
    Vocabulary,
    generate_synthetic,
    load_jsonl,
    write_jsonl,
)
from .errors import CogradError, ConfigError, NumericError
from .ioutil import atomic_write_text
from .metrics import MetricReport
from .model import load_checkpoint, save_checkpoint
from .objective import GRAD_MODES, VARIANTS, RegularizerConfig, TaskSpec
from .trainer import TrainConfig, comparison_csv, curves_csv

log = logging.getLogger("cograd.cli")

DEFAULT_CONFIG: dict = {
    "seed": 17,
    "dims": {"feature": 64, "hidden": 128},
    "tasks": [
        {"id": 1, "kind": "classification", "loss": "cross_entropy",
         "alpha": 1.0, "lr": 0.05, "num_classes": 2},
        {"id": 2, "kind": "generation", "loss": "sequence_cross_entropy",
         "alpha": 1.0, "lr": 0.04},
    ],
    "train": {
        "epochs": 100, "batch_size": 32, "base_lr": 0.02,
        "pretrain_epochs": 0, "pretrain_lr": 0.1,
        "mode": "multi-task", "single_task": None,
        "dynamic_weights": False, "max_decode_len": 16,
    },
    "regularizer": {"lambda": 0.1, "variant": "raw", "grad_mode": "exact",
                    "eps": 1e-8},
    "lora": {"enabled": False, "rank": 4, "scale": 1.0},
    "synthetic": {
        "seed": 17, "n_examples": [400, 120], "n_polar": 6, "n_keyword": 6,
        "n_filler": 20, "sentence_len": [4, 7], "rho": 0.9, "max_summary": 2,
    },
    "paths": {"data_dir": "data", "out_dir": "out", "checkpoint": "model.ckpt"},
}

# field path -> (type(s), validator or None); every leaf key must appear here.
_NUMBER = (int, float)


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


_SCHEMA: dict[str, tuple] = {
    "seed": (int, None),
    "dims.feature": (int, _positive),
    "dims.hidden": (int, _positive),
    "train.epochs": (int, _positive),
    "train.batch_size": (int, _positive),
    "train.base_lr": (_NUMBER, _positive),
    "train.pretrain_epochs": (int, _non_negative),
    "train.pretrain_lr": (_NUMBER, _positive),
    "train.mode": (str, lambda m: m in tr.MODES),
    "train.single_task": ((int, type(None)), None),
    "train.dynamic_weights": (bool, None),
    "train.max_decode_len": (int, _positive),
    "regularizer.lambda": (_NUMBER, _non_negative),
    "regularizer.variant": (str, lambda v: v in VARIANTS),
    "regularizer.grad_mode": (str, lambda v: v in GRAD_MODES),
    "regularizer.eps": (_NUMBER, _positive),
    "lora.enabled": (bool, None),
    "lora.rank": (int, _positive),
    "lora.scale": (_NUMBER, _non_negative),
    "synthetic.seed": (int, None),
    "synthetic.n_examples": ((int, list), None),
    "synthetic.n_polar": (int, lambda x: x >= 2),
    "synthetic.n_keyword": (int, lambda x: x >= 2),
    "synthetic.n_filler": (int, _positive),
    "synthetic.sentence_len": (list, None),
    "synthetic.rho": (_NUMBER, lambda x: 0.0 <= x <= 1.0),
    "synthetic.max_summary": (int, _positive),
    "paths.data_dir": (str, None),
    "paths.out_dir": (str, None),
    "paths.checkpoint": (str, None),
}

_TASK_SCHEMA: dict[str, tuple] = {
    "id": (int, _positive),
    "kind": (str, None),
    "loss": (str, None),
    "alpha": (_NUMBER, _non_negative),
    "lr": (_NUMBER, _non_negative),
    "num_classes": (int, lambda x: x >= 2),
}


def validate_config(cfg: dict) -> None:
    """Strict schema check: unknown keys are errors, ranges enforced."""
    for section, content in cfg.items():
        if section == "tasks":
            if not isinstance(content, list) or not content:
                raise ConfigError("tasks: must be a non-empty list")
            for i, task in enumerate(content):
                if not isinstance(task, dict):
                    raise ConfigError(f"tasks[{i}]: must be an object")
                for key, value in task.items():
                    if key not in _TASK_SCHEMA:
                        raise ConfigError(f"tasks[{i}].{key}: unknown key")
                    _check_leaf(f"tasks[{i}].{key}", value, _TASK_SCHEMA[key])
            continue
        if isinstance(content, dict):
            for key, value in content.items():
                path = f"{section}.{key}"
                if path not in _SCHEMA:
                    raise ConfigError(f"{path}: unknown key")
                _check_leaf(path, value, _SCHEMA[path])
        else:
            if section not in _SCHEMA:
                raise ConfigError(f"{section}: unknown key")
            _check_leaf(section, content, _SCHEMA[section])


def _check_leaf(path: str, value, rule: tuple) -> None:
    types, validator = rule
    if isinstance(value, bool) and types is not bool and (
            not isinstance(types, tuple) or bool not in types):
        raise ConfigError(f"{path}: expected {types}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {types}, got {type(value).__name__}")
    if validator is not None and not validator(value):
        raise ConfigError(f"{path}: value {value!r} out of range")


def _merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if key == "tasks":
            out["tasks"] = copy.deepcopy(value)
        elif isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(copy.deepcopy(value))
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None, overrides: dict[str, Any]) -> dict:
    """defaults <- config file <- command-line flags, validated strictly."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        validate_config(user)
        cfg = _merge(cfg, user)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if key:
            cfg[section][key] = value
        else:
            cfg[section] = value
    validate_config(cfg)
    return cfg


def _task_specs(cfg: dict) -> list[TaskSpec]:
    specs = []
    for entry in cfg["tasks"]:
        specs.append(TaskSpec(
            id=entry["id"], kind=entry["kind"], loss_kind=entry["loss"],
            alpha=entry.get("alpha", 1.0), lr=entry.get("lr", 0.1),
            num_classes=entry.get("num_classes", 2)))
    return specs


def _synthetic_spec(cfg: dict) -> SyntheticSpec:
    s = cfg["synthetic"]
    n = s["n_examples"]
    return SyntheticSpec(
        seed=s["seed"],
        n_examples=tuple(n) if isinstance(n, list) else n,
        n_polar=s["n_polar"], n_keyword=s["n_keyword"], n_filler=s["n_filler"],
        sentence_len=tuple(s["sentence_len"]), rho=s["rho"],
        max_summary=s["max_summary"])


def _train_config(cfg: dict, vocab_size: int) -> TrainConfig:
    t = cfg["train"]
    r = cfg["regularizer"]
    lora = cfg["lora"]
    return TrainConfig(
        tasks=_task_specs(cfg),
        dims=(vocab_size, cfg["dims"]["feature"], cfg["dims"]["hidden"]),
        seed=cfg["seed"], epochs=t["epochs"], batch_size=t["batch_size"],
        base_lr=t["base_lr"],
        regularizer=RegularizerConfig(lambda_=r["lambda"], eps=r["eps"],
                                      variant=r["variant"],
                                      grad_mode=r["grad_mode"]),
        dynamic_weights=t["dynamic_weights"],
        pretrain_epochs=t["pretrain_epochs"], pretrain_lr=t["pretrain_lr"],
        mode=t["mode"], single_task=t["single_task"],
        lora=lora["enabled"], lora_rank=lora["rank"], lora_scale=lora["scale"],
        max_decode_len=t["max_decode_len"])


def _task_names(cfg: dict) -> dict[int, str]:
    return {t["id"]: f"task{t['id']}" for t in cfg["tasks"]}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    spec = _synthetic_spec(cfg)
    datasets, vocab = generate_synthetic(spec)
    data_dir = cfg["paths"]["data_dir"]
    os.makedirs(data_dir, exist_ok=True)
    names = _task_names(cfg)
    for tid, splits in datasets.items():
        for split, examples in splits.items():
            path = os.path.join(data_dir, f"task{tid}_{split}.jsonl")
            write_jsonl(examples, vocab, path, names)
            print(f"task{tid} {split}: {len(examples)} examples -> {path}")
    vocab_path = os.path.join(data_dir, "vocab.json")
    atomic_write_text(vocab_path, vocab.to_json())
    print(f"vocabulary: {len(vocab)} ids -> {vocab_path}")
    return 0


def _load_datasets(cfg: dict, splits: Sequence[str] = ("train", "valid", "test")
                   ) -> tuple[dict[int, dict[str, list[Example]]], Vocabulary]:
    data_dir = cfg["paths"]["data_dir"]
    vocab_path = os.path.join(data_dir, "vocab.json")
    if not os.path.exists(vocab_path):
        raise ConfigError(f"missing vocabulary file {vocab_path}; "
                          "run gen-data first")
    with open(vocab_path, "r", encoding="utf-8") as fh:
        vocab = Vocabulary.from_json(fh.read())
    names = _task_names(cfg)
    task_ids = {name: tid for tid, name in names.items()}
    task_kinds = {t["id"]: t["kind"] for t in cfg["tasks"]}
    datasets: dict[int, dict[str, list[Example]]] = {}
    for tid in sorted(names):
        datasets[tid] = {}
        for split in splits:
            path = os.path.join(data_dir, f"task{tid}_{split}.jsonl")
            if not os.path.exists(path):
                raise ConfigError(f"missing dataset file {path}; run gen-data first")
            datasets[tid][split] = load_jsonl(path, vocab, task_ids, task_kinds)
    return datasets, vocab


def cmd_train(cfg: dict) -> int:
    datasets, vocab = _load_datasets(cfg)
    train_cfg = _train_config(cfg, len(vocab))
    params, records = tr.train(train_cfg, datasets)

    out_dir = cfg["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    curves_path = os.path.join(out_dir, "curves.csv")
    atomic_write_text(curves_path, curves_csv(records))
    ckpt_path = os.path.join(out_dir, cfg["paths"]["checkpoint"])
    save_checkpoint(params, ckpt_path)

    final_test = [r for r in records if r.split == "test"][-1]
    print(f"checkpoint -> {ckpt_path}")
    print(f"curves -> {curves_path}")
    for tid in sorted(final_test.task_losses):
        name, value = final_test.task_metrics[tid]
        print(f"task{tid}: test loss {final_test.task_losses[tid]:.6g} "
              f"{name} {value:.6g}")
    return 0


def cmd_eval(cfg: dict, checkpoint: str | None, task_filter: int | None) -> int:
    datasets, vocab = _load_datasets(cfg, splits=("test",))
    ckpt_path = checkpoint or os.path.join(cfg["paths"]["out_dir"],
                                           cfg["paths"]["checkpoint"])
    expect = (len(vocab), cfg["dims"]["feature"], cfg["dims"]["hidden"])
    params = load_checkpoint(ckpt_path, expect_dims=expect)
    train_cfg = _train_config(cfg, len(vocab))
    if task_filter is not None:
        train_cfg = tr.replace(train_cfg, mode="single-task",
                               single_task=task_filter)
    stats = tr.evaluate(params, {tid: datasets[tid]["test"]
                                 for tid in datasets
                                 if task_filter in (None, tid)}, train_cfg)

    header = f"{'task':>6} {'loss':>12} {'metric':>10} {'value':>12}"
    print(header)
    lines = ["task,loss,metric_name,metric_value"]
    for tid in sorted(stats):
        s = stats[tid]
        print(f"{tid:>6} {s['loss']:>12.6g} {s['metric_name']:>10} "
              f"{s['metric_value']:>12.6g}")
        lines.append(f"{tid},{tr._fmt(s['loss'])},{s['metric_name']},"
                     f"{tr._fmt(s['metric_value'])}")
    out_dir = cfg["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "eval.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_compare(cfg: dict) -> int:
    datasets, vocab = _load_datasets(cfg)
    train_cfg = _train_config(cfg, len(vocab))
    rows, _records = tr.run_baseline_comparison(train_cfg, datasets)
    out_dir = cfg["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "comparison.csv")
    atomic_write_text(path, comparison_csv(rows))

    by_run = {r["run"]: r for r in rows}
    dominates = _mtl_dominates(by_run)
    print(f"{'run':>12} {'task':>5} {'acc':>8} {'rouge1_f':>9}")
    for row in rows:
        acc = "" if row["acc"] is None else f"{row['acc']:.4f}"
        rouge = "" if row["rouge1_f"] is None else f"{row['rouge1_f']:.4f}"
        flag = " *" if row["run"] == "mtl_lambda" and dominates else ""
        print(f"{row['run']:>12} {row['task']:>5} {acc:>8} {rouge:>9}{flag}")
    if dominates:
        print("* multi-task run matches or beats every single-task baseline")
    print(f"comparison -> {path}")
    return 0


def _mtl_dominates(by_run: dict[str, dict]) -> bool:
    mtl = by_run.get("mtl_lambda")
    if mtl is None:
        return False
    for name, row in by_run.items():
        if not name.startswith("single_"):
            continue
        for metric in ("acc", "rouge1_f"):
            if row[metric] is None:
                continue
            if mtl[metric] is None or mtl[metric] < row[metric]:
                return False
    return True


def cmd_curves(csv_path: str, out_path: str) -> int:
    rows = _parse_curves_csv(csv_path)
    svg = render_curves_svg(rows)
    atomic_write_text(out_path, svg)
    print(f"chart -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Curve rendering (deterministic SVG)
# ---------------------------------------------------------------------------

_EXPECTED_HEADER = "epoch,split,task,loss,metric_name,metric_value,wall_s"


def _parse_curves_csv(path: str) -> list[dict]:
    from .errors import FormatError
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _EXPECTED_HEADER:
        raise FormatError(f"{path}:1: expected header '{_EXPECTED_HEADER}'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 7:
            raise FormatError(f"{path}:{lineno}: expected 7 columns, got {len(cells)}")
        try:
            rows.append({"epoch": int(cells[0]), "split": cells[1],
                         "task": int(cells[2]), "loss": float(cells[3])})
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
_W, _H = 640, 420
_ML, _MR, _MT, _MB = 60, 20, 20, 50


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def render_curves_svg(rows: list[dict]) -> str:
    """One polyline per (split, task) of loss vs epoch; byte output is a
    pure function of the parsed rows."""
    series: dict[tuple[str, int], list[tuple[int, float]]] = {}
    for row in rows:
        series.setdefault((row["split"], row["task"]), []).append(
            (row["epoch"], row["loss"]))
    for pts in series.values():
        pts.sort()

    epochs = [e for pts in series.values() for e, _ in pts]
    losses = [v for pts in series.values() for _, v in pts]
    x_lo, x_hi = min(epochs), max(epochs)
    y_lo, y_hi = 0.0, max(losses) * 1.05 or 1.0
    if x_hi == x_lo:
        x_hi = x_lo + 1

    def sx(e: float) -> float:
        return _ML + (e - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def sy(v: float) -> float:
        return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
        'stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
    ]
    for t in _ticks(x_lo, x_hi):
        x = sx(t)
        parts.append(f'<line x1="{x:.2f}" y1="{_H - _MB}" x2="{x:.2f}" '
                     f'y2="{_H - _MB + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{_H - _MB + 18}" font-size="11" '
                     f'text-anchor="middle">{t:.0f}</text>')
    for t in _ticks(y_lo, y_hi):
        y = sy(t)
        parts.append(f'<line x1="{_ML - 5}" y1="{y:.2f}" x2="{_ML}" y2="{y:.2f}" '
                     'stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{y + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{t:.3g}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2:.2f}" y="{_H - 12}" '
                 'font-size="12" text-anchor="middle">epoch</text>')
    parts.append(f'<text x="16" y="{(_MT + _H - _MB) / 2:.2f}" font-size="12" '
                 f'text-anchor="middle" transform="rotate(-90 16 '
                 f'{(_MT + _H - _MB) / 2:.2f})">loss</text>')

    keys = sorted(series, key=lambda k: (k[0] != "train", k[1]))
    for idx, key in enumerate(keys):
        split, task = key
        color = _PALETTE[idx % len(_PALETTE)]
        pts = series[key]
        coords = " ".join(f"{sx(e):.2f},{sy(v):.2f}" for e, v in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for e, v in pts:
            parts.append(f'<circle cx="{sx(e):.2f}" cy="{sy(v):.2f}" r="1.8" '
                         f'fill="{color}"/>')
        ly = _MT + 16 + 16 * idx
        lx = _W - _MR - 130
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly}" font-size="11">'
                     f'{split} task {task}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _setup_logging() -> None:
    level_name = os.environ.get("COGRAD_LOG", "info").lower()
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(level_name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cograd",
        description="Multi-task trainer with a gradient-cosine conflict "
                    "regularizer.")
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument("--seed", type=int, default=None,
                        help="override the training seed")
    parser.add_argument("--out-dir", default=None, help="override paths.out_dir")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic datasets")

    p_train = sub.add_parser("train", help="train and write checkpoint + curves")
    p_train.add_argument("--lambda", dest="lambda_", type=float, default=None,
                         help="override regularizer.lambda")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--mode", choices=tr.MODES, default=None)
    p_train.add_argument("--task", type=int, default=None,
                         help="task id for single-task mode")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--task", type=int, default=None,
                        help="restrict to one task id")

    p_cmp = sub.add_parser("compare", help="multi-task vs single-task table")
    p_cmp.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p_cmp.add_argument("--epochs", type=int, default=None)

    p_curves = sub.add_parser("curves", help="render curves.csv as an SVG chart")
    p_curves.add_argument("csv", help="path to curves.csv")
    p_curves.add_argument("out", help="output SVG path")
    return parser


def _collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["paths.out_dir"] = args.out_dir
    if getattr(args, "lambda_", None) is not None:
        overrides["regularizer.lambda"] = args.lambda_
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if getattr(args, "mode", None) is not None:
        overrides["train.mode"] = args.mode
    if args.command == "train" and getattr(args, "task", None) is not None:
        overrides["train.single_task"] = args.task
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "curves":
            return cmd_curves(args.csv, args.out)
        cfg = load_config(args.config, _collect_overrides(args))
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.task)
        if args.command == "compare":
            return cmd_compare(cfg)
        parser.error(f"unknown command {args.command}")
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except (CogradError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
