"""Tokenization, vocabulary, dataset ingestion and the synthetic corpus.

The synthetic generator produces two correlated tasks at desk scale: a
polarity classification task (label = majority polarity of the polar
tokens in a sentence) and an extractive summarization task (target =
the keyword tokens of a sentence, in input order). A correlation knob
rho in [0, 1] couples the two: inside summarization sentences, polar
tokens agree with the sentence's keyword polarity with probability rho.
Extractive-by-construction targets give ROUGE-1 an interpretable
ceiling of 1.0.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError, InputError
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

log = logging.getLogger("cograd.data")

RESERVED = {"<pad>": PAD_ID, "<unk>": UNK_ID, "<bos>": BOS_ID, "<eos>": EOS_ID}


class Vocabulary:
    """Bijection between token text and ids; ids 0..3 are reserved for
    PAD, UNK, BOS and EOS."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._token_to_id: dict[str, int] = dict(RESERVED)
        self._id_to_token: list[str] = ["<pad>", "<unk>", "<bos>", "<eos>"]
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self._token_to_id:
            return self._token_to_id[token]
        idx = len(self._id_to_token)
        self._token_to_id[token] = idx
        self._id_to_token.append(token)
        return idx

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise ContractError(f"id {idx} outside vocabulary of size {len(self)}")
        return self._id_to_token[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.token_of(i) for i in ids]

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def to_json(self) -> str:
        return json.dumps({"tokens": self._id_to_token[4:]}, indent=0,
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            payload = json.loads(text)
            return cls(payload["tokens"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"bad vocabulary file: {exc}") from exc


@dataclass
class Example:
    """One training example; ``target`` is a class index, a token-id
    list ending in EOS, or a float, matching the task's kind."""

    task_id: int
    tokens: list[int]
    target: int | list[int] | float

    def __post_init__(self):
        if not self.tokens:
            raise InputError("example has an empty token list")


@dataclass
class Round:
    """One optimization step's input: exactly one batch per task, in
    ascending task-id order."""

    batches: dict[int, list[Example]]

    def __post_init__(self):
        for tid, batch in self.batches.items():
            for ex in batch:
                if ex.task_id != tid:
                    raise ContractError(
                        f"example of task {ex.task_id} in batch for task {tid}")

    def task_ids(self) -> list[int]:
        return sorted(self.batches)


@dataclass
class SyntheticSpec:
    seed: int = 17
    n_examples: int | tuple[int, int] = (400, 120)  # per task: one count or (cls, gen)
    n_polar: int = 6               # split evenly into two polarity classes
    n_keyword: int = 6
    n_filler: int = 20
    sentence_len: tuple[int, int] = (4, 7)
    rho: float = 0.9
    max_summary: int = 2           # K: 1..K keywords per summarization sentence

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        lo, hi = self.sentence_len
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad sentence length range {self.sentence_len}")
        if self.max_summary < 1:
            raise ConfigError("max_summary must be >= 1")
        if self.max_summary > lo:
            raise ConfigError(
                f"max_summary {self.max_summary} exceeds minimum sentence "
                f"length {lo}")
        if self.n_polar < 2 or self.n_keyword < 2 or self.n_filler < 1:
            raise ConfigError("need at least 2 polar, 2 keyword and 1 filler token")
        if min(self.task_sizes()) < 10:
            raise ConfigError("need at least 10 examples per task")

    def task_sizes(self) -> tuple[int, int]:
        """(classification count, summarization count)."""
        if isinstance(self.n_examples, int):
            return (self.n_examples, self.n_examples)
        n_cls, n_gen = self.n_examples
        return (int(n_cls), int(n_gen))


# ---------------------------------------------------------------------------
# Tokenization and vocabulary building
# ---------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding ASCII punctuation."""
    out = []
    for piece in text.lower().split():
        tok = piece.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


def build_vocab(corpus: Sequence[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Tokens with frequency >= min_count get ids from 4 upward, in
    descending frequency with lexicographic tie-break."""
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for sentence in corpus:
        for tok in sentence:
            counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

CLS_TASK_ID = 1
GEN_TASK_ID = 2


def _polar_token(polarity: int, index: int) -> str:
    return f"{'pos' if polarity == 0 else 'neg'}{index}"


def _majority_label(polarities: Sequence[int]) -> int:
    ones = sum(polarities)
    zeros = len(polarities) - ones
    return 0 if zeros >= ones else 1  # tie -> class 0


def generate_synthetic(spec: SyntheticSpec) -> tuple[dict[int, dict[str, list[Example]]], Vocabulary]:
    """Seeded synthetic corpus for the two standard tasks.

    Returns ({task_id: {"train": [...], "valid": [...], "test": [...]}},
    vocabulary). Splits are 80/10/10 by seeded shuffle and are disjoint
    by construction. Fully deterministic per spec.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    half = spec.n_polar // 2
    polar_words = ([_polar_token(0, i) for i in range(half)],
                   [_polar_token(1, i) for i in range(spec.n_polar - half)])
    keywords = [f"kw{i}" for i in range(spec.n_keyword)]
    keyword_polarity = {kw: i % 2 for i, kw in enumerate(keywords)}
    fillers = [f"f{i}" for i in range(spec.n_filler)]

    vocab = Vocabulary(polar_words[0] + polar_words[1] + keywords + fillers)
    lo, hi = spec.sentence_len
    n_cls, n_gen = spec.task_sizes()

    cls_examples: list[Example] = []
    for _ in range(n_cls):
        length = int(rng.integers(lo, hi + 1))
        n_pol = int(rng.integers(1, length + 1))
        polarities = [int(rng.integers(0, 2)) for _ in range(n_pol)]
        words = [polar_words[p][int(rng.integers(0, len(polar_words[p])))]
                 for p in polarities]
        words += [fillers[int(rng.integers(0, len(fillers)))]
                  for _ in range(length - n_pol)]
        order = rng.permutation(length)
        sentence = [words[i] for i in order]
        label = _majority_label(polarities)
        cls_examples.append(Example(task_id=CLS_TASK_ID,
                                    tokens=vocab.encode(sentence),
                                    target=label))

    gen_examples: list[Example] = []
    kw_index = {kw: i for i, kw in enumerate(keywords)}
    for _ in range(n_gen):
        length = int(rng.integers(lo, hi + 1))
        k = int(rng.integers(1, spec.max_summary + 1))
        kw_class = int(rng.integers(0, 2))
        class_kws = [kw for kw in keywords if keyword_polarity[kw] == kw_class]
        k = min(k, len(class_kws))
        chosen = sorted((class_kws[i] for i in
                         rng.choice(len(class_kws), size=k, replace=False)),
                        key=kw_index.get)
        rest = length - k
        n_pol = int(rng.integers(1, rest + 1)) if rest > 0 else 0
        pol_words = []
        for _ in range(n_pol):
            if rng.random() < spec.rho:
                p = kw_class
            else:
                p = int(rng.integers(0, 2))
            pol_words.append(polar_words[p][int(rng.integers(0, len(polar_words[p])))])
        fill_words = [fillers[int(rng.integers(0, len(fillers)))]
                      for _ in range(rest - n_pol)]
        # Keywords keep their canonical relative order inside the
        # sentence (their absolute positions are still random), so the
        # extractive target is a deterministic function of the keyword
        # set and the ROUGE ceiling of 1.0 is actually reachable.
        others = pol_words + fill_words
        order = rng.permutation(length)
        kw_slots = sorted(order[:k])
        other_slots = [s for s in range(length) if s not in set(kw_slots)]
        sentence: list[str] = [""] * length
        for slot, kw in zip(kw_slots, chosen):
            sentence[slot] = kw
        for slot, word in zip(other_slots, others):
            sentence[slot] = word
        summary = [w for w in sentence if w in keyword_polarity]
        gen_examples.append(Example(task_id=GEN_TASK_ID,
                                    tokens=vocab.encode(sentence),
                                    target=vocab.encode(summary) + [EOS_ID]))

    datasets = {
        CLS_TASK_ID: _split(cls_examples, rng),
        GEN_TASK_ID: _split(gen_examples, rng),
    }
    return datasets, vocab


def _split(examples: list[Example], rng: np.random.Generator
           ) -> dict[str, list[Example]]:
    n = len(examples)
    order = rng.permutation(n)
    n_train = int(0.8 * n)
    n_valid = int(0.1 * n)
    shuffled = [examples[i] for i in order]
    return {
        "train": shuffled[:n_train],
        "valid": shuffled[n_train:n_train + n_valid],
        "test": shuffled[n_train + n_valid:],
    }


# ---------------------------------------------------------------------------
# Ingestion: JSONL and GLUE-style TSV
# ---------------------------------------------------------------------------

TSV_SEPARATOR_ID = EOS_ID  # joins text_a and text_b in sentence-pair data


def write_jsonl(examples: Sequence[Example], vocab: Vocabulary, path: str,
                task_names: dict[int, str]) -> None:
    """Serialize examples in the interchange JSONL format (text form, so
    generated and external data stay interchangeable)."""
    lines = []
    for ex in examples:
        record: dict = {"task": task_names[ex.task_id],
                        "text": " ".join(vocab.decode(ex.tokens))}
        if isinstance(ex.target, int):
            record["label"] = ex.target
        elif isinstance(ex.target, float):
            record["score"] = ex.target
        else:
            body = [i for i in ex.target if i != EOS_ID]
            record["summary"] = " ".join(vocab.decode(body))
        lines.append(json.dumps(record, sort_keys=True))
    from .ioutil import atomic_write_text
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_jsonl(path: str, vocab: Vocabulary,
               task_ids: dict[str, int],
               task_kinds: dict[int, str]) -> list[Example]:
    """Read the interchange JSONL format; unknown tokens map to UNK.

    Malformed rows are reported with their line numbers; more than 10%
    malformed rows is a format error.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError:
        raise
    examples: list[Example] = []
    bad: list[int] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            examples.append(_parse_jsonl_record(line, vocab, task_ids, task_kinds))
        except (ConfigError, FormatError, InputError, KeyError, ValueError) as exc:
            bad.append(lineno)
            log.warning("%s:%d: skipping malformed row (%s)", path, lineno, exc)
    total = len(examples) + len(bad)
    if total == 0:
        log.warning("%s: empty dataset file", path)
        return []
    if len(bad) > 0.1 * total:
        raise FormatError(
            f"{path}: {len(bad)}/{total} malformed rows (lines {bad[:10]}...)")
    return examples


def _parse_jsonl_record(line: str, vocab: Vocabulary, task_ids: dict[str, int],
                        task_kinds: dict[int, str]) -> Example:
    record = json.loads(line)
    if not isinstance(record, dict):
        raise FormatError("record is not an object")
    task_name = record["task"]
    if task_name not in task_ids:
        raise FormatError(f"unknown task '{task_name}'")
    tid = task_ids[task_name]
    if "tokens" in record:
        tokens = [int(t) for t in record["tokens"]]
    else:
        tokens = vocab.encode(tokenize(record["text"]))
    if not tokens:
        raise InputError("record has no tokens")
    kind = task_kinds[tid]
    if kind == "classification":
        target: int | list[int] | float = int(record["label"])
    elif kind == "generation":
        summary = vocab.encode(tokenize(record["summary"]))
        target = summary + [EOS_ID]
    else:
        target = float(record["score"])
    return Example(task_id=tid, tokens=tokens, target=target)


@dataclass
class TsvFormat:
    """Column-role mapping for a GLUE-style TSV file."""

    text_a: str
    label: str
    text_b: str | None = None
    task_id: int = CLS_TASK_ID
    label_map: dict[str, int] = field(default_factory=dict)


def load_glue_tsv(path: str, fmt: TsvFormat, vocab: Vocabulary) -> list[Example]:
    """Load a tab-separated file with a header row into classification
    examples. ``text_b``, when mapped, is concatenated after a separator
    token."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        log.warning("%s: empty dataset file", path)
        return []
    header = lines[0].split("\t")
    try:
        col_a = header.index(fmt.text_a)
        col_label = header.index(fmt.label)
        col_b = header.index(fmt.text_b) if fmt.text_b else None
    except ValueError as exc:
        raise FormatError(f"{path}: missing column ({exc})") from exc

    examples: list[Example] = []
    bad: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        try:
            tokens = vocab.encode(tokenize(cells[col_a]))
            if col_b is not None:
                tokens = tokens + [TSV_SEPARATOR_ID] + vocab.encode(
                    tokenize(cells[col_b]))
            raw_label = cells[col_label].strip()
            label = fmt.label_map.get(raw_label)
            if label is None:
                label = int(raw_label)
            examples.append(Example(task_id=fmt.task_id, tokens=tokens,
                                    target=label))
        except (IndexError, ValueError, InputError) as exc:
            bad.append(lineno)
            log.warning("%s:%d: skipping malformed row (%s)", path, lineno, exc)
    total = len(examples) + len(bad)
    if total and len(bad) > 0.1 * total:
        raise FormatError(f"{path}: {len(bad)}/{total} malformed rows")
    return examples


# ---------------------------------------------------------------------------
# Alternating batch scheduler
# ---------------------------------------------------------------------------

def make_rounds(datasets: dict[int, list[Example]], batch_size: int,
                seed: int, epoch: int) -> list[Round]:
    """Rounds for one epoch: per round, one batch per task in task-id
    order; the largest task's examples each appear exactly once, smaller
    tasks wrap around (with a reshuffle on each wrap)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not datasets:
        raise ConfigError("make_rounds needs at least one task dataset")
    for tid, examples in datasets.items():
        if not examples:
            raise ConfigError(f"task {tid} has an empty dataset")

    n_max = max(len(v) for v in datasets.values())
    n_rounds = -(-n_max // batch_size)  # ceil

    streams: dict[int, "_ExampleStream"] = {}
    for tid in sorted(datasets):
        rng = np.random.Generator(np.random.PCG64(seed ^ epoch))
        streams[tid] = _ExampleStream(datasets[tid], rng)

    rounds: list[Round] = []
    for r in range(n_rounds):
        batches: dict[int, list[Example]] = {}
        for tid in sorted(datasets):
            is_last = r == n_rounds - 1
            full = len(datasets[tid]) == n_max and is_last
            take = (n_max - r * batch_size) if full else batch_size
            take = min(take, batch_size)
            batches[tid] = streams[tid].take(take)
        rounds.append(Round(batches=batches))
    return rounds


class _ExampleStream:
    """Shuffled pass over a dataset that reshuffles when it wraps."""

    def __init__(self, examples: list[Example], rng: np.random.Generator):
        self._examples = examples
        self._rng = rng
        self._order = rng.permutation(len(examples))
        self._pos = 0

    def take(self, n: int) -> list[Example]:
        out = []
        for _ in range(n):
            if self._pos == len(self._order):
                self._order = self._rng.permutation(len(self._examples))
                self._pos = 0
            out.append(self._examples[self._order[self._pos]])
            self._pos += 1
        return out
