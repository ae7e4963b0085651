"""Shared feature extractor, task heads, LoRA adapters and checkpoints.

The encoder mean-pools token embeddings and passes them through a
two-layer feed-forward block with a residual connection, producing a
d-dimensional representation consumed by every task head. Heads map
that representation to class logits, next-token logits, or a scalar.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    TokenIndexError,
)

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3


@dataclass
class EncoderParams:
    """Shared parameters (the conflict regularizer's gradient vectors
    are taken over exactly these tensors, in field order)."""

    embedding: Tensor  # [V, d]
    w1: Tensor         # [d, d_h]
    b1: Tensor         # [d_h]
    w2: Tensor         # [d_h, d]
    b2: Tensor         # [d]

    FIELDS = ("embedding", "w1", "b1", "w2", "b2")

    def param_list(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.FIELDS]

    def set_params(self, tensors: Sequence[Tensor]) -> None:
        for name, t in zip(self.FIELDS, tensors):
            setattr(self, name, t)


@dataclass
class ClassifierHead:
    w: Tensor  # [d, C]
    b: Tensor  # [C]

    FIELDS = ("w", "b")

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]

    def param_list(self) -> list[Tensor]:
        return [self.w, self.b]

    def set_params(self, tensors):
        self.w, self.b = tensors


@dataclass
class GeneratorHead:
    prev_embedding: Tensor  # [V, d]
    w: Tensor               # [2d, d_h]
    b: Tensor               # [d_h]
    out: Tensor             # [d_h, V]
    bout: Tensor            # [V]

    FIELDS = ("prev_embedding", "w", "b", "out", "bout")

    @property
    def vocab_size(self) -> int:
        return self.prev_embedding.shape[0]

    def param_list(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.FIELDS]

    def set_params(self, tensors):
        for name, t in zip(self.FIELDS, tensors):
            setattr(self, name, t)


@dataclass
class RegressorHead:
    w: Tensor  # [d, 1]

    FIELDS = ("w",)

    def param_list(self) -> list[Tensor]:
        return [self.w]

    def set_params(self, tensors):
        (self.w,) = tensors


@dataclass
class LoraAdapter:
    """Low-rank delta on the encoder's first linear layer.

    With b all zeros the adapted layer equals the base layer exactly.
    Adapters count as task-specific parameters and are excluded from
    the shared-gradient cosine vectors.
    """

    a: Tensor  # [d, r]
    b: Tensor  # [r, d_h]
    scale: float = 1.0

    FIELDS = ("a", "b")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def param_list(self) -> list[Tensor]:
        return [self.a, self.b]

    def set_params(self, tensors):
        self.a, self.b = tensors


Head = ClassifierHead | GeneratorHead | RegressorHead

_HEAD_KINDS = {
    "classification": ClassifierHead,
    "generation": GeneratorHead,
    "regression": RegressorHead,
}


@dataclass
class ModelParams:
    """Shared encoder plus per-task heads (and optional adapters).

    The encoder tensors and the head/adapter tensors are disjoint
    parameter sets; a head loss never produces gradients in another
    task's head.
    """

    encoder: EncoderParams
    heads: dict[int, Head]
    adapters: dict[int, LoraAdapter] = field(default_factory=dict)
    dims: tuple[int, int, int] = (0, 0, 0)  # (V, d, d_h)
    seed: int = 0
    task_table: list[dict] = field(default_factory=list)

    def shared_params(self) -> list[Tensor]:
        return self.encoder.param_list()

    def task_params(self, task_id: int) -> list[Tensor]:
        params = self.heads[task_id].param_list()
        if task_id in self.adapters:
            params = params + self.adapters[task_id].param_list()
        return params

    def all_params(self) -> list[Tensor]:
        params = self.shared_params()
        for tid in sorted(self.heads):
            params.extend(self.task_params(tid))
        return params

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Canonical (name, tensor) listing used by the checkpoint format."""
        named = [(f"encoder.{f}", getattr(self.encoder, f))
                 for f in EncoderParams.FIELDS]
        for tid in sorted(self.heads):
            head = self.heads[tid]
            named.extend((f"head.{tid}.{f}", getattr(head, f)) for f in head.FIELDS)
        for tid in sorted(self.adapters):
            adapter = self.adapters[tid]
            named.extend((f"adapter.{tid}.{f}", getattr(adapter, f))
                         for f in adapter.FIELDS)
        return named


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def init_model(seed: int, dims: tuple[int, int, int], tasks: Sequence,
               lora_rank: int | None = None, lora_scale: float = 1.0) -> ModelParams:
    """Seeded initialization: weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    biases zero, LoRA ``b`` matrices zero.

    ``tasks`` is a sequence of TaskSpec-like objects with ``id`` and
    ``kind`` attributes. Draw order is fixed (encoder fields, then heads
    in ascending task id, then adapters), so results are deterministic
    per seed.
    """
    V, d, d_h = dims
    if V < 1 or d < 1 or d_h < 1:
        raise ConfigError(f"model dims must be >= 1, got {dims}")
    if not tasks:
        raise ConfigError("init_model needs at least one task")
    rng = np.random.Generator(np.random.PCG64(seed))

    encoder = EncoderParams(
        embedding=_uniform(rng, (V, d), d),
        w1=_uniform(rng, (d, d_h), d),
        b1=_zeros(d_h),
        w2=_uniform(rng, (d_h, d), d_h),
        b2=_zeros(d),
    )
    heads: dict[int, Head] = {}
    table = []
    for spec in sorted(tasks, key=lambda s: s.id):
        kind = spec.kind
        if kind == "classification":
            num_classes = getattr(spec, "num_classes", 2)
            heads[spec.id] = ClassifierHead(w=_uniform(rng, (d, num_classes), d),
                                            b=_zeros(num_classes))
        elif kind == "generation":
            heads[spec.id] = GeneratorHead(
                prev_embedding=_uniform(rng, (V, d), d),
                w=_uniform(rng, (2 * d, d_h), 2 * d),
                b=_zeros(d_h),
                out=_uniform(rng, (d_h, V), d_h),
                bout=_zeros(V),
            )
        elif kind == "regression":
            heads[spec.id] = RegressorHead(w=_uniform(rng, (d, 1), d))
        else:
            raise ConfigError(f"unknown task kind '{kind}'")
        table.append({"id": spec.id, "kind": kind,
                      "loss_kind": getattr(spec, "loss_kind", ""),
                      "alpha": getattr(spec, "alpha", 1.0),
                      "lr": getattr(spec, "lr", 0.1),
                      "num_classes": getattr(spec, "num_classes", 0)})

    adapters: dict[int, LoraAdapter] = {}
    if lora_rank is not None:
        if lora_rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {lora_rank}")
        for spec in sorted(tasks, key=lambda s: s.id):
            adapters[spec.id] = LoraAdapter(
                a=_uniform(rng, (d, lora_rank), d),
                b=_zeros((lora_rank, d_h)),
                scale=lora_scale,
            )

    return ModelParams(encoder=encoder, heads=heads, adapters=adapters,
                       dims=(V, d, d_h), seed=seed, task_table=table)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def apply_lora(w1: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """Effective first-layer weight: w1 + scale * (a @ b)."""
    if adapter is None:
        return w1
    delta = ad.scale(ad.matmul(adapter.a, adapter.b), adapter.scale)
    return ad.add(w1, delta)


def _pool_rows(token_lists: Sequence[Sequence[int]], embedding: Tensor) -> Tensor:
    """Mean-pooled embedding per token list, stacked as a [B, d] matrix."""
    rows = []
    for tokens in token_lists:
        if len(tokens) == 0:
            raise InputError("cannot encode an empty token list")
        emb = ad.gather_rows(embedding, tokens)
        pooled = ad.mean(emb, axis=0)
        rows.append(ad.reshape(pooled, (1, emb.shape[1])))
    return ad.concat(rows, axis=0)


def encode_batch(token_lists: Sequence[Sequence[int]], encoder: EncoderParams,
                 adapter: LoraAdapter | None = None) -> Tensor:
    """Representations for a batch of token lists, shape [B, d]."""
    x = _pool_rows(token_lists, encoder.embedding)
    w1 = apply_lora(encoder.w1, adapter)
    hidden = ad.relu(ad.add(ad.matmul(x, w1), encoder.b1))
    projected = ad.add(ad.matmul(hidden, encoder.w2), encoder.b2)
    return ad.add(projected, x)


def encode(tokens: Sequence[int], encoder: EncoderParams,
           adapter: LoraAdapter | None = None) -> Tensor:
    """Representation of one token list, shape [d].

    Mean pooling makes the result invariant to token order.
    """
    h = encode_batch([tokens], encoder, adapter)
    return ad.reshape(h, (h.shape[1],))


def classify_batch(h: Tensor, head: ClassifierHead) -> Tensor:
    """Logits [B, C] for batched representations [B, d]."""
    return ad.add(ad.matmul(h, head.w), head.b)


def classify_head(h: Tensor, head: ClassifierHead) -> Tensor:
    """Logits [C] for a single representation [d]."""
    if h.ndim != 1 or h.shape[0] != head.w.shape[0]:
        raise DimensionError(
            f"classify_head: representation {h.shape} vs weight {head.w.shape}")
    logits = classify_batch(ad.reshape(h, (1, h.shape[0])), head)
    return ad.reshape(logits, (head.num_classes,))


def generate_logits(h_rows: Tensor, prev_ids: Sequence[int],
                    head: GeneratorHead) -> Tensor:
    """Next-token logits [N, V] for N (representation, previous-token) pairs.

    ``h_rows`` is [N, d]; row i is conditioned on prev_ids[i].
    """
    prev = ad.gather_rows(head.prev_embedding, prev_ids)
    joint = ad.concat([h_rows, prev], axis=1)
    hidden = ad.relu(ad.add(ad.matmul(joint, head.w), head.b))
    return ad.add(ad.matmul(hidden, head.out), head.bout)


def generate_step(h: Tensor, prev_token: int, head: GeneratorHead) -> Tensor:
    """Logits [V] for the next token given ``h`` and the previous token."""
    V = head.vocab_size
    if not 0 <= prev_token < V:
        raise TokenIndexError(f"prev_token {prev_token} out of range [0, {V})")
    logits = generate_logits(ad.reshape(h, (1, h.shape[0])), [prev_token], head)
    return ad.reshape(logits, (V,))


def generate_greedy(h: Tensor, head: GeneratorHead, max_len: int = 16) -> list[int]:
    """Greedy decode from BOS: argmax each step (ties break to the lowest
    token id), stop at EOS or max_len. BOS/EOS are not part of the result."""
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    out: list[int] = []
    prev = BOS_ID
    h_vals = h.detach()
    for _ in range(max_len):
        logits = generate_step(h_vals, prev, head).values
        nxt = int(np.argmax(logits))  # argmax returns the first (lowest) index
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prev = nxt
    return out


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------
# Layout (all little-endian):
#   magic "MTLC" | version u32 (=1) | header length u64 | UTF-8 JSON header
#   | concatenated float64 tensor payloads | FNV-1a u64 checksum of payload.

_MAGIC = b"MTLC"
_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(params: ModelParams, path: str) -> None:
    named = params.named_tensors()
    for name, t in named:
        if not np.all(np.isfinite(t.values)):
            raise NumericError(f"cannot checkpoint non-finite tensor '{name}'")

    tensor_meta = {}
    chunks = []
    offset = 0
    for name, t in named:
        raw = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
        tensor_meta[name] = {"shape": list(t.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    header = {
        "tensors": tensor_meta,
        "tasks": params.task_table,
        "dims": list(params.dims),
        "seed": params.seed,
        "adapter_scales": {str(t): params.adapters[t].scale
                           for t in sorted(params.adapters)},
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")

    blob = b"".join([
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<Q", len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<Q", _fnv1a(payload)),
    ])
    from .ioutil import atomic_write_bytes
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str, expect_dims: tuple[int, int, int] | None = None
                    ) -> ModelParams:
    """Read a checkpoint; the result is bit-identical to what was saved.

    Raises FormatError (with the byte offset of the problem) on bad
    magic, version, truncation or checksum, and ConfigError when
    ``expect_dims`` disagrees with the stored dims.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"checkpoint truncated at offset {len(blob)}: header incomplete")
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end + 8:
        raise FormatError(f"checkpoint truncated at offset {len(blob)}")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header at offset 16: {exc}") from exc

    payload = blob[header_end:-8]
    (stored_sum,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if _fnv1a(payload) != stored_sum:
        raise FormatError(f"payload checksum mismatch at offset {header_end}")

    dims = tuple(header["dims"])
    if expect_dims is not None and dims != tuple(expect_dims):
        raise ConfigError(
            f"checkpoint dims {dims} do not match expected {tuple(expect_dims)}")

    tensors = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = meta["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise FormatError(
                f"tensor '{name}' overruns payload at offset {header_end + start}")
        arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float64))

    V, d, d_h = dims
    encoder = EncoderParams(*(tensors[f"encoder.{f}"] for f in EncoderParams.FIELDS))
    heads: dict[int, Head] = {}
    for entry in header["tasks"]:
        tid = entry["id"]
        cls = _HEAD_KINDS.get(entry["kind"])
        if cls is None:
            raise FormatError(f"unknown head kind '{entry['kind']}' in task table")
        head = cls(*(tensors[f"head.{tid}.{f}"] for f in cls.FIELDS))
        heads[tid] = head
    adapters: dict[int, LoraAdapter] = {}
    for key, scale_val in header.get("adapter_scales", {}).items():
        tid = int(key)
        adapters[tid] = LoraAdapter(a=tensors[f"adapter.{tid}.a"],
                                    b=tensors[f"adapter.{tid}.b"],
                                    scale=float(scale_val))

    params = ModelParams(encoder=encoder, heads=heads, adapters=adapters,
                         dims=(V, d, d_h), seed=header["seed"],
                         task_table=header["tasks"])
    _validate_shapes(params)
    return params


def _validate_shapes(params: ModelParams) -> None:
    V, d, d_h = params.dims
    expected = {
        "encoder.embedding": (V, d), "encoder.w1": (d, d_h),
        "encoder.b1": (d_h,), "encoder.w2": (d_h, d), "encoder.b2": (d,),
    }
    for name, shape in expected.items():
        field_name = name.split(".")[1]
        actual = getattr(params.encoder, field_name).shape
        if actual != shape:
            raise FormatError(f"tensor '{name}' has shape {actual}, expected {shape}")
