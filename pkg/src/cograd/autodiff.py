"""Reverse-mode automatic differentiation on an append-only tape.

The backward pass is itself assembled from recorded primitives, so with
``higher_order=True`` the returned gradients are tape nodes and can be
differentiated again (double backward). That is what makes a scalar
function of gradients, such as a pairwise gradient-cosine penalty,
differentiable at O(forward) cost via Hessian-vector products.

Everything is 64-bit: any primitive whose output contains NaN or Inf
raises NumericError instead of propagating the value.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NumericError,
    TokenIndexError,
)

Array = np.ndarray

# Relative-error denominator floor used by gradient checks.
_CHECK_FLOOR = 1e-8


def _as_f64(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """An n-dimensional array of 64-bit floats, optionally on a tape.

    ``node`` is the handle into the owning tape; it is None for detached
    constants, which participate in computations but receive no
    gradients.
    """

    __slots__ = ("values", "tape", "node", "entry_index")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None,
                 entry_index: int | None = None):
        self.values = _as_f64(values)
        self.tape = tape
        self.node = node
        self.entry_index = entry_index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """A constant tensor with the same values, off any tape."""
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    # Arithmetic sugar. Python numbers take the cheap scalar-op path.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return subtract(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(negate(self), float(other))
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            if other == 0:
                raise NumericError("division by zero")
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self):
        return negate(self)


class _Entry:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "attrs")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, attrs: dict):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.attrs = attrs


class Tape:
    """Append-only, topologically ordered record of primitive applications.

    A tape and its tensors belong to a single training run; distinct
    tapes are fully independent. Mixing tensors from two live tapes in
    one operation is a contract error.
    """

    _generation_counter = 0

    def __init__(self):
        Tape._generation_counter += 1
        self.generation = Tape._generation_counter
        self.entries: list[_Entry] = []
        self._next_node = 0
        self._recording = True

    def leaf(self, values) -> Tensor:
        """Create a parameter node holding ``values`` (no producing entry)."""
        t = Tensor(values, tape=self, node=self._new_node())
        return t

    def attach(self, tensor: Tensor) -> Tensor:
        """Leaf view of a detached tensor, sharing its value buffer."""
        if tensor.node is not None:
            raise ContractError("tensor is already attached to a tape")
        out = Tensor.__new__(Tensor)
        out.values = tensor.values
        out.tape = self
        out.node = self._new_node()
        out.entry_index = None
        return out

    def _new_node(self) -> int:
        nid = self._next_node
        self._next_node += 1
        return nid

    @contextlib.contextmanager
    def paused(self):
        """Compute values without recording entries."""
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def _record(self, op: str, inputs: tuple[Tensor, ...], out_values: Array,
                attrs: dict) -> Tensor:
        out = Tensor(out_values, tape=self, node=self._new_node(),
                     entry_index=len(self.entries))
        self.entries.append(_Entry(op, inputs, out, attrs))
        return out

    def replay(self) -> None:
        """Re-run every entry's forward and check bit-identical outputs.

        Raises ContractError on the first mismatch; used to validate the
        tape's replayability invariant in tests.
        """
        for i, e in enumerate(self.entries):
            got = _FORWARD[e.op](*(t.values for t in e.inputs), **e.attrs)
            if got.shape != e.output.values.shape or not np.array_equal(
                    got, e.output.values):
                raise ContractError(f"replay mismatch at entry {i} ({e.op})")


class GradientMap:
    """Association from parameter tensors to their gradient tensors.

    Each gradient has the shape of its parameter. Parameters that were
    not reached by the backward sweep map to all-zero gradients.
    """

    def __init__(self, pairs: Sequence[tuple[Tensor, Tensor]]):
        self._pairs = list(pairs)
        self._by_node = {p.node: g for p, g in pairs if p.node is not None}
        for p, g in self._pairs:
            if g.shape != p.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != parameter shape {p.shape}")

    def grad(self, param: Tensor) -> Tensor:
        g = self._by_node.get(param.node)
        if g is None:
            return Tensor(np.zeros_like(param.values))
        return g

    def items(self):
        return iter(self._pairs)

    def params(self) -> list[Tensor]:
        return [p for p, _ in self._pairs]

    def norm(self) -> float:
        """Euclidean norm of the concatenated gradient values."""
        total = 0.0
        for _, g in self._pairs:
            total += float(np.dot(g.values.ravel(), g.values.ravel()))
        return float(np.sqrt(total))

    def __len__(self):
        return len(self._pairs)


# ---------------------------------------------------------------------------
# Primitive machinery
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable[..., Array]] = {}
_VJP: dict[str, Callable] = {}


def _primitive(name: str, forward: Callable[..., Array], vjp: Callable) -> None:
    _FORWARD[name] = forward
    _VJP[name] = vjp


def _require_finite(values: Array, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite value produced by '{op}'")


def _common_tape(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError(
                f"tensors from tapes {tape.generation} and "
                f"{t.tape.generation} mixed in one operation")
    return tape


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _apply(op: str, *inputs, **attrs) -> Tensor:
    tensors = tuple(_coerce(x) for x in inputs)
    tape = _common_tape(tensors)
    # Non-finite results raise below, so numpy's own warnings are noise.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out_values = _FORWARD[op](*(t.values for t in tensors), **attrs)
    _require_finite(out_values, op)
    if tape is None or not tape._recording:
        return Tensor(out_values)
    return tape._record(op, tensors, out_values, attrs)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` using sum primitives."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = sum_(g, axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = sum_(g, axis=axis, keepdims=True)
    return g


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    try:
        np.broadcast_shapes(a, b)
        return True
    except ValueError:
        return False


def _check_broadcast(a: Array, b: Array, op: str) -> None:
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"'{op}': shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise binary -----------------------------------------------------

def _add_fwd(a, b):
    _check_broadcast(a, b, "add")
    return a + b


def _add_vjp(g, inputs, output, attrs):
    a, b = inputs
    return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


_primitive("add", _add_fwd, _add_vjp)


def _sub_fwd(a, b):
    _check_broadcast(a, b, "subtract")
    return a - b


def _sub_vjp(g, inputs, output, attrs):
    a, b = inputs
    return (_unbroadcast(g, a.shape), _unbroadcast(negate(g), b.shape))


_primitive("subtract", _sub_fwd, _sub_vjp)


def _mul_fwd(a, b):
    _check_broadcast(a, b, "multiply")
    return a * b


def _mul_vjp(g, inputs, output, attrs):
    a, b = inputs
    return (_unbroadcast(multiply(g, b), a.shape),
            _unbroadcast(multiply(g, a), b.shape))


_primitive("multiply", _mul_fwd, _mul_vjp)


# -- scalar ops -------------------------------------------------------------

def _scale_fwd(a, c):
    return a * c


def _scale_vjp(g, inputs, output, attrs):
    return (scale(g, attrs["c"]),)


_primitive("scale", _scale_fwd, _scale_vjp)


def _shift_fwd(a, c):
    return a + c


def _shift_vjp(g, inputs, output, attrs):
    return (g,)


_primitive("shift", _shift_fwd, _shift_vjp)


# -- matmul / transpose / reshape -------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects two matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def _matmul_vjp(g, inputs, output, attrs):
    a, b = inputs
    return (matmul(g, transpose(b)), matmul(transpose(a), g))


_primitive("matmul", _matmul_fwd, _matmul_vjp)


def _transpose_fwd(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return a.T.copy()


def _transpose_vjp(g, inputs, output, attrs):
    return (transpose(g),)


_primitive("transpose", _transpose_fwd, _transpose_vjp)


def _reshape_fwd(a, shape):
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return a.reshape(shape).copy()


def _reshape_vjp(g, inputs, output, attrs):
    return (reshape(g, inputs[0].shape),)


_primitive("reshape", _reshape_fwd, _reshape_vjp)


# -- elementwise unary ------------------------------------------------------

def _relu_fwd(a):
    return np.maximum(a, 0.0)


def _relu_vjp(g, inputs, output, attrs):
    # Subgradient 0 at the kink; the mask is a constant of the tape.
    mask = Tensor((inputs[0].values > 0.0).astype(np.float64))
    return (multiply(g, mask),)


_primitive("relu", _relu_fwd, _relu_vjp)


def _tanh_fwd(a):
    return np.tanh(a)


def _tanh_vjp(g, inputs, output, attrs):
    y = output
    return (multiply(g, shift(negate(multiply(y, y)), 1.0)),)


_primitive("tanh", _tanh_fwd, _tanh_vjp)


def _exp_fwd(a):
    return np.exp(a)


def _exp_vjp(g, inputs, output, attrs):
    return (multiply(g, output),)


_primitive("exp", _exp_fwd, _exp_vjp)


def _log_fwd(a):
    if np.any(a <= 0.0):
        raise NumericError("log of a non-positive value")
    return np.log(a)


def _log_vjp(g, inputs, output, attrs):
    # 1/x re-expressed as exp(-log x) so the reciprocal stays on the tape.
    return (multiply(g, exp(negate(output))),)


_primitive("log", _log_fwd, _log_vjp)


# -- reductions -------------------------------------------------------------

def _sum_fwd(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64)


def _expand_like(g: Tensor, in_shape: tuple[int, ...], axis, keepdims) -> Tensor:
    if axis is not None and not keepdims:
        target = list(g.shape)
        target.insert(axis, 1)
        g = reshape(g, tuple(target))
    ones = Tensor(np.ones(in_shape))
    return multiply(ones, g)


def _sum_vjp(g, inputs, output, attrs):
    return (_expand_like(g, inputs[0].shape, attrs["axis"], attrs["keepdims"]),)


_primitive("sum", _sum_fwd, _sum_vjp)


def _mean_fwd(a, axis, keepdims):
    return np.mean(a, axis=axis, keepdims=keepdims, dtype=np.float64)


def _mean_vjp(g, inputs, output, attrs):
    a = inputs[0]
    n = a.size if attrs["axis"] is None else a.shape[attrs["axis"]]
    spread = _expand_like(g, a.shape, attrs["axis"], attrs["keepdims"])
    return (scale(spread, 1.0 / n),)


_primitive("mean", _mean_fwd, _mean_vjp)


# -- row softmax ------------------------------------------------------------

def _softmax_fwd(a):
    if a.ndim not in (1, 2):
        raise DimensionError(f"softmax_rows expects a vector or matrix, got {a.shape}")
    if a.ndim == 1 and a.shape[0] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite input to softmax_rows")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_vjp(g, inputs, output, attrs):
    y = output
    axis = y.ndim - 1
    s = sum_(multiply(g, y), axis=axis, keepdims=True)
    return (multiply(y, subtract(g, s)),)


_primitive("softmax_rows", _softmax_fwd, _softmax_vjp)


# -- gather / scatter -------------------------------------------------------

def _check_ids(ids: tuple[int, ...], limit: int) -> None:
    for i in ids:
        if not 0 <= i < limit:
            raise TokenIndexError(f"row id {i} out of range [0, {limit})")


def _gather_fwd(table, ids):
    if table.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got {table.shape}")
    _check_ids(ids, table.shape[0])
    return table[list(ids), :].copy()


def _gather_vjp(g, inputs, output, attrs):
    table = inputs[0]
    return (scatter_rows(g, ids=attrs["ids"], num_rows=table.shape[0]),)


_primitive("gather_rows", _gather_fwd, _gather_vjp)


def _scatter_fwd(rows, ids, num_rows):
    if rows.ndim != 2 or len(ids) != rows.shape[0]:
        raise DimensionError("scatter_rows: ids must match the row count")
    _check_ids(ids, num_rows)
    out = np.zeros((num_rows, rows.shape[1]))
    np.add.at(out, list(ids), rows)
    return out


def _scatter_vjp(g, inputs, output, attrs):
    return (gather_rows(g, ids=attrs["ids"]),)


_primitive("scatter_rows", _scatter_fwd, _scatter_vjp)


# -- concat -----------------------------------------------------------------

def _concat_fwd(*parts, axis):
    ndim = parts[0].ndim
    if ndim not in (1, 2):
        raise DimensionError("concat supports vectors and matrices")
    for p in parts:
        if p.ndim != ndim:
            raise DimensionError("concat inputs must share dimensionality")
    if axis >= ndim:
        raise DimensionError(f"concat axis {axis} invalid for {ndim}-d inputs")
    return np.concatenate(parts, axis=axis)


def _slice_rows(g: Tensor, start: int, stop: int) -> Tensor:
    return gather_rows(g, ids=tuple(range(start, stop)))


def _concat_vjp(g, inputs, output, attrs):
    axis = attrs["axis"]
    grads = []
    offset = 0
    if inputs[0].ndim == 1:
        col = reshape(g, (g.shape[0], 1))
        for t in inputs:
            part = _slice_rows(col, offset, offset + t.shape[0])
            grads.append(reshape(part, t.shape))
            offset += t.shape[0]
    elif axis == 0:
        for t in inputs:
            grads.append(_slice_rows(g, offset, offset + t.shape[0]))
            offset += t.shape[0]
    else:
        gt = transpose(g)
        for t in inputs:
            part = _slice_rows(gt, offset, offset + t.shape[1])
            grads.append(transpose(part))
            offset += t.shape[1]
    return tuple(grads)


_primitive("concat", _concat_fwd, _concat_vjp)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return _apply("add", a, b)


def subtract(a, b) -> Tensor:
    return _apply("subtract", a, b)


def multiply(a, b) -> Tensor:
    return _apply("multiply", a, b)


def scale(a, c: float) -> Tensor:
    """a * c for a Python scalar c."""
    return _apply("scale", a, c=float(c))


def shift(a, c: float) -> Tensor:
    """a + c for a Python scalar c."""
    return _apply("shift", a, c=float(c))


def negate(a) -> Tensor:
    return scale(a, -1.0)


def divide(a, b) -> Tensor:
    """a / b for strictly positive b, via exp(-log b)."""
    return multiply(a, exp(negate(log(b))))


def matmul(a, b) -> Tensor:
    return _apply("matmul", a, b)


def transpose(a) -> Tensor:
    return _apply("transpose", a)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", a, shape=tuple(int(s) for s in shape))


def relu(a) -> Tensor:
    return _apply("relu", a)


def tanh(a) -> Tensor:
    return _apply("tanh", a)


def exp(a) -> Tensor:
    return _apply("exp", a)


def log(a) -> Tensor:
    return _apply("log", a)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _apply("mean", a, axis=axis, keepdims=keepdims)


def softmax_rows(logits) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    return _apply("softmax_rows", logits)


def gather_rows(table, ids: Sequence[int]) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the table."""
    return _apply("gather_rows", table, ids=tuple(int(i) for i in ids))


def scatter_rows(rows, ids: Sequence[int], num_rows: int) -> Tensor:
    """Adjoint of gather_rows: add each row into a zero [num_rows x d] matrix."""
    return _apply("scatter_rows", rows, ids=tuple(int(i) for i in ids),
                  num_rows=int(num_rows))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    if len(parts) == 0:
        raise ContractError("concat of zero tensors")
    if len(parts) == 1:
        return _coerce(parts[0])
    return _apply("concat", *parts, axis=int(axis))


def dot(a, b) -> Tensor:
    """Inner product of two same-shaped tensors."""
    return sum_(multiply(a, b))


def maximum_const(a, c: float) -> Tensor:
    """Elementwise max(a, c), composed as relu(a - c) + c."""
    return shift(relu(shift(a, -float(c))), float(c))


def sqrt_floored(s, floor: float) -> Tensor:
    """sqrt(max(s, floor)) for s >= 0, via exp(0.5 * log(max(s, floor)))."""
    if floor <= 0:
        raise ContractError("sqrt_floored needs a positive floor")
    return exp(scale(log(maximum_const(s, floor)), 0.5))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(output: Tensor, wrt: Sequence[Tensor],
             higher_order: bool = False) -> GradientMap:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. ``wrt``.

    With ``higher_order`` the vector-Jacobian products are recorded on
    the tape, so each returned gradient is itself differentiable.
    Parameters not reachable from ``output`` receive zero gradients.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, Tensor] = {}
    tape = output.tape
    if tape is not None and output.node is not None:
        grads[output.node] = Tensor(np.ones_like(output.values))
        upto = output.entry_index
        entries = list(tape.entries) if upto is None else tape.entries[:upto + 1]
        ctx = contextlib.nullcontext() if higher_order else tape.paused()
        with ctx:
            for entry in reversed(entries):
                g = grads.pop(entry.output.node, None)
                if g is None:
                    continue
                in_grads = _VJP[entry.op](g, entry.inputs, entry.output, entry.attrs)
                for t, gi in zip(entry.inputs, in_grads):
                    if gi is None or t.node is None:
                        continue
                    acc = grads.get(t.node)
                    grads[t.node] = gi if acc is None else add(acc, gi)
    pairs = []
    for p in wrt:
        g = grads.get(p.node) if p.node is not None else None
        if g is None:
            g = Tensor(np.zeros_like(p.values))
        pairs.append((p, g))
    return GradientMap(pairs)


def attach_all(params: Sequence[Tensor]) -> list[Tensor]:
    """Return the tensors attached to a tape, creating one if needed.

    Lets a scalar function of parameters run both on live leaves (for
    an analytic backward) and on detached probe points (for finite
    differences), e.g. when the function itself calls backward.
    """
    if any(p.node is not None for p in params):
        return list(params)
    tape = Tape()
    return [tape.attach(p) for p in params]


def flatten_grads(gmap: GradientMap, order: Sequence[Tensor]) -> Tensor:
    """Concatenate gradients into one vector, in canonical parameter order.

    Parameters absent from the map contribute zeros. The result is a
    tape node whenever the gradients are, so it stays differentiable.
    """
    parts = [reshape(gmap.grad(p), (p.size,)) for p in order]
    return concat(parts, axis=0)


def check_gradient(f: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-5, coords_per_param: int | None = None,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of parameter tensors to a scalar tensor and must
    be evaluable on detached constants. ``coords_per_param`` limits the
    probe to a seeded random subset of coordinates per parameter (all
    coordinates when None). The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("check_gradient needs eps > 0")
    base = [p.detach() for p in params]

    tape = Tape()
    leaves = [tape.attach(p) for p in base]
    out = f(leaves)
    _require_finite(out.values, "check_gradient")
    gmap = backward(out, leaves)
    analytic = [gmap.grad(leaf).values for leaf in leaves]

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for k, p in enumerate(base):
        flat_idx = np.arange(p.size)
        if coords_per_param is not None and coords_per_param < p.size:
            flat_idx = rng.choice(p.size, size=coords_per_param, replace=False)
            flat_idx.sort()
        for idx in flat_idx:
            worst = max(worst, _fd_coord_error(f, base, k, int(idx), eps,
                                               analytic[k].ravel()[int(idx)]))
    return worst


def _fd_coord_error(f, base: list[Tensor], k: int, idx: int, eps: float,
                    analytic: float) -> float:
    plus = _eval_perturbed(f, base, k, idx, +eps)
    minus = _eval_perturbed(f, base, k, idx, -eps)
    numeric = (plus - minus) / (2.0 * eps)
    denom = max(abs(analytic), abs(numeric), _CHECK_FLOOR)
    return abs(analytic - numeric) / denom


def _eval_perturbed(f, base: list[Tensor], k: int, idx: int, delta: float) -> float:
    probe = list(base)
    bumped = base[k].values.copy()
    bumped.ravel()[idx] += delta
    probe[k] = Tensor(bumped)
    val = f(probe)
    _require_finite(val.values, "check_gradient")
    return float(val.values)
