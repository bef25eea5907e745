"""A small numpy-backed tensor engine with tape-based reverse-mode AD.

Every differentiable operation is a registered *primitive*: a forward
function returning ``(output, saved)`` and a vector-Jacobian product
``vjp(g, saved) -> grads`` (one entry per tensor input, ``None`` where no
gradient flows).  Operations on tensors that require gradients append a
node to the :class:`Tape` they belong to; operations on constants record
nothing, so inference runs without any bookkeeping.

There is no global state: a tape is created explicitly and parameters are
bound to it with :meth:`Tape.watch`.  Separate tapes can be used from
separate threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

MASK_PENALTY = 1e9


class ShapeError(ValueError):
    def __init__(self, kind: str, shapes: Sequence[tuple], detail: str = ""):
        msg = f"{kind}: incompatible input shapes {list(shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.kind = kind
        self.shapes = list(shapes)


class UnknownPrimitiveError(ValueError):
    pass


class FullyMaskedError(ValueError):
    """A softmax slice had no unmasked entry (an empty sequence reached attention)."""


class Tensor:
    """Dense array plus an optional link to the tape node that produced it."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    kind: str
    inputs: tuple  # node ids (None for constants)
    shape: tuple
    saved: Any = None
    vjp: Callable | None = None


@dataclass
class Parameter:
    """A named trainable array with its Adam moment buffers."""

    name: str
    value: np.ndarray
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple:
        return self.value.shape


class Tape:
    """Records primitive applications in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.watched: dict[str, int] = {}
        self.grads: dict[int, np.ndarray] | None = None
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, node: Node) -> int:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); start a new Tape")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def watch(self, value, name: str | None = None) -> Tensor:
        """Create a leaf tensor whose gradient will be collected.

        ``value`` may be an array or a :class:`Parameter`; watching the same
        parameter name twice returns leaves sharing one node.
        """
        if isinstance(value, Parameter):
            name = value.name if name is None else name
            value = value.value
        t = Tensor(value, requires_grad=True)
        if name is not None and name in self.watched:
            t.node_id = self.watched[name]
        else:
            t.node_id = self._add(Node("leaf", (), t.shape))
            if name is not None:
                self.watched[name] = t.node_id
        t.tape = self
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, saved, vjp) -> Tensor:
        ids = tuple(x.node_id if x.requires_grad else None for x in inputs)
        t = Tensor(out, requires_grad=True)
        t.node_id = self._add(Node(kind, ids, out.shape, saved, vjp))
        t.tape = self
        return t

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Returns the gradient map keyed by node id; the tape is consumed.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss was not recorded on this tape")
        if not self.nodes:
            raise ValueError("empty tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            in_grads = node.vjp(g, node.saved)
            for inp, ig in zip(node.inputs, in_grads):
                if inp is None or ig is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        self.grads = grads
        self.nodes = []
        self.consumed = True
        return grads

    def grad(self, t: Tensor | str) -> np.ndarray | None:
        """Gradient of a watched tensor (or watched parameter name) after backward."""
        if self.grads is None:
            raise RuntimeError("backward() has not run")
        nid = self.watched.get(t) if isinstance(t, str) else t.node_id
        return None if nid is None else self.grads.get(nid)


# --------------------------------------------------------------------------
# primitive registry

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable  # (*arrays, **attrs) -> (out, saved)
    vjp: Callable  # (g, saved) -> tuple of grads


PRIMITIVES: dict[str, Primitive] = {}


def define_primitive(name: str, forward: Callable, vjp: Callable) -> Primitive:
    prim = Primitive(name, forward, vjp)
    PRIMITIVES[name] = prim
    return prim


def _as_tensor(x, like: np.dtype | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like))


def _common_dtype(xs) -> np.dtype | None:
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return None


def forward_primitive(kind: str, inputs: Iterable, **attrs) -> Tensor:
    """Apply a registered primitive, recording it on the inputs' tape if any."""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}")
    inputs = list(inputs)
    like = _common_dtype(inputs)
    tensors = [_as_tensor(x, like) for x in inputs]
    arrays = [t.data for t in tensors]
    try:
        out, saved = prim.forward(*arrays, **attrs)
    except (ShapeError, FullyMaskedError):
        raise
    except (ValueError, IndexError) as exc:
        raise ShapeError(kind, [a.shape for a in arrays], str(exc)) from exc
    tape = None
    for t in tensors:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError(f"{kind}: inputs recorded on different tapes")
    if tape is None:
        return Tensor(out)
    return tape.record(kind, tensors, out, saved, prim.vjp)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive definitions

def _binary_fwd(op):
    def fwd(a, b):
        np.broadcast_shapes(a.shape, b.shape)
        return op(a, b), (a, b)
    return fwd


define_primitive(
    "add", _binary_fwd(np.add),
    lambda g, s: (unbroadcast(g, s[0].shape), unbroadcast(g, s[1].shape)),
)
define_primitive(
    "sub", _binary_fwd(np.subtract),
    lambda g, s: (unbroadcast(g, s[0].shape), unbroadcast(-g, s[1].shape)),
)
define_primitive(
    "mul", _binary_fwd(np.multiply),
    lambda g, s: (unbroadcast(g * s[1], s[0].shape), unbroadcast(g * s[0], s[1].shape)),
)


def _scalar_mul_fwd(a, c):
    c = a.dtype.type(c)
    return a * c, c


define_primitive("scalar_mul", _scalar_mul_fwd, lambda g, c: (g * c,))


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", [a.shape, b.shape], "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    return np.matmul(a, b), (a, b)


def _matmul_vjp(g, s):
    a, b = s
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


define_primitive("matmul", _matmul_fwd, _matmul_vjp)


def _concat_fwd(*xs, axis=-1):
    out = np.concatenate(xs, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, (ax, bounds)


def _concat_vjp(g, s):
    ax, bounds = s
    return tuple(np.split(g, bounds, axis=ax))


define_primitive("concat", _concat_fwd, _concat_vjp)


def _stack_fwd(*xs, axis=0):
    out = np.stack(xs, axis=axis)
    return out, (axis % out.ndim, len(xs))


def _stack_vjp(g, s):
    ax, n = s
    return tuple(np.take(g, i, axis=ax) for i in range(n))


define_primitive("stack", _stack_fwd, _stack_vjp)


def _slice_fwd(a, index=None):
    out = a[index]
    if isinstance(index, np.ndarray) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index)
    ):
        raise ShapeError("slice", [a.shape], "advanced indexing not supported; use gather")
    return np.array(out, copy=True), (a.shape, a.dtype, index)


def _slice_vjp(g, s):
    shape, dtype, index = s
    out = np.zeros(shape, dtype=dtype)
    out[index] = g
    return (out,)


define_primitive("slice", _slice_fwd, _slice_vjp)


def _gather_fwd(table, ids=None):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("gather", [table.shape], f"row id out of range [0, {table.shape[0]})")
    return table[ids], (table.shape, table.dtype, ids)


def _gather_vjp(g, s):
    shape, dtype, ids = s
    out = np.zeros(shape, dtype=dtype)
    np.add.at(out, ids, g)
    return (out,)


define_primitive("gather", _gather_fwd, _gather_vjp)


def _reduce_restore(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


define_primitive(
    "sum", _sum_fwd,
    lambda g, s: (np.array(_reduce_restore(g, *s)),),
)


def _mean_fwd(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return np.mean(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, n)


def _mean_vjp(g, s):
    shape, axis, keepdims, n = s
    return (np.array(_reduce_restore(g, shape, axis, keepdims)) / n,)


define_primitive("mean", _mean_fwd, _mean_vjp)


def _max_fwd(a, axis=-1):
    ax = axis % a.ndim
    idx = np.argmax(a, axis=ax)
    out = np.take_along_axis(a, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    return out, (a.shape, a.dtype, ax, idx)


def _max_vjp(g, s):
    shape, dtype, ax, idx = s
    out = np.zeros(shape, dtype=dtype)
    np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
    return (out,)


define_primitive("max", _max_fwd, _max_vjp)


def _exp_fwd(a):
    y = np.exp(a)
    return y, y


define_primitive("exp", _exp_fwd, lambda g, y: (g * y,))
define_primitive("log", lambda a: (np.log(a), a), lambda g, a: (g / a,))


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


define_primitive("tanh", _tanh_fwd, lambda g, y: (g * (1 - y * y),))


def _sigmoid(a):
    # tanh form avoids overflow for large |a|
    return 0.5 * (np.tanh(0.5 * a) + 1)


def _sigmoid_fwd(a):
    y = _sigmoid(a)
    return y, y


define_primitive("sigmoid", _sigmoid_fwd, lambda g, y: (g * y * (1 - y),))
define_primitive(
    "relu", lambda a: (np.maximum(a, 0), a > 0), lambda g, pos: (g * pos,)
)

ELU_ALPHA = 1.0


def _elu_fwd(a):
    neg = ELU_ALPHA * np.expm1(np.minimum(a, 0))
    y = np.where(a > 0, a, neg)
    return y, (a > 0, neg)


def _elu_vjp(g, s):
    pos, neg = s
    return (g * np.where(pos, 1, neg + ELU_ALPHA),)


define_primitive("elu", _elu_fwd, _elu_vjp)


def _softmax_masked_fwd(logits, mask=None, axis=-1):
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError("softmax_masked", [logits.shape, mask.shape], "mask shape must equal logits shape")
    if not mask.any(axis=axis).all():
        raise FullyMaskedError("softmax_masked: a slice along the softmax axis is fully masked")
    z = logits - logits.dtype.type(MASK_PENALTY) * (~mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z) * mask
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_masked_vjp(g, s):
    y, axis = s
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


define_primitive("softmax_masked", _softmax_masked_fwd, _softmax_masked_vjp)


def _transpose_fwd(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return np.transpose(a, axes), np.argsort(axes)


define_primitive("transpose", _transpose_fwd, lambda g, inv: (np.transpose(g, inv),))


def _broadcast_fwd(a, shape=None):
    return np.array(np.broadcast_to(a, shape)), a.shape


define_primitive("broadcast", _broadcast_fwd, lambda g, shape: (unbroadcast(g, shape),))
define_primitive(
    "reshape", lambda a, shape=None: (a.reshape(shape), a.shape),
    lambda g, shape: (g.reshape(shape),),
)


def _dropout_fwd(a, rate=0.0, rng=None):
    if rate <= 0.0 or rng is None:
        return a.copy(), None
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return a * keep, keep


define_primitive(
    "dropout", _dropout_fwd, lambda g, keep: (g if keep is None else g * keep,)
)


# --------------------------------------------------------------------------
# functional front-end

def add(a, b):
    return forward_primitive("add", [a, b])


def sub(a, b):
    return forward_primitive("sub", [a, b])


def mul(a, b):
    return forward_primitive("mul", [a, b])


def scalar_mul(a, c: float):
    return forward_primitive("scalar_mul", [a], c=c)


def matmul(a, b):
    return forward_primitive("matmul", [a, b])


def concat(xs: Sequence, axis: int = -1):
    return forward_primitive("concat", xs, axis=axis)


def stack(xs: Sequence, axis: int = 0):
    return forward_primitive("stack", xs, axis=axis)


def slice_(a, index):
    return forward_primitive("slice", [a], index=index)


def gather(table, ids):
    return forward_primitive("gather", [table], ids=ids)


def sum_(a, axis=None, keepdims=False):
    return forward_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return forward_primitive("mean", [a], axis=axis, keepdims=keepdims)


def max_(a, axis: int = -1):
    return forward_primitive("max", [a], axis=axis)


def exp(a):
    return forward_primitive("exp", [a])


def log(a):
    return forward_primitive("log", [a])


def tanh(a):
    return forward_primitive("tanh", [a])


def sigmoid(a):
    return forward_primitive("sigmoid", [a])


def relu(a):
    return forward_primitive("relu", [a])


def elu(a):
    return forward_primitive("elu", [a])


def softmax_masked(logits, mask=None, axis: int = -1):
    """Softmax along ``axis`` restricted to positions where ``mask`` is true.

    Masked entries come out exactly zero and receive exactly zero gradient.
    Raises :class:`FullyMaskedError` if any slice has no unmasked entry.
    """
    return forward_primitive("softmax_masked", [logits], mask=mask, axis=axis)


def transpose(a, axes=None):
    return forward_primitive("transpose", [a], axes=axes)


def broadcast(a, shape):
    return forward_primitive("broadcast", [a], shape=tuple(shape))


def reshape(a, shape):
    return forward_primitive("reshape", [a], shape=tuple(shape))


def dropout(a, rate: float = 0.0, rng=None):
    """Inverted dropout; an identity unless both ``rate > 0`` and an ``rng`` are given."""
    return forward_primitive("dropout", [a], rate=rate, rng=rng)


def logsumexp(a, axis: int = -1):
    # the shift is a constant; the gradient of logsumexp is shift-invariant
    a = _as_tensor(a, None)
    shift = np.max(a.data, axis=axis, keepdims=True)
    return add(log(sum_(exp(sub(a, shift)), axis=axis)), np.squeeze(shift, axis=axis))


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float
    checked_entries: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self) -> str:
        rows = [f"{n}: {e:.2e} ({self.checked_entries[n]} entries)" for n, e in self.max_rel_error.items()]
        status = "PASS" if self.passed else "FAIL"
        return f"gradient check {status} (tol {self.tol:g})\n  " + "\n  ".join(rows)


def check_gradients(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` receives a dict of parameter name -> bound tensor and must return a
    scalar.  It has to be deterministic.  Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``.  With ``max_entries`` set, at most
    that many randomly chosen entries per parameter are perturbed.
    Parameter values are restored afterwards.
    """
    tape = Tape()
    bound = {p.name: tape.watch(p) for p in params}
    loss = f(bound)
    tape.backward(loss)
    analytic = {p.name: tape.grad(p.name) for p in params}

    def evaluate() -> float:
        return float(f({p.name: Tensor(p.value) for p in params}).data)

    rng = np.random.default_rng(seed)
    errors, counts = {}, {}
    for p in params:
        ga = analytic[p.name]
        if ga is None:
            ga = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
        errors[p.name] = worst
        counts[p.name] = len(idx)
    return GradCheckReport(errors, tol, counts)
