"""Minimal tape-based reverse-mode automatic differentiation over dense arrays.

Every operation appends one entry to the :class:`Tape` of its operands. An
entry keeps the operand ids and a closure over the forward values it needs
for the backward pass. :meth:`Tape.backward` walks the entries once, in
reverse recording order, so the tape is its own topological sort.

Broadcasting is limited to a single leading batch axis: ``add`` accepts an
``(n, d)`` operand together with a ``(d,)`` operand (a bias) or a scalar.

Sparse adjacency and pooling matrices may be passed to :func:`matmul` as a
left operand that is a ``scipy.sparse`` matrix; such operands are treated
as constants and never receive a gradient.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericError, UsageError

__all__ = [
    "Tape",
    "Tensor",
    "forward_op",
    "OP_KINDS",
    "matmul",
    "add",
    "mul",
    "scalar_mul",
    "relu",
    "sigmoid",
    "mean_reduce",
    "sum_reduce",
    "concat",
    "index_gather",
    "reshape",
    "bce_with_logits",
    "softmax_cross_entropy",
    "mean_squared_error",
    "hvp",
    "relu_masks",
]

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node on a tape: a float64 array plus its position in the recording."""

    __slots__ = ("data", "tape", "id", "requires_grad")

    def __init__(self, data: np.ndarray, tape: "Tape", id: int, requires_grad: bool):
        self.data = data
        self.tape = tape
        self.id = id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self.id}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_mul(other, -1.0))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    __slots__ = ("kind", "parents", "backward")

    def __init__(self, kind: str, parents: tuple[int, ...], backward: Backward | None):
        self.kind = kind
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations.

    A tape is single-threaded. Independent tapes share no state and may be
    used from different threads.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in leaf tensor")
        return self._push("leaf", arr, (), None, requires_grad)

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def _push(self, kind, data, parents, backward, requires_grad) -> Tensor:
        self._entries.append(_Entry(kind, parents, backward if requires_grad else None))
        self._shapes.append(data.shape)
        return Tensor(data, self, len(self._entries) - 1, requires_grad)

    def record(self, kind: str, data: np.ndarray, operands: Sequence[Tensor], backward: Backward) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericError(f"op '{kind}' produced a non-finite value")
        requires_grad = any(t.requires_grad for t in operands)
        return self._push(kind, data, tuple(t.id for t in operands), backward, requires_grad)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors that ``loss`` does not depend on receive exact zeros.
        """
        if loss.tape is not self:
            raise UsageError("loss was recorded on a different tape")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for idx in range(loss.id, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            entry = self._entries[idx]
            if entry.backward is None:
                continue
            del grads[idx]
            for pid, pg in zip(entry.parents, entry.backward(g)):
                if pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = []
        for t in wrt:
            g = grads.get(t.id)
            out.append(np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64).reshape(t.shape))
        return out


def _tape_of(*operands) -> Tape:
    for t in operands:
        if isinstance(t, Tensor):
            return t.tape
    raise UsageError("operation needs at least one Tensor operand")


def _check_inputs(kind: str, *operands: Tensor) -> None:
    for t in operands:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite input to op '{kind}'")


def matmul(a, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may be a constant ``scipy.sparse`` matrix."""
    if sp.issparse(a):
        if b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        _check_inputs("matmul", b)
        a_t = a.T.tocsr()
        out = np.asarray(a @ b.data)
        return b.tape.record("matmul", out, (b,), lambda g: (np.asarray(a_t @ g),))

    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _check_inputs("matmul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ bd.T if bd.ndim == 2 else np.multiply.outer(g, bd)
        if b.requires_grad:
            gb = np.multiply.outer(ad, g) if ad.ndim == 1 else ad.T @ g
        return ga, gb

    return a.tape.record("matmul", ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over the batch axis or a scalar."""
    tape = _tape_of(a, b)
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        b = tape.constant(b)
    if a.shape == b.shape:
        reduce_b = None
    elif b.data.ndim == 0:
        reduce_b = "all"
    elif a.data.ndim == 2 and b.shape == a.shape[1:]:
        reduce_b = 0
    elif b.data.ndim == 2 and a.shape == b.shape[1:]:
        return add(b, a)
    else:
        raise ConfigError(f"add: shapes {a.shape} and {b.shape} do not conform")
    _check_inputs("add", a, b)

    def backward(g):
        if reduce_b is None:
            gb = g
        elif reduce_b == "all":
            gb = np.sum(g)
        else:
            gb = g.sum(axis=0)
        return (g if a.requires_grad else None), (gb if b.requires_grad else None)

    return tape.record("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise ConfigError(f"mul: shapes {a.shape} and {b.shape} differ")
    _check_inputs("mul", a, b)
    ad, bd = a.data, b.data
    return a.tape.record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None),
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    _check_inputs("scalar-mul", a)
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("non-finite input to op 'scalar-mul'")
    return a.tape.record("scalar-mul", a.data * c, (a,), lambda g: (g * c,))


class _MaskPlan:
    __slots__ = ("masks", "replay", "pos")

    def __init__(self, masks: list[np.ndarray] | None):
        self.replay = masks is not None
        self.masks = masks if masks is not None else []
        self.pos = 0


_mask_plan: contextvars.ContextVar[_MaskPlan | None] = contextvars.ContextVar("relu_mask_plan", default=None)


@contextlib.contextmanager
def relu_masks(replay: list[np.ndarray] | None = None) -> Iterator[list[np.ndarray]]:
    """Record the activation pattern of every relu, or replay a recorded one.

    Inside ``with relu_masks() as rec`` each relu appends its mask to
    ``rec``; inside ``with relu_masks(rec)`` the relus reuse those masks in
    recording order, which freezes a piecewise-linear network on one branch.
    """
    plan = _MaskPlan(replay)
    token = _mask_plan.set(plan)
    try:
        yield plan.masks
    finally:
        _mask_plan.reset(token)
    if plan.replay and plan.pos != len(plan.masks):
        raise UsageError(f"relu mask replay used {plan.pos} of {len(plan.masks)} recorded masks")


def _relu_mask(x: np.ndarray) -> np.ndarray:
    plan = _mask_plan.get()
    if plan is None:
        return x > 0
    if not plan.replay:
        mask = x > 0
        plan.masks.append(mask)
        return mask
    if plan.pos >= len(plan.masks) or plan.masks[plan.pos].shape != x.shape:
        raise UsageError("relu mask replay does not match the recorded computation")
    mask = plan.masks[plan.pos]
    plan.pos += 1
    return mask


def relu(a: Tensor) -> Tensor:
    _check_inputs("relu", a)
    mask = _relu_mask(a.data)
    return a.tape.record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(a: Tensor) -> Tensor:
    _check_inputs("sigmoid", a)
    s = _sigmoid(a.data)
    return a.tape.record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    _check_inputs("sum-reduce", a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.record("sum-reduce", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    _check_inputs("mean-reduce", a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return a.tape.record("mean-reduce", np.asarray(a.data.mean(axis=axis)), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ConfigError("concat: no operands")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ConfigError(f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}")
    _check_inputs("concat", *tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tensors[0].tape.record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ConfigError(f"reshape: cannot view {a.shape} as {shape}")
    _check_inputs("reshape", a)
    old = a.shape
    return a.tape.record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index_gather(a: Tensor, index) -> Tensor:
    """Select rows of ``a`` by an integer index list (repeats allowed)."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ConfigError(f"index-gather: indices out of range for {a.shape[0]} rows")
    _check_inputs("index-gather", a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record("index-gather", a.data[idx], (a,), backward)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of ``labels`` under ``sigmoid(logits)``."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ConfigError(f"bce-with-logits: labels {y.shape} vs logits {logits.shape}")
    _check_inputs("bce-with-logits", logits)
    z = logits.data
    n = max(z.size, 1)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return logits.tape.record(
        "bce-with-logits", np.asarray(loss.mean()), (logits,), lambda g: (float(g) * (_sigmoid(z) - y) / n,)
    )


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer class ``targets`` under ``softmax(logits)`` row-wise."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise ConfigError(f"softmax-cross-entropy: targets {t.shape} vs logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise ConfigError("softmax-cross-entropy: class index out of range")
    _check_inputs("softmax-cross-entropy", logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.size)
    loss = (logsum - z[rows, t]).mean()
    n = t.size

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, t] -= 1.0
        return (float(g) * p / n,)

    return logits.tape.record("softmax-cross-entropy", np.asarray(loss), (logits,), backward)


def mean_squared_error(pred: Tensor, target) -> Tensor:
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.shape:
        raise ConfigError(f"mean-squared-error: target {y.shape} vs prediction {pred.shape}")
    _check_inputs("mean-squared-error", pred)
    diff = pred.data - y
    n = max(diff.size, 1)
    return pred.tape.record(
        "mean-squared-error", np.asarray((diff**2).mean()), (pred,), lambda g: (float(g) * 2.0 * diff / n,)
    )


OP_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "mean-reduce": mean_reduce,
    "sum-reduce": sum_reduce,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "index-gather": index_gather,
    "reshape": reshape,
    "bce-with-logits": bce_with_logits,
    "softmax-cross-entropy": softmax_cross_entropy,
    "mean-squared-error": mean_squared_error,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch an op by its kind name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown op kind {kind!r}") from None
    return fn(*operands, **kwargs)


def hvp(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    v: np.ndarray,
    freeze_relu: bool = True,
) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient.

    ``grad_fn`` maps a flat parameter vector to the flat gradient of a
    deterministic loss. The step is ``sqrt(eps) * (1 + |theta|) / |v|``, so the
    product is exact for quadratics up to rounding.

    With ``freeze_relu`` the relu activation pattern seen at ``theta + eps v``
    is replayed at ``theta - eps v``. Both gradients then come from the same
    smooth branch, so a kink lying inside the stencil cannot inject an
    O(1/eps) spike. Functions without relus are unaffected.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise UsageError(f"hvp: vector length {v.shape} does not match parameters {theta.shape}")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(theta)
    eps = np.sqrt(np.finfo(np.float64).eps) * (1.0 + float(np.linalg.norm(theta))) / max(vnorm, 1e-12)
    if not freeze_relu:
        return (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2.0 * eps)
    with relu_masks() as recorded:
        g_plus = grad_fn(theta + eps * v)
    with relu_masks(recorded):
        g_minus = grad_fn(theta - eps * v)
    return (g_plus - g_minus) / (2.0 * eps)
