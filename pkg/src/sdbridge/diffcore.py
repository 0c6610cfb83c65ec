"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the attention denoiser and the bridge losses need are
provided. Every op is a plain function that computes its output with numpy
and, when a :class:`Tape` is active and at least one operand lives on it,
records a vector-Jacobian product closure.

    >>> with Tape() as tape:
    ...     x = tape.watch(Tensor([[1.0, 2.0]]))
    ...     loss = sum_(mul(x, x))
    ...     grads = tape.backward(loss)
    >>> grads[x.node]
    array([[2., 4.]])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Tape", "active_tape", "no_grad", "apply",
    "add", "sub", "scale", "mul", "matmul", "softmax_rows", "layer_norm",
    "gelu", "sum_", "mean", "mse", "concat_rows", "slice_rows", "transpose",
    "reshape", "softmax_cross_entropy",
    "AdamState", "adam_step", "Adam",
]

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Return the innermost active tape of this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Context manager that suspends recording on this thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tensor:
    """A dense row-major float64 array, optionally registered on a tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, *, _node=None, _tape=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.node = _node
        self.tape = _tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    out: int
    inputs: tuple
    vjp: object
    op: str


class Tape:
    """Ordered record of differentiable operations.

    One tape holds one graph. Use it as a context manager to make it the
    active tape for the current thread; :meth:`clear` invalidates every node
    id it issued.
    """

    def __init__(self):
        self._records = []
        self._leaves = {}
        self._next_id = 0
        self._generation = 0

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def _issue(self):
        node = (self._generation, self._next_id)
        self._next_id += 1
        return node

    def owns(self, tensor):
        return (
            isinstance(tensor, Tensor)
            and tensor.tape is self
            and tensor.node is not None
            and tensor.node[0] == self._generation
        )

    def watch(self, tensor):
        """Register ``tensor`` as a differentiable leaf and return it."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        if self.owns(tensor):
            return tensor
        tensor.node = self._issue()
        tensor.tape = self
        self._leaves[tensor.node] = tensor.data.shape
        return tensor

    def watch_params(self, params):
        """Wrap a ``{name: ndarray}`` mapping into watched leaf tensors."""
        return {name: self.watch(Tensor(value)) for name, value in params.items()}

    def record(self, op, data, inputs, vjp):
        node = self._issue()
        ids = tuple(t.node if self.owns(t) else None for t in inputs)
        self._records.append(_Record(node, ids, vjp, op))
        return Tensor(data, _node=node, _tape=self)

    def clear(self):
        self._records.clear()
        self._leaves.clear()
        self._next_id = 0
        self._generation += 1

    def backward(self, loss):
        """Reverse-replay the tape from a scalar ``loss``.

        Returns a dict mapping node ids to gradient arrays. Every watched
        leaf gets an entry; leaves the loss does not reach get zeros.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim != 1:
            raise ContractError("backward needs a scalar loss of shape (1,)")
        if not self.owns(loss):
            raise ContractError("loss is not on this tape (or the tape was cleared)")
        grads = {loss.node: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.get(rec.out)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for node, ig in zip(rec.inputs, in_grads):
                if node is None or ig is None:
                    continue
                prev = grads.get(node)
                grads[node] = ig if prev is None else prev + ig
        return {leaf: grads[leaf] if leaf in grads else np.zeros(shape)
                for leaf, shape in self._leaves.items()}

    def gradients(self, loss, tensors):
        """Convenience: gradients for a ``{name: Tensor}`` mapping."""
        grads = self.backward(loss)
        return {name: grads[t.node] for name, t in tensors.items()}


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, data, inputs, vjp):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")
    tape = active_tape()
    if tape is not None and any(tape.owns(t) for t in inputs):
        return tape.record(op, data, inputs, vjp)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit("gelu", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul", f"operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one matrix: a single 2-D GEMM is much faster
        lead = ad.shape[:-1]
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(lead + (bd.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _emit("matmul", out, (a, b), vjp)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", np.matmul(ad, bd), (a, b), vjp)


def transpose(a, axes=None):
    """Permute axes; the default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose", f"needs ndim >= 2, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("transpose", f"axes {axes} do not permute {a.ndim} dims")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", f"cannot reshape {old} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat_rows(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_rows", "nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError("concat_rows", str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat_rows", out, tuple(tensors), vjp)


def slice_rows(a, start, stop, axis=0):
    a = _as_tensor(a)
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise DimensionError("slice_rows", f"range [{start}, {stop}) outside axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice_rows", a.data[index], (a,), vjp)


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(a):
    """Softmax along the last axis."""
    a = _as_tensor(a)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (a,), vjp)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance, then ``gain*x + bias``."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layer_norm", f"gain/bias must have shape ({n},), got {gain.shape}, {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gd + bias.data, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(a, axis=None):
    """Sum all entries (shape (1,)) or along ``axis``."""
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit("sum", np.array([a.data.sum()]), (a,),
                     lambda g: (np.broadcast_to(g[0], shape).copy(),))
    out = a.data.sum(axis=axis)
    return _emit("sum", out, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis=None):
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def mse(a, b):
    """Mean squared error over all entries, shape (1,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mse", f"shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 * g[0] / n) * diff
        return ga, -ga

    return _emit("mse", np.array([np.mean(diff * diff)]), (a, b), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-softmax ``logits``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("softmax_cross_entropy",
                             f"logits {logits.shape} vs labels {labels.shape}")
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - logz
    rows = np.arange(len(labels))
    n = len(labels)

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g[0] / n),)

    return _emit("softmax_cross_entropy", np.array([-logp[rows, labels].mean()]), (logits,), vjp)


_OPS = {
    "add": add,
    "sub": sub,
    "scale": scale,
    "elementwise-mul": mul,
    "matmul": matmul,
    "softmax-rows": softmax_rows,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "sum": sum_,
    "mean-squared-error": mse,
    "concat-rows": lambda *ts, axis=0: concat_rows(ts, axis=axis),
    "slice-rows": slice_rows,
    "transpose": transpose,
}


def apply(op_kind, *operands, **kwargs):
    """Dispatch by op name, e.g. ``apply("matmul", a, b)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    Pure function: returns ``(new_params, new_state)`` and leaves the inputs
    untouched.
    """
    if params.keys() != grads.keys():
        missing = set(params) ^ set(grads)
        raise ContractError(f"params and grads are not key-aligned: {sorted(missing)}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_params[name] = p - learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name] = m
        v_new[name] = v
    return new_params, AdamState(step, m_new, v_new)


class Adam:
    """Stateful wrapper around :func:`adam_step` that updates arrays in place."""

    def __init__(self, learning_rate=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, params, grads):
        new, self.state = adam_step(params, grads, self.state, self.learning_rate,
                                    self.beta1, self.beta2, self.eps)
        for name, value in new.items():
            params[name][...] = value
        return params
