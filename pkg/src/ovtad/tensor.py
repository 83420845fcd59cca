"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread (``with Tape() as tape: ...``). Outside a tape nothing is recorded,
which is the inference path.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "as_tensor", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose", "reshape",
    "exp", "log", "power", "sigmoid", "softplus", "relu", "gelu", "square", "tanh",
    "softmax", "log_softmax", "layer_norm", "depthwise_conv1d",
    "sum", "mean", "index", "concat", "stack", "maximum", "minimum", "clamp",
    "gradcheck",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "out", "adjoint")

    def __init__(self, inputs, out, adjoint):
        self.inputs = inputs
        self.out = out
        self.adjoint = adjoint


class Tensor:
    """A row-major float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, out, adjoint) -> None:
        node = _Node(inputs, out, adjoint)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        if loss.is_leaf:
            loss.grad = loss.grad + 1.0
            return
        adj = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            grads = node.adjoint(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = adj.get(key)
                    adj[key] = gi if prev is None else prev + gi
        if adj:
            raise ValueError("loss was not produced on this tape")


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._node = None
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.grad = None
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(tuple(inputs), out, adjoint)
    return out


def _unbias(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reverse of the bias-add / scalar broadcast allowed by add/mul
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.shape == () or a.shape == ():
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# elementwise binary
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbias(g, sa), _unbias(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbias(g, sa), -_unbias(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbias(g * bd, ad.shape), _unbias(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbias(g / bd, ad.shape), _unbias(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick = a.data >= b.data
    return _make(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_unbias(g * pick, a.shape), _unbias(g * ~pick, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick = a.data <= b.data
    return _make(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_unbias(g * pick, a.shape), _unbias(g * ~pick, b.shape)))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# elementwise unary
# --------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for nonnegative ``a``."""
    a = as_tensor(a)
    ad = a.data
    out = ad ** exponent
    if exponent == 0:
        return _make(out, (a,), lambda g: (np.zeros_like(g),))
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def adjoint(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), adjoint)


# --------------------------------------------------------------------------
# linear algebra and shape
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    src = a.shape

    def adjoint(g):
        out = np.zeros(src)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(a.data[key]), (a,), adjoint)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# --------------------------------------------------------------------------
# reductions and normalisations
# --------------------------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    src = a.shape

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    shape = a.shape

    def adjoint(g):
        g = np.asarray(g) / n
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), adjoint)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), adjoint)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def adjoint(g):
        lead = g.reshape(-1, d)
        dgamma = (lead * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = lead.sum(axis=0)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), adjoint)


def depthwise_conv1d(x, kernels, stride: int = 1, padding: int | None = None) -> Tensor:
    """Per-channel 1-D correlation of ``x`` (T x d) with ``kernels`` (k x d).

    Output row ``j`` is ``sum_i kernels[i] * xpad[j*stride + i]`` where ``xpad``
    is ``x`` zero-padded by ``padding`` rows on both ends (default ``k // 2``).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"depthwise_conv1d: empty or non-matrix input {x.shape}")
    k, d = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"depthwise_conv1d: kernel size must be odd, got {k}")
    if x.shape[1] != d:
        raise ValueError(f"depthwise_conv1d: channels {x.shape[1]} vs kernels {kernels.shape}")
    if stride < 1:
        raise ValueError("depthwise_conv1d: stride must be >= 1")
    p = k // 2 if padding is None else padding
    T = x.shape[0]
    t_out = (T + 2 * p - k) // stride + 1
    xpad = np.zeros((T + 2 * p, d))
    xpad[p:p + T] = x.data
    span = stride * (t_out - 1) + 1
    windows = [xpad[i:i + span:stride] for i in range(k)]
    out = np.zeros((t_out, d))
    for i in range(k):
        out += windows[i] * kernels.data[i]

    def adjoint(g):
        dk = np.stack([(g * w).sum(axis=0) for w in windows])
        dxpad = np.zeros_like(xpad)
        for i in range(k):
            dxpad[i:i + span:stride] += g * kernels.data[i]
        return dxpad[p:p + T], dk

    return _make(out, (x, kernels), adjoint)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              coords: int | None = None, seed: int = 0, floor: float = 1e-4) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to a scalar. Relative error per input is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`` over the
    checked coordinates: all of them, or ``coords`` sampled ones per input.
    The floor keeps an exactly-zero gradient (an attention key bias, say) from
    turning finite-difference round-off into a relative error of 1.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = np.sort(rng.choice(flat.size, size=coords, replace=False))
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        analytic = t.grad.reshape(-1)[idx]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
