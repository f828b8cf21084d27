"""Reverse-mode tensor core.

A small, closed set of float32 operations with hand-written vector-Jacobian
products, recorded on a per-result graph. This is not a general autodiff
system: only the ops the ViT / self-distillation / classifier stack needs
exist, and each one states its own derivative.

Conventions:
  * data is always float32, row-major; loss reductions accumulate in float64
  * tensors are immutable once created; ops return new tensors
  * every forward op validates that its output is finite
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

# log floor inside cross-entropy; teacher sharpening can push student
# probabilities to exact float32 zero
CE_EPS = 1e-12

_GRAD_ENABLED = True
_FINITE_CHECKS = True
_DTYPE = np.float32


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily widen forward arithmetic (finite-difference reference only).

    Production paths and recorded gradients are float32; the test suite
    evaluates difference quotients under float64 so the reference is not
    drowned by float32 rounding.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float32 array plus an optional backward recipe."""

    __slots__ = ("data", "requires_grad", "_vjps", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._vjps = ()  # tuple of (parent Tensor, grad -> parent grad)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the real ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class GradientRecord:
    """Gradients of one scalar loss, keyed by parameter identity."""

    def __init__(self):
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _add(self, t: Tensor, g: np.ndarray):
        key = id(t)
        if key in self._grads:
            self._grads[key] = (t, self._grads[key][1] + g)
        else:
            self._grads[key] = (t, g)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zeros if it did not participate in the forward."""
        entry = self._grads.get(id(t))
        if entry is None:
            return np.zeros(t.shape, dtype=np.float32)
        return entry[1]

    def tensors(self):
        return [t for t, _ in self._grads.values()]


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _check_finite(arr: np.ndarray, op: str):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, vjps, op: str) -> Tensor:
    data = np.asarray(data, dtype=_DTYPE)
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED:
        live = tuple((p, fn) for p, fn in vjps if p.requires_grad)
        if live:
            out._vjps = live
            out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(
        out,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
        "mul",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * -1.0, [(a, lambda g: -g)], "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked ``a`` against a 2-D ``b`` or equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def grad_b(g):
        ga = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, b.shape)

    return _make(out, [(a, grad_a), (b, grad_b)], "matmul")


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    out = a.data**p
    return _make(out, [(a, lambda g: g * p * a.data ** (p - 1.0))], "powc")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)], "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    return _make(out, [(a, lambda g: g / a.data)], "log")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, [(a, lambda g: g.reshape(a.shape))], "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, [(a, lambda g: g.transpose(inv))], "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp_for(i):
        def fn(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return fn

    return _make(out, [(t, vjp_for(i)) for i, t in enumerate(tensors)], "concat")


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; backward scatters into zeros."""
    a = _as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float32)
        full[key] = g
        return full

    return _make(out, [(a, vjp)], "index")


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape))], "broadcast_to")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def vjp(g):
        g = np.asarray(g, dtype=np.float32)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape).astype(np.float32)

    return _make(out, [(a, vjp)], "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        g = np.asarray(g, dtype=np.float32) / np.float32(count)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape).astype(np.float32)

    return _make(out, [(a, vjp)], "mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(np.float32)
    return _make(out, [(a, lambda g: g * mask)], "relu")


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))
_GELU_A = np.float32(0.044715)


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh formulation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        # derivative computed lazily; inference never pays for it
        inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner
        return g * local.astype(np.float32, copy=False)

    return _make(out, [(a, vjp)], "gelu")


def tempered_softmax(logits: Tensor, tau: float) -> Tensor:
    """Row softmax of ``logits / tau`` over the last axis, max-subtracted."""
    if not (isinstance(tau, (int, float)) and tau > 0):
        raise ValueError(f"temperature must be positive, got {tau!r}")
    a = _as_tensor(logits)
    if a.shape == () or a.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit per row")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax input contains non-finite logits")
    z = a.data if tau == 1.0 else a.data / a.data.dtype.type(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        out = (g - inner) * p
        if tau != 1.0:
            out /= np.float32(tau)
        return out.astype(np.float32, copy=False)

    return _make(p, [(a, vjp)], "tempered_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def grad_x(g):
        gh = g * gamma.data
        s1 = gh.sum(axis=-1, keepdims=True)
        s2 = (gh * xhat.astype(np.float32, copy=False)).sum(axis=-1, keepdims=True)
        return inv * (gh - s1 / n - xhat * s2 / n)

    def grad_gamma(g):
        return _unbroadcast(g * xhat, gamma.shape)

    def grad_beta(g):
        return _unbroadcast(g, beta.shape)

    return _make(out, [(x, grad_x), (gamma, grad_gamma), (beta, grad_beta)], "layernorm")


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)).astype(x.data.dtype)
    norm = np.maximum(norm, x.data.dtype.type(eps))
    y = x.data / norm

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norm).astype(np.float32, copy=False)

    return _make(y, [(x, vjp)], "l2_normalize")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return _make(x.data * keep, [(x, lambda g: g * keep)], "dropout")


# ---------------------------------------------------------------------------
# losses


def cross_entropy_rows(p_teacher: Tensor, p_student: Tensor) -> Tensor:
    """Mean over rows of -sum_i p_t[i] * log(p_s[i] + eps).

    Both inputs must be row-stochastic over the last axis. The additive
    CE_EPS floor guards exact zeros in the student distribution.
    """
    p_t, p_s = _as_tensor(p_teacher), _as_tensor(p_student)
    if p_t.shape != p_s.shape:
        raise ValueError(f"shape mismatch: {p_t.shape} vs {p_s.shape}")
    for name, p in (("teacher", p_t), ("student", p_s)):
        sums = p.data.sum(axis=-1, dtype=np.float64)
        if np.any(p.data < -1e-6) or not np.allclose(sums, 1.0, atol=1e-3):
            raise ValueError(f"{name} rows are not probability distributions")
    rows = int(np.prod(p_t.shape[:-1])) if p_t.data.ndim > 1 else 1
    logq = np.log(p_s.data.astype(np.float64) + CE_EPS)
    out = -(p_t.data.astype(np.float64) * logq).sum() / rows

    def grad_student(g):
        g = np.float32(g)
        return (-p_t.data / (p_s.data + np.float32(CE_EPS))) * (g / np.float32(rows))

    def grad_teacher(g):
        g = np.float32(g)
        return (-logq.astype(np.float32)) * (g / np.float32(rows))

    return _make(out, [(p_t, grad_teacher), (p_s, grad_student)], "cross_entropy_rows")


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy from raw logits, numerically stable."""
    z, y = _as_tensor(logits), _as_tensor(targets)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {y.shape}")
    zd = z.data.astype(np.float64)
    per = np.maximum(zd, 0.0) - zd * y.data + np.log1p(np.exp(-np.abs(zd)))
    out = per.sum() / z.size

    def grad_logits(g):
        sig = 1.0 / (1.0 + np.exp(-z.data))
        return (sig - y.data) * (np.float32(g) / np.float32(z.size))

    return _make(out, [(z, grad_logits)], "bce_with_logits")


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> GradientRecord:
    """Gradients of a recorded scalar w.r.t. every participating parameter."""
    if loss.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward pass")
    loss._consumed = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    record = GradientRecord()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._vjps:
            if node.requires_grad:
                record._add(node, g)
            continue
        for parent, vjp in node._vjps:
            pg = np.asarray(vjp(g), dtype=np.float32)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return record
