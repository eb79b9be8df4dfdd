"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
which pushes the output gradient back onto them.  :func:`backward` orders the
recorded graph topologically (the tape) and visits each node once.
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MASK_VALUE = -np.finfo(np.float64).max

_DEBUG = bool(os.environ.get("SPTLSA_DEBUG"))


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the op's domain."""


class DegenerateRowError(DomainError):
    """A softmax row has every entry masked."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned different values."""


class NumericalError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


@contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for non-finite values while active."""
    global _DEBUG
    previous = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return scale(self, 1.0, divisor=float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named learnable leaf.

    ``lower_bound`` is enforced by the optimizer after each update;
    ``clamp_events`` counts how often that happened.
    """

    __slots__ = ("name", "lower_bound", "clamp_events")

    def __init__(self, data, name: str = "", lower_bound: float | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.lower_bound = lower_bound
        self.clamp_events = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    _check(data, op)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward_fn, op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- tape

def build_tape(output: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes ending in ``output``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``grad`` on every differentiable node feeding ``output``.

    Leaf gradients accumulate across calls; interior gradients are reset.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any differentiable tensor")
    tape = build_tape(output)
    for node in tape:
        if not node.is_leaf:
            node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ----------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, factor: float = 1.0, divisor: float | None = None) -> Tensor:
    """Multiply by a constant, or divide by one when ``divisor`` is given."""
    if divisor is not None:
        out = a.data / divisor

        def bw(g):
            _accumulate(a, g / divisor)
    else:
        out = a.data * factor

        def bw(g):
            _accumulate(a, g * factor)

    return _make(out, (a,), bw, "scale")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), bw, "gelu")


# ------------------------------------------------------------ reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


# ------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # token-wise projection: fold the leading axes into one big 2-D product
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a2.T @ g2)

        return _make(out, (a, b), bw, "matmul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ----------------------------------------------------------- structural

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from exc

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tensors, bw, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing (crop).  Advanced indexing is routed through ``np.add.at``."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for a {a.ndim}-d tensor")
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))

    def bw(g):
        _accumulate(a, g[crop])

    return _make(np.pad(a.data, widths), (a,), bw, "pad")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; they get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)

    def bw(g):
        _accumulate(a, np.where(mask, 0.0, g))

    return _make(np.where(mask, value, a.data), (a,), bw, "masked_fill")


# -------------------------------------------------- softmax, norm, loss

def tempered_softmax(logits: Tensor, temperature=1.0) -> Tensor:
    """Softmax of ``logits / temperature`` along the last axis.

    ``temperature`` is a positive float or a tensor broadcastable against the
    logits (e.g. one value per head with shape ``[h, 1, 1]``).  Entries at or
    below :data:`MASK_VALUE` come out as exact zeros.
    """
    logits = as_tensor(logits)
    temp = as_tensor(temperature)
    if np.any(temp.data <= 0):
        raise DomainError(f"softmax temperature must be positive, got min {temp.data.min()}")
    masked = logits.data <= MASK_VALUE
    if np.any(np.all(masked, axis=-1)):
        raise DegenerateRowError("softmax row with every entry masked")
    with np.errstate(over="ignore"):
        scaled = logits.data / temp.data
    scaled = np.where(masked, -np.inf, scaled)
    shifted = scaled - np.max(scaled, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        ds = p * (g - np.sum(g * p, axis=-1, keepdims=True))
        if logits.requires_grad:
            _accumulate(logits, ds / temp.data)
        if temp.requires_grad:
            contrib = np.where(masked, 0.0, ds * np.where(masked, 0.0, scaled))
            _accumulate(temp, _unbroadcast(-contrib / temp.data, temp.shape))

    return _make(p, (logits, temp), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x = as_tensor(x)
    f = x.shape[-1]
    if gain.shape != (f,) or bias.shape != (f,):
        raise ShapeError(f"layer_norm: features {f}, gain {gain.shape}, bias {bias.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, f).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, f).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``[B, K]`` logits against integer labels.

    With ``smoothing`` = eps the target is ``(1 - eps) * onehot + eps / K``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError("label outside [0, num_classes)")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    if smoothing == 0.0:
        loss = -np.mean(logp[rows, labels])
        target = np.zeros_like(logp)
        target[rows, labels] = 1.0
    else:
        target = np.full_like(logp, smoothing / k)
        target[rows, labels] += 1.0 - smoothing
        loss = -np.mean(np.sum(target * logp, axis=-1))

    def bw(g):
        _accumulate(logits, g * (np.exp(logp) - target) / n)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------- gradient checking

def _relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    diff = abs(analytic - numeric)
    scale_ = max(abs(analytic), abs(numeric))
    if scale_ < floor:
        return diff
    return diff / scale_


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6,
                      max_coords: int | None = None, rng=None,
                      return_details: bool = False):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar loss from the current values of ``params``.  With
    ``max_coords`` set, that many coordinates are drawn (without replacement)
    from each parameter instead of checking all of them.  When both gradient
    magnitudes fall below 1e-8 the absolute difference is used instead.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise DomainError(f"finite-difference step {eps} outside [1e-8, 1e-4]")
    params = list(params)
    rng = np.random.default_rng(rng)
    first = f()
    second = f()
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("f returned different values for identical inputs")
    for p in params:
        p.grad = None
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    backward(second)
    worst = 0.0
    details = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = _relative_error(float(analytic.reshape(-1)[i]), numeric)
            worst = max(worst, err)
            if return_details:
                details.append((getattr(p, "name", ""), int(i), float(analytic.reshape(-1)[i]), numeric, err))
    if return_details:
        return worst, details
    return worst
