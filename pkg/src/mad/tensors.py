"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node at execution time; ``backward`` replays
the recorded nodes in reverse creation order, so the execution order is the
topological order. Outputs are checked for NaN/Inf on creation.

Arrays are numpy ``float64`` throughout. Batched variants of the ops accept
leading batch dimensions where a network needs them.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError, GeometryError, NumericError, ParameterError

__all__ = [
    "Tensor", "ComputeGraph", "tensor", "no_grad", "is_grad_enabled", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "square", "sigmoid", "tanh",
    "gelu", "glu", "matmul", "sum", "mean", "reshape", "transpose", "swapaxes", "getitem",
    "concat", "maximum", "masked_fill", "softmax", "log_softmax", "logsumexp",
    "conv1d", "layer_norm", "linear",
]

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (inference, parameter updates)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``grad`` is populated by :func:`backward` for tensors with
    ``requires_grad=True`` and accumulates across calls until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

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
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        raise NotImplementedError("only powers 2 and 0.5 are supported")

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    # a finite sum implies finite elements (overflow only errs on the safe side)
    if not math.isfinite(float(np.sum(data))):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.name = None
    out._op = op
    out._id = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class ComputeGraph:
    """Nodes reachable from a root, in execution (creation) order."""

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        self.nodes = [seen[k] for k in sorted(seen)]

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is None and t.requires_grad]


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Tensors listed in ``leaves`` that the loss does not depend on receive an
    explicit zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in leaves:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    graph = ComputeGraph(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), grad_fn, "gelu")


def glu(a, axis: int = -2) -> Tensor:
    """Gated linear unit: first half of ``axis`` times sigmoid of the second half.

    The default axis is the channel axis of a ``[..., 2C, T]`` activation.
    """
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if n % 2:
        raise DimensionError(f"glu needs an even size along axis {axis}, got shape {a.shape}")
    h = n // 2
    value, gate = np.split(a.data, [h], axis=ax)
    s = _sigmoid(gate)

    def grad_fn(g):
        return (np.concatenate([g * s, g * value * s * (1.0 - s)], axis=ax),)

    return _make(value * s, (a,), grad_fn, "glu")


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient passes where ``a > floor``."""
    a = _as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "maximum")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, value, a.data), (a,),
                 lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),), "masked_fill")


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = m + np.log(s)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * e / s,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), grad_fn, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), grad_fn, "log_softmax")


# ---------------------------------------------------------------------- shapes


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),),
                 "swapaxes")


def getitem(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), grad_fn, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules.

    A 2-D right operand is applied to every row of a batched left operand.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def grad_fn(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), grad_fn, "matmul")

    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def conv1d(x, w, bias=None, dilation: int = 1, padding: str | int = "same", stride: int = 1) -> Tensor:
    """Dilated 1-D cross-correlation.

    ``x`` is ``[Cin, T]`` or ``[B, Cin, T]``; ``w`` is ``[Cout, Cin, K]``.
    ``padding="same"`` zero-pads ``(K-1)*dilation/2`` per side (odd K only),
    ``"none"`` pads nothing, an int pads that many samples per side.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if bias is None else _as_tensor(bias)
    if dilation < 1 or stride < 1:
        raise ParameterError(f"dilation and stride must be >= 1, got {dilation}, {stride}")
    if w.ndim != 3:
        raise DimensionError(f"conv1d weight must be [Cout, Cin, K], got {w.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be [Cin, T] or [B, Cin, T], got {x.shape}")
    cout, cin, k = w.shape
    if xd.shape[1] != cin:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv1d bias must be [{cout}], got {b.shape}")
    if padding == "same":
        if k % 2 == 0:
            raise GeometryError(f"padding='same' needs an odd kernel, got K={k}")
        pad = (k - 1) * dilation // 2
    elif padding == "none":
        pad = 0
    else:
        pad = int(padding)
    bsz, _, t_in = xd.shape
    span = (k - 1) * dilation
    t_out = (t_in + 2 * pad - span - 1) // stride + 1
    if t_out <= 0 or t_in + 2 * pad - span <= 0:
        raise GeometryError(
            f"conv1d output length {t_out} <= 0 (T={t_in}, K={k}, dilation={dilation}, pad={pad})")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    stop = stride * (t_out - 1) + 1
    # cols[b, i, j, t] = xp[b, i, t*stride + j*dilation]
    cols = np.stack([xp[:, :, j * dilation:j * dilation + stop:stride] for j in range(k)], axis=2)
    cols2 = cols.transpose(1, 2, 0, 3).reshape(cin * k, bsz * t_out)
    w2 = w.data.reshape(cout, cin * k)
    out = (w2 @ cols2).reshape(cout, bsz, t_out).transpose(1, 0, 2)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        g2 = g3.transpose(1, 0, 2).reshape(cout, bsz * t_out)
        gw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, k, bsz, t_out).transpose(2, 0, 1, 3)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation:j * dilation + stop:stride] += gcols[:, :, j]
            gx = gxp[:, :, pad:pad + t_in] if pad else gxp
            if squeeze:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, grad_fn, "conv1d")


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    x = _as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad_x(g):
        n = x.shape[-1]
        return inv * (g - g.mean(axis=-1, keepdims=True)
                      - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n)

    y = _make(xhat, (x,), lambda g: (grad_x(g),), "layer_norm")
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


# ------------------------------------------------------------------- checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``f`` recomputes the scalar loss from the current parameter values. For
    parameters with more than ``max_coords`` entries a seeded random subset of
    ``max_coords`` coordinates is probed. The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not (0.0 < eps <= 1e-2):
        raise ParameterError(f"eps must be in (0, 1e-2], got {eps}")
    rng = np.random.default_rng(seed)
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("non-finite loss during finite differences")
                num = (fp - fm) / (2.0 * eps)
                ana = ga.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
