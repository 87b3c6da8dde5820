"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation builds a node holding its inputs and a closure that maps the
output gradient to input gradients; backward() topologically sorts the tape
and visits each node once, accumulating into .grad. Only the primitives the
encoder and losses need are provided: conv2d (cross-correlation), linear,
relu, max_pool2d, global_avg_pool, concat, flatten, plus broadcasting
elementwise arithmetic, log, exp, abs, pow, sum, mean, and indexing.

Conventions
  - float32 is the training precision; float64 exists for gradient
    verification. Mixing the two in one op is an error, not a silent cast.
  - Every forward result is checked for NaN/Inf and trips an error naming
    the op, so numerical blowups surface where they happen.
  - Gradients accumulate additively until zeroed; running backward twice
    doubles them.
  - Frozen parameters never receive gradient and report exact zeros.
"""

from __future__ import annotations

import contextlib
from math import sqrt

import numpy as np

from .rng import uniform_array

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _guard(op: str, data: np.ndarray) -> np.ndarray:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite values in result")
    return data


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, (np.ndarray, np.generic)):
            data = np.asarray(data)
            if data.dtype not in _FLOAT_DTYPES:
                data = data.astype(np.float32)
        else:
            data = np.asarray(data, dtype=np.float32)
        self.data = _guard("tensor", data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; definitions live in the module-level ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Parameter(Tensor):
    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data), requires_grad=not frozen)
        if self.data.dtype not in _FLOAT_DTYPES:
            raise ValueError(f"parameter {name!r}: floating dtype required")
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.data.shape}{tag})"


def set_frozen(p: Parameter, frozen: bool) -> None:
    """Flip a parameter's frozen state, keeping grad flow consistent."""
    p.frozen = frozen
    p.requires_grad = not frozen


def uniform_parameter(
    seed: int, shape: tuple[int, ...], fan_in: int, name: str = "",
    frozen: bool = False, dtype=np.float32,
) -> Parameter:
    """Fan-in-scaled uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    drawn from the documented seeded generator."""
    limit = 1.0 / sqrt(fan_in)
    n = int(np.prod(shape)) if shape else 1
    values = uniform_array(seed, n, -limit, limit).reshape(shape).astype(dtype)
    return Parameter(values, name=name, frozen=frozen)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        names = ", ".join(sorted(d.name for d in dtypes))
        raise ValueError(f"{op}: mixed dtypes ({names}); cast inputs explicitly")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if isinstance(t, Parameter) and t.frozen:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(_guard(op, data))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_dtypes("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_dtypes("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_dtypes("mul", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node("mul", a.data * b.data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_dtypes("div", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _node("div", data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node("neg", -a.data, (a,), backward)


def power(a: Tensor, k) -> Tensor:
    k = float(k)

    def backward(g):
        _accumulate(a, g * k * a.data ** (k - 1.0))

    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**k
    return _node("pow", data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _node("abs", np.abs(a.data), (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _node("log", data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node("exp", out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _node("relu", np.maximum(a.data, 0), (a,), backward)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg / count, a.shape).copy())

    return _node("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node("reshape", a.data.reshape(shape), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    """(N, ...) -> (N, product of the rest)."""
    if a.data.ndim < 2:
        raise ValueError(f"flatten: need at least 2 dims, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


def take(a: Tensor, idx) -> Tensor:
    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _node("take", a.data[idx], (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    _check_dtypes("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node("concat", data, tuple(tensors), backward)


# ---------------------------------------------------------------- layers


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w.T + b; w is (out, in), x is (in,) or (batch, in)."""
    _check_dtypes("linear", x, w, b)
    if x.data.ndim not in (1, 2) or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(
            f"linear: bad ranks x{x.shape} w{w.shape} b{b.shape}"
        )
    if x.shape[-1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ValueError(
            f"linear: shape mismatch x{x.shape} w{w.shape} b{b.shape}"
        )
    batched = x.data.ndim == 2
    x2 = x.data if batched else x.data[None, :]
    out = x2 @ w.data.T + b.data

    def backward(g):
        g2 = g if batched else g[None, :]
        _accumulate(x, (g2 @ w.data) if batched else (g2 @ w.data)[0])
        _accumulate(w, g2.T @ x2)
        _accumulate(b, g2.sum(axis=0))

    return _node("linear", out if batched else out[0], (x, w, b), backward)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation; x (N,C,H,W), w (O,C,kh,kw), b (O,)."""
    _check_dtypes("conv2d", x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: bad ranks x{x.shape} w{w.shape}")
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(
            f"conv2d: shape mismatch x{x.shape} w{w.shape} b{b.shape}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * ph, wd + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # (N, C, Ho, Wo, kh, kw)
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b.data[None, :, None, None]

    def backward(g):
        _accumulate(b, g.sum(axis=(0, 2, 3)))
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        _accumulate(w, gw)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                patch = np.tensordot(g, w.data[:, :, ki, kj], axes=([1], [0]))
                gxp[:, :, ki : ki + sh * ho : sh, kj : kj + sw * wo : sw] += (
                    patch.transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
        _accumulate(x, gx)

    return _node("conv2d", out, (x, w, b), backward)


def max_pool2d(x: Tensor, ksize: int, stride: int | None = None) -> Tensor:
    """Windowed max over (H, W); windows must tile the input exactly."""
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d: need (N,C,H,W), got {x.shape}")
    stride = ksize if stride is None else stride
    n, c, h, wd = x.shape
    if h < ksize or wd < ksize or (h - ksize) % stride or (wd - ksize) % stride:
        raise ValueError(
            f"max_pool2d: window {ksize} stride {stride} does not tile {h}x{wd}"
        )
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (ksize, ksize), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, ksize * ksize)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        ii = np.arange(ho)[None, None, :, None] * stride + arg // ksize
        jj = np.arange(wo)[None, None, None, :] * stride + arg % ksize
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, ii, jj), g)
        _accumulate(x, gx)

    return _node("max_pool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: need (N,C,H,W), got {x.shape}")
    n, c, h, wd = x.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy())

    return _node("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


# ---------------------------------------------------------------- verification


def grad_check(fn, params: list[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    fn rebuilds and returns the scalar output from the current parameter
    values. All parameters must be float64 and eps in [1e-7, 1e-3]. Frozen
    parameters are asserted to have exactly zero analytic gradient and are
    not probed. The relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ({p.name!r})")
        p.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ValueError(f"grad_check: fn returned shape {out.shape}, want scalar")
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        if p.frozen:
            if np.any(ana != 0.0):
                raise AssertionError(f"frozen parameter {p.name!r} received gradient")
            continue
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_hi = float(fn().data)
            flat[i] = saved - eps
            f_lo = float(fn().data)
            flat[i] = saved
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = float(ana.reshape(-1)[i])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
