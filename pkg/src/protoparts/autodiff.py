"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node on the current thread's tape when any
input requires a gradient. ``backward`` walks the tape in reverse, so the
tape order is the topological order. Only leaf tensors keep ``.grad``.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/Inf from finite inputs, or grads go non-finite."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=current_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def current_dtype():
    return getattr(_local, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Evaluate ops in ``dtype`` (float64 is meant for finite-difference oracles)."""
    prev = current_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _d(t: "Tensor") -> np.ndarray:
    dt = current_dtype()
    return t.data if t.data.dtype == dt else t.data.astype(dt)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and, if needed, record its backward rule.

    ``backward_fn(g)`` returns one gradient (or None) per input.
    """
    data = np.asarray(data, dtype=current_dtype())
    if not np.isfinite(data).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NonFiniteError(f"{op}: non-finite output from finite inputs")
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    out._leaf = False
    if needs:
        current_tape().record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape() if tape is None else tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        if loss._leaf:
            _accumulate(loss, pending.pop(id(loss)))
        for node in reversed(tape.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._leaf:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
    finally:
        tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply("add", _d(a) + _d(b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply("sub", _d(a) - _d(b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _d(a), _d(b)
    return apply("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = _d(x) > 0
    return apply("relu", np.where(mask, _d(x), 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(_d(x))
    pos = _d(x) >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-_d(x)[pos]))
    e = np.exp(_d(x)[~pos])
    s[~pos] = e / (1.0 + e)
    return apply("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def log(x: Tensor) -> Tensor:
    xd = _d(x)
    with np.errstate(divide="ignore", invalid="ignore"):  # apply() turns these into NonFiniteError
        out = np.log(xd)
    return apply("log", out, (x,), lambda g: (g / xd,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(_d(x))
    return apply("abs", np.abs(_d(x)), (x,), lambda g: (g * sign,))


# ----------------------------------------------------------------- reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, _d(x).ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return apply("sum", _d(x).sum(axis=axes, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, _d(x).ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply("reshape", _d(x).reshape(shape), (x,), lambda g: (g.reshape(old),))


def _extreme(x: Tensor, axis, pick) -> tuple[Tensor, np.ndarray]:
    axes = _norm_axes(axis, _d(x).ndim)
    keep = [a for a in range(_d(x).ndim) if a not in axes]
    moved = np.transpose(_d(x), keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = pick(flat, axis=-1)  # first occurrence on ties, row-major over reduced axes
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        gflat = np.zeros(flat.shape, dtype=current_dtype())
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(keep + list(axes))
        return (np.transpose(gmoved, inv).reshape(shape),)

    return apply(pick.__name__, vals, (x,), bw), idx


def amax(x: Tensor, axis=None) -> tuple[Tensor, np.ndarray]:
    """Maximum over ``axis`` plus flat argmax indices (row-major, first on ties)."""
    return _extreme(x, axis, np.argmax)


def amin(x: Tensor, axis=None) -> tuple[Tensor, np.ndarray]:
    return _extreme(x, axis, np.argmin)


# ----------------------------------------------------------------- layers


def dense(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ bias)`` for x: N x Din, w: Dout x Din."""
    if _d(x).ndim != 2 or _d(w).ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = _d(x), _d(w)
    out = xd @ wd.T
    inputs: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ValueError(f"dense: bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + _d(bias)
        inputs = (x, w, bias)

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return apply("dense", out, inputs, bw)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (im2col + one matmul)."""
    if _d(x).ndim != 4 or _d(kernel).ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xd = _d(x)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # columns laid out (N, C*kh*kw, Ho*Wo) so both passes are batched matmuls without transposes
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = _d(kernel).reshape(f, -1)
    out = np.matmul(wmat, cols).reshape(n, f, ho, wo)
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out += _d(bias)[None, :, None, None]
        inputs = (x, kernel, bias)
    xp_shape = xp.shape

    def bw(g):
        g3 = g.reshape(n, f, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply("conv2d", out, inputs, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pool; ties route gradient to the first cell in scan order."""
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d supports only window=2, stride=2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d: spatial extents must be even, got {h}x{w}")
    blocks = _d(x).reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=current_dtype())
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return apply("maxpool2d", out, (x,), bw)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    m = n * h * w
    if m == 0:
        raise ValueError("batchnorm2d: empty batch")
    xd = _d(x)
    dt = current_dtype()
    if train:
        if m < 2:
            raise ValueError("batchnorm2d: train mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64).astype(dt)
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3), dtype=np.float64).astype(dt)
        mom = DTYPE(state.momentum)
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu.astype(DTYPE)).astype(DTYPE)
        state.running_var = ((1 - mom) * state.running_var + mom * var.astype(DTYPE)).astype(DTYPE)
    else:
        mu, var = state.running_mean.astype(dt), state.running_var.astype(dt)
        centered = xd - mu[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(dt)
    xhat = centered * inv_std[None, :, None, None]
    gd = _d(gamma)
    out = xhat * gd[None, :, None, None] + _d(beta)[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if train:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return apply("batchnorm2d", out, (x, gamma, beta), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = _d(logits) - _d(logits).max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return apply("softmax_cross_entropy", np.asarray(loss, dtype=current_dtype()), (logits,), bw)


# ----------------------------------------------------------------- optimizers


def _check_grads(params: Sequence[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int(np.count_nonzero(~np.isfinite(p.grad)))
            raise NonFiniteError(
                f"non-finite gradient in parameter {i} ({p.name or 'unnamed'}, "
                f"shape {p.shape}): {bad} bad entries")


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        _check_grads(self.params)
        lr, mom = DTYPE(self.lr), DTYPE(self.momentum)
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= mom
                v += p.grad
                p.data -= lr * v
            else:
                p.data -= lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        _check_grads(self.params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= DTYPE(b1)
            m += DTYPE(1 - b1) * g
            v *= DTYPE(b2)
            v += DTYPE(1 - b2) * g * g
            mhat = m / DTYPE(c1)
            vhat = v / DTYPE(c2)
            p.data -= DTYPE(self.lr) * mhat / (np.sqrt(vhat) + DTYPE(self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(params: Sequence[Tensor], spec: dict):
    """Build an optimizer from ``{"sgd": {...}}`` or ``{"adam": {...}}``."""
    if len(spec) != 1:
        raise ValueError(f"optimizer spec needs exactly one of sgd/adam, got {sorted(spec)}")
    (kind, kwargs), = spec.items()
    if kind == "sgd":
        return SGD(params, **kwargs)
    if kind == "adam":
        return Adam(params, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(optimizer) -> None:
    """Apply one update from the current grads, then clear them."""
    optimizer.step()
    optimizer.zero_grad()
