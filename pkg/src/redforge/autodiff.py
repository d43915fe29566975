"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` records the operation that produced it; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates ``d(root)/d(node)`` into ``.grad``.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import FormatError, Reader

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)

    def bw(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)

    def bw(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad, b.shape))
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)

    def bw(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))
    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)

    def bw(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
    return _result(a.data / b.data, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)

    def bw(out):
        a._accum(out.grad * c)
    return _result(a.data * c, (a,), bw, "scale")


def square(a) -> Tensor:
    a = _lift(a)

    def bw(out):
        a._accum(out.grad * 2.0 * a.data)
    return _result(a.data * a.data, (a,), bw, "square")


def sqrt(a) -> Tensor:
    a = _lift(a)
    y = np.sqrt(a.data)

    def bw(out):
        a._accum(out.grad * 0.5 / y)
    return _result(y, (a,), bw, "sqrt")


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)

    def bw(out):
        a._accum(out.grad * y)
    return _result(y, (a,), bw, "exp")


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)

    def bw(out):
        a._accum(out.grad * (1.0 - y * y))
    return _result(y, (a,), bw, "tanh")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only strictly inside (lo, hi)."""
    a = _lift(a)
    inside = (a.data > lo) & (a.data < hi)

    def bw(out):
        a._accum(out.grad * inside)
    return _result(np.clip(a.data, lo, hi), (a,), bw, "clip")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def bw(out):
        a._accum(out.grad * mask)
    return _result(a.data * mask, (a,), bw, "relu")


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = _lift(a)
    slope = np.where(a.data > 0, 1.0, alpha)

    def bw(out):
        a._accum(out.grad * slope)
    return _result(a.data * slope, (a,), bw, "leaky_relu")


# -- linear algebra and shape ops -----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bw(out):
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)
    return _result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = _lift(a)

    def bw(out):
        a._accum(out.grad.T)
    return _result(a.data.T.copy(), (a,), bw, "transpose")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(out):
        a._accum(out.grad.reshape(a.shape))
    return _result(y.copy(), (a,), bw, "reshape")


def take(a, idx) -> Tensor:
    """``a[idx]`` for slices or integer index arrays (repeats accumulate)."""
    a = _lift(a)
    y = a.data[idx]
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(out):
        g = np.zeros_like(a.data)
        if fancy:
            np.add.at(g, idx, out.grad)
        else:
            g[idx] += out.grad
        a._accum(g)
    return _result(np.array(y, dtype=np.float64), (a,), bw, "take")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError("concat: shape mismatch " + " vs ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(out):
        for t, s, e in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(s, e)
                t._accum(out.grad[tuple(sl)])
    return _result(y, tuple(ts), bw, "concat")


# -- reductions -----------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _lift(a)

    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))
    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.shape[axis]

    def bw(out):
        g = out.grad / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))
    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


mean_pool = mean


def max_pool(a, axis: int = 0) -> Tensor:
    """Max along ``axis``; ties route the gradient to the first maximum."""
    a = _lift(a)
    if a.shape[axis] == 0:
        raise ValueError(f"max_pool: empty axis {axis} in shape {a.shape}")
    arg = np.argmax(a.data, axis=axis)
    y = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(out):
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(arg, axis), np.expand_dims(out.grad, axis), axis=axis)
        a._accum(g)
    return _result(y, (a,), bw, "max_pool")


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        gy = out.grad * y
        a._accum(gy - y * gy.sum(axis=axis, keepdims=True))
    return _result(y, (a,), bw, "softmax")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / sqrt(sum(x^2) + eps)`` along ``axis``."""
    a = _lift(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    y = a.data / n

    def bw(out):
        dot = (out.grad * a.data).sum(axis=axis, keepdims=True)
        a._accum(out.grad / n - a.data * dot / n ** 3)
    return _result(y, (a,), bw, "l2_normalize")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Standardise each row of a 2-D tensor (no learned affine)."""
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError(f"layer_norm expects a 2-D tensor, got shape {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(a.data.var(axis=1, keepdims=True) + eps)
    y = (a.data - mu) * inv

    def bw(out):
        g = out.grad
        a._accum(inv * (g - g.mean(axis=1, keepdims=True) - y * (g * y).mean(axis=1, keepdims=True)))
    return _result(y, (a,), bw, "layer_norm")


# -- batch norm -----------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def zeros(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(x, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Normalise each column of an ``(N, C)`` input over its rows.

    Train mode uses the batch statistics and updates ``state``; eval mode is
    the fixed affine map given by the running statistics.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    eps = state.eps
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * inv

        def bw_eval(out):
            if x.requires_grad:
                x._accum(out.grad * gamma.data * inv)
            if gamma.requires_grad:
                gamma._accum((out.grad * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accum(out.grad.sum(axis=0))
        return _result(gamma.data * xhat + beta.data, (x, gamma, beta), bw_eval, "batch_norm")

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    m = state.momentum
    unbiased = var * n / (n - 1) if n > 1 else var
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * unbiased

    def bw(out):
        g = out.grad
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0)))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
    return _result(gamma.data * xhat + beta.data, (x, gamma, beta), bw, "batch_norm")


# -- backward pass --------------------------------------------------------

def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every node that ``root`` depends on."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    root._accum(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    # free interior gradients and graph links; leaves keep theirs
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def finite_diff_check(f, inputs, h: float = 1e-4, tol: float = 1e-6,
                      max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central
    differences.

    The error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over the checked entries of each input (an infinity-norm relative error,
    robust to individually tiny gradient entries). ``max_entries`` limits the
    number of checked entries per input to a seeded random subset.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    root = f(*inputs)
    backward(root)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst_err, worst, checked = 0.0, (), 0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(entries))
        with no_grad():
            for n, e in enumerate(entries):
                orig = flat[e]
                flat[e] = orig + h
                fp = float(f(*inputs).data)
                flat[e] = orig - h
                fm = float(f(*inputs).data)
                flat[e] = orig
                num[n] = (fp - fm) / (2 * h)
        ana = analytic[k].reshape(-1)[entries]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        err = 0.0 if denom == 0.0 else float(np.abs(ana - num).max() / denom)
        checked += len(entries)
        if err >= worst_err:
            worst_err, worst = err, (k,)
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(worst_err, tol, checked, worst)


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> np.ndarray:
    """One decoupled-weight-decay Adam update, applied in place."""
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * (grad * grad)
    denom = np.sqrt(state.v / (1 - beta2 ** state.t))
    denom += eps
    if weight_decay:
        param -= (lr * weight_decay) * param
    step = state.m / denom
    step *= lr / (1 - beta1 ** state.t)
    param -= step
    return param


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most
    ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.vdot(g, g) for g in grads])))
    if norm > max_norm > 0:
        for g in grads:
            g *= max_norm / norm
    return norm


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {k: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, grads: dict | None = None):
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            adamw_step(p.data, g, self.state[k], self.lr, self.betas[0], self.betas[1],
                       self.eps, self.weight_decay)


# -- CKPT1 checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"CKPT1"


def encode_checkpoint(arrays: dict) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes, path=None) -> dict:
    r = Reader(data, path)
    r.expect(CKPT_MAGIC)
    count = r.u32("header")
    arrays = {}
    for i in range(count):
        section = f"tensor[{i}]"
        nlen = r.u32(section)
        start = r.pos
        try:
            name = r.take(nlen, section).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(section, start, "name is not valid UTF-8", path) from None
        rank = r.u32(f"{section} {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{section} {name} dims"))
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(r.take(8 * n, f"{section} {name} values"), dtype="<f8")
        arrays[name] = vals.reshape(dims).astype(np.float64)
    r.finish()
    return arrays


def save_checkpoint(path, arrays: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes(), path=str(path))
