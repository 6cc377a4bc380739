"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one node to the active :class:`Tape`.
``backward`` walks the tape in reverse append order and accumulates
gradients into leaf tensors (``requires_grad=True`` and no producing node).

Broadcasting is deliberately narrow: operands must have equal shapes, or
one of them must be a scalar (a Python number or a single-element tensor).
Bias additions are fused into :func:`linear`, :func:`conv2d` and
:func:`conv_transpose2d` instead.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "strict_mode",
    "get_tape",
    "record",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "exp",
    "log",
    "absolute",
    "matmul",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "tanh",
    "softmax",
    "batchnorm2d",
    "BatchNormState",
    "reshape",
    "tensor_sum",
    "tensor_mean",
]

_grad_enabled = True
_strict = True


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable ops."""

    nodes: list = field(default_factory=list)

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._tape is not self:
            raise ValueError("loss is not on this tape")
        pending = {id(loss): np.ones_like(loss.data)}
        stop = loss._node
        for idx in range(stop, -1, -1):
            node = self.nodes[idx]
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = np.array(gi, dtype=np.float64)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


class Tensor:
    """n-dimensional float64 array that may carry a gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def strict_mode(enabled: bool) -> Iterator[None]:
    """Toggle domain checks for ``log`` and ``div``."""
    global _strict
    prev = _strict
    _strict = enabled
    try:
        yield
    finally:
        _strict = prev


def record(kind: str, inputs: Sequence[Tensor], value: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``value`` in a tensor and put a node on the tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per input. Other modules use this to register custom differentiable ops.
    """
    out = Tensor(value)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite output from {kind}")
        out.requires_grad = True
        out._tape = _tape
        out._node = len(_tape)
        _tape.append(Node(kind, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss is not on the tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------- elementwise

def _check_pair(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "mul")
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "div")
    if _strict and np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data
    return record("div", (a, b), out,
                  lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    if isinstance(exponent, Tensor):
        if exponent.requires_grad:
            raise TypeError("power: only constant exponents are differentiable here")
        exponent = exponent.item()
    p = float(exponent)
    return record("pow", (a,), a.data ** p, lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if _strict and np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """Leaky ReLU; the derivative at exactly 0 is ``slope``."""
    x = _as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return record("leaky_relu", (x,), x.data * scale, lambda g: (g * scale,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, bw)


# ---------------------------------------------------------------- reductions

def tensor_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record("sum", (x,), out, bw)


def tensor_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tensor_sum(x, axis) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record("matmul", (a, b), a.data @ b.data,
                  lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``x`` [B, in], ``w`` [in, out], ``b`` [out]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data
        inputs.append(b)

    def bw(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record("linear", inputs, out, bw)


# ---------------------------------------------------------------- convolution

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: B, C, Ho, Wo, kh, kw
    return np.einsum("bchwij,fcij->bfhw", win, w, optimize=True)


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x_shape
    kh, kw = w.shape[2:]
    Ho, Wo = g.shape[2:]
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    # cols: B, C, Ho, Wo, kh, kw
    cols = np.einsum("bfhw,fcij->bcijhw", g, w, optimize=True)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (Ho - 1) + 1:stride,
                j:j + stride * (Wo - 1) + 1:stride] += cols[:, :, i, j]
    return out[:, :, pad:pad + H, pad:pad + W]


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    kh, kw = w_shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = g.shape[2:]
    win = win[:, :, :Ho, :Wo]
    return np.einsum("bfhw,bchwij->fcij", g, win, optimize=True)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation (no kernel flip).

    Parameters
    ----------
    x : Tensor
        Input of shape [B, C, H, W].
    w : Tensor
        Filters of shape [F, C, kh, kw].
    b : Tensor, optional
        Per-filter bias of shape [F].
    stride, pad : int
        Stride and symmetric zero padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    Ho = _conv_out(x.shape[2], w.shape[2], stride, pad)
    Wo = _conv_out(x.shape[3], w.shape[3], stride, pad)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: non-positive output size {Ho}x{Wo} for input {x.shape}")
    out = _conv_forward(x.data, w.data, stride, pad)[:, :, :Ho, :Wo]
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def bw(g):
        grads = [_conv_grad_input(g, w.data, x.shape, stride, pad),
                 _conv_grad_weight(g, x.data, w.shape, stride, pad)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record("conv2d", inputs, out, bw)


def conv_transpose2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`.

    ``w`` has shape [C_in, C_out, kh, kw]; the output spatial size is
    ``(H - 1) * stride - 2 * pad + kh``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    B, _, H, W = x.shape
    kh, kw = w.shape[2:]
    Ho = (H - 1) * stride - 2 * pad + kh
    Wo = (W - 1) * stride - 2 * pad + kw
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv_transpose2d: non-positive output size {Ho}x{Wo}")
    out_shape = (B, w.shape[1], Ho, Wo)
    out = _conv_grad_input(x.data, w.data, out_shape, stride, pad)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def bw(g):
        gx = _conv_forward(g, w.data, stride, pad)[:, :, :H, :W]
        gw = _conv_grad_weight(x.data, g, w.shape, stride, pad)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record("conv_transpose2d", inputs, out, bw)


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm2d(x, gamma, beta, state: BatchNormState, training: bool = True) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with batch statistics and updates the running
    estimates in ``state`` (unbiased variance, momentum update); eval mode
    uses the running estimates.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (0, 2, 3)
    gm = gamma.data[None, :, None, None]
    bt = beta.data[None, :, None, None]
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm2d: training mode needs batch size >= 2")
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * n / max(n - 1, 1)
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gm + bt

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gm
        if training:
            gx = inv[None, :, None, None] * (
                gxhat - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return record("batchnorm2d", (x, gamma, beta), out, bw)


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               n_coords: int = 50, seed: int = 0, floor: float = 1e-8) -> float:
    """Compare tape gradients against central differences.

    ``f`` must rebuild the loss from the current parameter values and be
    deterministic. Returns the largest relative error over up to
    ``n_coords`` randomly chosen coordinates (all of them if fewer exist).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    tape = get_tape()
    tape.clear()
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    tape.clear()

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in pick]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            up = f().item()
            flat[j] = orig - h
            down = f().item()
            flat[j] = orig
            num = (up - down) / (2 * h)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
