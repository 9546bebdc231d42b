"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. :func:`backward`
topologically sorts the recorded graph and runs those closures once each.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An op was configured with invalid hyperparameters."""


class ContractError(ValueError):
    """A precondition of an op was violated."""


NEG_INF = -1e30


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(parents: Iterable[Tensor]) -> bool:
    return any(p.requires_grad for p in parents)


def _make(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    out = Tensor(data, _parents=parents, _op=op)
    if _needs_grad(parents):
        out.requires_grad = True
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), "neg", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", bw)


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(a.data ** exponent, (a,), "pow", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), "sigmoid", bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), "tanh", bw)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def bw(g):
        _accum(a, g * keep)

    return _make(a.data * keep, (a,), "relu", bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), "clip", bw)


def where(cond: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """Keep ``a`` where ``cond`` holds, else the constant ``fill``."""
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        _accum(a, _unbroadcast(g * cond, a.shape))

    return _make(np.where(cond, a.data, fill), (a,), "where", bw)


# ----------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes", bw)


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _make(a.data[index], (a,), "getitem", bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat", bw)


# --------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b, the weight shared across all leading axes of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} x {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, w)
    if b is not None:
        out = out + b
    return reshape(out, lead + (w.shape[1],))


# ------------------------------------------------------------------ normalizing

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get logit -1e30."""
    if mask is not None:
        x = where(mask, x, NEG_INF)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), "softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gamma, beta), "layer_norm", bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# ------------------------------------------------------------------ temporal

def _pad_time(x: np.ndarray, left: int, right: int) -> np.ndarray:
    widths = [(0, 0)] * x.ndim
    widths[-2] = (left, right)
    return np.pad(x, widths)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           depthwise: bool = False) -> Tensor:
    """'Same' zero-padded convolution along axis -2 of ``x`` (``[..., n, c]``).

    Full: ``w`` is ``[k, c_in, c_out]``. Depthwise: ``w`` is ``[k, c]``.
    """
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    c_in = x.shape[-1]
    if depthwise:
        if w.ndim != 2 or w.shape[1] != c_in:
            raise ShapeError(f"depthwise kernel {w.shape} does not match input {x.shape}")
    elif w.ndim != 3 or w.shape[1] != c_in:
        raise ShapeError(f"conv kernel {w.shape} does not match input {x.shape}")
    n = x.shape[-2]
    half = (k - 1) // 2
    xpad = _pad_time(x.data, half, half)
    # windows: [..., n, c_in, k] -> [..., n, k, c_in]
    cols = np.swapaxes(sliding_window_view(xpad, k, axis=-2), -1, -2)

    if depthwise:
        out = np.einsum("...nkc,kc->...nc", cols, w.data)
    else:
        flat_w = w.data.reshape(k * c_in, -1)
        out = cols.reshape(cols.shape[:-2] + (k * c_in,)) @ flat_w
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if depthwise:
            if w.requires_grad:
                flat_cols = cols.reshape(-1, k, c_in)
                _accum(w, np.einsum("bkc,bc->kc", flat_cols, g.reshape(-1, c_in)))
            if x.requires_grad:
                gpad = np.zeros_like(xpad)
                for j in range(k):
                    gpad[..., j:j + n, :] += g * w.data[j]
                _accum(x, gpad[..., half:half + n, :])
        else:
            if w.requires_grad:
                gw = cols.reshape(-1, k * c_in).T @ g.reshape(-1, g.shape[-1])
                _accum(w, gw.reshape(w.shape))
            if x.requires_grad:
                gcols = (g @ flat_w.T).reshape(g.shape[:-1] + (k, c_in))
                gpad = np.zeros_like(xpad)
                for j in range(k):
                    gpad[..., j:j + n, :] += gcols[..., j, :]
                _accum(x, gpad[..., half:half + n, :])

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, "conv1d", bw)


def maxpool1d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping max-pool along axis -2; ties route to the first entry."""
    n = x.shape[-2]
    if n % factor:
        raise ContractError(f"maxpool1d needs length divisible by {factor}, got {n}")
    blocks = x.data.reshape(x.shape[:-2] + (n // factor, factor, x.shape[-1]))
    arg = blocks.argmax(axis=-2)
    out = np.take_along_axis(blocks, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        full = np.zeros_like(blocks)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        _accum(x, full.reshape(x.shape))

    return _make(out, (x,), "maxpool1d", bw)


def upsample1d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour repeat along axis -2."""
    n = x.shape[-2]

    def bw(g):
        blocks = g.reshape(g.shape[:-2] + (n, factor, g.shape[-1]))
        _accum(x, blocks.sum(axis=-2))

    return _make(np.repeat(x.data, factor, axis=-2), (x,), "upsample1d", bw)


def window_mean(x: Tensor, size: int) -> Tensor:
    """Mean over every length-``size`` window (stride 1) along the last axis."""
    w = x.shape[-1]
    if size > w:
        raise ContractError(f"window {size} longer than sequence {w}")
    out = sliding_window_view(x.data, size, axis=-1).mean(axis=-1)

    def bw(g):
        full = np.zeros_like(x.data)
        share = g / size
        for j in range(size):
            full[..., j:j + w - size + 1] += share
        _accum(x, full)

    return _make(out, (x,), "window_mean", bw)


def lstm(xw: Tensor, w_h: Tensor) -> Tensor:
    """Unidirectional LSTM recurrence from zero state.

    ``xw`` holds the input projections (bias included) as ``[B, n, 4h]`` with
    gate order input, forget, cell, output; ``w_h`` is ``[h, 4h]``.
    Returns the hidden sequence ``[B, n, h]``.
    """
    if xw.ndim != 3:
        raise ShapeError(f"lstm expects [B, n, 4h] projections, got {xw.shape}")
    bsz, n, four_h = xw.shape
    h = w_h.shape[0]
    if four_h != 4 * h or w_h.shape[1] != four_h:
        raise ShapeError(f"lstm shapes disagree: {xw.shape} vs {w_h.shape}")
    W = w_h.data
    gates = np.empty((n, bsz, four_h))
    cells = np.empty((n + 1, bsz, h))
    hids = np.empty((n + 1, bsz, h))
    cells[0] = 0.0
    hids[0] = 0.0
    for t in range(n):
        pre = xw.data[:, t, :] + hids[t] @ W
        act = np.empty_like(pre)
        act[:, :h] = 1.0 / (1.0 + np.exp(-pre[:, :h]))
        act[:, h:2 * h] = 1.0 / (1.0 + np.exp(-pre[:, h:2 * h]))
        act[:, 2 * h:3 * h] = np.tanh(pre[:, 2 * h:3 * h])
        act[:, 3 * h:] = 1.0 / (1.0 + np.exp(-pre[:, 3 * h:]))
        gates[t] = act
        i, f, c_hat, o = act[:, :h], act[:, h:2 * h], act[:, 2 * h:3 * h], act[:, 3 * h:]
        cells[t + 1] = f * cells[t] + i * c_hat
        hids[t + 1] = o * np.tanh(cells[t + 1])
    out = np.ascontiguousarray(np.transpose(hids[1:], (1, 0, 2)))

    def bw(g):
        g_xw = np.empty_like(xw.data)
        g_w = np.zeros_like(W)
        dh_next = np.zeros((bsz, h))
        dc_next = np.zeros((bsz, h))
        for t in range(n - 1, -1, -1):
            act = gates[t]
            i, f, c_hat, o = act[:, :h], act[:, h:2 * h], act[:, 2 * h:3 * h], act[:, 3 * h:]
            tc = np.tanh(cells[t + 1])
            dh = g[:, t, :] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dpre = np.empty((bsz, four_h))
            dpre[:, :h] = dc * c_hat * i * (1.0 - i)
            dpre[:, h:2 * h] = dc * cells[t] * f * (1.0 - f)
            dpre[:, 2 * h:3 * h] = dc * i * (1.0 - c_hat * c_hat)
            dpre[:, 3 * h:] = dh * tc * o * (1.0 - o)
            g_xw[:, t, :] = dpre
            g_w += hids[t].T @ dpre
            dh_next = dpre @ W.T
            dc_next = dc * f
        _accum(xw, g_xw)
        _accum(w_h, g_w)

    return _make(out, (xw, w_h), "lstm", bw)


# ------------------------------------------------------------------- backward

@dataclass
class Graph:
    """Topologically ordered op records reachable from a root tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if not t._parents]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> dict[str, np.ndarray]:
    """Propagate d(loss) to every leaf that requires grad.

    Returns gradients keyed by leaf name (``id`` string for unnamed leaves);
    each leaf's ``.grad`` is populated as well.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph.trace(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads = {}
    for leaf in graph.leaves:
        if leaf.requires_grad:
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            leaf.grad = g
            grads[leaf.name or str(id(leaf))] = g
    return grads


# ---------------------------------------------------------- gradient checking

def check_gradients(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
                    coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |fd|).

    ``coords`` limits the check to a random subset of coordinates.
    """
    base = np.array(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    backward(fn(x))
    analytic = x.grad.reshape(-1)
    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, coords, replace=False)
    worst = 0.0
    for i in idx:
        fd = _central_difference(lambda v: fn(Tensor(v)).item(), flat, i, step, base.shape)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return float(worst)


def _central_difference(f, flat: np.ndarray, i: int, step: float, shape) -> float:
    orig = flat[i]
    flat[i] = orig + step
    hi = f(flat.reshape(shape).copy())
    flat[i] = orig - step
    lo = f(flat.reshape(shape).copy())
    flat[i] = orig
    return (hi - lo) / (2.0 * step)


def check_param_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                          step: float = 1e-4, per_tensor: int | None = 4,
                          seed: int = 0) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    Returns the worst relative error per parameter name.
    """
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if per_tensor is not None and per_tensor < flat.size:
            idx = rng.choice(flat.size, per_tensor, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            worst = max(worst, abs(analytic[name].reshape(-1)[i] - fd) / max(1.0, abs(fd)))
        report[name] = worst
    return report
