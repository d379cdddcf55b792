"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array. While a :class:`Tape` is active,
every differentiable op whose inputs require gradients appends its output
node to the tape together with a closure mapping the output gradient to
the gradients of its parents. ``Tape.backward`` replays the tape in reverse
recording order, so accumulation order is fixed and results are
bit-reproducible.

Without an active tape ops are plain numpy computations and no graph is
kept.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_local = threading.local()


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records one forward pass; consumed by a single ``backward`` call."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.grads: dict[int, np.ndarray] = {}
        self.params: dict[str, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, seeds: Iterable[tuple[Tensor, np.ndarray]]) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if not self.nodes:
            raise TapeError("backward requires a tape recorded with record=True")
        grads: dict[int, np.ndarray] = {}
        for t, g in seeds:
            g = np.broadcast_to(np.asarray(g, dtype=np.float64), t.shape).copy()
            grads[id(t)] = grads[id(t)] + g if id(t) in grads else g
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg
        self.grads = grads
        self.consumed = True
        # release intermediate closures
        self.nodes = []

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated for leaf ``t``; zeros if unreachable."""
        if not self.consumed:
            raise TapeError("gradients are only available after backward")
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_record:
    """Suspend recording inside an active tape (e.g. for frozen-teacher passes)."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def _recording_tape(parents: Sequence[Tensor]) -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    if stack:
        return stack[-1]
    # outside any context, ops on recorded tensors extend their tape (e.g. a loss)
    for p in parents:
        if p._tape is not None and not p._tape.consumed:
            return p._tape
    return None


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _recording_tape(parents)
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = tape
        tape.nodes.append(out)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    x = a.data + eps
    return _node(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    x = a.data
    slopes = np.where(x > 0, 1.0, slope)
    return _node(x * slopes, (a,), lambda g: (g * slopes,))


def activation(a: Tensor, kind: str, slope: float = 0.3) -> Tensor:
    if kind == "linear":
        return a
    if kind == "relu":
        return leaky_relu(a, 0.0)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions and shape ops --------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, key) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _node(a.data[key], (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a[..., D] @ w[D, O]``."""
    def backward(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _node(a.data @ w.data, (a, w), backward)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


# -- convolution and pooling ---------------------------------------------------


def same_padding(n: int, k: int, s: int) -> tuple[int, int]:
    """(before, after) zero padding giving ceil(n / s) outputs."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: str) -> Tensor:
    """x: (B, L, C); w: (k, C, O); b: (O,). Channels-last."""
    k, c, o = w.shape
    xd = x.data
    pad = same_padding(xd.shape[1], k, stride) if padding == "same" else (0, 0)
    if pad != (0, 0):
        xd = np.pad(xd, ((0, 0), pad, (0, 0)))
    lp = xd.shape[1]
    if lp < k:
        raise ValueError(f"conv1d input length {lp} shorter than kernel {k}")
    # (B, Lout, C, k) -> (B, Lout, k, C)
    win = sliding_window_view(xd, k, axis=1)[:, ::stride]
    n_out = win.shape[1]
    patches = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(-1, n_out, k * c)
    wm = w.data.reshape(k * c, o)
    y = patches @ wm + b.data

    def backward(g):
        gw = (patches.reshape(-1, k * c).T @ g.reshape(-1, o)).reshape(k, c, o)
        gb = g.reshape(-1, o).sum(axis=0)
        dp = (g @ wm.T).reshape(g.shape[0], n_out, k, c)
        gx = np.zeros((g.shape[0], lp, c))
        span = stride * (n_out - 1) + 1
        for j in range(k):
            gx[:, j:j + span:stride] += dp[:, :, j]
        if pad != (0, 0):
            gx = gx[:, pad[0]:lp - pad[1]]
        return gx, gw, gb

    return _node(y, (x, w, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: tuple[int, int], padding: str) -> Tensor:
    """x: (B, H, W, C); w: (kh, kw, C, O); b: (O,)."""
    kh, kw, c, o = w.shape
    sh, sw = stride
    xd = x.data
    if padding == "same":
        ph = same_padding(xd.shape[1], kh, sh)
        pw = same_padding(xd.shape[2], kw, sw)
        xd = np.pad(xd, ((0, 0), ph, pw, (0, 0)))
    else:
        ph = pw = (0, 0)
    hp, wp = xd.shape[1], xd.shape[2]
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d input {hp}x{wp} smaller than kernel {kh}x{kw}")
    # (B, Ho, Wo, C, kh, kw)
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    bsz, ho, wo = win.shape[:3]
    kk = c * kh * kw
    patches = np.ascontiguousarray(win).reshape(bsz, ho, wo, kk)
    wm = w.data.transpose(2, 0, 1, 3).reshape(kk, o)
    y = patches @ wm + b.data

    def backward(g):
        gw = (patches.reshape(-1, kk).T @ g.reshape(-1, o)).reshape(c, kh, kw, o).transpose(1, 2, 0, 3)
        gb = g.reshape(-1, o).sum(axis=0)
        dp = (g @ wm.T).reshape(bsz, ho, wo, c, kh, kw)
        gx = np.zeros((bsz, hp, wp, c))
        sph, spw = sh * (ho - 1) + 1, sw * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + sph:sh, j:j + spw:sw] += dp[..., i, j]
        gx = gx[:, ph[0]:hp - ph[1], pw[0]:wp - pw[1]]
        return gx, np.ascontiguousarray(gw), gb

    return _node(y, (x, w, b), backward)


def max_pool1d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pool over axis 1 with floor division."""
    bsz, n, c = x.shape
    n_out = n // size
    blocks = x.data[:, :n_out * size].reshape(bsz, n_out, size, c)
    idx = blocks.argmax(axis=2)
    y = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, :n_out * size] = gb.reshape(bsz, n_out * size, c)
        return (gx,)

    return _node(y, (x,), backward)


def pool2d(x: Tensor, size: tuple[int, int], mode: str) -> Tensor:
    """Non-overlapping 2-D pool (kernel = stride) with floor division."""
    bsz, h, w, c = x.shape
    ph, pw = size
    ho, wo = h // ph, w // pw
    blocks = x.data[:, :ho * ph, :wo * pw].reshape(bsz, ho, ph, wo, pw, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(bsz, ho, wo, c, ph * pw)
    if mode == "avg":
        y = blocks.mean(axis=-1)
        gather = None
    elif mode == "max":
        gather = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, gather[..., None], axis=-1)[..., 0]
    else:
        raise ValueError(f"unknown pool mode {mode!r}")

    def backward(g):
        if gather is None:
            gb = np.repeat(g[..., None] / (ph * pw), ph * pw, axis=-1)
        else:
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, gather[..., None], g[..., None], axis=-1)
        gb = gb.reshape(bsz, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(x.data)
        gx[:, :ho * ph, :wo * pw] = gb.reshape(bsz, ho * ph, wo * pw, c)
        return (gx,)

    return _node(y, (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Max over axis 1 of (B, T, C)."""
    idx = x.data.argmax(axis=1)
    y = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _node(y, (x,), backward)
