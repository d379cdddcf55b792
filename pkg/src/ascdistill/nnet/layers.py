"""Layer kinds used by the waveform and spectrogram architectures.

Shapes are per-example and channels-last: ``(L, C)`` for 1-D feature maps,
``(H, W, C)`` for 2-D maps and ``(D,)`` for vectors. The batch axis is
implicit and always leading at runtime.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = (
    "conv1d", "conv2d", "resblock1d", "resblock2d", "global_max_pool",
    "avg_pool", "max_pool", "concat_pools", "gru", "dense", "softmax",
)


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: Optional[int] = None
    units: Optional[int] = None
    kernel: Optional[tuple] = None
    stride: Optional[tuple] = None
    pool: Optional[tuple] = None
    padding: str = "valid"
    activation: str = "linear"
    res_scale: float = 1 / math.sqrt(2)
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        # normalize ints to tuples so 1-D and 2-D specs share one field type
        for f in ("kernel", "stride", "pool"):
            v = getattr(self, f)
            if v is not None and not isinstance(v, tuple):
                object.__setattr__(self, f, tuple(v) if isinstance(v, list) else (int(v),))
        for f in ("kernel", "stride", "pool"):
            v = getattr(self, f)
            if v is not None and any(int(e) < 1 for e in v):
                raise ArchitectureError(f"{self.kind}: {f} must be >= 1, got {v}")
        for f in ("channels", "units"):
            v = getattr(self, f)
            if v is not None and v < 1:
                raise ArchitectureError(f"{self.kind}: {f} must be >= 1, got {v}")
        if self.padding not in ("valid", "same"):
            raise ArchitectureError(f"padding must be 'valid' or 'same', got {self.padding!r}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _conv_len(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1 if n >= k else 0


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class: holds a spec, its input/output shapes and parameters."""

    def __init__(self, spec: LayerSpec, in_shape: tuple):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.params: dict[str, Tensor] = {}
        self.out_shape = self.infer_shape(self.in_shape)

    def infer_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def init(self, rng: np.random.Generator) -> None:
        pass

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _expect_rank(self, in_shape: tuple, rank: int) -> None:
        if len(in_shape) != rank:
            raise ArchitectureError(
                f"{self.spec.kind} expects rank-{rank} input, got shape {in_shape}")


class Conv1D(Layer):
    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 2)
        s = self.spec
        n = _conv_len(in_shape[0], s.kernel[0], (s.stride or (1,))[0], s.padding)
        return (n, s.channels)

    def init(self, rng):
        k, c = self.spec.kernel[0], self.in_shape[1]
        self._param("w", _uniform(rng, (k, c, self.spec.channels), k * c))
        self._param("b", np.zeros(self.spec.channels))

    def __call__(self, x):
        s = self.spec
        y = T.conv1d(x, self.params["w"], self.params["b"], (s.stride or (1,))[0], s.padding)
        return T.activation(y, s.activation)


class Conv2D(Layer):
    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        s = self.spec
        (kh, kw), (sh, sw) = s.kernel, s.stride or (1, 1)
        return (_conv_len(in_shape[0], kh, sh, s.padding),
                _conv_len(in_shape[1], kw, sw, s.padding), s.channels)

    def init(self, rng):
        (kh, kw), c = self.spec.kernel, self.in_shape[2]
        self._param("w", _uniform(rng, (kh, kw, c, self.spec.channels), kh * kw * c))
        self._param("b", np.zeros(self.spec.channels))

    def __call__(self, x):
        s = self.spec
        y = T.conv2d(x, self.params["w"], self.params["b"], s.stride or (1, 1), s.padding)
        return T.activation(y, s.activation)


class ResBlock1D(Layer):
    """Pre-activation residual block: two same-padded convs on the branch,
    identity skip (1x1 projection when channels change), then max-pool."""

    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 2)
        pool = (self.spec.pool or (3,))[0]
        return (in_shape[0] // pool, self.spec.channels)

    def init(self, rng):
        k, c, o = (self.spec.kernel or (3,))[0], self.in_shape[1], self.spec.channels
        self._param("conv_a.w", _uniform(rng, (k, c, o), k * c))
        self._param("conv_a.b", np.zeros(o))
        self._param("conv_b.w", _uniform(rng, (k, o, o), k * o))
        self._param("conv_b.b", np.zeros(o))
        if c != o:
            self._param("proj.w", _uniform(rng, (1, c, o), c))
            self._param("proj.b", np.zeros(o))

    def __call__(self, x):
        s, p = self.spec, self.params
        act = s.activation
        h = T.conv1d(T.activation(x, act), p["conv_a.w"], p["conv_a.b"], 1, "same")
        h = T.conv1d(T.activation(h, act), p["conv_b.w"], p["conv_b.b"], 1, "same")
        skip = T.conv1d(x, p["proj.w"], p["proj.b"], 1, "valid") if "proj.w" in p else x
        return T.max_pool1d(T.add(skip, T.scale(h, s.res_scale)), (s.pool or (3,))[0])


class ResBlock2D(Layer):
    """2-D variant: the first branch conv carries the stride; the skip path is
    a strided 1x1 projection whenever stride or channel count changes."""

    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        sh, sw = self.spec.stride or (1, 1)
        return (-(-in_shape[0] // sh), -(-in_shape[1] // sw), self.spec.channels)

    def init(self, rng):
        kh, kw = self.spec.kernel or (3, 3)
        c, o = self.in_shape[2], self.spec.channels
        self._param("conv_a.w", _uniform(rng, (kh, kw, c, o), kh * kw * c))
        self._param("conv_a.b", np.zeros(o))
        self._param("conv_b.w", _uniform(rng, (kh, kw, o, o), kh * kw * o))
        self._param("conv_b.b", np.zeros(o))
        if c != o or tuple(self.spec.stride or (1, 1)) != (1, 1):
            self._param("proj.w", _uniform(rng, (1, 1, c, o), c))
            self._param("proj.b", np.zeros(o))

    def __call__(self, x):
        s, p = self.spec, self.params
        stride = tuple(s.stride or (1, 1))
        act = s.activation
        h = T.conv2d(T.activation(x, act), p["conv_a.w"], p["conv_a.b"], stride, "same")
        h = T.conv2d(T.activation(h, act), p["conv_b.w"], p["conv_b.b"], (1, 1), "same")
        skip = T.conv2d(x, p["proj.w"], p["proj.b"], stride, "same") if "proj.w" in p else x
        return T.add(skip, T.scale(h, s.res_scale))


class GlobalMaxPool(Layer):
    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 2)
        return (in_shape[1],)

    def __call__(self, x):
        return T.global_max_pool(x)


class Pool2D(Layer):
    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        ph, pw = self.spec.pool
        return (in_shape[0] // ph, in_shape[1] // pw, in_shape[2])

    def __call__(self, x):
        return T.pool2d(x, self.spec.pool, "avg" if self.spec.kind == "avg_pool" else "max")


class ConcatPools(Layer):
    """Parallel average and max pools, concatenated on channels and
    flattened into a (time, features) sequence."""

    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 3)
        ph, pw = self.spec.pool
        return (in_shape[0] // ph, (in_shape[1] // pw) * 2 * in_shape[2])

    def pooled_shape(self) -> tuple:
        ph, pw = self.spec.pool
        return (self.in_shape[0] // ph, self.in_shape[1] // pw, self.in_shape[2])

    def __call__(self, x):
        a = T.pool2d(x, self.spec.pool, "avg")
        m = T.pool2d(x, self.spec.pool, "max")
        y = T.concat([a, m], axis=3)
        b, h = y.shape[0], y.shape[1]
        return T.reshape(y, (b, h, y.shape[2] * y.shape[3]))


class GRU(Layer):
    """Gated recurrent unit returning the final hidden state.

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    n = tanh(x Wn + (r * h) Un + bn), h' = n + z * (h - n).
    """

    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 2)
        return (self.spec.units or in_shape[1],)

    def init(self, rng):
        d, h = self.in_shape[1], self.out_shape[0]
        lim = 1.0 / math.sqrt(h)
        self._param("w", rng.uniform(-lim, lim, (d, 3 * h)))
        self._param("u", rng.uniform(-lim, lim, (h, 3 * h)))
        self._param("b", np.zeros(3 * h))

    def __call__(self, x):
        hsz = self.out_shape[0]
        w, u, b = self.params["w"], self.params["u"], self.params["b"]
        xp = T.add(T.matmul(x, w), b)  # (B, T, 3H)
        u_zr = T.getitem(u, (slice(None), slice(0, 2 * hsz)))
        u_n = T.getitem(u, (slice(None), slice(2 * hsz, 3 * hsz)))
        h = Tensor(np.zeros((x.shape[0], hsz)))
        for t in range(x.shape[1]):
            xt = T.getitem(xp, (slice(None), t))
            hzr = T.matmul(h, u_zr)
            z = T.sigmoid(T.add(T.getitem(xt, (slice(None), slice(0, hsz))),
                                T.getitem(hzr, (slice(None), slice(0, hsz)))))
            r = T.sigmoid(T.add(T.getitem(xt, (slice(None), slice(hsz, 2 * hsz))),
                                T.getitem(hzr, (slice(None), slice(hsz, 2 * hsz)))))
            n = T.tanh(T.add(T.getitem(xt, (slice(None), slice(2 * hsz, 3 * hsz))),
                             T.matmul(T.mul(r, h), u_n)))
            h = T.add(n, T.mul(z, T.sub(h, n)))
        return h


class Dense(Layer):
    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 1)
        return (self.spec.units,)

    def init(self, rng):
        d = self.in_shape[0]
        self._param("w", _uniform(rng, (d, self.spec.units), d))
        self._param("b", np.zeros(self.spec.units))

    def __call__(self, x):
        y = T.add(T.matmul(x, self.params["w"]), self.params["b"])
        return T.activation(y, self.spec.activation)


class Softmax(Layer):
    def infer_shape(self, in_shape):
        self._expect_rank(in_shape, 1)
        return tuple(in_shape)

    def __call__(self, x):
        return T.softmax(x)


_CLASSES = {
    "conv1d": Conv1D, "conv2d": Conv2D, "resblock1d": ResBlock1D,
    "resblock2d": ResBlock2D, "global_max_pool": GlobalMaxPool,
    "avg_pool": Pool2D, "max_pool": Pool2D, "concat_pools": ConcatPools,
    "gru": GRU, "dense": Dense, "softmax": Softmax,
}


def make_layer(spec: LayerSpec, in_shape: tuple) -> Layer:
    return _CLASSES[spec.kind](spec, in_shape)
