"""Dense layers with hand-written backward passes.

Every layer works on float64 arrays with arbitrary leading batch axes and
acts on the last axis (attention mixes the second-to-last). ``forward``
caches what ``backward`` needs; ``backward`` accumulates parameter
gradients into ``Param.grad`` and returns the gradient w.r.t. the input.
A layer instance keeps one cache, so call ``backward`` before the next
``forward`` on the same instance.
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, Tuple

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


class Param:
    """A learnable tensor with its gradient and Adam moments."""

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Module:
    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Param):
                yield prefix + name, attr
            elif isinstance(attr, Module):
                yield from attr.named_params(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{name}.{i}.")

    def params(self) -> Dict[str, Param]:
        return dict(self.named_params())

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_params()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {p.shape}")
            p.value[...] = v


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator = None, gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Param(init_linear(rng, n_in, n_out, gain))
        self.b = Param(np.zeros((1, n_out)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"linear expects last dim {self.W.shape[0]}, got {x.shape}")
        self._x = x
        return check_finite(x @ self.W.value + self.b.value[0], "linear")

    def backward(self, gy: np.ndarray) -> np.ndarray:
        x = self._x
        n_in, n_out = self.W.shape
        self.W.grad += x.reshape(-1, n_in).T @ gy.reshape(-1, n_out)
        self.b.grad += gy.reshape(-1, n_out).sum(axis=0, keepdims=True)
        return gy @ self.W.value.T


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


class GELU(Module):
    """Exact (erf) GeLU."""

    def forward(self, x):
        self._x = x
        return gelu(x)

    def backward(self, gy):
        x = self._x
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return gy * (cdf + x * pdf)


class Tanh(Module):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, gy):
        return gy * (1.0 - self._y**2)


class Sigmoid(Module):
    def forward(self, x):
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        self._y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._y

    def backward(self, gy):
        return gy * self._y * (1.0 - self._y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, gy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (gy - (gy * y).sum(axis=axis, keepdims=True))


class Softmax(Module):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x):
        self._y = softmax(x, self.axis)
        return self._y

    def backward(self, gy):
        return softmax_backward(self._y, gy, self.axis)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Param(np.ones((1, dim)))
        self.bias = Param(np.zeros((1, dim)))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._xhat, self._inv = xhat, inv
        return check_finite(xhat * self.gain.value[0] + self.bias.value[0], "layer_norm")

    def backward(self, gy):
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        self.gain.grad += (gy * xhat).reshape(-1, d).sum(axis=0, keepdims=True)
        self.bias.grad += gy.reshape(-1, d).sum(axis=0, keepdims=True)
        gx = gy * self.gain.value[0]
        return inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))


class SelfAttention(Module):
    """Single-head scaled dot-product self-attention over the token axis.

    Input ``[..., N, C]``; output ``softmax(Q K^T / sqrt(C)) V`` projected by
    ``O``. No masking and no positional terms, so the map is equivariant
    to permutations of the N tokens.
    """

    def __init__(self, dim: int, rng: np.random.Generator = None, out_gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng, gain=out_gain)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x):
        q, k, v = self.q.forward(x), self.k.forward(x), self.v.forward(x)
        a = softmax(q @ np.swapaxes(k, -1, -2) * self.scale)
        h = a @ v
        self._q, self._k, self._v, self._a = q, k, v, a
        return self.o.forward(h)

    @property
    def attention(self) -> np.ndarray:
        return self._a

    def backward(self, gy):
        q, k, v, a = self._q, self._k, self._v, self._a
        gh = self.o.backward(gy)
        ga = gh @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(a, -1, -2) @ gh
        gs = softmax_backward(a, ga) * self.scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        return self.q.backward(gq) + self.k.backward(gk) + self.v.backward(gv)
