"""Shared building blocks for the hand-differentiated layers.

Every layer in this package follows the same contract: ``forward`` caches
whatever the backward pass needs, ``backward`` consumes the gradient of
the loss w.r.t. the layer output, accumulates parameter gradients into
``Param.grad`` and returns the gradient w.r.t. the layer input.  Calling
``backward`` without a cached forward raises ``MissingForwardCache``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .errors import MissingForwardCache, ShapeMismatch

SQRT_2PI = np.sqrt(2.0 * np.pi)


class Param:
    """A trainable array with an accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Layer:
    """Base class providing parameter discovery and cache bookkeeping."""

    def params(self) -> dict[str, Param]:
        found: dict[str, Param] = {}
        for name, attr in vars(self).items():
            if isinstance(attr, Param):
                found[name] = attr
        return found

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def _take_cache(self, name="_cache"):
        cache = getattr(self, name, None)
        if cache is None:
            raise MissingForwardCache(
                f"{type(self).__name__}.backward called before forward")
        setattr(self, name, None)
        return cache


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) / SQRT_2PI


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


class Linear(Layer):
    """y = x @ W.T (+ b); x is (..., d_in)."""

    def __init__(self, d_in, d_out, rng, bias=True, scale=None):
        if scale is None:
            scale = 1.0 / np.sqrt(d_in)
        self.W = Param(rng.normal(0.0, scale, size=(d_out, d_in)))
        self.b = Param(np.zeros(d_out)) if bias else None
        self._cache = None

    def params(self):
        out = {"W": self.W}
        if self.b is not None:
            out["b"] = self.b
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.W.value.shape[1]:
            raise ShapeMismatch(
                f"linear expects input dim {self.W.value.shape[1]}, got {x.shape[-1]}")
        self._cache = x
        y = x @ self.W.value.T
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, grad_out):
        x = self._take_cache()
        g2 = grad_out.reshape(-1, grad_out.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        self.W.grad += g2.T @ x2
        if self.b is not None:
            self.b.grad += g2.sum(axis=0)
        return grad_out @ self.W.value


def finite_difference_check(loss_fn, arrays, analytic_grads, h=1e-5,
                            rtol=1e-4, atol=1e-7, probes=None, rng=None):
    """Compare analytic gradients with central differences.

    ``arrays`` is a list of float64 ndarrays mutated in place while
    probing; ``analytic_grads`` the matching gradients.  By default every
    element is probed; pass ``probes`` to subsample large tensors.
    Returns the worst relative error and raises AssertionError on failure.
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic_grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and flat.size > probes:
            idx = (rng or np.random.default_rng(0)).choice(
                flat.size, size=probes, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), atol / rtol)
            worst = max(worst, err)
            assert err <= rtol, (
                f"gradient mismatch at flat index {i}: analytic {gflat[i]!r} "
                f"vs numeric {num!r} (rel err {err:.3e})")
    return worst
