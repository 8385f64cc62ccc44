"""Utterance-level aggregation and the contrastive alignment objective.

Masked attention pooling turns a frame sequence into one vector per
utterance; two-layer projection heads map both branches into a shared
unit sphere; the symmetric InfoNCE loss treats same-utterance pairs as
positives against in-batch negatives.
"""

from __future__ import annotations

import numpy as np

from .errors import (EmptySequence, ShapeMismatch, TemperatureNonPositive,
                     ZeroProjection)
from .nnbase import Layer, Param, log_softmax, softmax

MASK_NEG = -1e9  # stand-in for -inf; underflows to exactly zero weight


class AttentionPool(Layer):
    """alpha = softmax(w^T g_t + b) over valid frames; z = sum alpha_t g_t."""

    def __init__(self, dim, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.w = Param(rng.normal(0, 1.0 / np.sqrt(dim), size=dim).astype(dtype))
        self.b = Param(np.zeros((), dtype=dtype))
        self._cache = None

    def forward(self, seq, mask):
        """seq: (B, T, D), mask: (B, T) -> (z (B, D), alpha (B, T))."""
        if seq.shape[-1] != self.w.value.shape[0]:
            raise ShapeMismatch(
                f"pooling dim {self.w.value.shape[0]}, got {seq.shape[-1]}")
        if np.any(mask.sum(axis=1) == 0):
            raise EmptySequence("an item has no valid frames")
        scores = seq @ self.w.value + self.b.value
        masked = np.where(mask > 0, scores, MASK_NEG)
        e = np.exp(masked - masked.max(axis=1, keepdims=True))
        e = e * (mask > 0)  # exact zeros at padded positions
        alpha = e / e.sum(axis=1, keepdims=True)
        z = np.einsum("bt,btd->bd", alpha, seq)
        self._cache = (seq, alpha)
        return z, alpha

    def backward(self, grad_z):
        seq, alpha = self._take_cache()
        g_alpha = np.einsum("btd,bd->bt", seq, grad_z)
        inner = np.einsum("bt,bt->b", alpha, g_alpha)
        g_scores = alpha * (g_alpha - inner[:, None])
        g_seq = alpha[:, :, None] * grad_z[:, None, :] \
            + g_scores[:, :, None] * self.w.value[None, None, :]
        self.w.grad += np.einsum("bt,btd->d", g_scores, seq)
        self.b.grad += g_scores.sum()
        return g_seq


class ProjectionHead(Layer):
    """u = W2 relu(W1 z) / ||W2 relu(W1 z)||; no biases."""

    def __init__(self, d_in, hidden, d_align, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.W1 = Param(rng.normal(0, 1.0 / np.sqrt(d_in),
                                   size=(hidden, d_in)).astype(dtype))
        self.W2 = Param(rng.normal(0, 1.0 / np.sqrt(hidden),
                                   size=(d_align, hidden)).astype(dtype))
        self._cache = None

    def forward(self, z):
        """z: (B, D) -> unit rows (B, d_align)."""
        if z.shape[-1] != self.W1.value.shape[1]:
            raise ShapeMismatch(
                f"head expects dim {self.W1.value.shape[1]}, got {z.shape[-1]}")
        pre = z @ self.W1.value.T
        h = np.maximum(pre, 0.0)
        p = h @ self.W2.value.T
        norm = np.linalg.norm(p, axis=-1)
        if np.any(norm < 1e-12):
            raise ZeroProjection("pre-normalization vector has near-zero norm")
        u = p / norm[:, None]
        self._cache = (z, pre, h, u, norm)
        return u

    def backward(self, grad_u):
        z, pre, h, u, norm = self._take_cache()
        gp = (grad_u - u * np.einsum("bd,bd->b", u, grad_u)[:, None]) \
            / norm[:, None]
        self.W2.grad += gp.T @ h
        gh = gp @ self.W2.value
        gh = gh * (pre > 0)
        self.W1.grad += gh.T @ z
        return gh @ self.W1.value


class InfoNCE(Layer):
    """Bidirectional InfoNCE over unit-norm rows U, V.

    Returns (loss_forward, loss_backward, loss_mean): row-wise and
    column-wise softmax cross-entropies on the diagonal of U V^T / eta,
    and their average.
    """

    def __init__(self, temperature):
        if temperature <= 0:
            raise TemperatureNonPositive(f"temperature {temperature} <= 0")
        self.eta = temperature
        self._cache = None

    def forward(self, U, V):
        if U.shape != V.shape:
            raise ShapeMismatch(f"paired batches differ: {U.shape} vs {V.shape}")
        B = U.shape[0]
        S = (U @ V.T) / self.eta
        diag = np.arange(B)
        l_qs = -log_softmax(S, axis=1)[diag, diag].mean()
        l_sq = -log_softmax(S, axis=0)[diag, diag].mean()
        self._cache = (U, V, S)
        return l_qs, l_sq, 0.5 * (l_qs + l_sq)

    def backward(self, grad_loss=1.0):
        """Gradient of the mean loss w.r.t. (U, V)."""
        U, V, S = self._take_cache()
        B = U.shape[0]
        eye = np.eye(B)
        d_s = 0.5 * ((softmax(S, axis=1) - eye) + (softmax(S, axis=0) - eye)) \
            / (B * self.eta) * grad_loss
        return d_s @ V, d_s.T @ U
