"""Two-token transformer fusion of the branch embeddings, plus the
classifier head and cross-entropy loss.

The two utterance vectors are stacked in a fixed order (latent first,
vocal second) as a 2-token sequence, passed through pre-norm encoder
blocks (MHA and GELU FFN, both with residual connections), and the first
output token is read as the fused representation.  No positional
encoding: the fixed row order plus the read-first-token rule provides
the asymmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch
from .nnbase import Layer, Linear, Param, gelu, gelu_grad, log_softmax, softmax


class LayerNorm(Layer):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        self.gamma = Param(np.ones(dim, dtype=dtype))
        self.beta = Param(np.zeros(dim, dtype=dtype))
        self.eps = eps
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, grad_out):
        xhat, inv = self._take_cache()
        d = xhat.shape[-1]
        self.gamma.grad += (grad_out * xhat).reshape(-1, d).sum(axis=0)
        self.beta.grad += grad_out.reshape(-1, d).sum(axis=0)
        gx = grad_out * self.gamma.value
        return (gx - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * inv


class MultiHeadAttention(Layer):
    """Scaled-dot-product self-attention with biases on all projections."""

    def __init__(self, dim, heads, rng, dtype=np.float64):
        if dim % heads:
            raise ValueError("model width must divide evenly across heads")
        self.dim, self.heads = dim, heads
        self.d_head = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self._cache = None

    def sublayers(self):
        return {"q": self.q, "k": self.k, "v": self.v, "out": self.out}

    def params(self):
        return {f"{n}.{pn}": p for n, l in self.sublayers().items()
                for pn, p in l.params().items()}

    def zero_grad(self):
        for l in self.sublayers().values():
            l.zero_grad()

    def _split(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, s, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)

    def forward(self, x):
        Q = self._split(self.q.forward(x))
        K = self._split(self.k.forward(x))
        V = self._split(self.v.forward(x))
        scale = 1.0 / np.sqrt(self.d_head)
        att = softmax(np.einsum("bhsd,bhtd->bhst", Q, K) * scale, axis=-1)
        ctx = self._merge(np.einsum("bhst,bhtd->bhsd", att, V))
        y = self.out.forward(ctx)
        self._cache = (Q, K, V, att, scale)
        return y

    def backward(self, grad_out):
        Q, K, V, att, scale = self._take_cache()
        g_ctx = self._split(self.out.backward(grad_out))
        g_att = np.einsum("bhsd,bhtd->bhst", g_ctx, V)
        g_V = np.einsum("bhst,bhsd->bhtd", att, g_ctx)
        g_scores = att * (g_att - np.sum(g_att * att, axis=-1, keepdims=True))
        g_Q = np.einsum("bhst,bhtd->bhsd", g_scores, K) * scale
        g_K = np.einsum("bhst,bhsd->bhtd", g_scores, Q) * scale
        gx = self.q.backward(self._merge(g_Q))
        gx = gx + self.k.backward(self._merge(g_K))
        gx = gx + self.v.backward(self._merge(g_V))
        return gx


class FeedForward(Layer):
    def __init__(self, dim, hidden, rng, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self._cache = None

    def params(self):
        return {f"fc1.{n}": p for n, p in self.fc1.params().items()} | \
               {f"fc2.{n}": p for n, p in self.fc2.params().items()}

    def zero_grad(self):
        self.fc1.zero_grad()
        self.fc2.zero_grad()

    def forward(self, x):
        pre = self.fc1.forward(x)
        self._cache = pre
        return self.fc2.forward(gelu(pre))

    def backward(self, grad_out):
        pre = self._take_cache()
        g_h = self.fc2.backward(grad_out)
        return self.fc1.backward(g_h * gelu_grad(pre))


class FusionBlock(Layer):
    """Pre-norm residual block: x + MHA(LN(x)), then u + FFN(LN(u))."""

    def __init__(self, dim, heads, ffn_hidden, rng, dtype=np.float64):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.mha = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, ffn_hidden, rng, dtype=dtype)

    def sublayers(self):
        return {"ln1": self.ln1, "mha": self.mha, "ln2": self.ln2,
                "ffn": self.ffn}

    def params(self):
        return {f"{n}.{pn}": p for n, l in self.sublayers().items()
                for pn, p in l.params().items()}

    def zero_grad(self):
        for l in self.sublayers().values():
            l.zero_grad()

    def forward(self, x):
        u = x + self.mha.forward(self.ln1.forward(x))
        return u + self.ffn.forward(self.ln2.forward(u))

    def backward(self, grad_out):
        g_u = grad_out + self.ln2.backward(self.ffn.backward(grad_out))
        return g_u + self.ln1.backward(self.mha.backward(g_u))


class FusionEncoder(Layer):
    """Stack of blocks over the 2-token [latent, vocal] sequence."""

    def __init__(self, dim, heads=4, depth=1, ffn_hidden=None, rng=None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        ffn_hidden = ffn_hidden or 4 * dim
        self.blocks = [FusionBlock(dim, heads, ffn_hidden, rng, dtype)
                       for _ in range(depth)]

    def params(self):
        return {f"block{i}.{n}": p for i, blk in enumerate(self.blocks)
                for n, p in blk.params().items()}

    def zero_grad(self):
        for blk in self.blocks:
            blk.zero_grad()

    def fuse(self, z_latent, z_vocal):
        """(B, d) x 2 -> fused (B, d), reading the first output token."""
        if z_latent.shape != z_vocal.shape or z_latent.shape[-1] != self.dim:
            raise ShapeMismatch(
                f"fusion expects two (B, {self.dim}) inputs, got "
                f"{z_latent.shape} and {z_vocal.shape}")
        h = np.stack([z_latent, z_vocal], axis=1)
        for blk in self.blocks:
            h = blk.forward(h)
        return h[:, 0, :]

    def backward(self, grad_fused):
        g = np.zeros((grad_fused.shape[0], 2, self.dim),
                     dtype=grad_fused.dtype)
        g[:, 0, :] = grad_fused
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return g[:, 0, :], g[:, 1, :]


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    label: int


class ClassifierHead(Layer):
    """logits = W2 relu(W1 z + b1) + b2."""

    def __init__(self, dim, hidden, num_classes, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self._cache = None

    def params(self):
        return {f"fc1.{n}": p for n, p in self.fc1.params().items()} | \
               {f"fc2.{n}": p for n, p in self.fc2.params().items()}

    def zero_grad(self):
        self.fc1.zero_grad()
        self.fc2.zero_grad()

    def forward(self, z):
        pre = self.fc1.forward(z)
        self._cache = pre
        return self.fc2.forward(np.maximum(pre, 0.0))

    def backward(self, grad_logits):
        pre = self._take_cache()
        g_h = self.fc2.backward(grad_logits)
        return self.fc1.backward(g_h * (pre > 0))

    def classify(self, z) -> Prediction:
        """Single utterance (d,) -> prediction; ties break to the lowest index."""
        logits = self.forward(z[None, :])[0]
        self._cache = None
        probs = softmax(logits)
        return Prediction(logits=logits, probabilities=probs,
                          label=int(np.argmax(probs)))


def cross_entropy(logits, labels):
    """Mean -log softmax(logits)[y]; log-sum-exp stable.

    Returns (loss, grad_logits) with the gradient of the mean loss.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    C = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    B = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(B), labels].mean()
    grad = softmax(logits, axis=1)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B
