"""Quaternion spectrotemporal encoder: Hamilton-structured conv blocks.

A quaternion feature map is stored as a real array of shape
``(B, C, 4, T, F)`` — channel axis first, the four quaternion components
second.  For the matrix work the component axis is merged with the
channel axis into ``4*C`` real planes laid out channel-major
(plane index = c*4 + component).

Each encoder block applies, in order:

    quaternion conv -> per-component batch norm -> radial qReLU
    -> max pooling along frequency only

Masked time frames are kept exactly zero through every stage, and every
layer implements its own analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatch, ShapeMismatch
from .nnbase import Layer, Param
from .quaternion import HAMILTON_BASIS


def merge_components(x):
    """(B, C, 4, T, F) -> (B, 4C, T, F) real-plane view."""
    b, c, q, t, f = x.shape
    return x.reshape(b, c * q, t, f)


def split_components(x, channels):
    b, cq, t, f = x.shape
    return x.reshape(b, channels, 4, t, f)


def zero_masked_frames(x, mask):
    """Zero every plane at frames where mask == 0; x is (B, P, T, F)."""
    if mask.min() > 0:
        return x
    return x * mask[:, None, :, None]


@dataclass
class QseConfig:
    """Shape of the encoder stack.

    ``channels[l]`` is the quaternion channel count produced by block l;
    the input has one quaternion channel (the four analysis signals).
    """

    depth: int = 4
    channels: tuple = (8, 8, 8, 8)
    kernel: tuple = (3, 3)
    pool_win: int = 2
    pool_stride: int = 2
    qrelu_eps: float = 1e-4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    freq_padding: str = "same"   # applied in every block

    def __post_init__(self):
        if self.depth < 1 or self.pool_stride < 1:
            raise ValueError("depth and pool stride must be >= 1")
        if len(self.channels) != self.depth:
            raise ValueError("need one channel width per block")
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0:
            raise ValueError("odd kernel sizes required")

    def output_bins(self, f_in: int) -> int:
        f = f_in
        for _ in range(self.depth):
            if self.freq_padding == "valid":
                f = f - self.kernel[1] + 1
            f = (f - self.pool_win) // self.pool_stride + 1
            if f < 1:
                raise ValueError("frequency axis exhausted; reduce depth/pooling")
        return f

    def embedding_dim(self, f_in: int) -> int:
        return self.channels[-1] * 4 * self.output_bins(f_in)


class QConvLayer(Layer):
    """Quaternion convolution from four shared real kernel banks.

    The four banks (W_M, W_rho, W_f, W_tau) are expanded through the
    Hamilton left-multiplication pattern into a (4*C_out, 4*C_in) plane
    mixing matrix per kernel tap, so each output component is a signed
    mixture of all four input components.  Stride 1; 'same' padding in
    time, 'same' or 'valid' in frequency.
    """

    BANK_NAMES = ("W_M", "W_rho", "W_f", "W_tau")

    def __init__(self, c_in, c_out, kernel=(3, 3), freq_padding="same",
                 rng=None, dtype=np.float64):
        kt, kf = kernel
        self.c_in, self.c_out = c_in, c_out
        self.kernel = (kt, kf)
        self.freq_padding = freq_padding
        std = np.sqrt(2.0 / (4 * c_in * kt * kf))
        rng = rng or np.random.default_rng(0)
        shape = (c_out, c_in, kt, kf)
        self.W_M = Param(rng.normal(0, std, shape).astype(dtype))
        self.W_rho = Param(rng.normal(0, std, shape).astype(dtype))
        self.W_f = Param(rng.normal(0, std, shape).astype(dtype))
        self.W_tau = Param(rng.normal(0, std, shape).astype(dtype))
        self.bias = Param(np.zeros((c_out, 4), dtype=dtype))
        self._cache = None

    def weight_count(self) -> int:
        """Trainable real conv weights (bias excluded)."""
        kt, kf = self.kernel
        return 4 * self.c_out * self.c_in * kt * kf

    def _banks(self):
        return np.stack([self.W_M.value, self.W_rho.value,
                         self.W_f.value, self.W_tau.value])

    def mixing_matrix(self):
        """(4*C_out, 4*C_in, kt, kf) real weights realizing the Hamilton mix."""
        big = np.einsum("smn,soiyx->ominyx", HAMILTON_BASIS, self._banks())
        kt, kf = self.kernel
        return np.ascontiguousarray(
            big.reshape(4 * self.c_out, 4 * self.c_in, kt, kf))

    def forward(self, x, mask):
        """x: (B, 4*C_in, T, F) real planes; returns (B, 4*C_out, T, F_out)."""
        if x.shape[1] != 4 * self.c_in:
            raise ShapeMismatch(
                f"expected {4 * self.c_in} input planes, got {x.shape[1]}")
        kt, kf = self.kernel
        pt = kt // 2
        pf = kf // 2 if self.freq_padding == "same" else 0
        T = x.shape[2]
        f_out = x.shape[3] if self.freq_padding == "same" else x.shape[3] - kf + 1
        x = zero_masked_frames(x, mask)  # invariant to values at padded frames
        xpad = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
        B = x.shape[0]
        P = 4 * self.c_in
        # im2col: one (4Cout, P*kt*kf) x (P*kt*kf, B*T*Fout) gemm beats
        # per-tap products by a wide margin on small channel counts
        cols = np.empty((P, kt, kf, B, T, f_out), dtype=x.dtype)
        for a in range(kt):
            for b in range(kf):
                cols[:, a, b] = \
                    xpad[:, :, a:a + T, b:b + f_out].transpose(1, 0, 2, 3)
        cols = cols.reshape(P * kt * kf, B * T * f_out)
        wflat = self.mixing_matrix().astype(x.dtype).reshape(4 * self.c_out, -1)
        y = (wflat @ cols).reshape(4 * self.c_out, B, T, f_out)
        y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
        y += self.bias.value.reshape(1, -1, 1, 1)
        y = zero_masked_frames(y, mask)
        self._cache = (cols, xpad.shape, mask, T, f_out)
        return y

    def backward(self, grad_out):
        cols, xpad_shape, mask, T, f_out = self._take_cache()
        kt, kf = self.kernel
        B = grad_out.shape[0]
        P = 4 * self.c_in
        g = zero_masked_frames(grad_out, mask)
        self.bias.grad += g.sum(axis=(0, 2, 3)).reshape(self.c_out, 4)
        wflat = self.mixing_matrix().astype(g.dtype).reshape(4 * self.c_out, -1)
        gflat = np.ascontiguousarray(
            g.transpose(1, 0, 2, 3)).reshape(4 * self.c_out, -1)
        g_wbig = (gflat @ cols.T).reshape(4 * self.c_out, P, kt, kf)
        gcols = (wflat.T @ gflat).reshape(P, kt, kf, B, T, f_out)
        gxpad = np.zeros(xpad_shape, dtype=g.dtype)
        for a in range(kt):
            for b in range(kf):
                gxpad[:, :, a:a + T, b:b + f_out] += \
                    gcols[:, a, b].transpose(1, 0, 2, 3)
        # fold the big-matrix gradient back onto the four shared banks
        gb = g_wbig.reshape(self.c_out, 4, self.c_in, 4, kt, kf)
        gbanks = np.einsum("smn,ominyx->soiyx", HAMILTON_BASIS, gb)
        self.W_M.grad += gbanks[0]
        self.W_rho.grad += gbanks[1]
        self.W_f.grad += gbanks[2]
        self.W_tau.grad += gbanks[3]
        pt = kt // 2
        pf = kf // 2 if self.freq_padding == "same" else 0
        gx = gxpad[:, :, pt:pt + T, pf:xpad_shape[3] - pf]
        return zero_masked_frames(np.ascontiguousarray(gx), mask)


class QBNLayer(Layer):
    """Per-component, per-channel batch normalization over valid frames.

    Operating independently on each of the 4*C real planes; batch
    statistics in train mode are computed over unmasked (valid) time
    frames only, and running statistics use the same convention.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        p = 4 * channels
        self.gamma = Param(np.ones(p, dtype=dtype))
        self.beta = Param(np.zeros(p, dtype=dtype))
        self.running_mean = np.zeros(p, dtype=dtype)
        self.running_var = np.ones(p, dtype=dtype)
        self._cache = None

    def forward(self, x, mask, training):
        if x.shape[1] != 4 * self.channels:
            raise ShapeMismatch(
                f"expected {4 * self.channels} planes, got {x.shape[1]}")
        F = x.shape[3]
        n_valid = float(mask.sum()) * F
        if training:
            if n_valid < 2:
                raise DegenerateBatch(
                    "batch norm needs at least 2 valid positions per channel")
            s1 = np.einsum("bptf,bt->p", x, mask)
            s2 = np.einsum("bptf,bptf,bt->p", x, x, mask)
            mean = s1 / n_valid
            var = np.maximum(s2 / n_valid - mean * mean, 0.0)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var)
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = self.gamma.value[None, :, None, None] * xhat \
            + self.beta.value[None, :, None, None]
        y = zero_masked_frames(y, mask)
        self._cache = (xhat, inv_std, mask, n_valid, training)
        return y

    def backward(self, grad_out):
        xhat, inv_std, mask, n_valid, training = self._take_cache()
        g = zero_masked_frames(grad_out, mask)
        self.gamma.grad += np.einsum("bptf,bptf->p", g, xhat)
        self.beta.grad += g.sum(axis=(0, 2, 3))
        g_xhat = g * self.gamma.value[None, :, None, None]
        if not training:
            return g_xhat * inv_std[None, :, None, None]
        sum_g = np.einsum("bptf,bt->p", g_xhat, mask)
        sum_gx = np.einsum("bptf,bptf,bt->p", g_xhat, xhat, mask)
        gx = (g_xhat - (sum_g[None, :, None, None]
                        + xhat * sum_gx[None, :, None, None]) / n_valid) \
            * inv_std[None, :, None, None]
        return zero_masked_frames(gx, mask)


class QReLULayer(Layer):
    """Radial activation q -> (||q|| / (||q|| + eps)) * q per quaternion.

    Shrinks the norm toward zero for small quaternions while preserving
    direction; the Jacobian at q = 0 is defined as the zero matrix.
    """

    def __init__(self, eps=1e-4, channels=None):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.channels = channels
        self._cache = None

    def forward(self, x):
        """x: (B, 4C, T, F) planes; channel-major component layout."""
        b, p, t, f = x.shape
        xq = x.reshape(b, p // 4, 4, t, f)
        n = np.sqrt(np.einsum("bcqtf,bcqtf->bctf", xq, xq))
        s = n / (n + self.eps)
        y = xq * s[:, :, None, :, :]
        self._cache = (xq, n, s)
        return y.reshape(b, p, t, f)

    def backward(self, grad_out):
        xq, n, s = self._take_cache()
        b, c, q, t, f = xq.shape
        gq = grad_out.reshape(b, c, 4, t, f)
        dot = np.einsum("bcqtf,bcqtf->bctf", xq, gq)
        denom = n * (n + self.eps) ** 2
        coef = np.where(n > 0, self.eps / np.where(denom > 0, denom, 1.0), 0.0)
        gx = gq * s[:, :, None, :, :] + xq * (coef * dot)[:, :, None, :, :]
        return gx.reshape(b, c * 4, t, f)


class FreqMaxPool(Layer):
    """Max pooling along the frequency axis only; ties go to the lowest bin."""

    def __init__(self, win=2, stride=2):
        if win < 1 or stride < 1:
            raise ValueError("window and stride must be >= 1")
        self.win = win
        self.stride = stride
        self._cache = None

    def out_bins(self, f_in):
        return (f_in - self.win) // self.stride + 1

    def forward(self, x):
        f_in = x.shape[-1]
        f_out = self.out_bins(f_in)
        windows = np.lib.stride_tricks.sliding_window_view(
            x, self.win, axis=-1)[..., ::self.stride, :]
        idx = np.argmax(windows, axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return np.ascontiguousarray(y)

    def backward(self, grad_out):
        idx, in_shape = self._take_cache()
        gx = np.zeros(in_shape, dtype=grad_out.dtype)
        f_out = idx.shape[-1]
        # one-hot the winner inside each window, then fold windows back;
        # per-offset strided adds stay race-free even for overlapping windows
        for k in range(self.win):
            sel = (idx == k)
            if not sel.any():
                continue
            contrib = np.where(sel, grad_out, 0.0)
            gx[..., k:k + (f_out - 1) * self.stride + 1:self.stride] += contrib
        return gx


class QseBlock(Layer):
    """conv -> QBN -> qReLU -> frequency pooling, masks preserved."""

    def __init__(self, c_in, c_out, cfg: QseConfig, rng, dtype=np.float64):
        self.conv = QConvLayer(c_in, c_out, cfg.kernel, cfg.freq_padding,
                               rng=rng, dtype=dtype)
        self.bn = QBNLayer(c_out, cfg.bn_eps, cfg.bn_momentum, dtype=dtype)
        self.act = QReLULayer(cfg.qrelu_eps)
        self.pool = FreqMaxPool(cfg.pool_win, cfg.pool_stride)

    def sublayers(self):
        return {"conv": self.conv, "bn": self.bn, "act": self.act,
                "pool": self.pool}

    def params(self):
        # conv parameters sit at block level (checkpoint names block{l}.W_M)
        out = dict(self.conv.params())
        for pname, p in self.bn.params().items():
            out[f"bn.{pname}"] = p
        return out

    def zero_grad(self):
        for layer in self.sublayers().values():
            layer.zero_grad()

    def forward(self, x, mask, training):
        h = self.conv.forward(x, mask)
        h = self.bn.forward(h, mask, training)
        h = self.act.forward(h)
        return self.pool.forward(h)

    def backward(self, grad_out):
        g = self.pool.backward(grad_out)
        g = self.act.backward(g)
        g = self.bn.backward(g)
        return self.conv.backward(g)


class QseEncoder(Layer):
    """Stack of identical blocks plus the time-indexed vectorization.

    ``encode`` maps standardized quartet planes (B, 4, T, F) to the
    embedding sequence (B, T, D) with D = C_last * 4 * F_last; temporal
    resolution is never reduced.
    """

    def __init__(self, cfg: QseConfig, num_bins, rng, dtype=np.float64):
        self.cfg = cfg
        self.num_bins = num_bins
        self.blocks = []
        c_prev = 1
        for l in range(cfg.depth):
            self.blocks.append(QseBlock(c_prev, cfg.channels[l], cfg, rng, dtype))
            c_prev = cfg.channels[l]
        self.out_dim = cfg.embedding_dim(num_bins)
        self._shape = None

    def params(self):
        out = {}
        for l, blk in enumerate(self.blocks):
            for name, p in blk.params().items():
                out[f"block{l}.{name}"] = p
        return out

    def zero_grad(self):
        for blk in self.blocks:
            blk.zero_grad()

    def forward(self, planes, mask, training):
        """planes: (B, 4, T, F) with masked frames already zero."""
        if planes.shape[1] != 4 or planes.shape[3] != self.num_bins:
            raise ShapeMismatch(
                f"expected (B, 4, T, {self.num_bins}) input, got {planes.shape}")
        h = planes
        for blk in self.blocks:
            h = blk.forward(h, mask, training)
        b, p, t, f = h.shape
        self._shape = (b, p, t, f)
        c = p // 4
        g = h.reshape(b, c, 4, t, f).transpose(0, 3, 1, 2, 4)
        return np.ascontiguousarray(g.reshape(b, t, c * 4 * f))

    def backward(self, grad_seq):
        b, p, t, f = self._take_cache("_shape")
        c = p // 4
        g = grad_seq.reshape(b, t, c, 4, f).transpose(0, 2, 3, 1, 4)
        g = np.ascontiguousarray(g.reshape(b, p, t, f))
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return g
