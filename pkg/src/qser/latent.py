"""Latent speech branch: precomputed-embedding loading, a deterministic
stand-in extractor, and the per-frame latent transformation.

Real runs consume embeddings exported by an external encoder into the
array-container format (see ``checkpoint``); desk-scale tests use
``stub_latents``: log filterbank energies projected through a fixed,
seeded random matrix.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_latents
from .dsp import StftConfig, Waveform, stft
from .errors import ShapeMismatch
from .nnbase import Layer, Linear, gelu, gelu_grad

STUB_BANDS = 40
STUB_DIM = 64
STUB_ENERGY_FLOOR = 1e-10


def _mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(num_bands, num_bins, sample_rate, fft_size):
    """Triangular filters, rows (bands) x cols (rfft bins)."""
    f_max = sample_rate / 2
    edges = _mel_inv(np.linspace(_mel(0.0), _mel(f_max), num_bands + 2))
    bins = np.arange(num_bins) * sample_rate / fft_size
    fb = np.zeros((num_bands, num_bins))
    for i in range(num_bands):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bins - lo) / max(mid - lo, 1e-12)
        down = (hi - bins) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def stub_projection(seed, num_bands=STUB_BANDS, dim=STUB_DIM):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(num_bands), size=(num_bands, dim))


def stub_latents(w: Waveform, cfg: StftConfig, seed: int):
    """Deterministic frame embeddings: log-mel energies times a fixed
    random projection.  Returns (latents (T, STUB_DIM), mask (T,))."""
    spec = stft(w, cfg)
    fb = mel_filterbank(STUB_BANDS, cfg.num_bins, w.sample_rate, cfg.fft_size)
    energies = (spec.amplitude ** 2) @ fb.T
    logmel = np.log(energies + STUB_ENERGY_FLOOR)
    lat = logmel @ stub_projection(seed)
    return lat, np.ones(lat.shape[0])


def latents_for(w: Waveform, cfg: StftConfig, seed: int, latent_path=None):
    """Precomputed file when given, otherwise the deterministic stub."""
    if latent_path:
        return load_latents(latent_path)
    return stub_latents(w, cfg, seed)


class LatentTransform(Layer):
    """Frame-local adapter e' = GELU(W e + b); masked frames stay zero."""

    def __init__(self, dim, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.linear = Linear(dim, dim, rng)
        self.linear.W.value = self.linear.W.value.astype(dtype)
        self.linear.b.value = self.linear.b.value.astype(dtype)
        self.linear.W.zero_grad()
        self.linear.b.zero_grad()
        self._cache = None

    def params(self):
        return {"W": self.linear.W, "b": self.linear.b}

    def zero_grad(self):
        self.linear.zero_grad()

    def forward(self, seq, mask):
        """seq: (B, T, D), mask: (B, T)."""
        if seq.shape[-1] != self.linear.W.value.shape[1]:
            raise ShapeMismatch(
                f"latent transform dim {self.linear.W.value.shape[1]}, "
                f"got {seq.shape[-1]}")
        pre = self.linear.forward(seq)
        out = gelu(pre) * mask[:, :, None]
        self._cache = (pre, mask)
        return out

    def backward(self, grad_out):
        pre, mask = self._take_cache()
        g_pre = grad_out * gelu_grad(pre) * mask[:, :, None]
        return self.linear.backward(g_pre)
