"""Waveform analysis: STFT and the four-channel spectrotemporal field.

From a mono waveform we compute a Hamming-windowed STFT and derive four
per-bin signals:

* ``M``      log amplitude (nepers), floored at ``mag_floor``
* ``rho``    time derivative of M (nepers/second), a.k.a. spectral flux
* ``f_inst`` phase-vocoder instantaneous frequency (Hz)
* ``tau_g``  group delay from the wrapped cross-bin phase difference
             (seconds), clipped to +-``tau_clip``

Phase derivatives use principal-value wrapped differences, so a global
phase offset or a constant gain change leaves the derivative channels
untouched.  All boundary conventions (first frame of rho / f_inst, last
bin of tau_g) are explicit and tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentBinCount, NonFiniteInput, UnsupportedFormat, UtteranceTooShort

TARGET_SAMPLE_RATE = 16000

TWO_PI = 2.0 * np.pi


@dataclass
class Waveform:
    """Mono PCM samples in [-1, 1] at a given sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedFormat("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise UnsupportedFormat("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class StftConfig:
    """Analysis parameters; the window is fixed to Hamming."""

    win_length: int = 400
    hop_length: int = 160
    fft_size: int = 512
    mag_floor: float = 1e-7
    tau_clip: float = 400 / 16000  # win_length / fs

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.fft_size):
            raise ValueError("need 0 < hop_length <= win_length <= fft_size")
        if self.mag_floor <= 0 or self.tau_clip <= 0:
            raise ValueError("mag_floor and tau_clip must be positive")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def hop_seconds(self, sample_rate: int) -> float:
        return self.hop_length / sample_rate


@dataclass
class ComplexSpectrogram:
    amplitude: np.ndarray   # (T*, F), >= 0
    phase: np.ndarray       # (T*, F), radians in (-pi, pi]
    frame_times: np.ndarray  # seconds, frame starts
    bin_freqs: np.ndarray    # Hz
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return self.amplitude.shape[0]

    @property
    def num_bins(self) -> int:
        return self.amplitude.shape[1]


@dataclass
class QuartetField:
    """Stacked (M, rho, f_inst, tau_g) planes with a frame validity mask."""

    M: np.ndarray
    rho: np.ndarray
    f_inst: np.ndarray
    tau_g: np.ndarray
    mask: np.ndarray          # (T,) 0/1
    valid_frames: int

    @property
    def num_bins(self) -> int:
        return self.M.shape[1]

    def planes(self) -> np.ndarray:
        """Channel-stacked view of shape (4, T, F), order (M, rho, f_inst, tau_g)."""
        return np.stack([self.M, self.rho, self.f_inst, self.tau_g])


CHANNEL_NAMES = ("M", "rho", "f_inst", "tau_g")


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Map radians to the principal interval (-pi, pi]."""
    w = np.mod(x, TWO_PI)
    return np.where(w > np.pi, w - TWO_PI, w)


def resample_to(w: Waveform, rate: int = TARGET_SAMPLE_RATE) -> Waveform:
    """Linear resampling; identity when the rate already matches."""
    if w.sample_rate == rate:
        return w
    n_out = int(round(len(w) * rate / w.sample_rate))
    t_out = np.arange(n_out) / rate
    t_in = np.arange(len(w)) / w.sample_rate
    return Waveform(np.interp(t_out, t_in, w.samples), rate)


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Hamming-windowed real-input STFT.

    Each frame is windowed, zero-padded to ``fft_size`` and transformed;
    phase is referenced to the frame start.  Bins where the amplitude is
    exactly zero take phase 0 by convention.
    """
    x = w.samples
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("waveform contains non-finite samples")
    if len(x) < cfg.win_length:
        raise UtteranceTooShort(
            f"need at least {cfg.win_length} samples, got {len(x)}")
    n_frames = 1 + (len(x) - cfg.win_length) // cfg.hop_length
    window = np.hamming(cfg.win_length)
    starts = np.arange(n_frames) * cfg.hop_length
    idx = starts[:, None] + np.arange(cfg.win_length)[None, :]
    frames = x[idx] * window
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    amp = np.abs(spec)
    phase = np.where(amp > 0, np.angle(spec), 0.0)
    return ComplexSpectrogram(
        amplitude=amp,
        phase=phase,
        frame_times=starts / w.sample_rate,
        bin_freqs=np.arange(cfg.num_bins) * w.sample_rate / cfg.fft_size,
        sample_rate=w.sample_rate,
    )


def log_magnitude(spec: ComplexSpectrogram, mag_floor: float) -> np.ndarray:
    """M[t,k] = ln(max(A[t,k], mag_floor)); finite everywhere."""
    return np.log(np.maximum(spec.amplitude, mag_floor))


def log_magnitude_rate(M: np.ndarray, hop_seconds: float) -> np.ndarray:
    """Backward time difference of M scaled to nepers/second; first frame 0."""
    rho = np.zeros_like(M)
    if M.shape[0] > 1:
        rho[1:] = (M[1:] - M[:-1]) / hop_seconds
    return rho


def instantaneous_frequency(phase: np.ndarray, cfg: StftConfig,
                            sample_rate: int) -> np.ndarray:
    """Phase-vocoder estimate of the per-bin oscillation rate in Hz.

    The expected per-hop advance 2*pi*k*hop/fft_size is removed before
    wrapping and added back, so the estimate is alias-free within half a
    bin-spacing-per-hop of each bin center.  First frame: bin centers.
    """
    T, F = phase.shape
    k = np.arange(F)
    expected = TWO_PI * k * cfg.hop_length / cfg.fft_size  # rad per hop
    hop_s = cfg.hop_seconds(sample_rate)
    out = np.empty_like(phase)
    out[0] = k * sample_rate / cfg.fft_size
    if T > 1:
        delta = wrap_phase(phase[1:] - phase[:-1] - expected[None, :])
        out[1:] = (expected[None, :] + delta) / (TWO_PI * hop_s)
    return out


def group_delay(phase: np.ndarray, cfg: StftConfig,
                sample_rate: int) -> np.ndarray:
    """Negative wrapped cross-bin phase difference over the bin spacing.

    tau_g[t,k] = -wrap(phi[t,k+1] - phi[t,k]) / (2*pi*fs/fft_size); the
    last bin copies its left neighbour and the result is clipped to
    +-tau_clip.
    """
    delta_omega = TWO_PI * sample_rate / cfg.fft_size  # rad/s between bins
    tau = np.empty_like(phase)
    tau[:, :-1] = -wrap_phase(phase[:, 1:] - phase[:, :-1]) / delta_omega
    tau[:, -1] = tau[:, -2]
    return np.clip(tau, -cfg.tau_clip, cfg.tau_clip)


def extract_quartet(w: Waveform, cfg: StftConfig) -> QuartetField:
    """Full decomposition of one utterance; all frames of the result are valid."""
    spec = stft(w, cfg)
    M = log_magnitude(spec, cfg.mag_floor)
    rho = log_magnitude_rate(M, cfg.hop_seconds(w.sample_rate))
    f_inst = instantaneous_frequency(spec.phase, cfg, w.sample_rate)
    tau_g = group_delay(spec.phase, cfg, w.sample_rate)
    T = M.shape[0]
    return QuartetField(M=M, rho=rho, f_inst=f_inst, tau_g=tau_g,
                        mask=np.ones(T), valid_frames=T)


def pad_and_mask(fields: list[QuartetField]):
    """Zero-pad a batch to the maximum frame count.

    Returns (planes, mask) with planes of shape (B, 4, T, F) and mask of
    shape (B, T); padded frames are exactly zero in every plane.
    """
    if not fields:
        raise ValueError("empty batch")
    F = fields[0].num_bins
    for f in fields:
        if f.num_bins != F:
            raise InconsistentBinCount(
                f"bin counts differ: {f.num_bins} vs {F}")
    T = max(f.valid_frames for f in fields)
    planes = np.zeros((len(fields), 4, T, F))
    mask = np.zeros((len(fields), T))
    for i, f in enumerate(fields):
        t = f.valid_frames
        planes[i, :, :t] = f.planes()[:, :t]
        mask[i, :t] = f.mask[:t]
    return planes, mask
