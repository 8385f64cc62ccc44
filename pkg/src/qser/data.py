"""Dataset plumbing: WAV files, manifests, deterministic splits, and the
synthetic emotion corpus generator.

The generator produces harmonic pulse trains whose class parameters map
onto the four analysis channels: a linear f0 chirp (instantaneous
frequency), amplitude modulation rate/depth (log-magnitude dynamics) and
a pulse-asymmetry parameter realized as dispersed excitation clicks,
which tilt group delay across the click band while leaving the magnitude
spectrum untouched.
"""

from __future__ import annotations

import csv
import struct
import wave
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import TARGET_SAMPLE_RATE, Waveform, resample_to
from .errors import CorruptHeader, ParseError, UnknownLabel, UnsupportedFormat

# --- WAV ingestion ---------------------------------------------------------


def read_wav(path) -> Waveform:
    """PCM 16-bit mono only; resampled to 16 kHz when needed."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            comp = wf.getcomptype()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    if channels != 1:
        raise UnsupportedFormat(f"{path}: stereo input not supported")
    if width != 2 or comp != "NONE":
        raise UnsupportedFormat(f"{path}: only 16-bit PCM is supported")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return resample_to(Waveform(samples, rate), TARGET_SAMPLE_RATE)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# --- manifests -------------------------------------------------------------


@dataclass
class ManifestEntry:
    uid: str
    path: str
    label: str
    latent_path: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = sorted({e.label for e in self.entries})

    def __len__(self):
        return len(self.entries)

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabel(f"label {label!r} not in {self.labels}") from None


def save_manifest(path, manifest: Manifest) -> None:
    has_latents = any(e.latent_path for e in manifest.entries)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        header = ["id", "path", "label"] + (["latent_path"] if has_latents else [])
        wr.writerow(header)
        for e in manifest.entries:
            row = [e.uid, e.path, e.label]
            if has_latents:
                row.append(e.latent_path or "")
            wr.writerow(row)


def load_manifest(path) -> Manifest:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: empty manifest")
    header = rows[0]
    if header[:3] != ["id", "path", "label"]:
        raise ParseError(f"{path}: bad header {header}")
    has_latents = len(header) > 3 and header[3] == "latent_path"
    entries = []
    seen = set()
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < 3:
            raise ParseError(f"{path}:{i}: expected >= 3 columns")
        uid = row[0]
        if uid in seen:
            raise ParseError(f"{path}:{i}: duplicate id {uid!r}")
        seen.add(uid)
        latent = row[3] if has_latents and len(row) > 3 and row[3] else None
        entries.append(ManifestEntry(uid, row[1], row[2], latent))
    return Manifest(entries)


def split_dataset(manifest: Manifest, ratios=(0.7, 0.1, 0.2), seed=0):
    """Deterministic stratified train/val/test split.

    A pure function of (seed, sorted ids).  Per-class counts use
    largest-remainder rounding (ties resolved train, then val, then
    test).  Falls back to an unstratified split with a warning when some
    class has fewer than 3 items.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    by_label: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_label.setdefault(e.label, []).append(e)
    stratified = all(len(v) >= 3 for v in by_label.values())
    if not stratified:
        warnings.warn("a class has fewer than 3 items; splitting unstratified")
        by_label = {"": list(manifest.entries)}
    rng = np.random.default_rng(seed)
    splits = ([], [], [])
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda e: e.uid)
        order = rng.permutation(len(group))
        n = len(group)
        exact = [r * n for r in ratios]
        counts = [int(x) for x in exact]
        rema = [x - c for x, c in zip(exact, counts)]
        while sum(counts) < n:
            i = int(np.argmax(rema))
            counts[i] += 1
            rema[i] = -1.0
        pos = 0
        for si, cnt in enumerate(counts):
            for j in order[pos:pos + cnt]:
                splits[si].append(group[j])
            pos += cnt
    return tuple(Manifest(s, labels=list(manifest.labels)) for s in splits)


# --- synthetic corpus ------------------------------------------------------


@dataclass
class SynthClass:
    label: str
    f0_start: float          # Hz at utterance onset (jittered per item)
    f0_slope: float          # Hz/s linear chirp
    am_rate: float           # Hz amplitude modulation
    am_depth: float          # in [0, 1)
    pulse_asymmetry: float   # in [0, 1]; excitation-click dispersion
    f0_alternation: float = 0.0   # Hz; > 0 folds the chirp into a
    #   triangular track of that amplitude, so the slope keeps its
    #   magnitude but alternates sign and the pitch range stays bounded


@dataclass
class SyntheticSpec:
    classes: list[SynthClass]
    per_class: int = 50
    duration_range: tuple = (0.8, 2.0)
    noise_floor: float = 1e-3
    f0_jitter: float = 10.0      # Hz, uniform per utterance
    am_rate_jitter: float = 0.0  # Hz, uniform per utterance
    am_depth_jitter: float = 0.0
    click_rate: float = 16.0     # dispersed excitation clicks per second
    click_amp: tuple = (1.5, 3.5)  # uniform per-click gain range
    num_harmonics: int = 10
    sample_rate: int = TARGET_SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise ValueError("need at least one class")
        params = [(c.f0_start, c.f0_slope, c.am_rate, c.am_depth,
                   c.pulse_asymmetry, c.f0_alternation)
                  for c in self.classes]
        if len(set(params)) != len(params):
            raise ValueError("classes must differ in at least one parameter")
        if self.duration_range[0] <= 0:
            raise ValueError("durations must be positive")


# pulse_asymmetry maps to a signed dispersion in [-DELAY, +DELAY]: each
# excitation click is a band-limited chirp whose low frequencies arrive
# first (positive dispersion) or last (negative); time-reversing a chirp
# leaves its magnitude envelope alone, so the cue is pure group delay
ASYMMETRY_DELAY = 0.010
CLICK_BAND = (2000.0, 7000.0)
CLICK_MIN_LEN = 0.0005       # seconds; the asym=0.5 click is near-impulsive


def dispersed_click(dispersion: float, fs: int) -> np.ndarray:
    """Band-limited transient whose instantaneous frequency sweeps the
    click band over ``|dispersion| + CLICK_MIN_LEN`` seconds, upward for
    positive dispersion and downward for negative, tilting group delay
    across the band one way or the other; energy is normalized so the
    magnitude spectrum is independent of the dispersion."""
    f_lo, f_hi = CLICK_BAND
    length = CLICK_MIN_LEN + abs(dispersion)
    u = np.arange(max(int(round(length * fs)), 2)) / fs
    if dispersion < 0.0:
        phase = f_hi * u - 0.5 * (f_hi - f_lo) / length * u * u
    else:
        phase = f_lo * u + 0.5 * (f_hi - f_lo) / length * u * u
    click = np.sin(2 * np.pi * phase) * np.hanning(len(u))
    return click / np.sqrt(np.sum(click * click))


def synth_utterance(cls: SynthClass, spec: SyntheticSpec,
                    rng: np.random.Generator) -> Waveform:
    """Harmonic pulse train with chirped f0 and AM, plus dispersed
    excitation clicks realizing the pulse-asymmetry parameter."""
    fs = spec.sample_rate
    dur = rng.uniform(*spec.duration_range)
    n = int(round(dur * fs))
    t = np.arange(n) / fs
    f0_start = cls.f0_start + rng.uniform(-spec.f0_jitter, spec.f0_jitter)
    if cls.f0_alternation > 0.0:
        # triangular track: |slope| preserved, sign alternating, random
        # cycle phase; f0 stays within f0_start +- f0_alternation
        amp = cls.f0_alternation
        cyc = abs(cls.f0_slope) / (4.0 * amp) * t + rng.uniform(0.0, 1.0)
        f0_t = f0_start + amp * (4.0 * np.abs(cyc - np.floor(cyc) - 0.5) - 1.0)
        phase0 = np.cumsum(f0_t) / fs
        f0_max = f0_start + amp
    else:
        phase0 = f0_start * t + 0.5 * cls.f0_slope * t * t  # integral of f0
        f0_max = max(f0_start, f0_start + cls.f0_slope * dur)
    h_max = min(spec.num_harmonics, int((0.45 * fs) / max(f0_max, 1.0)))
    x = np.zeros(n)
    for h in range(1, h_max + 1):
        x += np.cos(2 * np.pi * h * phase0) / h
    am_phase = rng.uniform(0, 2 * np.pi)
    am_rate = cls.am_rate + rng.uniform(-spec.am_rate_jitter,
                                        spec.am_rate_jitter)
    am_depth = np.clip(cls.am_depth + rng.uniform(-spec.am_depth_jitter,
                                                  spec.am_depth_jitter),
                       0.0, 0.95)
    x *= 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + am_phase)
    click = dispersed_click(
        ASYMMETRY_DELAY * (2.0 * cls.pulse_asymmetry - 1.0), fs)
    n_clicks = max(int(round(spec.click_rate * dur)), 1)
    for _ in range(n_clicks):
        pos = int(rng.uniform(0.0, max(n - len(click) - 1, 1)))
        x[pos:pos + len(click)] += rng.uniform(*spec.click_amp) * click
    x *= 0.25 / max(np.max(np.abs(x)), 1e-9)
    x *= rng.uniform(0.5, 1.0)  # random per-utterance level
    x += rng.normal(0.0, spec.noise_floor, size=n)
    return Waveform(np.clip(x, -1.0, 1.0), fs)


def synth_corpus(spec: SyntheticSpec, out_dir) -> Manifest:
    """Generate WAV files plus manifest.csv; fully seed-deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci, cls in enumerate(spec.classes):
        for k in range(spec.per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, ci, k]))
            w = synth_utterance(cls, spec, rng)
            uid = f"{cls.label}_{k:04d}"
            path = out_dir / f"{uid}.wav"
            write_wav(path, w)
            entries.append(ManifestEntry(uid, str(path), cls.label))
    manifest = Manifest(entries)
    save_manifest(out_dir / "manifest.csv", manifest)
    return manifest


# --- synthetic-spec key=value files ---------------------------------------

_GLOBAL_KEYS = {"per_class": int, "duration_min": float, "duration_max": float,
                "noise_floor": float, "f0_jitter": float,
                "am_rate_jitter": float, "am_depth_jitter": float,
                "click_rate": float, "click_amp_min": float,
                "click_amp_max": float, "num_harmonics": int, "seed": int}
_CLASS_KEYS = {"label": str, "f0_start": float, "f0_slope": float,
               "am_rate": float, "am_depth": float, "pulse_asymmetry": float,
               "f0_alternation": float}


def parse_kv_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{i}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def load_synthetic_spec(path) -> SyntheticSpec:
    kv = parse_kv_file(path)
    globals_: dict = {}
    class_vals: dict[int, dict] = {}
    for key, val in kv.items():
        if key.startswith("class."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _CLASS_KEYS:
                raise ParseError(f"unknown class key {key!r}")
            try:
                idx = int(parts[1])
            except ValueError:
                raise ParseError(f"bad class index in {key!r}") from None
            conv = _CLASS_KEYS[parts[2]]
            class_vals.setdefault(idx, {})[parts[2]] = conv(val)
        elif key in _GLOBAL_KEYS:
            globals_[key] = _GLOBAL_KEYS[key](val)
        else:
            raise ParseError(f"unknown key {key!r}")
    if not class_vals:
        raise ParseError("no class.N.* entries found")
    classes = []
    for idx in sorted(class_vals):
        vals = class_vals[idx]
        vals.setdefault("label", f"class{idx}")
        try:
            classes.append(SynthClass(**vals))
        except TypeError as exc:
            raise ParseError(f"class {idx} incomplete: {exc}") from exc
    kwargs = {}
    if "duration_min" in globals_ or "duration_max" in globals_:
        kwargs["duration_range"] = (globals_.pop("duration_min", 0.8),
                                    globals_.pop("duration_max", 2.0))
    if "click_amp_min" in globals_ or "click_amp_max" in globals_:
        kwargs["click_amp"] = (globals_.pop("click_amp_min", 1.5),
                               globals_.pop("click_amp_max", 3.5))
    kwargs.update(globals_)
    return SyntheticSpec(classes=classes, **kwargs)


def default_synthetic_spec(per_class=72, seed=0) -> SyntheticSpec:
    """Four classes crossing f0-slope direction with AM rate; the phase
    skew varies across the slope pairs so no single channel separates
    every class."""
    classes = [
        SynthClass("rise_fast", 180.0, 90.0, 40.0, 0.5, 0.15),
        SynthClass("rise_slow", 180.0, 90.0, 3.0, 0.5, 0.65),
        SynthClass("fall_fast", 230.0, -90.0, 40.0, 0.5, 0.65),
        SynthClass("fall_slow", 230.0, -90.0, 3.0, 0.5, 0.15),
    ]
    return SyntheticSpec(classes=classes, per_class=per_class, seed=seed)
