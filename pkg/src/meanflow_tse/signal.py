"""
Synthetic sources, convex mixtures and the STFT/ISTFT pair.

A synthetic "speaker" is a harmonic tone whose fundamental is fixed by its
source id, so an enrollment clip of the same id carries the identity cue.
Mixtures are formed convexly, y = lam * s + (1 - lam) * b, which puts the
mixture spectrogram exactly at t = lam on the straight background-to-target
path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_WINDOW_LEN = 64
DEFAULT_HOP = 16

# Disjoint id pools; f0 = 110 * 2**(id / 12).  One octave separates the
# highest target fundamental from the lowest background fundamental.
TARGET_POOL = tuple(range(0, 12))
BACKGROUND_POOL = tuple(range(24, 36))

N_HARMONICS = 4
NOISE_DB = -30.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class ComplexSpectrogram:
    """frames x bins complex STFT with the framing it was computed with."""

    data: np.ndarray
    hop: int
    window_len: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.complex128)
        if d.ndim != 2:
            raise ValueError("spectrogram data must be frames x bins")
        if d.shape[1] != self.window_len // 2 + 1:
            raise ValueError(
                f"expected {self.window_len // 2 + 1} bins for window {self.window_len}, got {d.shape[1]}"
            )
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class MixtureExample:
    example_id: str
    target_id: int
    background_id: int
    lam: float
    seed: int
    s: Waveform
    b: Waveform
    e: Waveform
    y: Waveform


def f0_of(source_id: int) -> float:
    return 110.0 * 2.0 ** (source_id / 12.0)


def _normalize_rms(x: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.mean(x**2))
    if r == 0:
        return x
    return x / r


def synth_source(source_id: int, duration_s: float, sample_rate: int = DEFAULT_SAMPLE_RATE,
                 seed: int = 0) -> Waveform:
    """Harmonic tone for ``source_id`` with seed-dependent phases, envelope and noise.

    Output is RMS-normalised to 1.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    n = int(round(duration_s * sample_rate))
    if n <= 0:
        raise ValueError("duration too short for the sample rate")
    rng = np.random.default_rng(np.random.SeedSequence([int(source_id) & 0xFFFFFFFF, int(seed) & 0xFFFFFFFF]))
    t = np.arange(n) / sample_rate
    f0 = f0_of(source_id)

    tone = np.zeros(n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=N_HARMONICS)
    for k in range(1, N_HARMONICS + 1):
        if k * f0 >= sample_rate / 2:
            break
        tone += np.sin(2.0 * np.pi * k * f0 * t + phases[k - 1]) / k

    # slow amplitude modulation: a few sub-4 Hz sinusoids through exp
    mod_f = rng.uniform(0.5, 4.0, size=3)
    mod_p = rng.uniform(0.0, 2.0 * np.pi, size=3)
    mod = np.sum(np.sin(2.0 * np.pi * mod_f[:, None] * t[None, :] + mod_p[:, None]), axis=0)
    tone *= np.exp(0.3 * mod)

    tone = _normalize_rms(tone)
    noise = rng.standard_normal(n) * 10.0 ** (NOISE_DB / 20.0)
    return Waveform(_normalize_rms(tone + noise), sample_rate)


def mix(s: Waveform, b: Waveform, lam: float) -> Waveform:
    if len(s) != len(b):
        raise ValueError(f"length mismatch: {len(s)} vs {len(b)}")
    if s.sample_rate != b.sample_rate:
        raise ValueError("sample rate mismatch")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return Waveform(s.samples.copy(), s.sample_rate)
    if lam == 0.0:
        return Waveform(b.samples.copy(), b.sample_rate)
    return Waveform(lam * s.samples + (1.0 - lam) * b.samples, s.sample_rate)


def hann(window_len: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(window_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_len)


def n_frames(length: int, hop: int) -> int:
    return 1 + length // hop


def stft(w: Waveform | np.ndarray, window_len: int = DEFAULT_WINDOW_LEN,
         hop: int = DEFAULT_HOP) -> ComplexSpectrogram:
    """Centered, Hann-windowed STFT; frame i is centred on sample i * hop."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if hop <= 0 or hop > window_len:
        raise ValueError("hop must be in [1, window_len]")
    if window_len > x.size:
        raise ValueError(f"window_len {window_len} exceeds signal length {x.size}")
    pad = window_len // 2
    xp = np.pad(x, (pad, pad))
    nf = n_frames(x.size, hop)
    idx = np.arange(nf)[:, None] * hop + np.arange(window_len)[None, :]
    frames = xp[idx] * hann(window_len)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1), hop, window_len)


def istft(X: ComplexSpectrogram, out_len: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed or zero-padded to ``out_len``."""
    N, hop = X.window_len, X.hop
    win = hann(N)
    frames = np.fft.irfft(X.data, n=N, axis=1) * win
    nf = frames.shape[0]
    total = (nf - 1) * hop + N
    out = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(nf):
        out[i * hop:i * hop + N] += frames[i]
        wsum[i * hop:i * hop + N] += win**2
    out /= np.maximum(wsum, 1e-8)
    pad = N // 2
    out = out[pad:pad + out_len]
    if out.size < out_len:
        out = np.pad(out, (0, out_len - out.size))
    return Waveform(out, sample_rate)


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index)]))


def make_example(index: int, lambda_range, duration_s: float, seed: int,
                 sample_rate: int = DEFAULT_SAMPLE_RATE,
                 target_pool=TARGET_POOL, background_pool=BACKGROUND_POOL) -> MixtureExample:
    rng = example_rng(seed, index)
    tid = int(rng.choice(target_pool))
    bid = int(rng.choice(background_pool))
    lo, hi = lambda_range
    lam = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    s_seed, b_seed, e_seed = (int(v) for v in rng.integers(0, 2**31 - 1, size=3))
    s = synth_source(tid, duration_s, sample_rate, s_seed)
    b = synth_source(bid, duration_s, sample_rate, b_seed)
    e = synth_source(tid, duration_s, sample_rate, e_seed)
    return MixtureExample(f"ex{index:05d}", tid, bid, lam, s_seed, s, b, e, mix(s, b, lam))


def gen_dataset(n: int, lambda_range=(0.3, 0.7), duration_s: float = 1.0, seed: int = 0,
                sample_rate: int = DEFAULT_SAMPLE_RATE,
                target_pool=TARGET_POOL, background_pool=BACKGROUND_POOL) -> list[MixtureExample]:
    """``n`` mixtures; every example draws from its own (seed, index) stream."""
    if n <= 0:
        raise ValueError("n must be positive")
    lo, hi = lambda_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"need 0 <= lo <= hi <= 1, got {lambda_range}")
    if set(target_pool) & set(background_pool):
        raise ValueError("target and background pools must be disjoint")
    return [make_example(i, (lo, hi), duration_s, seed, sample_rate, target_pool, background_pool)
            for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk split format
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"
_WAVES = ("s", "b", "e", "y")


def _write_f32(path: Path, x: np.ndarray):
    path.write_bytes(np.asarray(x, dtype="<f4").tobytes())


def _read_f32(path: Path) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)


def save_split(examples, out_dir) -> Path:
    """Write one split: ``manifest.txt`` plus ``<id>_{s,b,e,y}.f32`` sample files.

    Manifest columns: example_id target_id background_id lambda seed sample_rate.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        for name in _WAVES:
            _write_f32(out / f"{ex.example_id}_{name}.f32", getattr(ex, name).samples)
        lines.append(f"{ex.example_id} {ex.target_id} {ex.background_id} {ex.lam!r} {ex.seed} {ex.s.sample_rate}")
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out / MANIFEST)
    return out


def load_split(split_dir) -> list[MixtureExample]:
    """Read a split written by :func:`save_split`.

    The mixture is recomputed from the stored float32 s and b so the convex
    identity holds exactly for the loaded data.
    """
    d = Path(split_dir)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest in {d}")
    examples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        eid, tid, bid, lam, seed, sr = line.split()
        lam = float(lam)
        sr = int(sr)
        s = Waveform(_read_f32(d / f"{eid}_s.f32"), sr)
        b = Waveform(_read_f32(d / f"{eid}_b.f32"), sr)
        e = Waveform(_read_f32(d / f"{eid}_e.f32"), sr)
        examples.append(MixtureExample(eid, int(tid), int(bid), lam, int(seed), s, b, e, mix(s, b, lam)))
    return examples
