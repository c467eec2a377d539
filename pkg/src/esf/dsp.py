"""Waveform and spectral primitives: STFT/ISTFT, mel filterbank energies,
power-mel features, and an MFCC baseline.

Front-end defaults: 25 ms window, 10 ms hop, 40 mel filters between 125 Hz
and 7600 Hz. Mel energies are compressed either with the power law
x^(1/15) (power-mel) or log + DCT (MFCC). No waveform peak normalization
and no feature-range clipping is applied anywhere.
"""

from __future__ import annotations

import functools
import wave as _wave
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import ConfigurationError

POWER_LAW_EXPONENT = 1.0 / 15.0
MFCC_LOG_FLOOR = 1e-10

DEFAULT_WINDOW_MS = 25.0
DEFAULT_HOP_MS = 10.0
DEFAULT_NUM_FILTERS = 40
DEFAULT_FMIN = 125.0
DEFAULT_FMAX = 7600.0


@dataclass
class Waveform:
    """Real-valued audio in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters. dft_size must be a power of two covering the window."""

    window_ms: float = DEFAULT_WINDOW_MS
    hop_ms: float = DEFAULT_HOP_MS
    dft_size: int = 512
    window: str = "hann"

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def validate(self, sample_rate: int) -> None:
        win = self.window_samples(sample_rate)
        hop = self.hop_samples(sample_rate)
        if win < 1 or hop < 1:
            raise ConfigurationError(f"window/hop too small at {sample_rate} Hz")
        if hop > win:
            raise ConfigurationError(
                f"hop ({hop}) must not exceed window ({win}): frames would leave gaps")
        if self.dft_size < win:
            raise ConfigurationError(
                f"dft_size ({self.dft_size}) must cover the window ({win} samples)")
        if self.dft_size & (self.dft_size - 1):
            raise ConfigurationError(f"dft_size must be a power of two, got {self.dft_size}")
        if self.window != "hann":
            raise ConfigurationError(f"unknown window function {self.window!r}")


@dataclass
class Spectrogram:
    """Complex half-spectra, one row per frame, each of length dft_size/2 + 1."""

    frames: np.ndarray  # (num_frames, K//2 + 1) complex128
    config: StftConfig
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FeatureMatrix:
    """Frames x coefficients of real feature values."""

    values: np.ndarray  # (frames, coeffs) float64
    kind: str  # "mel_energy" | "power_mel" | "mfcc"


def hann_periodic(n: int) -> np.ndarray:
    """Periodic Hann window; sums of shifted squares are flat for hop <= n/2."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def feature_config(sample_rate: int, window_ms: float = DEFAULT_WINDOW_MS,
                   hop_ms: float = DEFAULT_HOP_MS) -> StftConfig:
    """Front-end StftConfig with the DFT size rounded up to a power of two."""
    win = int(round(window_ms * sample_rate / 1000.0))
    k = 1
    while k < win:
        k *= 2
    return StftConfig(window_ms=window_ms, hop_ms=hop_ms, dft_size=k)


def stft(w: Waveform, cfg: StftConfig) -> Spectrogram:
    """Short-time Fourier transform.

    Frame m covers samples [m*hop, m*hop + window), windowed and zero-padded
    to dft_size before the transform.
    """
    cfg.validate(w.sample_rate)
    win = cfg.window_samples(w.sample_rate)
    hop = cfg.hop_samples(w.sample_rate)
    n = len(w.samples)
    if n < win:
        raise ValueError(f"waveform ({n} samples) shorter than one window ({win})")
    num_frames = 1 + (n - win) // hop
    window = hann_periodic(win)
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    frames = w.samples[idx] * window[None, :]
    spectra = np.fft.rfft(frames, n=cfg.dft_size, axis=1)
    return Spectrogram(spectra, cfg, w.sample_rate)


def istft(s: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse of stft.

    Output length is the analysis span (num_frames-1)*hop + window. Samples
    where the synthesis weight underflows (window endpoints with no overlap)
    come out as zero.
    """
    cfg = s.config
    cfg.validate(s.sample_rate)
    win = cfg.window_samples(s.sample_rate)
    hop = cfg.hop_samples(s.sample_rate)
    num_frames = s.num_frames
    span = (num_frames - 1) * hop + win
    window = hann_periodic(win)
    frames = np.fft.irfft(s.frames, n=cfg.dft_size, axis=1)[:, :win]
    out = np.zeros(span)
    norm = np.zeros(span)
    for m in range(num_frames):
        sl = slice(m * hop, m * hop + win)
        out[sl] += frames[m] * window
        norm[sl] += window * window
    # interior coverage check: every sample past the first/last window edge
    # must carry real synthesis weight, otherwise the pair cannot reconstruct
    if num_frames > 1:
        interior = norm[win:span - win] if span > 2 * win else norm[hop:span - hop]
        if interior.size and interior.min() < 1e-6:
            raise ConfigurationError(
                "window/hop pair does not satisfy overlap-add reconstruction")
    good = norm > 1e-12
    out[good] /= norm[good]
    out[~good] = 0.0
    return Waveform(out, s.sample_rate)


def mel_scale(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_inverse(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(num_filters: int, num_bins: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the mel scale, (num_filters, num_bins), unnormalized.

    Cached per parameter set; treat the returned array as read-only.
    """
    if num_filters < 1:
        raise ValueError("num_filters must be >= 1")
    if not (0.0 <= fmin < fmax <= sample_rate / 2.0):
        raise ValueError(
            f"band edges must satisfy 0 <= fmin < fmax <= Nyquist, "
            f"got fmin={fmin}, fmax={fmax} at {sample_rate} Hz")
    edges = mel_inverse(np.linspace(mel_scale(fmin), mel_scale(fmax), num_filters + 2))
    bin_freqs = np.arange(num_bins) * (sample_rate / 2.0) / (num_bins - 1)
    fb = np.zeros((num_filters, num_bins))
    for j in range(num_filters):
        lo, center, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_energies(s: Spectrogram, num_filters: int = DEFAULT_NUM_FILTERS,
                 fmin: float = DEFAULT_FMIN, fmax: float = DEFAULT_FMAX) -> FeatureMatrix:
    """Triangular mel filters applied to the power spectrum |X|^2."""
    power = np.abs(s.frames) ** 2
    fb = mel_filterbank(num_filters, power.shape[1], s.sample_rate, fmin, fmax)
    return FeatureMatrix(power @ fb.T, "mel_energy")


def power_mel_features(e: FeatureMatrix) -> FeatureMatrix:
    """Elementwise x^(1/15) compression of mel energies."""
    values = np.asarray(e.values if isinstance(e, FeatureMatrix) else e, dtype=np.float64)
    if values.size and values.min() < 0.0:
        raise ValueError("power-law compression requires nonnegative energies")
    return FeatureMatrix(np.power(values, POWER_LAW_EXPONENT), "power_mel")


def mfcc(e: FeatureMatrix, num_ceps: int = 13) -> FeatureMatrix:
    """Log of floored mel energies followed by an orthonormal type-II DCT."""
    values = np.asarray(e.values if isinstance(e, FeatureMatrix) else e, dtype=np.float64)
    if num_ceps > values.shape[1]:
        raise ValueError(
            f"num_ceps ({num_ceps}) cannot exceed the filter count ({values.shape[1]})")
    log_e = np.log(np.maximum(values, MFCC_LOG_FLOOR))
    ceps = scipy.fft.dct(log_e, type=2, norm="ortho", axis=1)
    return FeatureMatrix(ceps[:, :num_ceps], "mfcc")


def extract_power_mel(w: Waveform, cfg: StftConfig | None = None,
                      num_filters: int = DEFAULT_NUM_FILTERS,
                      fmin: float = DEFAULT_FMIN, fmax: float = DEFAULT_FMAX) -> FeatureMatrix:
    """Waveform to power-mel filterbank coefficients with front-end defaults."""
    cfg = cfg or feature_config(w.sample_rate)
    return power_mel_features(mel_energies(stft(w, cfg), num_filters, fmin, fmax))


def extract_mfcc(w: Waveform, cfg: StftConfig | None = None,
                 num_filters: int = DEFAULT_NUM_FILTERS, num_ceps: int = 13,
                 fmin: float = DEFAULT_FMIN, fmax: float = DEFAULT_FMAX) -> FeatureMatrix:
    """Waveform to MFCC baseline features."""
    cfg = cfg or feature_config(w.sample_rate)
    return mfcc(mel_energies(stft(w, cfg), num_filters, fmin, fmax), num_ceps)


def read_wav(path: str) -> Waveform:
    """Read a mono 16-bit PCM WAV file."""
    with _wave.open(path, "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: only mono WAV is supported")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM WAV is supported")
        rate = fh.getframerate()
        data = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def write_wav(path: str, w: Waveform) -> None:
    """Write a mono 16-bit PCM WAV file (values clipped to the int16 range)."""
    pcm = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with _wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
