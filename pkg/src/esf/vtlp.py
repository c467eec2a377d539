"""Vocal tract length perturbation by bilinear frequency warping.

The warp maps input frequency w in [0, pi] to

    w' = w + 2*atan( (1-a)*sin(w) / (1 - (1-a)*cos(w)) )

with warping factor a. For a in (0, 2) the map is a strictly increasing
bijection of [0, pi] with fixed endpoints. Utterances are warped in the
spectral domain (its own 50 ms analysis window, independent of the feature
front end) and resynthesized by overlap-add, so acoustic simulation can run
on the already-warped waveform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram, StftConfig, Waveform, istft, stft
from .errors import ConfigurationError

DEFAULT_ALPHA_RANGE = (0.8, 1.2)
BISECTION_TOL = 1e-9


@dataclass(frozen=True)
class WarpSpec:
    """Warp factor sampling range plus the analysis parameters for resynthesis."""

    alpha_range: tuple[float, float] = DEFAULT_ALPHA_RANGE
    window_ms: float = 50.0
    hop_ms: float = 12.5
    dft_size: int = 1024

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (0.0 < lo <= hi < 2.0):
            raise ConfigurationError(
                f"alpha_range must lie within (0, 2) and be ordered, got {self.alpha_range}")

    def stft_config(self) -> StftConfig:
        return StftConfig(window_ms=self.window_ms, hop_ms=self.hop_ms,
                          dft_size=self.dft_size)


@dataclass
class VtlpResult:
    """Resynthesized waveform plus the warp factor that produced it.

    applied is False when the input was shorter than one analysis window and
    passed through unwarped.
    """

    waveform: Waveform
    alpha: float
    applied: bool


def warp_frequency(omega, alpha: float):
    """Warped frequency for omega in [0, pi]. Accepts scalars or arrays."""
    if alpha <= 0.0:
        raise ValueError(f"warp factor must be positive, got {alpha}")
    om = np.asarray(omega, dtype=np.float64)
    if om.size and (om.min() < 0.0 or om.max() > np.pi):
        raise ValueError("frequencies must lie in [0, pi]")
    num = (1.0 - alpha) * np.sin(om)
    den = 1.0 - (1.0 - alpha) * np.cos(om)
    out = np.clip(om + 2.0 * np.arctan2(num, den), 0.0, np.pi)
    return float(out) if np.isscalar(omega) else out


def _warp_raw(om: np.ndarray, alpha: float) -> np.ndarray:
    a = 1.0 - alpha
    return om + 2.0 * np.arctan2(a * np.sin(om), 1.0 - a * np.cos(om))


def invert_warp(omega_target, alpha: float, tol: float = BISECTION_TOL):
    """Find omega with warp_frequency(omega, alpha) == omega_target within tol.

    Bisection on the monotone map; the fixed endpoints guarantee a root for
    any target in [0, pi]. Accepts scalars or arrays.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    target = np.asarray(omega_target, dtype=np.float64)
    if target.size and (target.min() < 0.0 or target.max() > np.pi):
        raise ValueError("target frequencies must lie in [0, pi]")
    if alpha == 1.0:
        out = target.copy()
        return float(out) if np.isscalar(omega_target) else out
    lo = np.zeros_like(target)
    hi = np.full_like(target, np.pi)
    # pi / 2^k < tol after ~32 halvings at tol=1e-9
    steps = int(np.ceil(np.log2(np.pi / tol)))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        below = _warp_raw(mid, alpha) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return float(out) if np.isscalar(omega_target) else out


def _invert_warp_fast(target: np.ndarray, alpha: float,
                      tol: float = BISECTION_TOL) -> np.ndarray:
    """Newton refinement of a coarse-grid seed; falls back to bisection for
    any point whose verified residual misses tol. Same roots as invert_warp
    to within tol, an order of magnitude cheaper on full-spectrum batches."""
    if alpha == 1.0:
        return target.copy()
    grid = np.linspace(0.0, np.pi, 257)
    warped = _warp_raw(grid, alpha)
    warped[0], warped[-1] = 0.0, np.pi
    om = np.interp(target, warped, grid)
    a = 1.0 - alpha
    one_minus_a2 = 1.0 - a * a
    for _ in range(3):
        cos = np.cos(om)
        residual = om + 2.0 * np.arctan2(a * np.sin(om), 1.0 - a * cos) - target
        slope = one_minus_a2 / (1.0 - 2.0 * a * cos + a * a)
        om = np.clip(om - residual / slope, 0.0, np.pi)
    bad = np.abs(_warp_raw(om, alpha) - target) > tol
    if np.any(bad):
        om[bad] = invert_warp(target[bad], alpha, tol)
    return om


def _source_positions(num_bins: int, alpha: float) -> np.ndarray:
    """Fractional input-bin positions that feed each output bin."""
    k = 2 * (num_bins - 1)
    omega_out = np.arange(num_bins) * (2.0 * np.pi / k)
    omega_out[-1] = np.pi  # guard against rounding past the domain edge
    omega_src = _invert_warp_fast(omega_out, alpha)
    return omega_src * (k / (2.0 * np.pi))


def warp_spectrum(frame: np.ndarray, alpha: float) -> np.ndarray:
    """Resample a complex half-spectrum along the inverse-warped frequency axis.

    Output bin k' takes the linearly interpolated complex value of the input
    spectrum at the frequency that warps onto k'. DC and Nyquist stay real.
    """
    frame = np.asarray(frame)
    if frame.ndim != 1 or frame.shape[0] < 2:
        raise ValueError("frame must be a half-spectrum of length K/2 + 1 >= 2")
    pos = _source_positions(frame.shape[0], alpha)
    return _interp_frames(frame[None, :], pos)[0]


def _interp_frames(frames: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Complex linear interpolation of each row at fractional bin positions."""
    n = frames.shape[1]
    idx = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - idx
    out = frames[:, idx] * (1.0 - frac) + frames[:, idx + 1] * frac
    out[:, 0] = out[:, 0].real
    out[:, -1] = out[:, -1].real
    return out


def sample_alpha(spec: WarpSpec, rng: np.random.Generator) -> float:
    lo, hi = spec.alpha_range
    return float(rng.uniform(lo, hi))


def vtlp_resynthesize(w: Waveform, spec: WarpSpec | None = None, *,
                      alpha: float | None = None,
                      rng: np.random.Generator | None = None) -> VtlpResult:
    """Warp an utterance's spectrum and resynthesize, preserving its length.

    Exactly one of alpha or rng must be given; with rng, alpha is drawn
    uniformly from spec.alpha_range. Inputs shorter than one analysis window
    pass through unwarped with applied=False.
    """
    spec = spec or WarpSpec()
    if (alpha is None) == (rng is None):
        raise ValueError("pass exactly one of alpha or rng")
    if alpha is None:
        alpha = sample_alpha(spec, rng)
    if alpha <= 0.0:
        raise ValueError(f"warp factor must be positive, got {alpha}")
    cfg = spec.stft_config()
    win = cfg.window_samples(w.sample_rate)
    n = len(w.samples)
    if n < win:
        return VtlpResult(Waveform(w.samples.copy(), w.sample_rate), alpha, False)
    # pad one window on each side so every original sample sits in the
    # fully-overlapped interior, then crop back to the input length
    hop = cfg.hop_samples(w.sample_rate)
    padded = np.concatenate([np.zeros(win), w.samples, np.zeros(win + hop)])
    spec_in = stft(Waveform(padded, w.sample_rate), cfg)
    pos = _source_positions(spec_in.frames.shape[1], alpha)
    warped = _interp_frames(spec_in.frames, pos)
    out = istft(Spectrogram(warped, spec_in.config, spec_in.sample_rate))
    samples = out.samples[win:win + n]
    return VtlpResult(Waveform(samples, w.sample_rate), alpha, True)
