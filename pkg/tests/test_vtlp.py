"""Bilinear frequency warping and resynthesis."""

import numpy as np
import pytest

from esf import dsp, vtlp
from esf.errors import ConfigurationError

# pi/2 + 2*atan(0.2), evaluated at 30 digits with mpmath
WARP_HALF_PI_AT_08 = 1.9655874464946581


def test_warp_identity_at_alpha_one():
    grid = np.linspace(0.0, np.pi, 4096)
    out = vtlp.warp_frequency(grid, 1.0)
    assert np.max(np.abs(out - grid)) < 1e-12


def test_warp_fixed_endpoints():
    for alpha in np.arange(0.2, 1.9, 0.1):
        assert vtlp.warp_frequency(0.0, float(alpha)) == 0.0
        assert vtlp.warp_frequency(np.pi, float(alpha)) == pytest.approx(np.pi, abs=1e-12)


def test_warp_derived_point_high_precision():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 30
    oracle = float(mpmath.pi / 2 + 2 * mpmath.atan(mpmath.mpf(1) / 5))
    assert abs(oracle - WARP_HALF_PI_AT_08) < 1e-15
    got = vtlp.warp_frequency(np.pi / 2, 0.8)
    assert abs(got - WARP_HALF_PI_AT_08) < 1e-9


def test_warp_strictly_increasing_bijection_on_grid():
    grid = np.linspace(0.0, np.pi, 1001)
    for alpha in np.arange(0.5 + 1e-3, 1.5, 1e-3 * 37):  # sparse sweep of the band
        out = vtlp.warp_frequency(grid, float(alpha))
        assert np.all(np.diff(out) > 0)
        assert out[0] == 0.0 and abs(out[-1] - np.pi) < 1e-12


def test_warp_rejects_out_of_domain():
    with pytest.raises(ValueError):
        vtlp.warp_frequency(-0.1, 0.9)
    with pytest.raises(ValueError):
        vtlp.warp_frequency(3.3, 0.9)
    with pytest.raises(ValueError):
        vtlp.warp_frequency(1.0, 0.0)


def test_invert_warp_identity_alpha_one():
    targets = np.linspace(0.0, np.pi, 57)
    np.testing.assert_array_equal(vtlp.invert_warp(targets, 1.0), targets)


def test_invert_then_forward_composition():
    rng = np.random.default_rng(4)
    for _ in range(50):
        alpha = float(rng.uniform(0.55, 1.45))
        target = float(rng.uniform(0.0, np.pi))
        omega = vtlp.invert_warp(target, alpha, tol=1e-9)
        assert abs(vtlp.warp_frequency(omega, alpha) - target) <= 1e-8


def test_invert_warp_fixed_endpoint():
    for alpha in (0.6, 0.8, 1.2, 1.4):
        assert vtlp.invert_warp(np.pi, alpha) == pytest.approx(np.pi, abs=1e-8)
        assert vtlp.invert_warp(0.0, alpha) == pytest.approx(0.0, abs=1e-8)


def test_composition_near_inverse_soft_bound():
    # warp by alpha then by 2 - alpha approximately undoes the map
    grid = np.linspace(0.0, np.pi, 200)
    for alpha in (0.7, 0.85, 1.15, 1.3):
        twice = vtlp.warp_frequency(vtlp.warp_frequency(grid, alpha), 2.0 - alpha)
        assert np.max(np.abs(twice - grid)) < 0.02


def test_warp_spectrum_identity():
    rng = np.random.default_rng(0)
    frame = rng.standard_normal(513) + 1j * rng.standard_normal(513)
    frame[0] = frame[0].real
    frame[-1] = frame[-1].real
    out = vtlp.warp_spectrum(frame, 1.0)
    np.testing.assert_allclose(out, frame, rtol=0, atol=1e-12)


def test_warp_spectrum_zero_frame():
    out = vtlp.warp_spectrum(np.zeros(129, dtype=complex), 0.8)
    assert np.all(out == 0)


def test_warp_spectrum_peak_moves_up_for_small_alpha():
    k = 1024
    frame = np.zeros(k // 2 + 1, dtype=complex)
    peak_bin = 100
    frame[peak_bin] = 1.0
    alpha = 0.8
    out = vtlp.warp_spectrum(frame, alpha)
    got_bin = int(np.argmax(np.abs(out)))
    predicted = vtlp.warp_frequency(2 * np.pi * peak_bin / k, alpha) * k / (2 * np.pi)
    assert got_bin > peak_bin
    assert abs(got_bin - predicted) <= 1.0


def test_warp_spectrum_keeps_dc_nyquist_real():
    rng = np.random.default_rng(1)
    frame = rng.standard_normal(257) + 1j * rng.standard_normal(257)
    out = vtlp.warp_spectrum(frame, 0.85)
    assert out[0].imag == 0.0
    assert out[-1].imag == 0.0


def test_warp_spectrum_rejects_bad_length():
    with pytest.raises(ValueError):
        vtlp.warp_spectrum(np.zeros(1, dtype=complex), 0.9)


def test_resynthesis_identity_alpha_one():
    rng = np.random.default_rng(6)
    w = dsp.Waveform(rng.standard_normal(16000) * 0.2, 16000)
    res = vtlp.vtlp_resynthesize(w, vtlp.WarpSpec(), alpha=1.0)
    assert res.applied
    assert len(res.waveform.samples) == len(w.samples)
    rel = (np.linalg.norm(res.waveform.samples - w.samples)
           / np.linalg.norm(w.samples))
    assert rel < 1e-4


def test_resynthesis_deterministic_given_seed():
    w = dsp.Waveform(np.sin(np.linspace(0, 400, 8000)) * 0.4, 16000)
    spec = vtlp.WarpSpec()
    a = vtlp.vtlp_resynthesize(w, spec, rng=np.random.default_rng(33))
    b = vtlp.vtlp_resynthesize(w, spec, rng=np.random.default_rng(33))
    assert a.alpha == b.alpha
    np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)


def test_resynthesis_tone_lands_at_predicted_frequency():
    sr = 16000
    tone_hz = 1000.0
    alpha = 0.8
    t = np.arange(sr) / sr
    w = dsp.Waveform(0.4 * np.sin(2 * np.pi * tone_hz * t), sr)
    res = vtlp.vtlp_resynthesize(w, vtlp.WarpSpec(), alpha=alpha)
    # peak-picking oracle on the output spectrum
    spec = np.abs(np.fft.rfft(res.waveform.samples))
    got_hz = np.argmax(spec) * sr / len(res.waveform.samples)
    predicted_hz = (sr / (2 * np.pi)) * vtlp.warp_frequency(
        2 * np.pi * tone_hz / sr, alpha)
    fft_bin_hz = sr / vtlp.WarpSpec().dft_size
    assert abs(got_hz - predicted_hz) <= fft_bin_hz


def test_short_input_passes_through_with_flag():
    w = dsp.Waveform(np.ones(100) * 0.1, 16000)  # shorter than the 50 ms window
    res = vtlp.vtlp_resynthesize(w, vtlp.WarpSpec(), alpha=0.8)
    assert not res.applied
    np.testing.assert_array_equal(res.waveform.samples, w.samples)


def test_warp_spec_validates_range():
    with pytest.raises(ConfigurationError):
        vtlp.WarpSpec(alpha_range=(0.0, 1.2))
    with pytest.raises(ConfigurationError):
        vtlp.WarpSpec(alpha_range=(1.2, 0.8))


def test_resynthesize_needs_exactly_one_of_alpha_rng():
    w = dsp.Waveform(np.zeros(4000), 16000)
    with pytest.raises(ValueError):
        vtlp.vtlp_resynthesize(w, vtlp.WarpSpec())
    with pytest.raises(ValueError):
        vtlp.vtlp_resynthesize(w, vtlp.WarpSpec(), alpha=1.0,
                               rng=np.random.default_rng(0))
