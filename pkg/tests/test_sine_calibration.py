import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import resample_poly

from soundcal.drc_model import DrcParams
from soundcal.signals import SampledSignal, generate_sine
from soundcal.sim_chain import (PlaybackChain, SimEnvironment, SimTransducer, colored_noise,
                                simulate_playback)
from soundcal.sine_calibration import (ToneNotDetected, analyze_tone, estimate_recorded_frequency,
                                       harmonic_power, measure_gain_curve, thd)

FS = 48000.0


def sine(f, amp=1.0, dur=1.0, phase=0.0):
    t = np.arange(int(dur * FS)) / FS
    return amp * np.sin(2 * np.pi * f * t + phase)


def rec(x):
    return SampledSignal(x, FS)


def brute_thd(x, f0, fs):
    """Harmonic powers from exact rectangular-window FFT bins (integer cycles only)."""
    n = x.size
    spec = np.abs(np.fft.rfft(x)) ** 2
    k0 = f0 * n / fs
    assert abs(k0 - round(k0)) < 1e-9
    p = [spec[int(round(k * k0))] for k in range(1, 7) if k * f0 < fs / 2]
    return np.sqrt(sum(p[1:]) / p[0])


def test_frequency_estimate_examples():
    assert estimate_recorded_frequency(rec(sine(1000.0)), 1000.0) == pytest.approx(1000.0, abs=0.05)
    assert estimate_recorded_frequency(rec(sine(1000.02)), 1000.0) == pytest.approx(1000.02, abs=0.05)


def test_frequency_estimate_in_noise():
    rng = np.random.default_rng(5)
    x = sine(1000.0, amp=10 ** (-47 / 20))
    noise = colored_noise(x.size, -50.0, "one_over_f", FS, rng)
    assert estimate_recorded_frequency(rec(x + noise), 1000.0) == pytest.approx(1000.0, abs=0.2)


def test_frequency_not_detected():
    with pytest.raises(ToneNotDetected, match="tone not detected"):
        estimate_recorded_frequency(rec(np.zeros(48000)), 1000.0)


@given(st.sampled_from([(100001, 100000), (1001, 1000), (101, 100), (99, 100), (21, 20)]))
def test_frequency_after_software_resampling(ratio):
    up, down = ratio
    x = resample_poly(sine(1000.0, dur=1.2), up, down)[4800:-4800]
    f = estimate_recorded_frequency(rec(x), 1000.0)
    # reading a faster-sampled recording at the nominal rate lowers the tone
    assert f == pytest.approx(1000.0 * down / up, abs=0.05)


def test_harmonic_power_examples():
    f = 1000.0
    x = sine(f)
    assert harmonic_power(rec(x), f, 1) == pytest.approx(0.5, rel=1e-6)
    assert harmonic_power(rec(x), f, 2) <= 1e-6
    y = x + sine(2 * f, 0.1)
    r = harmonic_power(rec(y), f, 2) / harmonic_power(rec(y), f, 1)
    assert r == pytest.approx(0.01, abs=1e-4)
    with pytest.raises(ValueError):
        harmonic_power(rec(x), 12000.0, 2)


@given(st.floats(0, 2 * np.pi))
def test_harmonic_power_phase_invariant(phase):
    assert harmonic_power(rec(sine(997.0, phase=phase)), 997.0, 1) == pytest.approx(0.5, rel=1e-6)


def test_harmonic_power_rejects_interference():
    x = sine(1000.0)
    p1 = harmonic_power(rec(x), 1000.0, 1)
    q1 = harmonic_power(rec(x + sine(1337.0, 0.5)), 1000.0, 1)
    assert abs(10 * np.log10(q1 / p1)) < 0.01


def test_thd_examples():
    assert thd(rec(sine(1000.0)), 1000.0) < 1e-5
    x = sine(1000.0) + sine(2000.0, 0.01)
    assert thd(rec(x), 1000.0) == pytest.approx(0.01, abs=1e-4)
    assert thd(rec(0.1 * x), 1000.0) == pytest.approx(thd(rec(x), 1000.0), rel=1e-9)
    with pytest.raises(ToneNotDetected):
        thd(rec(np.zeros(48000)), 1000.0)


def test_thd_above_nyquist_uses_available_harmonics():
    res = analyze_tone(rec(sine(5000.0) + sine(15000.0, 0.02)), 5000.0)
    assert res.harmonics_used == (2, 3, 4)
    assert res.thd == pytest.approx(0.02, abs=2e-4)


def compressor_chain(T=-20.0, W=10.0, Q=0.5, gain=0.0):
    return PlaybackChain(SimTransducer([1.0], DrcParams(gain, T, W, Q)), SimTransducer([1.0]),
                         SimEnvironment(), FS)


@pytest.mark.parametrize("W", [0.0, 10.0])
def test_thd_matches_fft_oracle_on_compressed_sine(W):
    chain = compressor_chain(W=W)
    out = simulate_playback(chain, generate_sine(1000.0, 1.0, -3.1 + 3.0103, FS)).samples
    x = out[4800:]  # steady state, 900 whole cycles
    ours = thd(rec(x), 1000.0)
    oracle = brute_thd(x, 1000.0, FS)
    assert 0.002 <= ours <= 0.01
    assert ours == pytest.approx(oracle, rel=0.05)


def test_gain_curve_linear_chain():
    chain = PlaybackChain(SimTransducer([10 ** (-10 / 20)]), SimTransducer([1.0]), SimEnvironment(), FS)
    pts = measure_gain_curve(chain, [-50.0, -30.0, -10.0, -3.1], duration_sec=0.5)
    for p in pts:
        assert p.out_db == pytest.approx(p.in_db - 10, abs=0.1)


def test_gain_curve_compressor_and_regimes():
    chain = compressor_chain()
    levels = [-50.0, -40.0, -30.0, -26.0, -20.0, -10.0, -3.1]
    pts = measure_gain_curve(chain, levels)
    assert pts[-1].out_db == pytest.approx(-20 + 0.5 * (-3.1 + 20), abs=0.2)
    for p in pts:
        if p.in_db < -25:
            assert p.thd <= 0.001
        if p.in_db > -20:
            assert p.thd >= 0.002


def test_gain_curve_validation():
    chain = compressor_chain()
    with pytest.raises(ValueError):
        measure_gain_curve(chain, [-10.0, -20.0])
    with pytest.raises(ValueError):
        measure_gain_curve(chain, [-10.0, 0.0])
