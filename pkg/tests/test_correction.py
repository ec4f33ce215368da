import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soundcal.correction import (FLATNESS_GATE_DB, InverseImpulseResponse, NoiseDominatesError,
                                 PowerLimitError, _bin_powers, apply_correction, assess_flatness,
                                 bandlimit_filtered_mls, circular_correction, inverse_ir,
                                 inverse_spectrum, passes_flatness_gate)
from soundcal.mls_analysis import ImpulseResponse, truncate_ir
from soundcal.signals import FrequencyResponse, MlsSpec, SampledSignal, generate_mls
from soundcal.sim_chain import fir64, laptop_speaker_db, _design_fir, _log_grid

FS = 48000.0


def brute_convolution(x, h):
    n, L = x.size, h.size
    y = np.zeros(n + L - 1)
    for m in range(L):
        y[m : m + n] += h[m] * x
    return y


def test_inverse_spectrum_flat():
    f = np.linspace(0, 24000, 481)
    inv = inverse_spectrum(FrequencyResponse(f, np.full(f.size, -7.0)))
    np.testing.assert_allclose(inv.gain_db, 0.0, atol=1e-12)


def test_inverse_spectrum_dip_becomes_peak():
    f = np.linspace(0, 24000, 4801)
    g = -8.0 * np.exp(-0.5 * (np.log2(np.maximum(f, 1) / 1400) / 0.1) ** 2)
    inv = inverse_spectrum(FrequencyResponse(f, g))
    assert inv.value_at(1400) - inv.value_at(1000) == pytest.approx(8.0, abs=0.05)


@given(st.lists(st.floats(-50, 10), min_size=20, max_size=200))
def test_inverse_times_response_is_reference(gains):
    f = np.linspace(0, 24000, len(gains))
    H = FrequencyResponse(f, gains)
    inv = inverse_spectrum(H)
    k = H.nearest_bin(1000)
    np.testing.assert_allclose(inv.gain_db + H.gain_db, H.gain_db[k], atol=1e-9)


def test_inverse_spectrum_regularisation():
    f = np.arange(6.0)
    H = FrequencyResponse(f, [0.0, -10.0, -70.0, -80.0, -10.0, -20.0])
    inv = inverse_spectrum(H, reference_hz=0.0)
    # clamped bins take the value of the nearest inverted bin
    np.testing.assert_allclose(inv.gain_db, [0, 10, 10, 10, 10, 20], atol=1e-9)
    with pytest.raises(ValueError):
        inverse_spectrum(FrequencyResponse(f, np.full(6, -np.inf)))


def test_inverse_ir_delta_and_defaults():
    d = np.zeros(9601)
    d[4800] = 1.0
    iir = inverse_ir(ImpulseResponse(d, FS), 9601 / FS)
    assert iir.taps[4800] == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(np.delete(iir.taps, 4800), 0, atol=1e-9)
    ir = truncate_ir(ImpulseResponse(np.r_[fir64(), np.zeros(65535 - 64)], FS), 0.2)
    iir = inverse_ir(ir)
    assert len(iir) == 9600
    np.testing.assert_allclose(iir.taps, iir.taps[::-1], atol=1e-9)
    assert iir.reference_gain() == pytest.approx(1.0, abs=1e-6)
    assert iir.group_delay_samples == 4799.5


def test_inverse_ir_flattens_response():
    h = np.r_[fir64(), np.zeros(65535 - 64)]
    ir = truncate_ir(ImpulseResponse(h, FS), 0.2)
    iir = inverse_ir(ir)
    combined = FrequencyResponse.from_taps(np.convolve(fir64(), iir.taps), FS, 1 << 16)
    band = (combined.freq_hz >= 100) & (combined.freq_hz <= 10000)
    assert np.std(combined.gain_db[band]) < 0.1


def test_apply_correction_centre_delta_is_identity():
    x = np.random.default_rng(0).standard_normal(3000)
    h = np.zeros(101)
    h[50] = 1.0
    y = apply_correction(SampledSignal(x, FS), InverseImpulseResponse(h, FS)).samples
    np.testing.assert_allclose(y, x, atol=1e-9)


def test_apply_correction_impulse_gives_centred_taps():
    h = np.random.default_rng(1).standard_normal(41)
    x = np.zeros(200)
    x[0] = 1.0
    y = apply_correction(SampledSignal(x, FS), InverseImpulseResponse(h, FS)).samples
    np.testing.assert_allclose(y[:21], h[20:], atol=1e-12)


def test_apply_correction_matches_direct_convolution():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(10000)
    h = rng.standard_normal(257)
    y = apply_correction(SampledSignal(x, FS), InverseImpulseResponse(h, FS)).samples
    np.testing.assert_allclose(y, brute_convolution(x, h)[128 : 128 + 10000], atol=1e-9)


@given(st.integers(1, 200), st.integers(0, 50))
def test_apply_correction_time_invariant(delay, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(2000)
    iir = InverseImpulseResponse(rng.standard_normal(63), FS)
    a = apply_correction(SampledSignal(np.r_[np.zeros(delay), x], FS), iir).samples
    b = apply_correction(SampledSignal(x, FS), iir).samples
    np.testing.assert_allclose(a[delay : delay + 1900], b[:1900], atol=1e-9)


def test_circular_correction_matches_periodic_linear():
    mls = generate_mls(MlsSpec(10))
    iir = InverseImpulseResponse(np.random.default_rng(3).standard_normal(151), FS)
    once = circular_correction(mls, iir).samples
    periodic = apply_correction(SampledSignal(np.tile(mls.samples, 3), FS), iir).samples
    np.testing.assert_allclose(once, periodic[1023:2046], atol=1e-9)


def spectrum_power_db(x, f_lo, f_hi):
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1 / FS)
    keep = (f >= f_lo) & (f <= f_hi)
    return 10 * np.log10(np.sum(_bin_powers(np.where(keep, X, 0), x.size)))


def boosted_mls():
    mls = generate_mls(MlsSpec(14, -34.0))
    f = np.fft.rfftfreq(len(mls), 1 / FS)
    boost = 10 ** (np.clip(np.log2(np.maximum(f, 1) / 1000), 0, None) * 6 / 20)
    return SampledSignal(np.fft.irfft(np.fft.rfft(mls.samples) * boost, len(mls)), FS)


def test_bandlimit_examples():
    mls = generate_mls(MlsSpec(14, -40.0))
    out, cutoff = bandlimit_filtered_mls(mls, 100, -29, 20000)
    assert cutoff == 20000
    sig = boosted_mls()
    out, cutoff = bandlimit_filtered_mls(sig, 100, -29, 20000)
    assert 100 < cutoff < 20000
    assert out.power_db() <= -29 + 1e-9
    f = np.fft.rfftfreq(len(sig), 1 / FS)
    next_bin = f[np.searchsorted(f, cutoff) + 1]
    assert spectrum_power_db(sig.samples, 100, next_bin) > -29
    assert spectrum_power_db(out.samples, 0, FS / 2) == pytest.approx(out.power_db(), abs=1e-9)
    spec = np.abs(np.fft.rfft(out.samples))
    assert np.all(spec[(f < 100) | (f > cutoff)] < 1e-9)


def test_bandlimit_cannot_satisfy():
    x = SampledSignal(np.random.default_rng(0).standard_normal(4800), FS)
    with pytest.raises(PowerLimitError, match="cannot satisfy power limit"):
        bandlimit_filtered_mls(x, 100, -80, 20000)
    with pytest.raises(ValueError):
        bandlimit_filtered_mls(x, 500, -29, 100)


@given(st.floats(-45, -20), st.floats(0.1, 10))
def test_bandlimit_monotone_in_limit(limit, step):
    sig = boosted_mls()
    try:
        _, a = bandlimit_filtered_mls(sig, 100, limit, 20000)
    except PowerLimitError:
        return
    _, b = bandlimit_filtered_mls(sig, 100, limit + step, 20000)
    assert b >= a


def folded_recording(response_db_fn, n=16383, noise=None):
    mls = generate_mls(MlsSpec(14, -34.0))
    f = np.fft.rfftfreq(n, 1 / FS)
    x = np.fft.irfft(np.fft.rfft(mls.samples) * 10 ** (response_db_fn(f) / 20), n)
    return SampledSignal(x, FS)


def test_flatness_perfect_correction():
    rec = folded_recording(lambda f: np.zeros_like(f))
    rep = assess_flatness(rec, None, None, 100, 10000)
    assert rep.sd_db < 0.1 and rep.passed


def test_flatness_uncorrected_laptop_fails():
    rec = folded_recording(lambda f: laptop_speaker_db(f))
    rep = assess_flatness(rec, None, None, 100, 10000)
    assert rep.sd_db > 3 and not rep.passed


def test_flatness_discounts_microphone():
    mic_db = lambda f: 4 * np.sin(f / 700.0)  # noqa: E731
    rec = folded_recording(mic_db)
    f = np.fft.rfftfreq(len(rec), 1 / FS)
    rep = assess_flatness(rec, None, FrequencyResponse(f, mic_db(f)), 100, 10000)
    assert rep.sd_db < 1e-6


def test_flatness_noise_subtraction_and_exclusion():
    rng = np.random.default_rng(4)
    rec = folded_recording(lambda f: np.zeros_like(f))
    noise = SampledSignal(rng.standard_normal(len(rec)) * 10 ** (-60 / 20), FS)
    both = SampledSignal(rec.samples + noise.samples, FS)
    rep = assess_flatness(both, noise, None, 100, 10000)
    assert rep.excluded_fraction < 0.01
    # the silent-interval noise is louder than the whole recording
    loud = [rng.standard_normal(len(rec)) * 10 ** (db / 20) for db in (-30, -20)]
    with pytest.raises(NoiseDominatesError, match="noise dominates"):
        assess_flatness(SampledSignal(rec.samples + loud[0], FS), SampledSignal(loud[1], FS),
                        None, 100, 10000)


def test_flatness_uses_linear_bins():
    # a 20 dB step at 1 kHz: log-spaced bins would weight both sides alike
    rec = folded_recording(lambda f: np.where(f < 1000, 20.0, 0.0))
    rep = assess_flatness(rec, None, None, 100, 10000)
    f = rep.freq_hz
    band = (f >= 100) & (f <= 10000)
    frac = np.mean(f[band] < 1000)
    assert rep.sd_db == pytest.approx(20 * np.sqrt(frac * (1 - frac)), abs=0.05)


def test_flatness_gate_boundary():
    assert FLATNESS_GATE_DB == 3.0
    assert passes_flatness_gate(3.0)
    assert passes_flatness_gate(3.0 - 1e-6)
    assert not passes_flatness_gate(3.0 + 1e-6)


def test_measure_invert_correct_round_trip():
    from soundcal.mls_analysis import impulse_response, truncate_response
    mls = generate_mls(MlsSpec(16, -34.0))
    h = fir64()
    y = np.fft.irfft(np.fft.rfft(mls.samples) * np.fft.rfft(h, len(mls)), len(mls))
    ir = impulse_response(SampledSignal(y, FS), mls, 1)
    trunc = truncate_response(ir.response(), len(mls), 0.2, FS)
    iir = inverse_ir(trunc)
    filtered = circular_correction(mls, iir)
    rec = np.fft.irfft(np.fft.rfft(filtered.samples) * np.fft.rfft(h, len(mls)), len(mls))
    rep = assess_flatness(SampledSignal(rec, FS), None, None, 100, 10000)
    assert rep.sd_db < 0.5
