"""Inverse filtering of a measured response, power-limited bandlimiting, and the
flatness check on a corrected recording.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import oaconvolve

from .mls_analysis import ImpulseResponse, zero_phase_taps
from .signals import FrequencyResponse, SampledSignal, db_power, finite_sd

REGULARIZATION_DB = -60.0
REFERENCE_HZ = 1000.0
FLATNESS_GATE_DB = 3.0
MAX_EXCLUDED_FRACTION = 0.5


class PowerLimitError(ValueError):
    pass


class NoiseDominatesError(ValueError):
    pass


@dataclass(frozen=True)
class InverseImpulseResponse:
    """Linear-phase correction filter, unit gain at ``reference_hz``."""

    taps: np.ndarray
    sample_rate_hz: float
    reference_hz: float = REFERENCE_HZ

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("taps must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(taps)):
            raise ValueError("inverse impulse response taps must be finite")
        object.__setattr__(self, "taps", taps)

    def __len__(self):
        return self.taps.size

    @property
    def group_delay_samples(self) -> float:
        return (self.taps.size - 1) / 2

    def response(self, n_fft: int | None = None) -> FrequencyResponse:
        return FrequencyResponse.from_taps(self.taps, self.sample_rate_hz, n_fft)

    def reference_gain(self) -> float:
        """Magnitude at the bin nearest ``reference_hz`` on the filter's own grid."""
        r = self.response()
        return float(np.abs(r.to_complex()[r.nearest_bin(self.reference_hz)]))


@dataclass(frozen=True)
class FlatnessReport:
    band_lo_hz: float
    band_hi_hz: float
    sd_db: float
    passed: bool
    freq_hz: np.ndarray
    per_bin_spectrum_db: np.ndarray
    recorded_db: np.ndarray
    noise_db: np.ndarray
    excluded_fraction: float

    def to_dict(self) -> dict:
        return {
            "band_lo_hz": self.band_lo_hz,
            "band_hi_hz": self.band_hi_hz,
            "sd_db": self.sd_db,
            "passed": self.passed,
            "excluded_fraction": self.excluded_fraction,
            "freq_hz": self.freq_hz,
            "per_bin_spectrum_db": self.per_bin_spectrum_db,
            "recorded_db": self.recorded_db,
            "noise_db": self.noise_db,
        }


def passes_flatness_gate(sd_db: float, limit_db: float = FLATNESS_GATE_DB) -> bool:
    return bool(sd_db <= limit_db)


def _nearest_fill(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries with the value at the nearest valid index."""
    idx = np.flatnonzero(valid)
    pos = np.searchsorted(idx, np.arange(values.size))
    left = idx[np.clip(pos - 1, 0, idx.size - 1)]
    right = idx[np.clip(pos, 0, idx.size - 1)]
    k = np.arange(values.size)
    nearest = np.where(np.abs(k - left) <= np.abs(right - k), left, right)
    return np.where(valid, values, values[nearest])


def inverse_spectrum(H: FrequencyResponse, floor_db: float = REGULARIZATION_DB,
                     reference_hz: float = REFERENCE_HZ) -> FrequencyResponse:
    """Per-bin reciprocal magnitude, normalised to 1 at the bin nearest ``reference_hz``.

    Bins more than ``-floor_db`` below the peak are not inverted; they take the
    inverse of the nearest bin that was.
    """
    mag = np.nan_to_num(H.magnitude, nan=0.0, posinf=0.0)
    peak = mag.max() if mag.size else 0.0
    if not peak > 0:
        raise ValueError("cannot invert an all-zero response")
    valid = mag >= peak * 10 ** (floor_db / 20)
    inv = np.zeros_like(mag)
    inv[valid] = 1.0 / mag[valid]
    inv = _nearest_fill(inv, valid)
    inv /= inv[H.nearest_bin(reference_hz)]
    return FrequencyResponse(H.freq_hz, 20 * np.log10(inv))


def inverse_ir(truncated_ir: ImpulseResponse, iir_duration_sec: float = 0.2,
               reference_hz: float = REFERENCE_HZ) -> InverseImpulseResponse:
    """Linear-phase inverse filter of ``round(iir_duration_sec*fs)`` taps.

    The magnitude of the truncated IR is inverted, rebuilt as a centred
    zero-phase waveform, cropped and Hann-windowed, then rescaled so the gain
    at ``reference_hz`` is exactly 1.
    """
    fs = truncated_ir.sample_rate_hz
    length = int(round(iir_duration_sec * fs))
    if length < 1:
        raise ValueError("inverse filter shorter than one sample")
    n_fft = 2 * max(length, len(truncated_ir))
    H = truncated_ir.response(n_fft)
    inv = inverse_spectrum(H, reference_hz=reference_hz)
    taps = zero_phase_taps(inv.magnitude, n_fft, length, half_sample=True)
    out = InverseImpulseResponse(taps, fs, reference_hz)
    g = out.reference_gain()
    if not g > 0:
        raise ValueError(f"inverse filter has no gain at {reference_hz} Hz")
    return InverseImpulseResponse(taps / g, fs, reference_hz)


def apply_correction(signal: SampledSignal, iir: InverseImpulseResponse) -> SampledSignal:
    """Convolve with the inverse filter and remove its group delay.

    The first ``(L-1)//2`` samples of the full convolution are dropped and the
    result is cut to the input length. For an even filter length a
    half-sample delay remains.
    """
    x = signal.samples
    if x.size == 0:
        raise ValueError("empty input")
    y = oaconvolve(x, iir.taps)
    d = (len(iir) - 1) // 2
    return signal.with_samples(y[d : d + x.size])


def circular_correction(period: SampledSignal, iir: InverseImpulseResponse) -> SampledSignal:
    """Correct one period of a periodic signal (steady state of repeated playback)."""
    x = period.samples
    n = x.size
    h = iir.taps
    d = (h.size - 1) // 2
    k = (np.arange(h.size) - d) % n
    folded = np.bincount(k, weights=h, minlength=n)
    y = np.fft.irfft(np.fft.rfft(x) * np.fft.rfft(folded), n=n)
    return period.with_samples(y)


def _bin_powers(spectrum: np.ndarray, n: int) -> np.ndarray:
    """Contribution of each one-sided bin to the mean square of the signal."""
    w = np.full(spectrum.size, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w * np.abs(spectrum) ** 2 / n**2


def bandlimit_filtered_mls(filtered: SampledSignal, min_hz: float, power_limit_db: float,
                           max_hz: float) -> tuple[SampledSignal, float]:
    """Zero the spectrum outside ``[min_hz, cutoff]`` with the widest cutoff
    ``<= max_hz`` whose passband power stays within ``power_limit_db``.

    Power is the mean square of the returned signal, in dB re full scale.
    """
    fs = filtered.sample_rate_hz
    if not 0 <= min_hz < max_hz <= fs / 2:
        raise ValueError(f"need 0 <= min_hz < max_hz <= {fs / 2}, got {min_hz}, {max_hz}")
    x = filtered.samples
    n = x.size
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    band = (f >= min_hz) & (f <= max_hz)
    if not band.any():
        raise PowerLimitError("cannot satisfy power limit: no frequency bins in band")
    X[~band] = 0
    cum = np.cumsum(_bin_powers(X, n))
    limit = 10 ** (power_limit_db / 10)
    first = np.flatnonzero(band)[0]
    last = np.flatnonzero(band)[-1]
    if cum[first] > limit:
        raise PowerLimitError(
            f"cannot satisfy power limit: the lowest passband bin alone gives "
            f"{db_power(cum[first]):.2f} dB > {power_limit_db:.2f} dB")
    if cum[last] <= limit:
        cutoff_bin, cutoff_hz = last, float(max_hz)
    else:
        cutoff_bin = int(np.flatnonzero(cum <= limit)[-1])
        cutoff_hz = float(f[cutoff_bin])
    X[cutoff_bin + 1 :] = 0
    return filtered.with_samples(np.fft.irfft(X, n=n)), cutoff_hz


def bin_power_spectrum(signal: SampledSignal) -> tuple[np.ndarray, np.ndarray]:
    """``|FFT|**2 / N`` per one-sided bin; for stationary noise this is independent of N."""
    x = signal.samples
    if x.size == 0:
        raise ValueError("empty signal")
    return np.fft.rfftfreq(x.size, 1.0 / signal.sample_rate_hz), np.abs(np.fft.rfft(x)) ** 2 / x.size


def assess_flatness(recording: SampledSignal, noise_recording: SampledSignal | None,
                    mic_response: FrequencyResponse | None, band_lo: float, band_hi: float,
                    max_sd_db: float = FLATNESS_GATE_DB) -> FlatnessReport:
    """SD (dB) of the noise-subtracted, microphone-discounted recorded spectrum.

    Noise power is subtracted per bin in linear units; bins where the noise is
    at least as strong as the recording become NaN and are left out. The SD is
    taken over the linearly spaced FFT bins inside ``[band_lo, band_hi]``.
    """
    fs = recording.sample_rate_hz
    if not 0 <= band_lo < band_hi <= fs / 2:
        raise ValueError(f"band [{band_lo}, {band_hi}] Hz must lie within [0, {fs / 2}] Hz")
    freq, sig = bin_power_spectrum(recording)
    if noise_recording is None:
        noise = np.zeros_like(sig)
    else:
        if noise_recording.sample_rate_hz != fs:
            raise ValueError("recording and noise recording have different sample rates")
        nf, npow = bin_power_spectrum(noise_recording)
        noise = npow if nf.size == freq.size else np.interp(freq, nf, npow)
    clean = sig - noise
    with np.errstate(divide="ignore", invalid="ignore"):
        level = np.where(clean > 0, 10 * np.log10(np.where(clean > 0, clean, 1.0)), np.nan)
    if mic_response is not None:
        level = level - mic_response.interpolate(freq).gain_db
    in_band = (freq >= band_lo) & (freq <= band_hi)
    n_band = int(in_band.sum())
    if n_band == 0:
        raise ValueError("no FFT bins inside the flatness band")
    excluded = float(np.mean(~np.isfinite(level[in_band])))
    if excluded > MAX_EXCLUDED_FRACTION:
        raise NoiseDominatesError(
            f"noise dominates: {100 * excluded:.0f}% of in-band bins have noise >= signal")
    sd = finite_sd(level[in_band])
    return FlatnessReport(float(band_lo), float(band_hi), sd, passes_flatness_gate(sd, max_sd_db),
                          freq, level, db_power(sig), db_power(noise), excluded)
