"""Nonsynchronous MLS measurement: playback layout, period estimation, DFT-domain
resampling, impulse response by circular cross-correlation, and IR post-processing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import czt

from .signals import FrequencyResponse, SampledSignal, db_power, hann_window

PEAK_THRESHOLD = 0.5
PEAK_WINDOW = 0.02
SINC_HALF_WIDTH = 32
PARENT_FLOOR_DB = -60.0


class PeriodNotDetected(ValueError):
    pass


@dataclass(frozen=True)
class PlaybackLayout:
    period_samples: int
    analysis_periods: int = 4
    warmup_periods: int = 1
    tail_fraction: float = 0.10

    def __post_init__(self):
        if self.analysis_periods < 2:
            raise ValueError("at least 2 analysis periods are required")
        if self.warmup_periods < 0 or self.period_samples < 1:
            raise ValueError("invalid layout")

    @property
    def tail_samples(self) -> int:
        return math.ceil(round(self.tail_fraction * self.period_samples, 9))

    @property
    def total_samples(self) -> int:
        return (self.warmup_periods + self.analysis_periods) * self.period_samples + self.tail_samples


@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate_hz: float
    peak_index: int = -1

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if not np.all(np.isfinite(taps)):
            raise ValueError("impulse response taps must be finite")
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "peak_index", int(np.argmax(np.abs(taps))) if taps.size else -1)

    def __len__(self):
        return self.taps.size

    def response(self, n_fft: int | None = None) -> FrequencyResponse:
        return FrequencyResponse.from_taps(self.taps, self.sample_rate_hz, n_fft)

    def energy(self) -> float:
        return float(np.sum(self.taps**2))


@dataclass(frozen=True)
class SchroederCurve:
    times_sec: np.ndarray
    level_db: np.ndarray

    def decay_rate_db_per_sec(self, upper_db: float = -5.0, lower_db: float = -25.0) -> float:
        """Least-squares slope of the curve between two levels."""
        sel = (self.level_db <= upper_db) & (self.level_db >= lower_db)
        if sel.sum() < 2:
            raise ValueError("not enough of the curve lies in the fitting range")
        return float(np.polyfit(self.times_sec[sel], self.level_db[sel], 1)[0])

    def reverberation_time(self, upper_db: float = -5.0, lower_db: float = -25.0) -> float:
        return -60.0 / self.decay_rate_db_per_sec(upper_db, lower_db)


def build_playback(mls_period: SampledSignal, layout: PlaybackLayout) -> SampledSignal:
    """warmup periods + analysis periods + a 10% tail, back to back with no gaps."""
    p = len(mls_period)
    if p != layout.period_samples:
        raise ValueError(f"layout expects period {layout.period_samples}, got {p}")
    reps = layout.warmup_periods + layout.analysis_periods
    body = np.tile(mls_period.samples, reps)
    tail = np.resize(mls_period.samples, layout.tail_samples)
    return mls_period.with_samples(np.concatenate([body, tail]))


def _parabolic_peak(y: np.ndarray, k: int) -> float:
    if k <= 0 or k >= y.size - 1:
        return float(k)
    a, b, c = y[k - 1], y[k], y[k + 1]
    denom = a - 2 * b + c
    return float(k + 0.5 * (a - c) / denom) if denom < 0 else float(k)


def _sinc_peak(y: np.ndarray, k: int, half_width: int = SINC_HALF_WIDTH) -> float:
    """Sub-sample peak position by band-limited (Hann-windowed sinc) interpolation
    of ``y`` around integer peak ``k``."""
    lo, hi = max(0, k - half_width), min(y.size, k + half_width + 1)
    j = np.arange(lo, hi)
    seg = y[lo:hi]

    def neg(tau):
        d = tau - j
        w = np.where(np.abs(d) < half_width + 1, np.cos(np.pi * d / (2 * (half_width + 1))) ** 2, 0.0)
        return -float(np.sum(seg * np.sinc(d) * w))

    guess = _parabolic_peak(y, k)
    res = minimize_scalar(neg, bounds=(guess - 0.75, guess + 0.75), method="bounded",
                          options={"xatol": 1e-6})
    return float(res.x)


def _linear_autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    n_fft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, n=n_fft)
    return np.fft.irfft(np.abs(spec) ** 2, n=n_fft)[:n]


def estimate_period(recording: SampledSignal, nominal_period: int,
                    threshold: float = PEAK_THRESHOLD) -> float:
    """Measured period (fractional samples) of a repeated-MLS recording.

    Peaks of the overlap-normalised autocorrelation are located at multiples of
    the first repetition peak, refined to sub-sample precision by windowed-sinc
    interpolation, and the period is the
    furthest peak's lag over its multiple. The first repetition is searched
    between ``nominal/4`` and ``4*nominal`` so large clock mismatches are found.
    """
    x = recording.samples
    n = x.size
    if n < 3 * nominal_period * 0.25:
        raise PeriodNotDetected("recording too short for period estimation")
    r = _linear_autocorrelation(x)
    r = r / (n - np.arange(n))
    r0 = r[0]
    if not r0 > 0:
        raise PeriodNotDetected("period not detected: silent recording")
    lo = max(1, int(nominal_period / 4))
    hi = min(int(4 * nominal_period), n // 2)
    if hi <= lo:
        raise PeriodNotDetected("period not detected: recording too short")
    above = np.flatnonzero(r[lo:hi] >= threshold * r0)
    if above.size == 0:
        raise PeriodNotDetected("period not detected: no autocorrelation peak above threshold")
    first = lo + int(above[0])
    win = max(2, int(PEAK_WINDOW * first))
    seg_lo = max(lo, first - win)
    k = seg_lo + int(np.argmax(r[seg_lo : first + win + 1]))
    coarse = _parabolic_peak(r, k)

    peaks = [0.0]
    m = 1
    # a peak needs at least one full period of overlap
    while (m + 1) * coarse <= n:
        centre = m * coarse
        w = max(2, int(PEAK_WINDOW * coarse))
        a, b = int(centre) - w, min(int(centre) + w + 1, n - 1)
        k = a + int(np.argmax(r[a:b]))
        if r[k] < threshold * r0:
            break
        peaks.append(_sinc_peak(r, k))
        coarse = peaks[-1] / m
        m += 1
    if len(peaks) < 2:
        raise PeriodNotDetected("period not detected: fewer than 2 peaks")
    return (peaks[-1] - peaks[0]) / (len(peaks) - 1)


def resample_to_period(segment: SampledSignal, measured_period: float, target_len: int) -> SampledSignal:
    """Stretch ``segment`` to ``target_len`` samples in the DFT domain.

    The segment holds ``n = round(len/measured_period)`` periods, i.e.
    ``n*measured_period`` samples of content, which is generally not an integer.
    Its spectrum is therefore evaluated on that exact harmonic grid (a chirp-z
    transform) rather than on the integer-length FFT grid; the resulting bins
    are kept up to the new Nyquist, or zero-filled past the old one, and
    inverted at ``target_len``. When the content length is an integer this is
    plain bin padding/truncation at the Nyquist end. The amplitude is rescaled
    so a sinusoid keeps its level.
    """
    x = segment.samples
    src = x.size
    if src == 0:
        raise ValueError("empty segment")
    if not measured_period > 0:
        raise ValueError("measured_period must be positive")
    ratio = target_len / src
    if not 0.25 <= ratio <= 4:
        raise ValueError(f"resampling ratio {ratio:.4f} outside sanity bound [0.25, 4]")
    n_periods = max(1, int(round(src / measured_period)))
    content = n_periods * measured_period
    if abs(content - src) >= 1:
        content = float(src)
    if target_len == src and content == src:
        return segment.with_samples(x.copy())
    n_out = target_len // 2 + 1
    new = np.zeros(n_out, dtype=complex)
    if content == src:
        spec = np.fft.rfft(x)
        keep = min(spec.size, n_out)
        new[:keep] = spec[:keep]
        if target_len > src and src % 2 == 0:
            # the old Nyquist bin stood for both +/- halves
            new[src // 2] *= 0.5
    else:
        # bin m sits at m/content cycles per sample; stop below the source Nyquist
        keep = min(n_out, int(np.ceil(content / 2)))
        new[:keep] = czt(x, m=keep, w=np.exp(-2j * np.pi / content), a=1.0)
    if target_len % 2 == 0 and keep == n_out and target_len < content:
        # an interior source bin becomes the new (real) Nyquist bin
        new[-1] = 2 * new[-1].real
    out = np.fft.irfft(new, n=target_len) * (target_len / content)
    return segment.with_samples(out)


def analysis_segment(recording: SampledSignal, measured_period: float, layout: PlaybackLayout) -> SampledSignal:
    """Analysed part of a recording, resampled to ``analysis_periods`` nominal periods.

    Starts ``warmup_periods * measured_period`` samples in (rounded).
    """
    start = int(round(layout.warmup_periods * measured_period))
    length = int(round(layout.analysis_periods * measured_period))
    if start + length > len(recording):
        length = len(recording) - start
    seg = recording.with_samples(recording.samples[start : start + length])
    target = layout.analysis_periods * layout.period_samples
    return resample_to_period(seg, measured_period, target)


def impulse_response(recorded: SampledSignal, mls: SampledSignal, analysis_periods: int) -> ImpulseResponse:
    """Circular cross-correlation of the recorded periods with the MLS.

    Periods are averaged first, then ``IFFT(Y X*) / (P a^2)``: the identity chain
    gives a unit tap at lag 0 and ``-1/P`` elsewhere.
    """
    p = len(mls)
    if len(recorded) != analysis_periods * p:
        raise ValueError(
            f"recorded length {len(recorded)} != {analysis_periods} periods x {p} samples"
        )
    y = recorded.samples.reshape(analysis_periods, p).mean(axis=0)
    x = mls.samples
    spec = np.fft.rfft(y) * np.conj(np.fft.rfft(x))
    taps = np.fft.irfft(spec, n=p) / ir_normalization(mls)
    return ImpulseResponse(taps, mls.sample_rate_hz)


def ir_normalization(mls: SampledSignal) -> float:
    """Divisor applied to the raw correlation: period length times MLS power."""
    return float(np.sum(mls.samples**2))


def discount_parent(system: FrequencyResponse, parent: FrequencyResponse,
                    floor_db: float = PARENT_FLOOR_DB) -> FrequencyResponse:
    """Divide out a known transducer's magnitude; phase is dropped.

    Parent gains below ``floor_db`` re its peak are raised to that floor first.
    """
    if not system.same_grid(parent):
        raise ValueError("system and parent responses are on different frequency grids")
    pg = parent.gain_db
    peak = np.nanmax(pg[np.isfinite(pg)]) if np.any(np.isfinite(pg)) else 0.0
    floored = np.maximum(np.nan_to_num(pg, nan=-np.inf), peak + floor_db)
    return FrequencyResponse(system.freq_hz, system.gain_db - floored)


def zero_phase_taps(magnitude: np.ndarray, n_fft: int, length: int,
                    half_sample: bool = False) -> np.ndarray:
    """Zero-phase IR from a one-sided magnitude, centred and Hann-windowed.

    By default the centre is sample ``length // 2`` and the window is the
    symmetric Hann of length ``2*(length//2) + 1`` cropped to ``length``, so a
    delta stays a delta. With ``half_sample`` the centre is ``(length - 1) / 2``
    (a linear-phase shift when ``length`` is even) under a Hann of exactly
    ``length`` points, giving ``taps[k] == taps[length-1-k]``. Both agree for
    odd lengths.
    """
    if length > n_fft:
        raise ValueError(f"requested {length} taps from a {n_fft}-sample response")
    mag = np.asarray(magnitude, dtype=float)
    if half_sample:
        c = (length - 1) / 2
        k = np.arange(mag.size)
        z = np.fft.irfft(mag * np.exp(-2j * np.pi * k * c / n_fft), n=n_fft)
        return z[:length] * hann_window(length)
    z = np.fft.irfft(mag, n=n_fft)
    c = length // 2
    out = z[np.arange(-c, length - c) % n_fft]
    return out * hann_window(2 * c + 1)[:length]


def truncate_ir(ir: ImpulseResponse, duration_sec: float) -> ImpulseResponse:
    """Zero-phase, peak-centred, Hann-windowed IR of ``round(duration*fs)`` taps."""
    length = int(round(duration_sec * ir.sample_rate_hz))
    if length > len(ir):
        raise ValueError(f"duration {duration_sec} s longer than the {len(ir)}-tap IR")
    if length < 1:
        raise ValueError("duration shorter than one sample")
    mag = np.abs(np.fft.rfft(ir.taps))
    return ImpulseResponse(zero_phase_taps(mag, len(ir), length), ir.sample_rate_hz)


def truncate_response(response: FrequencyResponse, n_fft: int, duration_sec: float,
                      sample_rate_hz: float) -> ImpulseResponse:
    """As :func:`truncate_ir`, starting from a magnitude response on an ``n_fft`` grid."""
    length = int(round(duration_sec * sample_rate_hz))
    if length > n_fft:
        raise ValueError(f"duration {duration_sec} s longer than the {n_fft}-sample response")
    mag = np.nan_to_num(response.magnitude, nan=0.0)
    return ImpulseResponse(zero_phase_taps(mag, n_fft, length), sample_rate_hz)


def schroeder_curve(ir: ImpulseResponse) -> SchroederCurve:
    """Backward-integrated energy decay, 0 dB at t=0."""
    if len(ir) == 0:
        raise ValueError("empty impulse response")
    e = ir.taps**2
    total = e.sum()
    if total == 0:
        raise ValueError("all-zero impulse response")
    remaining = np.cumsum(e[::-1])[::-1]
    level = db_power(remaining / total)
    level[0] = 0.0
    # float rounding in the reversed cumsum must not break monotonicity
    level = np.minimum.accumulate(level)
    times = np.arange(len(ir)) / ir.sample_rate_hz
    return SchroederCurve(times, level)


def peak_aligned(ir: ImpulseResponse, pre_sec: float = 0.001) -> ImpulseResponse:
    """Circularly rotate a periodic IR so the peak sits ``pre_sec`` from the start."""
    shift = ir.peak_index - int(round(pre_sec * ir.sample_rate_hz))
    return ImpulseResponse(np.roll(ir.taps, -shift), ir.sample_rate_hz)
