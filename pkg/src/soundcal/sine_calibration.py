"""1 kHz tone analysis: recorded frequency, per-harmonic power, THD, gain curve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drc_model import GainPoint
from .signals import SampledSignal, db_power, generate_sine, hann_window

SEARCH_BAND = 0.05
MIN_PEAK_PROMINENCE_DB = 10.0
P1_FLOOR = 1e-15  # -150 dB
N_HARMONICS = 6
SINE_PEAK_TO_POWER_DB = 10 * np.log10(2)


class ToneNotDetected(ValueError):
    pass


@dataclass(frozen=True)
class ToneAnalysis:
    nominal_f_hz: float
    recorded_f_hz: float
    harmonic_powers: tuple[float, ...]
    thd: float
    out_db: float
    harmonics_used: tuple[int, ...] = field(default=())


def estimate_recorded_frequency(recording: SampledSignal, nominal_f_hz: float,
                                band: float = SEARCH_BAND) -> float:
    """Peak frequency of the spectrum within ``±band`` of nominal.

    Hann-windowed FFT zero-padded 8x, then a parabola through the log
    magnitudes of the peak bin and its neighbours.
    """
    fs = recording.sample_rate_hz
    if not 0 < nominal_f_hz < fs / 2:
        raise ValueError(f"nominal frequency {nominal_f_hz} Hz outside (0, {fs / 2})")
    x = recording.samples
    n_fft = 8 * (1 << int(np.ceil(np.log2(max(x.size, 2)))))
    mag2 = np.abs(np.fft.rfft(x * hann_window(x.size), n=n_fft)) ** 2
    df = fs / n_fft
    lo = max(1, int(np.floor(nominal_f_hz * (1 - band) / df)))
    hi = min(mag2.size - 2, int(np.ceil(nominal_f_hz * (1 + band) / df)))
    seg = mag2[lo : hi + 1]
    k = int(np.argmax(seg))
    peak = seg[k]
    if not peak > 0 or db_power(peak) - db_power(np.median(seg) + 1e-300) < MIN_PEAK_PROMINENCE_DB:
        raise ToneNotDetected(f"tone not detected near {nominal_f_hz} Hz")
    k += lo
    a, b, c = np.log(mag2[k - 1 : k + 2] + 1e-300)
    denom = a - 2 * b + c
    delta = 0.5 * (a - c) / denom if denom < 0 else 0.0
    return float((k + delta) * df)


def _correlate(x: np.ndarray, freq_hz: float, fs: float, weights: np.ndarray) -> float:
    t = np.arange(x.size) / fs
    xw = x * weights
    s = np.dot(xw, np.sin(2 * np.pi * freq_hz * t))
    c = np.dot(xw, np.cos(2 * np.pi * freq_hz * t))
    return 2.0 * (s * s + c * c) / np.sum(weights) ** 2


def harmonic_power(recording: SampledSignal, f_prime: float, k: int) -> float:
    """Power at ``k*f_prime`` from combined sine and cosine correlations.

    The correlation is Hann-weighted to suppress leakage from other
    frequencies; a unit-amplitude sine at ``k*f_prime`` gives 1/2.
    """
    fs = recording.sample_rate_hz
    if not k * f_prime < fs / 2:
        raise ValueError(f"harmonic {k} at {k * f_prime} Hz is not below Nyquist {fs / 2}")
    if len(recording) == 0:
        raise ValueError("empty recording")
    return float(_correlate(recording.samples, k * f_prime, fs, hann_window(len(recording))))


def analyze_tone(recording: SampledSignal, nominal_f_hz: float) -> ToneAnalysis:
    fs = recording.sample_rate_hz
    f_prime = estimate_recorded_frequency(recording, nominal_f_hz)
    used = tuple(k for k in range(1, N_HARMONICS + 1) if k * f_prime < fs / 2)
    w = hann_window(len(recording))
    powers = tuple(float(_correlate(recording.samples, k * f_prime, fs, w)) for k in used)
    p1 = powers[0]
    if p1 <= P1_FLOOR:
        raise ToneNotDetected(f"fundamental power {p1:.3g} below detection floor")
    thd_value = float(np.sqrt(sum(powers[1:]) / p1))
    return ToneAnalysis(nominal_f_hz, f_prime, powers, thd_value, float(db_power(p1)), used[1:])


def thd(recording: SampledSignal, f_prime: float) -> float:
    """sqrt((P2+...+P6)/P1); harmonics at or above Nyquist are skipped."""
    fs = recording.sample_rate_hz
    w = hann_window(len(recording))
    p1 = _correlate(recording.samples, f_prime, fs, w)
    if p1 <= P1_FLOOR:
        raise ToneNotDetected(f"fundamental power {p1:.3g} below detection floor")
    rest = sum(_correlate(recording.samples, k * f_prime, fs, w)
               for k in range(2, N_HARMONICS + 1) if k * f_prime < fs / 2)
    return float(np.sqrt(rest / p1))


def measure_gain_curve(chain, levels_db, freq_hz: float = 1000.0, duration_sec: float = 1.0,
                       stream_base: int = 100, recordings: list | None = None) -> list[GainPoint]:
    """Play a sine at each power level through ``chain`` and analyse the recording.

    ``levels_db`` are input powers (dB re full scale), ascending and below 0 dB.
    Recordings are appended to ``recordings`` when a list is supplied.
    """
    from .sim_chain import simulate_playback

    levels = [float(v) for v in levels_db]
    if any(b < a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be sorted ascending")
    if any(v >= 0 for v in levels):
        raise ValueError("levels must be below 0 dB")
    points = []
    for i, level in enumerate(levels):
        tone = generate_sine(freq_hz, duration_sec, level + SINE_PEAK_TO_POWER_DB, chain.sample_rate_hz)
        rec = simulate_playback(chain, tone, stream=stream_base + i)
        if recordings is not None:
            recordings.append((level, rec))
        try:
            res = analyze_tone(rec, freq_hz)
        except ToneNotDetected as err:
            raise ToneNotDetected(f"at input level {level:.2f} dB: {err}") from err
        points.append(GainPoint(level, res.out_db, res.thd))
    return points
