"""Signal primitives: sampled signals, MLS and sine generators, windows, spectra.

All levels are dB re digital full scale. Power in dB is ``10*log10(mean square)``;
a digital amplitude in dB is ``20*log10(peak)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# Primitive polynomials, one per order, as exponent sets (the constant term is
# implied). From the Xilinx XAPP052 LFSR tap table.
PRIMITIVE_TAPS: dict[int, tuple[int, ...]] = {
    2: (2, 1),
    3: (3, 2),
    4: (4, 3),
    5: (5, 3),
    6: (6, 5),
    7: (7, 6),
    8: (8, 6, 5, 4),
    9: (9, 5),
    10: (10, 7),
    11: (11, 9),
    12: (12, 6, 4, 1),
    13: (13, 4, 3, 1),
    14: (14, 5, 3, 1),
    15: (15, 14),
    16: (16, 15, 13, 4),
    17: (17, 14),
    18: (18, 11),
    19: (19, 6, 2, 1),
    20: (20, 17),
    21: (21, 19),
    22: (22, 21),
    23: (23, 18),
    24: (24, 23, 22, 17),
}
MIN_ORDER = min(PRIMITIVE_TAPS)
MAX_ORDER = max(PRIMITIVE_TAPS)


def db_power(power):
    """10*log10 of a power, with -inf for zero (never NaN for zero input)."""
    power = np.asarray(power, dtype=float)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power)


def db_to_amplitude(db: float) -> float:
    return 10.0 ** (db / 20.0)


@dataclass(frozen=True)
class SampledSignal:
    """A real waveform and its nominal sample rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration_sec(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def mean_power(self) -> float:
        return float(np.mean(self.samples**2)) if self.samples.size else 0.0

    def power_db(self) -> float:
        return float(db_power(self.mean_power()))

    def with_samples(self, samples) -> "SampledSignal":
        return SampledSignal(samples, self.sample_rate_hz)


@dataclass(frozen=True)
class FrequencyResponse:
    """Gain (dB) and phase (radians) on an ascending frequency grid.

    A gain of ``-inf`` marks a bin with zero power; ``nan`` marks a bin that was
    excluded (e.g. noise exceeded signal).
    """

    freq_hz: np.ndarray
    gain_db: np.ndarray
    phase_rad: np.ndarray = field(default=None)

    def __post_init__(self):
        freq = np.asarray(self.freq_hz, dtype=float)
        gain = np.asarray(self.gain_db, dtype=float)
        phase = np.zeros_like(gain) if self.phase_rad is None else np.asarray(self.phase_rad, dtype=float)
        if not (freq.ndim == gain.ndim == phase.ndim == 1):
            raise ValueError("frequency response arrays must be one-dimensional")
        if not (freq.size == gain.size == phase.size):
            raise ValueError("freq_hz, gain_db and phase_rad must have equal length")
        if freq.size > 1 and np.any(np.diff(freq) <= 0):
            raise ValueError("freq_hz must be strictly ascending")
        object.__setattr__(self, "freq_hz", freq)
        object.__setattr__(self, "gain_db", gain)
        object.__setattr__(self, "phase_rad", phase)

    @classmethod
    def from_complex(cls, freq_hz, values) -> "FrequencyResponse":
        values = np.asarray(values)
        return cls(freq_hz, db_power(np.abs(values) ** 2), np.angle(values))

    @classmethod
    def from_taps(cls, taps, sample_rate_hz: float, n_fft: int | None = None) -> "FrequencyResponse":
        """One-sided spectrum of an FIR, bins at ``k*fs/n_fft``."""
        taps = np.asarray(taps, dtype=float)
        n_fft = taps.size if n_fft is None else n_fft
        spectrum = np.fft.rfft(taps, n=n_fft)
        return cls.from_complex(np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz), spectrum)

    def __len__(self):
        return self.freq_hz.size

    @property
    def magnitude(self) -> np.ndarray:
        return 10.0 ** (self.gain_db / 20.0)

    def to_complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase_rad)

    def same_grid(self, other: "FrequencyResponse", rtol: float = 1e-9) -> bool:
        return self.freq_hz.size == other.freq_hz.size and np.allclose(
            self.freq_hz, other.freq_hz, rtol=rtol, atol=1e-9
        )

    def interpolate(self, freq_hz) -> "FrequencyResponse":
        """Linear interpolation of gain (dB) onto a new grid; phase is dropped.

        Points outside the stored range hold the end values.
        """
        freq_hz = np.asarray(freq_hz, dtype=float)
        gain = np.interp(freq_hz, self.freq_hz, self.gain_db)
        return FrequencyResponse(freq_hz, gain)

    def value_at(self, freq_hz: float) -> float:
        """Gain (dB) at the bin nearest ``freq_hz``."""
        return float(self.gain_db[self.nearest_bin(freq_hz)])

    def nearest_bin(self, freq_hz: float) -> int:
        return int(np.argmin(np.abs(self.freq_hz - freq_hz)))


@dataclass(frozen=True)
class MlsSpec:
    order: int
    amplitude_db: float = 0.0

    @property
    def period_samples(self) -> int:
        return 2**self.order - 1

    @property
    def polynomial(self) -> tuple[int, ...]:
        if self.order not in PRIMITIVE_TAPS:
            raise ValueError(
                f"unsupported MLS order {self.order}; supported orders are {MIN_ORDER}-{MAX_ORDER}"
            )
        return PRIMITIVE_TAPS[self.order]

    @property
    def amplitude(self) -> float:
        return db_to_amplitude(self.amplitude_db)


@lru_cache(maxsize=32)
def _mls_bits(order: int) -> bytes:
    taps = PRIMITIVE_TAPS[order]
    length = 2**order - 1
    bits = bytearray(length)
    # all-ones seed; s[k] = xor of s[k - t] over the taps
    bits[:order] = b"\x01" * order
    for k in range(order, length):
        v = 0
        for t in taps:
            v ^= bits[k - t]
        bits[k] = v
    return bytes(bits)


def generate_mls(spec: MlsSpec, sample_rate_hz: float = 48000.0) -> SampledSignal:
    """One period of a maximum-length sequence at ``±10**(amplitude_db/20)``.

    Bit 1 maps to ``-a`` and bit 0 to ``+a``, so a period holds one more negative
    sample than positive ones.
    """
    spec.polynomial  # raises for unsupported orders
    bits = np.frombuffer(_mls_bits(spec.order), dtype=np.uint8)
    samples = spec.amplitude * (1.0 - 2.0 * bits.astype(float))
    return SampledSignal(samples, sample_rate_hz)


def order_for_duration(duration_sec: float, sample_rate_hz: float) -> int:
    """MLS order whose period is log-nearest to ``duration_sec*sample_rate_hz``."""
    if not duration_sec > 0:
        raise ValueError("duration_sec must be positive")
    if not sample_rate_hz > 0:
        raise ValueError("sample_rate_hz must be positive")
    target = math.log(duration_sec * sample_rate_hz)
    candidates = range(1, 64)
    best = min(candidates, key=lambda n: abs(math.log(2**n - 1) - target) if n > 1 else math.inf)
    if best not in PRIMITIVE_TAPS:
        raise ValueError(
            f"duration {duration_sec} s at {sample_rate_hz} Hz needs MLS order {best}, "
            f"outside supported {MIN_ORDER}-{MAX_ORDER}"
        )
    return best


def generate_sine(freq_hz: float, duration_sec: float, amplitude_db: float,
                  sample_rate_hz: float, phase_rad: float = 0.0) -> SampledSignal:
    if not 0 < freq_hz < sample_rate_hz / 2:
        raise ValueError(f"frequency {freq_hz} Hz must lie in (0, {sample_rate_hz / 2}) Hz")
    n = int(round(duration_sec * sample_rate_hz))
    k = np.arange(n)
    samples = db_to_amplitude(amplitude_db) * np.sin(2 * np.pi * freq_hz * k / sample_rate_hz + phase_rad)
    return SampledSignal(samples, sample_rate_hz)


def hann_window(length: int) -> np.ndarray:
    """Symmetric Hann window, zero at both ends."""
    if length < 1:
        raise ValueError("window length must be at least 1")
    if length == 1:
        return np.ones(1)
    k = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (length - 1)))


def power_spectrum_db(signal: SampledSignal) -> FrequencyResponse:
    """``10*log10(|FFT|**2)`` on the one-sided bin grid ``k*fs/N``.

    Unnormalized: a full-scale sine on a bin center of an N-sample signal gives
    ``20*log10(N/2)``. Zero bins come back as ``-inf``.
    """
    x = signal.samples
    if x.size == 0:
        raise ValueError("empty signal")
    spectrum = np.fft.rfft(x)
    freq = np.fft.rfftfreq(x.size, 1.0 / signal.sample_rate_hz)
    return FrequencyResponse(freq, db_power(np.abs(spectrum) ** 2))


def circular_autocorrelation(signal: SampledSignal | np.ndarray) -> np.ndarray:
    x = signal.samples if isinstance(signal, SampledSignal) else np.asarray(signal, dtype=float)
    if x.size == 0:
        raise ValueError("empty signal")
    spectrum = np.fft.rfft(x)
    return np.fft.irfft(np.abs(spectrum) ** 2, n=x.size)


@dataclass(frozen=True)
class PowerTimeSeries:
    times_sec: np.ndarray
    power_db: np.ndarray
    sd_db: float
    unstable: bool = False

    def __post_init__(self):
        if len(self.times_sec) != len(self.power_db):
            raise ValueError("times_sec and power_db must have equal length")


def finite_sd(values) -> float:
    """Population SD over finite entries; -inf/nan sentinels are ignored."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(np.std(values)) if values.size else float("nan")


def power_over_time(recording: SampledSignal, window_sec: float = 0.1,
                    max_sd_db: float | None = None) -> PowerTimeSeries:
    """Mean power per non-overlapping window; trailing partial window dropped.

    ``unstable`` is set when ``max_sd_db`` is given and the SD of the series
    exceeds it.
    """
    window = int(round(window_sec * recording.sample_rate_hz))
    if window < 1:
        raise ValueError("window must span at least one sample")
    n_windows = len(recording) // window
    if n_windows < 1:
        raise ValueError(
            f"recording of {len(recording)} samples is shorter than one {window}-sample window"
        )
    frames = recording.samples[: n_windows * window].reshape(n_windows, window)
    power_db = db_power(np.mean(frames**2, axis=1))
    times = (np.arange(n_windows) + 0.5) * window / recording.sample_rate_hz
    sd = finite_sd(power_db)
    unstable = bool(max_sd_db is not None and np.isfinite(sd) and sd > max_sd_db)
    return PowerTimeSeries(times, power_db, sd, unstable)
