"""Ground-truth simulated playback chain used in place of real hardware.

speaker compressor -> speaker FIR (+ speaker self-noise) -> room noise ->
microphone FIR -> microphone clock (resampling by ``clock_ratio``) ->
microphone self-noise.

Every random draw comes from ``numpy.random.default_rng([seed, stream])`` so a
recording is a pure function of (chain, input, seed, stream).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from .drc_model import DrcParams, drc_out
from .signals import SampledSignal, db_power

ENVELOPE_TAU_SEC = 0.002
NOISE_SPECTRA = ("white", "one_over_f")
ONE_OVER_F_FLOOR_HZ = 20.0

# windowed-sinc clock resampler
RESAMPLER_HALF_WIDTH = 64
RESAMPLER_BETA = 9.0
RESAMPLER_CUTOFF = 0.9
RESAMPLER_PHASES = 1024


@dataclass(frozen=True)
class SimTransducer:
    ir_taps: np.ndarray
    drc: DrcParams | None = None
    self_noise_db: float | None = None
    name: str = ""

    def __post_init__(self):
        taps = np.asarray(self.ir_taps, dtype=float)
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("ir_taps must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(taps)):
            raise ValueError("ir_taps must be finite")
        object.__setattr__(self, "ir_taps", taps)


@dataclass(frozen=True)
class SimEnvironment:
    noise_level_db: float | None = None
    noise_spectrum: str = "one_over_f"
    clock_ratio: float = 1.0
    seed: int = 0
    fault_at_sec: float | None = None
    fault_gain_db: float = 0.0

    def __post_init__(self):
        if self.noise_spectrum not in NOISE_SPECTRA:
            raise ValueError(f"noise_spectrum must be one of {NOISE_SPECTRA}")
        if not 0.25 <= self.clock_ratio <= 4:
            raise ValueError(f"clock_ratio {self.clock_ratio} outside [0.25, 4]")


@dataclass(frozen=True)
class PlaybackChain:
    speaker: SimTransducer
    microphone: SimTransducer
    env: SimEnvironment = field(default_factory=SimEnvironment)
    sample_rate_hz: float = 48000.0

    def true_response(self, n_fft: int):
        """Exact linear response of speaker and microphone on an ``n_fft`` grid."""
        from .signals import FrequencyResponse

        spk = np.fft.rfft(self.speaker.ir_taps, n=n_fft)
        mic = np.fft.rfft(self.microphone.ir_taps, n=n_fft)
        freq = np.fft.rfftfreq(n_fft, 1.0 / self.sample_rate_hz)
        gain = 0.0 if self.speaker.drc is None else self.speaker.drc.gain_db
        return FrequencyResponse.from_complex(freq, spk * mic * 10 ** (gain / 20))


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


def colored_noise(n: int, level_db: float, spectrum: str, sample_rate_hz: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise of total power ``level_db``; 1/f is white shaped by 1/sqrt(f)."""
    white = rng.standard_normal(n)
    if spectrum == "one_over_f":
        spec = np.fft.rfft(white)
        freq = np.fft.rfftfreq(n, 1.0 / sample_rate_hz)
        shape = 1.0 / np.sqrt(np.maximum(freq, ONE_OVER_F_FLOOR_HZ))
        shape[0] = 0.0
        white = np.fft.irfft(spec * shape, n=n)
    power = np.mean(white**2)
    if power == 0:
        return white
    return white * math.sqrt(10 ** (level_db / 10) / power)


def compressor_gain(x: np.ndarray, params: DrcParams, sample_rate_hz: float,
                    tau_sec: float = ENVELOPE_TAU_SEC) -> np.ndarray:
    """Per-sample linear gain from a one-pole power envelope mapped through the curve.

    A steady input of power ``P`` dB comes out at ``drc_out(P)``; the envelope
    ripple at twice the signal frequency is what produces harmonic distortion.
    """
    alpha = math.exp(-1.0 / (tau_sec * sample_rate_hz))
    sq = x**2
    init = np.mean(sq[: max(1, int(5 * tau_sec * sample_rate_hz))])
    env, _ = sps.lfilter([1 - alpha], [1, -alpha], sq, zi=[alpha * init])
    env_db = 10 * np.log10(np.maximum(env, 1e-30))
    curve = DrcParams(params.gain_db, params.T, params.W, params.Q)
    gain_db = drc_out(env_db, curve) - env_db
    return 10 ** (gain_db / 20)


@lru_cache(maxsize=8)
def _sinc_table(half_width: int, cutoff: float, beta: float, phases: int) -> np.ndarray:
    # table[p, j] = h(j - (half_width - 1) - p/phases), j = 0 .. 2*half_width - 1
    offsets = np.arange(2 * half_width) - (half_width - 1)
    frac = np.arange(phases + 1) / phases
    t = offsets[None, :] - frac[:, None]
    window = np.i0(beta * np.sqrt(np.clip(1 - (t / half_width) ** 2, 0, None))) / np.i0(beta)
    return cutoff * np.sinc(cutoff * t) * window


def resample_clock(x: np.ndarray, ratio: float, chunk: int = 8192) -> np.ndarray:
    """Resample by ``ratio`` (output rate / input rate) with a Kaiser-windowed sinc.

    Output sample ``m`` sits at input position ``m / ratio``; the output has
    ``round(len(x) * ratio)`` samples.
    """
    x = np.asarray(x, dtype=float)
    if ratio == 1.0:
        return x.copy()
    scale = min(1.0, ratio)
    half_width = int(math.ceil(RESAMPLER_HALF_WIDTH / scale))
    table = _sinc_table(half_width, RESAMPLER_CUTOFF * scale, RESAMPLER_BETA, RESAMPLER_PHASES)
    n_out = int(round(x.size * ratio))
    pad = half_width + 1
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    offsets = np.arange(2 * half_width) - (half_width - 1)
    out = np.empty(n_out)
    for start in range(0, n_out, chunk):
        m = np.arange(start, min(start + chunk, n_out))
        pos = m / ratio
        k0 = np.floor(pos).astype(np.int64)
        frac = (pos - k0) * RESAMPLER_PHASES
        p = np.minimum(frac.astype(np.int64), RESAMPLER_PHASES - 1)
        w = (frac - p)[:, None]
        kern = (1 - w) * table[p] + w * table[p + 1]
        idx = k0[:, None] + offsets[None, :] + pad
        out[m] = np.einsum("ij,ij->i", kern, xp[idx])
    return out


def _fir(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if taps.size == 1:
        return x * taps[0]
    return sps.oaconvolve(x, taps)[: x.size]


def simulate_playback(chain: PlaybackChain, input: SampledSignal, stream: int = 0,
                      seed: int | None = None) -> SampledSignal:
    """Play ``input`` through the chain and return the microphone recording.

    The recording is sampled at ``sample_rate_hz * clock_ratio`` in speaker time
    but reported at the nominal rate, as a device with a mis-set clock would.
    """
    seed = chain.env.seed if seed is None else seed
    rng = _rng(seed, stream)
    fs = chain.sample_rate_hz
    x = input.samples
    if chain.speaker.drc is not None:
        x = x * compressor_gain(x, chain.speaker.drc, fs)
    x = _fir(x, chain.speaker.ir_taps)
    if chain.speaker.self_noise_db is not None:
        x = x + colored_noise(x.size, chain.speaker.self_noise_db, "white", fs, rng)
    env = chain.env
    if env.noise_level_db is not None:
        x = x + colored_noise(x.size, env.noise_level_db, env.noise_spectrum, fs, rng)
    x = _fir(x, chain.microphone.ir_taps)
    x = resample_clock(x, env.clock_ratio)
    if chain.microphone.self_noise_db is not None:
        x = x + colored_noise(x.size, chain.microphone.self_noise_db, "white", fs, rng)
    if env.fault_at_sec is not None:
        start = int(round(env.fault_at_sec * fs * env.clock_ratio))
        x = x.copy()
        x[start:] *= 10 ** (env.fault_gain_db / 20)
    return SampledSignal(x, fs)


# ---------------------------------------------------------------------------
# Transducer presets


def _design_fir(freq_hz, gain_db, numtaps: int, sample_rate_hz: float) -> np.ndarray:
    nyq = sample_rate_hz / 2
    freq = np.concatenate([[0.0], np.asarray(freq_hz, dtype=float), [nyq]])
    gain_db = np.asarray(gain_db, dtype=float)
    gains = 10 ** (np.concatenate([[gain_db[0]], gain_db, [gain_db[-1]]]) / 20)
    return sps.firwin2(numtaps, freq, gains, fs=sample_rate_hz)


def _log_grid(sample_rate_hz: float, n: int = 2000) -> np.ndarray:
    return np.geomspace(5.0, sample_rate_hz / 2 * 0.999, n)


def fir64(sample_rate_hz: float = 48000.0) -> np.ndarray:
    """A 64-tap FIR with a few dB of smooth shaping and no deep in-band nulls."""
    f = np.array([0, 300, 1500, 4000, 9000, 14000, sample_rate_hz / 2])
    g_db = np.array([-3.0, -1.0, 3.0, 1.0, -4.0, -8.0, -np.inf])
    taps = sps.firwin2(64, f, 10 ** (g_db / 20), fs=sample_rate_hz)
    return taps


def laptop_speaker_db(freq_hz, ripple_db: float = 6.0, hf_corner_hz: float = 6000.0,
                      hf_slope_db_per_oct: float = -24.0) -> np.ndarray:
    """Magnitude shape of a small laptop speaker.

    Rises 15 dB from 20 to 200 Hz, an 8 dB dip at 1400 Hz, ripples between 1
    and 10 kHz and a roll-off above ``hf_corner_hz``.
    """
    f = np.maximum(np.asarray(freq_hz, dtype=float), 1.0)
    lf = -15.0 * np.clip(np.log10(200.0 / f), 0.0, None)
    lf = np.maximum(lf, -30.0)
    dip = -8.0 * np.exp(-0.5 * (np.log2(f / 1400.0) / 0.12) ** 2)
    octs = np.log2(f / 1000.0)
    taper = np.clip(octs * 4, 0, 1) * np.clip((np.log2(10000.0 / f)) * 4, 0, 1)
    ripple = ripple_db * taper * np.sin(2 * np.pi * 2.3 * octs + 0.7)
    hf = hf_slope_db_per_oct * np.clip(np.log2(f / hf_corner_hz), 0.0, None)
    hf = np.maximum(hf, -60.0)
    return lf + dip + ripple + hf


def room_tail(sample_rate_hz: float, rt60_sec: float, level_db: float, rng: np.random.Generator,
              onset_sec: float = 0.004, length_sec: float = 0.8) -> np.ndarray:
    """Exponentially decaying noise tail; ``level_db`` is its energy re a unit impulse."""
    n = int(round(length_sec * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    tail = rng.standard_normal(n) * np.exp(-t * 3 * math.log(10) / rt60_sec)
    tail *= math.sqrt(10 ** (level_db / 10) / np.sum(tail**2))
    out = np.zeros(int(round(onset_sec * sample_rate_hz)) + n)
    out[-n:] = tail
    return out


def preset_taps(name: str, sample_rate_hz: float = 48000.0, seed: int = 0, **kw) -> np.ndarray:
    """Impulse response taps for a named transducer preset."""
    rng = np.random.default_rng([7919, seed])
    grid = _log_grid(sample_rate_hz)
    if name == "identity":
        return np.array([1.0])
    if name == "fir64":
        return fir64(sample_rate_hz)
    if name == "laptop_speaker":
        taps = _design_fir(grid, laptop_speaker_db(
            grid, kw.get("ripple_db", 6.0), kw.get("hf_corner_hz", 6000.0),
            kw.get("hf_slope_db_per_oct", -24.0)), 4097, sample_rate_hz)
        tail_db = kw.get("room_tail_db")
        if tail_db is not None:
            tail = room_tail(sample_rate_hz, kw.get("rt60_sec", 0.3), tail_db, rng)
            taps = sps.oaconvolve(taps, np.concatenate([[1.0], tail]))
        return taps
    if name == "phone_mic":
        f = grid
        g = (-12.0 * np.clip(np.log2(120.0 / f), 0, None) / 2
             + 4.0 * np.exp(-0.5 * (np.log2(f / 3000.0) / 0.6) ** 2)
             - 10.0 * np.clip(np.log2(f / 13000.0), 0, None))
        return _design_fir(f, np.maximum(g, -30.0), 1025, sample_rate_hz)
    if name == "measurement_mic":
        f = grid
        g = 0.8 * np.sin(np.log2(f / 50.0)) - 1.5 * np.clip(np.log2(f / 15000.0), 0, None)
        return _design_fir(f, g, 513, sample_rate_hz)
    if name == "echo":
        delay = int(round(kw.get("delay_sec", 0.3) * sample_rate_hz))
        taps = np.zeros(delay + 1)
        taps[0] = 1.0
        taps[delay] = kw.get("echo_gain", 0.8)
        return taps
    raise ValueError(f"unknown transducer preset {name!r}")


PRESETS = ("identity", "fir64", "laptop_speaker", "phone_mic", "measurement_mic", "echo")


# ---------------------------------------------------------------------------
# JSON description of a chain


def transducer_from_dict(d: dict, sample_rate_hz: float) -> SimTransducer:
    known = {"preset", "preset_args", "seed", "ir_taps", "drc", "self_noise_db", "name", "convolve_with"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown transducer key(s): {sorted(unknown)}")
    if "ir_taps" in d:
        taps = np.asarray(d["ir_taps"], dtype=float)
    elif "preset" in d:
        taps = preset_taps(d["preset"], sample_rate_hz, int(d.get("seed", 0)), **d.get("preset_args", {}))
    else:
        raise ValueError("transducer needs 'ir_taps' or 'preset'")
    for extra in d.get("convolve_with", []):
        taps = np.convolve(taps, transducer_from_dict(extra, sample_rate_hz).ir_taps)
    drc = DrcParams.from_dict(d["drc"]) if d.get("drc") else None
    noise = d.get("self_noise_db")
    return SimTransducer(taps, drc, None if noise is None else float(noise), d.get("name", d.get("preset", "")))


def chain_from_dict(d: dict) -> PlaybackChain:
    known = {"sample_rate_hz", "speaker", "microphone", "environment", "description"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown chain key(s): {sorted(unknown)}")
    fs = float(d.get("sample_rate_hz", 48000.0))
    env = SimEnvironment(**d.get("environment", {}))
    return PlaybackChain(transducer_from_dict(d["speaker"], fs),
                         transducer_from_dict(d["microphone"], fs), env, fs)


def mean_power_db(x: np.ndarray) -> float:
    return float(db_power(np.mean(np.asarray(x) ** 2)))
