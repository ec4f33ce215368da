"""One complete simulated calibration: gain curve and compression fit, MLS
measurement, inverse filter, correction check and quality gates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone

import numpy as np

from . import correction as corr
from .drc_model import DrcFitError, fit_drc, mls_level_db
from .mls_analysis import (PeriodNotDetected, PlaybackLayout, analysis_segment, build_playback,
                           discount_parent, estimate_period, impulse_response, peak_aligned,
                           schroeder_curve, truncate_response)
from .signals import (FrequencyResponse, MlsSpec, SampledSignal, db_power, generate_mls,
                      order_for_duration, power_over_time)
from .sim_chain import PlaybackChain, simulate_playback
from .sine_calibration import ToneNotDetected, measure_gain_curve

REPORT_SCHEMA_VERSION = 1
GATES = ("drc_fit", "bandlimit", "flatness", "power_stability")
# stage order; the non-gate stages appear in a report only when they abort the session
STAGES = ("drc_fit", "mls_level", "period", "bandlimit", "flatness", "power_stability")

# simulation random streams, one per recording type
STREAM_MLS = 1
STREAM_FILTERED = 2
STREAM_NOISE = 3
STREAM_GAIN_CURVE = 100


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    """Session parameters; field names are the configuration keys."""

    _calibrateSoundBurstSec: float = 1.0
    _calibrateSoundBurstRepeats: int = 4
    _calibrateSoundBurstDb: float = -34.0
    _calibrateSoundIRSec: float = 0.2
    _calibrateSoundIIRSec: float = 0.2
    calibrateSoundMinHz: float = 100.0
    calibrateSoundMaxHz: float = 20000.0
    calibrateSoundBurstFilteredExtraDb: float = 5.0
    calibrateSoundBurstLevelReTBool: bool = False
    _calibrateSoundSamplingDesiredHz: float = 48000.0
    # gain curve
    gainCurveLevelsDb: tuple = tuple(float(v) for v in np.arange(-60.0, -2.0, 3.0))
    gainCurveSec: float = 1.0
    fitBackground: bool | None = None
    drcMaxRmsDb: float = 1.0
    # correction check
    flatnessMaxHz: float = 10000.0
    flatnessMaxSdDb: float = 3.0
    # power monitor
    powerWindowSec: float = 0.1
    powerMaxSdDb: float = 6.0

    def __post_init__(self):
        if self._calibrateSoundBurstRepeats < 2:
            raise ConfigError("_calibrateSoundBurstRepeats must be at least 2")
        if not 0 < self.calibrateSoundMinHz < self.calibrateSoundMaxHz:
            raise ConfigError("need 0 < calibrateSoundMinHz < calibrateSoundMaxHz")
        if not self.flatnessMaxHz > self.calibrateSoundMinHz:
            raise ConfigError("flatnessMaxHz must exceed calibrateSoundMinHz")
        for name in ("_calibrateSoundBurstSec", "_calibrateSoundIRSec", "_calibrateSoundIIRSec",
                     "_calibrateSoundSamplingDesiredHz", "gainCurveSec", "powerWindowSec"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "SessionConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = _coerce(key, raw, type(getattr(cls, key)))
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad value for config key {key!r}: {raw!r} ({err})") from err
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gainCurveLevelsDb"] = list(self.gainCurveLevelsDb)
        return d

    @property
    def power_limit_db(self) -> float:
        """Digital power limit of the filtered MLS re the unfiltered MLS level."""
        return self._calibrateSoundBurstDb + self.calibrateSoundBurstFilteredExtraDb


def _coerce(key: str, raw, kind):
    if key == "fitBackground":
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "auto", "none")):
            return None
        return _coerce_bool(raw)
    if kind is bool:
        return _coerce_bool(raw)
    if kind is tuple:
        if isinstance(raw, str):
            raw = [v for v in raw.replace(",", " ").split() if v]
        return tuple(float(v) for v in raw)
    if kind is int:
        value = float(raw)
        if value != int(value):
            raise ValueError("expected an integer")
        return int(value)
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError("expected a finite number")
    return value


def _coerce_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError("expected true or false")


def parse_config_text(text: str) -> SessionConfig:
    """Config from a flat JSON object or from ``key = value`` lines (``#`` comments)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        values = json.loads(stripped)
        if not isinstance(values, dict):
            raise ConfigError("config JSON must be an object")
    else:
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return SessionConfig.from_mapping(values)


def load_config(path) -> SessionConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


@dataclass
class GateResult:
    passed: bool | None
    value: float | None = None
    limit: float | None = None
    message: str = ""


@dataclass
class SessionReport:
    """Everything a session produced, JSON-serialisable through :meth:`to_dict`."""

    config: dict
    sample_rate_hz: float
    started_at: str
    target: str
    gain_curve: list = field(default_factory=list)
    drc_fit: dict | None = None
    mls: dict = field(default_factory=dict)
    period: dict = field(default_factory=dict)
    ir: dict = field(default_factory=dict)
    iir: dict = field(default_factory=dict)
    schroeder: dict = field(default_factory=dict)
    bandlimit: dict = field(default_factory=dict)
    flatness: dict | None = None
    uncorrected_flatness: dict | None = None
    correction_spectra: dict = field(default_factory=dict)
    delay_compensation: dict = field(default_factory=dict)
    power_monitor: list = field(default_factory=list)
    profile: dict | None = None
    gates: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def failing_stage(self) -> str | None:
        for name in STAGES:
            g = self.gates.get(name)
            if g is None:
                if name in GATES:
                    return name  # never reached
                continue
            if g.passed is not True:
                return name
        return None

    @property
    def accepted(self) -> bool:
        return self.failing_stage is None

    def to_dict(self) -> dict:
        d = {"schema_version": REPORT_SCHEMA_VERSION,
             "status": "accepted" if self.accepted else "rejected",
             "failing_stage": self.failing_stage}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "gates":
                value = {k: asdict(v) for k, v in value.items()}
            d[f.name] = value
        return _jsonable(d)

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent, allow_nan=False)


def _jsonable(obj):
    """Recursively convert numpy values; NaN and infinities become null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f":
            return [float(v) if math.isfinite(v) else None for v in obj.tolist()]
        return obj.tolist()
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _fold(segment: SampledSignal, period: int) -> SampledSignal:
    """Average consecutive periods into one."""
    n = len(segment) // period
    return segment.with_samples(segment.samples[: n * period].reshape(n, period).mean(axis=0))


def _spectrum_db(x: np.ndarray) -> np.ndarray:
    return db_power(np.abs(np.fft.rfft(x)) ** 2 / x.size)


def _sound_db(recording: SampledSignal, noise: SampledSignal, mic: FrequencyResponse) -> np.ndarray:
    """Recorded spectrum less background power, microphone discounted; NaN where noise wins."""
    sig = np.abs(np.fft.rfft(recording.samples)) ** 2 / len(recording)
    bg = np.abs(np.fft.rfft(noise.samples)) ** 2 / len(noise)
    clean = sig - bg
    with np.errstate(divide="ignore", invalid="ignore"):
        level = np.where(clean > 0, 10 * np.log10(np.where(clean > 0, clean, 1.0)), np.nan)
    return level - mic.gain_db


def _monitor(report: SessionReport, name: str, recording: SampledSignal, config: SessionConfig,
             gated: bool = True, stop: int | None = None):
    rec = recording if stop is None else recording.with_samples(recording.samples[:stop])
    series = power_over_time(rec, config.powerWindowSec, config.powerMaxSdDb)
    report.power_monitor.append({
        "recording": name, "gated": gated, "times_sec": series.times_sec,
        "power_db": series.power_db, "sd_db": series.sd_db, "unstable": series.unstable,
    })


def _record_mls(chain, signal, layout, stream, seed, estimate=True, measured=None):
    rec = simulate_playback(chain, signal, stream=stream, seed=seed)
    if estimate:
        measured = estimate_period(rec, layout.period_samples)
    seg = analysis_segment(rec, measured, layout)
    return rec, measured, seg


def run_calibration_session(chain: PlaybackChain, config: SessionConfig | None = None,
                            parent: FrequencyResponse | None = None, started_at=None,
                            seed: int | None = None, target: str = "loudspeaker") -> SessionReport:
    """Calibrate one transducer of ``chain`` against a known ``parent``.

    ``target`` names the transducer being calibrated; the parent is the other
    one and defaults to its true response. Every stage runs when its inputs
    exist; the report marks each quality gate and the first one that failed.
    ``started_at`` is recorded verbatim so reports are reproducible.
    """
    config = config or SessionConfig()
    fs = chain.sample_rate_hz
    if fs != config._calibrateSoundSamplingDesiredHz:
        raise ConfigError(
            f"chain sample rate {fs} Hz differs from _calibrateSoundSamplingDesiredHz "
            f"{config._calibrateSoundSamplingDesiredHz} Hz")
    if target not in ("loudspeaker", "microphone"):
        raise ValueError("target must be 'loudspeaker' or 'microphone'")
    if started_at is None:
        started_at = datetime.now(timezone.utc)
    if isinstance(started_at, datetime):
        started_at = started_at.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")
    seed = chain.env.seed if seed is None else seed
    report = SessionReport(config.to_dict(), fs, str(started_at), target)
    max_hz = min(config.calibrateSoundMaxHz, fs / 2)

    # gain curve at 1 kHz and compression fit
    recordings = []
    params = None
    try:
        points = measure_gain_curve(chain, config.gainCurveLevelsDb, 1000.0, config.gainCurveSec,
                                    STREAM_GAIN_CURVE, recordings)
        report.gain_curve = [asdict(p) for p in points]
        fit = fit_drc(points, background=config.fitBackground, gate_db=config.drcMaxRmsDb)
        params = fit.params
        report.drc_fit = {**fit.to_dict(), "knee_floor_db": params.T - params.W / 2}
        report.gates["drc_fit"] = GateResult(fit.accepted, fit.rms_error_db, config.drcMaxRmsDb)
    except (DrcFitError, ToneNotDetected, ValueError) as err:
        report.errors["drc_fit"] = str(err)
        report.gates["drc_fit"] = GateResult(False, getattr(err, "best_rms_db", None),
                                             config.drcMaxRmsDb, str(err))
    for level, rec in recordings:
        _monitor(report, f"sine_{level:g}dB", rec, config)

    # MLS measurement
    try:
        level = mls_level_db(config._calibrateSoundBurstDb, params, config.calibrateSoundBurstLevelReTBool)
    except ValueError as err:
        report.errors["mls_level"] = str(err)
        report.gates["mls_level"] = GateResult(False, message=str(err))
        return report
    order = order_for_duration(config._calibrateSoundBurstSec, fs)
    mls = generate_mls(MlsSpec(order, level), fs)
    P = len(mls)
    layout = PlaybackLayout(P, config._calibrateSoundBurstRepeats)
    report.mls = {"order": order, "period_samples": P, "level_db": level,
                  "analysis_periods": layout.analysis_periods, "warmup_periods": layout.warmup_periods,
                  "tail_samples": layout.tail_samples, "total_samples": layout.total_samples}
    try:
        rec, measured, seg = _record_mls(chain, build_playback(mls, layout), layout, STREAM_MLS, seed)
    except (PeriodNotDetected, ValueError) as err:
        report.errors["period"] = str(err)
        report.gates["period"] = GateResult(False, message=str(err))
        return report
    report.period = {"nominal_samples": P, "measured_samples": measured, "clock_ratio_estimate": measured / P}
    played = int(round((layout.warmup_periods + layout.analysis_periods) * measured))
    _monitor(report, "mls", rec, config, stop=played)

    system = impulse_response(seg, mls, layout.analysis_periods)
    n_fft = P
    system_fr = system.response(n_fft)
    grid = system_fr.freq_hz
    if parent is None:
        known = chain.microphone if target == "loudspeaker" else chain.speaker
        parent = FrequencyResponse.from_taps(known.ir_taps, fs, max(n_fft, len(known.ir_taps)))
    parent_fr = parent if parent.same_grid(system_fr) else parent.interpolate(grid)
    child_fr = discount_parent(system_fr, parent_fr)
    truncated = truncate_response(child_fr, n_fft, config._calibrateSoundIRSec, fs)
    report.ir = {"raw_taps": peak_aligned(system).taps, "truncated_taps": truncated.taps,
                 "sample_rate_hz": fs}
    curve = schroeder_curve(peak_aligned(system))
    report.schroeder = {"times_sec": curve.times_sec, "level_db": curve.level_db}
    prof = FrequencyResponse.from_taps(truncated.taps, fs)
    report.profile = {"freq_hz": prof.freq_hz, "gain_db": prof.gain_db,
                      "phase_rad": np.zeros_like(prof.gain_db)}

    # inverse filter and the power-limited filtered MLS
    iir = corr.inverse_ir(truncated, config._calibrateSoundIIRSec)
    L = len(iir)
    report.iir = {"taps": iir.taps, "reference_hz": iir.reference_hz, "reference_gain": iir.reference_gain()}
    report.delay_compensation = {
        "filter_length": L,
        "group_delay_samples": iir.group_delay_samples,
        "trimmed_samples": (L - 1) // 2,
        "half_input_length_samples": P // 2,
        "applied": "group_delay",
    }
    filtered_full = corr.circular_correction(mls, iir)
    power_limit = level + config.calibrateSoundBurstFilteredExtraDb
    try:
        filtered, cutoff = corr.bandlimit_filtered_mls(filtered_full, config.calibrateSoundMinHz,
                                                       power_limit, max_hz)
    except corr.PowerLimitError as err:
        report.errors["bandlimit"] = str(err)
        report.gates["bandlimit"] = GateResult(False, None, power_limit, str(err))
        return report
    report.bandlimit = {"cutoff_hz": cutoff, "min_hz": config.calibrateSoundMinHz,
                        "power_limit_db": power_limit, "power_db": filtered.power_db()}
    report.gates["bandlimit"] = GateResult(True, filtered.power_db(), power_limit)

    # correction check: filtered MLS, and silence for the background
    frec, _, fseg = _record_mls(chain, build_playback(filtered, layout), layout, STREAM_FILTERED,
                                seed, estimate=False, measured=measured)
    _monitor(report, "filtered_mls", frec, config, stop=played)
    silence = SampledSignal(np.zeros(layout.total_samples), fs)
    nrec, _, nseg = _record_mls(chain, silence, layout, STREAM_NOISE, seed, estimate=False, measured=measured)
    _monitor(report, "background", nrec, config, gated=False, stop=played)

    corrected = _fold(fseg, P)
    uncorrected = _fold(seg, P)
    noise = _fold(nseg, P)
    band_hi = min(config.flatnessMaxHz, cutoff)
    try:
        flat = corr.assess_flatness(corrected, noise, parent_fr, config.calibrateSoundMinHz, band_hi,
                                    config.flatnessMaxSdDb)
        report.flatness = flat.to_dict()
        report.gates["flatness"] = GateResult(flat.passed, flat.sd_db, config.flatnessMaxSdDb)
    except corr.NoiseDominatesError as err:
        report.errors["flatness"] = str(err)
        report.gates["flatness"] = GateResult(False, None, config.flatnessMaxSdDb, str(err))
    try:
        raw = corr.assess_flatness(uncorrected, noise, parent_fr, config.calibrateSoundMinHz,
                                   min(config.flatnessMaxHz, max_hz), config.flatnessMaxSdDb)
        report.uncorrected_flatness = {"sd_db": raw.sd_db, "passed": raw.passed,
                                       "band_lo_hz": raw.band_lo_hz, "band_hi_hz": raw.band_hi_hz}
    except corr.NoiseDominatesError as err:
        report.errors["uncorrected_flatness"] = str(err)

    mls_db = _spectrum_db(mls.samples)
    filtered_db = _spectrum_db(filtered.samples)
    mls_sound_db = _sound_db(uncorrected, noise, parent_fr)
    report.correction_spectra = {
        "freq_hz": grid,
        "mic_db": parent_fr.gain_db,
        "mls_db": mls_db,
        "mls_sound_db": mls_sound_db,
        "filtered_mls_db": filtered_db,
        "filtered_mls_sound_db": _sound_db(corrected, noise, parent_fr),
        "background_db": _spectrum_db(noise.samples) - parent_fr.gain_db,
        # expected corrected recording: the filter's gain re the plain MLS added to the plain recording
        "predicted_sum_db": filtered_db - mls_db + mls_sound_db,
    }

    unstable = [m["recording"] for m in report.power_monitor if m["gated"] and m["unstable"]]
    worst = max((m["sd_db"] for m in report.power_monitor if m["gated"] and np.isfinite(m["sd_db"])),
                default=None)
    report.gates["power_stability"] = GateResult(
        not unstable, worst, config.powerMaxSdDb,
        f"power fluctuates in: {', '.join(unstable)}" if unstable else "")
    return report
