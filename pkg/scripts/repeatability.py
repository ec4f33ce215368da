"""Repeatability of recovered profiles and error growth along a calibration chain.

Each run calibrates a laptop speaker with a measurement microphone, then a
phone microphone with that speaker profile, then a second speaker with the
phone profile. Per-bin SDs across runs are pooled over a band; the ratio of
the last link's SD to the first link's SD is compared with sqrt(3).
"""

import argparse

import numpy as np

from soundcal.drc_model import DrcParams
from soundcal.session import SessionConfig, run_calibration_session
from soundcal.signals import FrequencyResponse
from soundcal.sim_chain import PlaybackChain, SimEnvironment, SimTransducer, preset_taps


def pooled_sd(rows, freq, lo, hi):
    band = (freq >= lo) & (freq <= hi)
    return float(np.sqrt(np.mean(np.var(np.asarray(rows)[:, band], axis=0, ddof=1))))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=40)
    ap.add_argument("--noise-db", type=float, default=-50.0)
    ap.add_argument("--burst-sec", type=float, default=0.3)
    ap.add_argument("--ir-sec", type=float, default=0.2)
    ap.add_argument("--band", type=float, nargs=2, default=[500.0, 4000.0])
    args = ap.parse_args()

    fs = 48000.0
    config = SessionConfig(gainCurveLevelsDb=tuple(np.arange(-50.0, -2.0, 6.0)), gainCurveSec=0.25,
                           _calibrateSoundBurstSec=args.burst_sec, _calibrateSoundIRSec=args.ir_sec)
    drc = DrcParams(0.0, -21.0, 10.0, 0.5)
    speaker_a = SimTransducer(preset_taps("laptop_speaker", fs), drc)
    speaker_b = SimTransducer(preset_taps("laptop_speaker", fs, ripple_db=3.0, hf_corner_hz=8000.0), drc)
    umik = SimTransducer(preset_taps("measurement_mic", fs))
    phone = SimTransducer(preset_taps("phone_mic", fs))

    def env(seed):
        return SimEnvironment(noise_level_db=args.noise_db, noise_spectrum="one_over_f", seed=seed)

    def session(spk, mic, seed, parent=None, target="loudspeaker"):
        r = run_calibration_session(PlaybackChain(spk, mic, env(seed), fs), config, parent=parent,
                                    started_at="2024-01-01T00:00:00Z", target=target)
        if not r.accepted:
            raise SystemExit(f"session rejected at {r.failing_stage}")
        return FrequencyResponse(r.profile["freq_hz"], r.profile["gain_db"])

    links = [[], [], []]
    for run in range(args.runs):
        a = session(speaker_a, umik, 1000 + run)
        m = session(speaker_a, phone, 2000 + run, a, "microphone")
        b = session(speaker_b, phone, 3000 + run, m)
        for rows, p in zip(links, (a, m, b)):
            rows.append(p.gain_db)
    freq = a.freq_hz
    k = int(np.argmin(np.abs(freq - 1000.0)))
    sds = [pooled_sd(rows, freq, *args.band) for rows in links]
    for name, rows, sd in zip(("speaker", "phone mic", "second speaker"), links, sds):
        print(f"{name:<15} pooled SD {sd:.3f} dB   SD at 1 kHz {np.std(np.asarray(rows)[:, k], ddof=1):.3f} dB")
    print(f"last/first ratio {sds[2] / sds[0]:.3f} (sqrt(3) = {np.sqrt(3):.3f})")


if __name__ == "__main__":
    main()
