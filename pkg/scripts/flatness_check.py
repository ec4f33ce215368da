"""Calibrate the bundled laptop-speaker chain and report flatness before and after correction.

Optionally writes the correction-assessment spectra as CSV for plotting.
"""

import argparse
import csv
import json

import numpy as np

from soundcal.cli import fixture_path
from soundcal.session import SessionConfig, load_config, run_calibration_session
from soundcal.sim_chain import chain_from_dict


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--chain", default=str(fixture_path("laptop_chain.json")))
    ap.add_argument("--config", help="session config file (defaults built in)")
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--csv", help="write correction spectra of the first seed here")
    args = ap.parse_args()

    with open(args.chain) as fh:
        chain = chain_from_dict(json.load(fh))
    config = load_config(args.config) if args.config else SessionConfig()
    sds = []
    for seed in range(args.seeds):
        r = run_calibration_session(chain, config, started_at="2024-01-01T00:00:00Z", seed=seed)
        sd = r.flatness["sd_db"] if r.flatness else float("nan")
        sds.append(sd)
        print(f"seed {seed}: {('accepted' if r.accepted else 'rejected at ' + r.failing_stage):<24} "
              f"uncorrected {r.uncorrected_flatness['sd_db']:5.2f} dB  corrected {sd:5.2f} dB  "
              f"band {r.flatness['band_lo_hz']:.0f}-{r.flatness['band_hi_hz']:.0f} Hz")
        if seed == 0 and args.csv:
            spectra = r.correction_spectra
            names = list(spectra)
            with open(args.csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(names)
                w.writerows(zip(*(np.asarray(spectra[k]) for k in names)))
    if args.seeds > 1:
        print(f"corrected sd: mean {np.nanmean(sds):.2f} dB, range {np.nanmin(sds):.2f}-{np.nanmax(sds):.2f} dB")


if __name__ == "__main__":
    main()
