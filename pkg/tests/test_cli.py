import csv
import json

import numpy as np
import pytest

from soundcal.cli import EXPORTS, main
from soundcal.signals import finite_sd

STAMP = "2024-01-01T00:00:00Z"
FAST = "gainCurveLevelsDb = -50 -46 -42 -38 -34 -30 -26 -22 -18 -14 -10 -6\ngainCurveSec = 0.5\n"


@pytest.fixture(scope="module")
def clean_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("clean")
    out = d / "report.json"
    code = main(["simulate", "--chain", "clean", "--out", str(out), "--started-at", STAMP])
    return code, out


def run(argv):
    """Exit code of the CLI, including argparse usage errors."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def test_simulate_clean_exit_0(clean_run):
    code, out = clean_run
    assert code == 0
    report = json.loads(out.read_text())
    assert report["status"] == "accepted" and report["schema_version"] == 1


def test_simulate_echo_exit_2(tmp_path, capsys):
    cfg = tmp_path / "fast.txt"
    cfg.write_text(FAST)
    out = tmp_path / "r.json"
    assert main(["simulate", "--chain", "echo", "--config", str(cfg), "--out", str(out)]) == 2
    assert "flatness" in capsys.readouterr().err
    assert json.loads(out.read_text())["failing_stage"] == "flatness"


def test_simulate_errors_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("calibrateSoundBogus = 3\n")
    assert main(["simulate", "--chain", "clean", "--config", str(cfg)]) == 1
    assert "calibrateSoundBogus" in capsys.readouterr().err
    assert main(["simulate", "--chain", str(tmp_path / "missing.json")]) == 1
    assert run(["simulate"]) == 1
    assert run(["bogus"]) == 1
    assert run(["simulate", "--chain", "clean", "--seed", "x"]) == 1


def test_export_ir_and_correction(clean_run, tmp_path):
    _, report_path = clean_run
    assert main(["export", "--report", str(report_path), "--which", "ir", "--out-dir", str(tmp_path)]) == 0
    six, fifty = read_csv(tmp_path / "ir_6ms.csv"), read_csv(tmp_path / "ir_50ms.csv")
    assert six["time_ms"].size == 288 and fifty["time_ms"].size == 2400
    assert main(["export", "--report", str(report_path), "--which", "correction",
                 "--out-dir", str(tmp_path)]) == 0
    cols = read_csv(tmp_path / "correction.csv")
    for name in ("mls_sound_db", "filtered_mls_sound_db", "background_db", "predicted_sum_db"):
        assert name in cols


def test_exported_flatness_round_trip(clean_run, tmp_path):
    _, report_path = clean_run
    report = json.loads(report_path.read_text())
    main(["export", "--report", str(report_path), "--which", "correction", "--out-dir", str(tmp_path)])
    cols = read_csv(tmp_path / "correction.csv")
    flat = report["flatness"]
    band = (cols["freq_hz"] >= flat["band_lo_hz"]) & (cols["freq_hz"] <= flat["band_hi_hz"])
    assert finite_sd(cols["filtered_mls_sound_db"][band]) == pytest.approx(flat["sd_db"], abs=1e-6)


@pytest.mark.parametrize("which", EXPORTS)
def test_every_export(clean_run, tmp_path, which):
    _, report_path = clean_run
    assert main(["export", "--report", str(report_path), "--which", which, "--out-dir", str(tmp_path)]) == 0
    assert list(tmp_path.glob("*.csv"))


def test_export_errors_leave_no_files(clean_run, tmp_path, capsys):
    _, report_path = clean_run
    out = tmp_path / "out"
    assert main(["export", "--report", str(report_path), "--which", "plots", "--out-dir", str(out)]) == 1
    assert "gain_thd" in capsys.readouterr().err
    report = json.loads(report_path.read_text())
    report["correction_spectra"] = {}
    report["schroeder"] = {}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(report))
    for which in ("correction", "schroeder"):
        assert main(["export", "--report", str(bad), "--which", which, "--out-dir", str(out)]) == 1
    assert not out.exists() or not any(out.iterdir())


def test_profile_commands(clean_run, tmp_path, capsys, monkeypatch):
    _, report_path = clean_run
    store = tmp_path / "store"
    monkeypatch.setenv("SOUNDCAL_STORE", str(store))
    resp = tmp_path / "umik.csv"
    resp.write_text("freq_hz,gain_db\n0,0\n10000,0.5\n20000,-1\n")
    assert main(["profile", "add", "--kind", "manufacturer_microphone", "--response", str(resp),
                 "--brand", "miniDSP", "--model-name", "UMIK-1", "--timestamp", "2023-12-01T00:00:00Z",
                 "--id", "umik"]) == 0
    assert main(["profile", "add", "--kind", "loudspeaker", "--report", str(report_path), "--parent", "umik",
                 "--brand", "Apple", "--model-name", "MacBook Pro", "--signer", "a@lab.org",
                 "--id", "mbp"]) == 0
    capsys.readouterr()
    assert main(["profile", "trace", "mbp"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[0].startswith("mbp") and lines[1].startswith("umik")
    assert main(["profile", "add", "--kind", "microphone", "--response", str(resp), "--parent", "mbp",
                 "--brand", "Apple", "--model-name", "iPhone 13", "--model-number", "A2482",
                 "--screen", "1170x2532", "--timestamp", "2024-02-01T00:00:00Z", "--id", "ip13"]) == 0
    capsys.readouterr()
    assert main(["profile", "match", "--model-name", "iphone 13", "--model-number", "A2482",
                 "--screen", "2532x1170"]) == 0
    assert capsys.readouterr().out.strip() == "ip13"
    assert main(["profile", "match", "--model-name", "iPhone 13", "--model-number", "A2482",
                 "--screen", "1080x2400"]) == 3
    assert "NO MATCH" in capsys.readouterr().out
    assert main(["profile", "coverage"]) == 0
    assert capsys.readouterr().out.splitlines() == ["Apple: 2"]
    assert main(["profile", "list"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3
    # alternation violation and a missing store
    assert main(["profile", "add", "--kind", "loudspeaker", "--response", str(resp), "--parent", "mbp",
                 "--model-name", "X", "--timestamp", "2024-03-01T00:00:00Z"]) == 1
    assert main(["profile", "list", "--store", str(tmp_path / "nowhere")]) == 1
