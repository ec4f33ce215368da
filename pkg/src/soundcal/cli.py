"""Command-line entry point: ``soundcal simulate | profile | export``.

Exit codes: 0 accepted / success, 1 error, 2 calibration rejected by a gate,
3 no matching profile.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .profile_library import (DeviceIdentity, NoMatch, Profile, ProfileError, ProfileStore,
                              new_profile_id, profile_from_report)
from .session import ConfigError, SessionConfig, load_config, run_calibration_session
from .signals import FrequencyResponse
from .sim_chain import chain_from_dict

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2
EXIT_NO_MATCH = 3

EXPORTS = ("gain_thd", "ir", "schroeder", "correction", "profiles")
IR_VIEWS_MS = (6, 50)
CORRECTION_COLUMNS = ("freq_hz", "mic_db", "mls_db", "mls_sound_db", "filtered_mls_db",
                      "filtered_mls_sound_db", "background_db", "predicted_sum_db")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; exit code 2 is reserved for gate rejection
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("soundcal") / "fixtures" / name))


def _resolve_input(path: str) -> Path:
    """A file path, or the name of a bundled fixture."""
    p = Path(path)
    if p.exists():
        return p
    for candidate in (path, f"{path}.json", f"{path}_chain.json"):
        f = fixture_path(candidate)
        if f.exists():
            return f
    raise CliError(f"no such file: {path}")


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    config = load_config(_resolve_input(args.config)) if args.config else SessionConfig()
    with open(_resolve_input(args.chain)) as fh:
        chain = chain_from_dict(json.load(fh))
    report = run_calibration_session(chain, config, started_at=args.started_at, seed=args.seed,
                                     target=args.target)
    text = report.to_json()
    if args.out:
        _write_atomic(Path(args.out), text)
    d = report.to_dict()
    flat = (d.get("flatness") or {}).get("sd_db")
    print(f"status: {d['status']}")
    for name, gate in d["gates"].items():
        verdict = "pass" if gate["passed"] else "FAIL"
        value = "" if gate["value"] is None else f" {gate['value']:.3f}"
        print(f"  {name}: {verdict}{value} (limit {gate['limit']})")
    if flat is not None:
        print(f"flatness sd: {flat:.2f} dB")
    if not report.accepted:
        print(f"rejected at stage: {report.failing_stage}", file=sys.stderr)
        return EXIT_REJECTED
    return EXIT_OK


# ---------------------------------------------------------------------------
# profile library


def _store(args, create: bool) -> ProfileStore:
    path = args.store or os.environ.get("SOUNDCAL_STORE")
    if not path:
        raise CliError("no profile store given (use --store or SOUNDCAL_STORE)")
    if not create and not Path(path).exists():
        raise CliError(f"profile store {path} does not exist")
    return ProfileStore(path, create=create)


def _parse_screen(text: str | None):
    if text is None:
        return None
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise CliError(f"screen must be WIDTHxHEIGHT, got {text!r}")
    return int(parts[0]), int(parts[1])


def _read_response_csv(path: str) -> FrequencyResponse:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "freq_hz" not in rows[0] or "gain_db" not in rows[0]:
        raise CliError(f"{path}: need freq_hz and gain_db columns")
    freq = [float(r["freq_hz"]) for r in rows]
    gain = [float(r["gain_db"]) for r in rows]
    phase = [float(r.get("phase_rad") or 0.0) for r in rows]
    return FrequencyResponse(freq, gain, phase)


def _describe(p: Profile) -> str:
    ident = p.identity
    screen = "" if ident.screen_px is None else f" {ident.screen_px[0]}x{ident.screen_px[1]}"
    return (f"{p.id}  {p.kind:<23}  {ident.brand} {ident.model_name} {ident.model_number}{screen}"
            f"  {p.timestamp.isoformat()}  {p.signer_email}").rstrip()


def cmd_profile_add(args) -> int:
    store = _store(args, create=True)
    identity = DeviceIdentity(args.brand, args.model_name, args.model_number,
                              _parse_screen(args.screen), args.os)
    if args.report:
        with open(args.report) as fh:
            report = json.load(fh)
        profile = profile_from_report(report, args.kind, identity, args.parent, args.signer,
                                      args.timestamp, args.id)
    elif args.response:
        if args.timestamp is None:
            raise CliError("--timestamp is required with --response")
        profile = Profile(args.id or new_profile_id(), args.timestamp, args.kind, identity,
                          _read_response_csv(args.response), args.parent, args.signer)
    else:
        raise CliError("give either --report or --response")
    print(store.add_profile(profile))
    return EXIT_OK


def cmd_profile_match(args) -> int:
    store = _store(args, create=False)
    result = store.match_phone(args.model_name, args.model_number, _parse_screen(args.screen))
    if isinstance(result, NoMatch):
        keys = ", ".join(result.matched_keys) or "none"
        print(f"NO MATCH (matched keys: {keys})")
        return EXIT_NO_MATCH
    print(result.id)
    return EXIT_OK


def cmd_profile_trace(args) -> int:
    store = _store(args, create=False)
    for p in store.trace_chain(args.id).profiles:
        print(_describe(p))
    return EXIT_OK


def cmd_profile_list(args) -> int:
    store = _store(args, create=False)
    for p in sorted(store.profiles(), key=lambda q: (q.timestamp, q.id)):
        print(_describe(p))
    return EXIT_OK


def cmd_profile_coverage(args) -> int:
    store = _store(args, create=False)
    for brand, count in store.brand_coverage().items():
        print(f"{brand}: {count}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export


def _csv_text(columns: dict) -> str:
    names = list(columns)
    n = len(next(iter(columns.values())))
    if any(len(v) != n for v in columns.values()):
        raise CliError("export columns have different lengths")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for i in range(n):
        w.writerow(["nan" if columns[k][i] is None else repr(float(columns[k][i])) for k in names])
    return buf.getvalue()


def _need(report: dict, key: str):
    value = report.get(key)
    if not value:
        raise CliError(f"report has no {key!r} data")
    return value


def export_tables(report: dict, which: str) -> dict[str, str]:
    """CSV text per output file name; raises before anything is written."""
    if which == "gain_thd":
        points = _need(report, "gain_curve")
        cols = {"in_db": [p["in_db"] for p in points], "out_db": [p["out_db"] for p in points],
                "thd": [p["thd"] for p in points]}
        fit = (report.get("drc_fit") or {}).get("params")
        if fit:
            from .drc_model import DrcParams, drc_out
            cols["fit_out_db"] = list(np.atleast_1d(drc_out(np.array(cols["in_db"]), DrcParams.from_dict(fit))))
        return {"gain_thd.csv": _csv_text(cols)}
    if which == "ir":
        ir = _need(report, "ir")
        taps = np.array([np.nan if v is None else v for v in _need(ir, "raw_taps")], dtype=float)
        fs = float(ir["sample_rate_hz"])
        out = {}
        for ms in IR_VIEWS_MS:
            n = min(taps.size, int(round(ms * 1e-3 * fs)))
            out[f"ir_{ms}ms.csv"] = _csv_text({"time_ms": list(np.arange(n) / fs * 1e3),
                                               "amplitude": list(taps[:n])})
        return out
    if which == "schroeder":
        s = _need(report, "schroeder")
        return {"schroeder.csv": _csv_text({"time_sec": _need(s, "times_sec"),
                                            "level_db": _need(s, "level_db")})}
    if which == "correction":
        spectra = _need(report, "correction_spectra")
        missing = [c for c in CORRECTION_COLUMNS if not spectra.get(c)]
        if missing:
            raise CliError(f"report correction spectra lack {missing}")
        return {"correction.csv": _csv_text({c: spectra[c] for c in CORRECTION_COLUMNS})}
    if which == "profiles":
        prof = _need(report, "profile")
        return {"profile.csv": _csv_text({"freq_hz": prof["freq_hz"], "gain_db": prof["gain_db"],
                                          "phase_rad": prof["phase_rad"]})}
    raise CliError(f"unknown export {which!r}; valid names: {', '.join(EXPORTS)}")


def cmd_export(args) -> int:
    if args.which not in EXPORTS:
        raise CliError(f"unknown export {args.which!r}; valid names: {', '.join(EXPORTS)}")
    with open(args.report) as fh:
        report = json.load(fh)
    tables = export_tables(report, args.which)
    out_dir = Path(args.out_dir)
    for name, text in tables.items():
        _write_atomic(out_dir / name, text)
        print(out_dir / name)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soundcal", description="Simulated loudspeaker/microphone calibration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run one calibration session on a simulated chain")
    p.add_argument("--config", help="session config (key = value lines or JSON); defaults built in")
    p.add_argument("--chain", required=True, help="chain JSON file or bundled fixture name")
    p.add_argument("--out", help="write the session report JSON here")
    p.add_argument("--seed", type=int, help="override the chain's noise seed")
    p.add_argument("--target", choices=("loudspeaker", "microphone"), default="loudspeaker")
    p.add_argument("--started-at", help="timestamp to record in the report (ISO 8601)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("profile", help="manage the profile library")
    psub = p.add_subparsers(dest="profile_command", required=True, parser_class=_Parser)
    store_help = "profile store directory (default: $SOUNDCAL_STORE)"

    a = psub.add_parser("add", help="add a profile")
    a.add_argument("--store", help=store_help)
    a.add_argument("--kind", required=True, choices=("microphone", "loudspeaker", "manufacturer_microphone"))
    a.add_argument("--report", help="session report whose profile to store")
    a.add_argument("--response", help="CSV with freq_hz, gain_db[, phase_rad] columns")
    a.add_argument("--brand", default="")
    a.add_argument("--model-name", required=True)
    a.add_argument("--model-number", default="")
    a.add_argument("--screen", help="WIDTHxHEIGHT in pixels (phones)")
    a.add_argument("--os")
    a.add_argument("--parent", help="parent profile id")
    a.add_argument("--signer", default="", help="email of the responsible scientist")
    a.add_argument("--timestamp", help="ISO 8601 UTC timestamp")
    a.add_argument("--id", help="profile id (default: random)")
    a.set_defaults(func=cmd_profile_add)

    m = psub.add_parser("match", help="find the profile for a phone")
    m.add_argument("--store", help=store_help)
    m.add_argument("--model-name", required=True)
    m.add_argument("--model-number", required=True)
    m.add_argument("--screen", required=True)
    m.set_defaults(func=cmd_profile_match)

    t = psub.add_parser("trace", help="print a profile's calibration chain, leaf first")
    t.add_argument("id")
    t.add_argument("--store", help=store_help)
    t.set_defaults(func=cmd_profile_trace)

    for name, func, text in (("list", cmd_profile_list, "list all profiles"),
                             ("coverage", cmd_profile_coverage, "models per brand")):
        q = psub.add_parser(name, help=text)
        q.add_argument("--store", help=store_help)
        q.set_defaults(func=func)

    e = sub.add_parser("export", help="write figure data from a session report as CSV")
    e.add_argument("--report", required=True)
    e.add_argument("--which", required=True, help=f"one of: {', '.join(EXPORTS)}")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ProfileError, KeyError, ValueError, OSError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
