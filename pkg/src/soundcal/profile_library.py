"""Traceable transducer profile store.

Every profile except a manufacturer-calibrated microphone names a parent
profile; following parents leads, through alternating loudspeaker and
microphone calibrations, to such a root. Profiles live as one JSON document
each under ``profiles/`` (file name = content hash) with an ``index.json``
mapping ids to files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from filelock import FileLock

from .signals import FrequencyResponse

KINDS = ("microphone", "loudspeaker", "manufacturer_microphone")
ROOT_KIND = "manufacturer_microphone"
SCHEMA_VERSION = 1


class ProfileError(ValueError):
    pass


class BrokenChainError(ProfileError):
    pass


class CycleError(ProfileError):
    pass


def normalize_key(text: str) -> str:
    """Trim, collapse internal whitespace, case-fold."""
    return " ".join(str(text).split()).casefold()


def normalize_screen(screen_px) -> tuple[int, int] | None:
    if screen_px is None:
        return None
    w, h = (int(v) for v in screen_px)
    return (min(w, h), max(w, h))


def _parse_time(value) -> datetime:
    t = value if isinstance(value, datetime) else datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if t.tzinfo is None:
        raise ProfileError(f"timestamp {value!r} has no timezone")
    return t.astimezone(timezone.utc)


def _format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class DeviceIdentity:
    brand: str
    model_name: str
    model_number: str = ""
    screen_px: tuple[int, int] | None = None
    os: str | None = None

    def __post_init__(self):
        if not str(self.model_name).strip():
            raise ProfileError("model_name must be non-empty")
        if self.screen_px is not None:
            screen = tuple(int(v) for v in self.screen_px)
            if len(screen) != 2 or min(screen) <= 0:
                raise ProfileError(f"screen_px must be two positive integers, got {self.screen_px}")
            object.__setattr__(self, "screen_px", screen)

    def to_dict(self) -> dict:
        return {"brand": self.brand, "model_name": self.model_name, "model_number": self.model_number,
                "screen_px": None if self.screen_px is None else list(self.screen_px), "os": self.os}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceIdentity":
        return cls(d.get("brand", ""), d["model_name"], d.get("model_number", ""),
                   None if d.get("screen_px") is None else tuple(d["screen_px"]), d.get("os"))


@dataclass(frozen=True)
class Profile:
    id: str
    timestamp: datetime
    kind: str
    identity: DeviceIdentity
    response: FrequencyResponse
    parent_id: str | None
    signer_email: str
    quality: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProfileError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if (self.parent_id is None) != (self.kind == ROOT_KIND):
            raise ProfileError("a profile has no parent exactly when it is a manufacturer_microphone")
        if not self.id:
            raise ProfileError("profile id must be non-empty")
        object.__setattr__(self, "timestamp", _parse_time(self.timestamp))

    @property
    def is_root(self) -> bool:
        return self.kind == ROOT_KIND

    def to_dict(self) -> dict:
        r = self.response
        return {
            "id": self.id,
            "timestamp_iso8601": _format_time(self.timestamp),
            "kind": self.kind,
            "identity": self.identity.to_dict(),
            "parent_id": self.parent_id,
            "signer_email": self.signer_email,
            "response": {"freq_hz": r.freq_hz.tolist(), "gain_db": _encode_floats(r.gain_db),
                         "phase_rad": _encode_floats(r.phase_rad)},
            "quality": self.quality,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Profile":
        r = d["response"]
        gain = _decode_floats(r["gain_db"])
        return cls(d["id"], d["timestamp_iso8601"], d["kind"], DeviceIdentity.from_dict(d["identity"]),
                   FrequencyResponse(r["freq_hz"], gain, _decode_floats(r["phase_rad"])), d.get("parent_id"),
                   d.get("signer_email", ""), d.get("quality") or {})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False)


def _encode_floats(values: np.ndarray) -> list:
    # JSON has no inf/nan; spell them as strings so they survive a round trip
    return [float(v) if np.isfinite(v) else str(float(v)) for v in values]


def _decode_floats(values) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=float)


def new_profile_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class TraceChain:
    profiles: tuple[Profile, ...]

    def __len__(self):
        return len(self.profiles)

    @property
    def leaf(self) -> Profile:
        return self.profiles[0]

    @property
    def root(self) -> Profile:
        return self.profiles[-1]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.profiles]


@dataclass(frozen=True)
class NoMatch:
    """Outcome of a phone lookup with no full three-way match."""

    matched_keys: tuple[str, ...] = ()
    candidates: int = 0

    def __bool__(self):
        return False


def _check_link(child: Profile, parent: Profile):
    if child.kind == "loudspeaker":
        ok = parent.kind in ("microphone", ROOT_KIND)
    else:
        ok = parent.kind == "loudspeaker"
    if not ok:
        raise ProfileError(
            f"kind alternation violated: {child.kind} profile {child.id} cannot have "
            f"{parent.kind} parent {parent.id}")
    if not parent.timestamp < child.timestamp:
        raise ProfileError(
            f"parent {parent.id} ({_format_time(parent.timestamp)}) is not earlier than "
            f"child {child.id} ({_format_time(child.timestamp)})")


class ProfileStore:
    """Directory-backed profile store; reads are lock-free, writes hold a file lock."""

    def __init__(self, root: str | os.PathLike, create: bool = True):
        self.root = Path(root)
        if not self.root.exists():
            if not create:
                raise FileNotFoundError(f"profile store {self.root} does not exist")
            self.root.mkdir(parents=True)
        (self.root / "profiles").mkdir(exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def _read_index(self) -> dict[str, str]:
        if not self.index_path.exists():
            return {}
        with open(self.index_path) as fh:
            return json.load(fh)["profiles"]

    def _atomic_write(self, path: Path, text: str):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def ids(self) -> list[str]:
        return sorted(self._read_index())

    def __contains__(self, profile_id: str) -> bool:
        return profile_id in self._read_index()

    def __len__(self):
        return len(self._read_index())

    def get(self, profile_id: str) -> Profile:
        index = self._read_index()
        if profile_id not in index:
            raise KeyError(f"no profile with id {profile_id!r}")
        with open(self.root / "profiles" / index[profile_id]) as fh:
            return Profile.from_dict(json.load(fh))

    def profiles(self) -> list[Profile]:
        return [self.get(i) for i in self.ids()]

    def add_profile(self, profile: Profile) -> str:
        with self._lock:
            index = self._read_index()
            if profile.id in index:
                raise ProfileError(f"profile id {profile.id} already exists")
            if not profile.is_root:
                if profile.parent_id == profile.id:
                    raise CycleError(f"cycle: profile {profile.id} names itself as parent")
                if profile.parent_id not in index:
                    raise ProfileError(f"missing parent: {profile.parent_id}")
                parent = self.get(profile.parent_id)
                _check_link(profile, parent)
                # the parent's own chain must already be sound
                self.trace_chain(parent.id)
            text = profile.to_json()
            name = hashlib.sha256(text.encode()).hexdigest() + ".json"
            self._atomic_write(self.root / "profiles" / name, text)
            index[profile.id] = name
            self._atomic_write(self.index_path, json.dumps(
                {"schema_version": SCHEMA_VERSION, "profiles": dict(sorted(index.items()))}, indent=1))
        return profile.id

    def trace_chain(self, profile_id: str) -> TraceChain:
        index = self._read_index()
        if profile_id not in index:
            raise KeyError(f"no profile with id {profile_id!r}")
        chain = [self.get(profile_id)]
        seen = {profile_id}
        while not chain[-1].is_root:
            pid = chain[-1].parent_id
            if pid in seen:
                raise CycleError(f"cycle: profile {pid} reappears in the chain of {profile_id}")
            if pid not in index:
                raise BrokenChainError(f"broken chain: parent {pid} of {chain[-1].id} is missing")
            parent = self.get(pid)
            _check_link(chain[-1], parent)
            chain.append(parent)
            seen.add(pid)
        return TraceChain(tuple(chain))

    def validate(self) -> list[str]:
        """Problems found across the whole store, one message per bad profile."""
        problems = []
        for pid in self.ids():
            try:
                self.trace_chain(pid)
            except ProfileError as err:
                problems.append(f"{pid}: {err}")
        return problems

    def match_phone(self, model_name: str, model_number: str, screen_px) -> Profile | NoMatch:
        """Newest microphone profile matching name, number and screen (either orientation)."""
        want = (normalize_key(model_name), normalize_key(model_number), normalize_screen(screen_px))
        best = None
        matched: set[str] = set()
        candidates = 0
        for p in self.profiles():
            if p.kind != "microphone" or p.identity.screen_px is None:
                continue
            ident = p.identity
            keys = {
                "model_name": normalize_key(ident.model_name) == want[0],
                "model_number": normalize_key(ident.model_number) == want[1],
                "screen_px": normalize_screen(ident.screen_px) == want[2],
            }
            if all(keys.values()):
                if best is None or (p.timestamp, p.id) > (best.timestamp, best.id):
                    best = p
            elif any(keys.values()):
                candidates += 1
                if len([k for k in keys.values() if k]) > len(matched):
                    matched = {k for k, v in keys.items() if v}
        if best is not None:
            return best
        return NoMatch(tuple(k for k in ("model_name", "model_number", "screen_px") if k in matched),
                       candidates)

    def brand_coverage(self) -> dict[str, int]:
        models: dict[str, set] = {}
        for p in self.profiles():
            if p.is_root:
                continue
            ident = p.identity
            models.setdefault(ident.brand, set()).add(
                (normalize_key(ident.model_name), normalize_key(ident.model_number)))
        return {brand: len(m) for brand, m in sorted(models.items())}


def filter_by_signers(store: ProfileStore, profiles, approved) -> list[Profile]:
    """Profiles whose whole chain is signed by approved emails; roots are exempt."""
    approved = {normalize_key(e) for e in approved}
    kept = []
    for p in profiles:
        try:
            chain = store.trace_chain(p.id)
        except ProfileError:
            continue
        if all(q.is_root or normalize_key(q.signer_email) in approved for q in chain.profiles):
            kept.append(p)
    return kept


def profile_from_report(report: dict, kind: str, identity: DeviceIdentity, parent_id: str | None,
                        signer_email: str, timestamp=None, profile_id: str | None = None) -> Profile:
    """Build a profile from a session report's recovered transducer response."""
    prof = report.get("profile")
    if not prof:
        raise ProfileError("report carries no profile response")
    gain = _decode_floats(prof["gain_db"])
    phase = None if prof.get("phase_rad") is None else _decode_floats(prof["phase_rad"])
    response = FrequencyResponse(prof["freq_hz"], gain, phase)
    quality = {
        "flatness_sd_db": (report.get("flatness") or {}).get("sd_db"),
        "drc": (report.get("drc_fit") or {}).get("params"),
        "sampling_rate_hz": report.get("sample_rate_hz"),
    }
    when = timestamp if timestamp is not None else report.get("started_at") or datetime.now(timezone.utc)
    return Profile(profile_id or new_profile_id(), when, kind, identity, response, parent_id,
                   signer_email, quality)
