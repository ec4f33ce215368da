"""Static dynamic-range-compression curve: evaluation, least-squares fit, gate.

Levels are in dB (power re full scale). The curve is linear below
``T - W/2``, has slope ``Q`` above ``T + W/2`` and a quadratic knee in between.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

RMS_GATE_DB = 1.0

GRID_W = (1.0, 5.0, 10.0, 20.0)
GRID_Q = (0.3, 0.5, 0.7, 1.0)
GRID_T_STEPS = 9
N_REFINED_STARTS = 6


@dataclass(frozen=True)
class DrcParams:
    gain_db: float
    T: float
    W: float
    Q: float
    background_db: float | None = None

    def __post_init__(self):
        if not self.W >= 0:
            raise ValueError(f"knee width W must be >= 0, got {self.W}")
        if not 0 < self.Q <= 1:
            raise ValueError(f"compression slope Q must be in (0, 1], got {self.Q}")

    def to_dict(self) -> dict:
        return {"gain_db": self.gain_db, "T": self.T, "W": self.W, "Q": self.Q,
                "background_db": self.background_db}

    @classmethod
    def from_dict(cls, d: dict) -> "DrcParams":
        return cls(float(d["gain_db"]), float(d["T"]), float(d["W"]), float(d["Q"]),
                   None if d.get("background_db") is None else float(d["background_db"]))


@dataclass(frozen=True)
class GainPoint:
    in_db: float
    out_db: float
    thd: float = 0.0


@dataclass(frozen=True)
class DrcFit:
    params: DrcParams
    rms_error_db: float
    accepted: bool

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "rms_error_db": self.rms_error_db,
                "accepted": self.accepted}


class DrcFitError(RuntimeError):
    def __init__(self, message: str, best_rms_db: float = float("nan")):
        super().__init__(message)
        self.best_rms_db = best_rms_db


def passes_rms_gate(rms_error_db: float, limit_db: float = RMS_GATE_DB) -> bool:
    return bool(rms_error_db <= limit_db)


def compressed_db(in_db, T: float, W: float, Q: float):
    """Compression curve without the output gain."""
    x = np.asarray(in_db, dtype=float)
    out = x.copy()
    upper = x > T + W / 2
    out[upper] = T + Q * (x[upper] - T)
    if W > 0:
        knee = ~upper & (x > T - W / 2)
        out[knee] = x[knee] - (1 - Q) * (x[knee] - (T - W / 2)) ** 2 / (2 * W)
    return out if out.ndim else float(out)


def drc_out(in_db, params: DrcParams):
    out = np.asarray(compressed_db(in_db, params.T, params.W, params.Q)) + params.gain_db
    if params.background_db is not None:
        # power-domain sum, computed in log space to avoid overflow
        k = np.log(10) / 10
        out = np.logaddexp(out * k, params.background_db * k) / k
    return out if out.ndim else float(out)


def knee_floor(params: DrcParams) -> float:
    """Highest input level that is still on the linear branch."""
    return params.T - params.W / 2


def mls_level_db(burst_db: float, params: DrcParams | None, relative_to_T: bool) -> float:
    """MLS digital level, either absolute or relative to the fitted threshold."""
    if not relative_to_T:
        return burst_db
    if params is None:
        raise ValueError("a DRC fit is required to set the MLS level relative to T")
    return params.T + burst_db


def _faint_end_flattens(in_db: np.ndarray, out_db: np.ndarray) -> bool:
    lowest = in_db.min()
    sel = in_db <= lowest + 10
    if sel.sum() < 2 or np.ptp(in_db[sel]) <= 0:
        return False
    slope = np.polyfit(in_db[sel], out_db[sel], 1)[0]
    return bool(slope < 0.5)


def _unpack(theta):
    T, w, q = theta[:3]
    return T, abs(w), float(np.clip(q, 1e-3, 1.0))


def fit_drc(points, background: bool | None = None, gate_db: float = RMS_GATE_DB) -> DrcFit:
    """Least-squares fit of the compression curve to a measured gain curve.

    A deterministic coarse grid over (T, W, Q) seeds Nelder-Mead refinements;
    the output gain is solved in closed form for every candidate. With
    ``background=None`` an additive background term is fitted only when the
    faint end of the curve flattens.
    """
    pts = list(points)
    if len(pts) < 6:
        raise DrcFitError(f"need at least 6 gain points, got {len(pts)}")
    in_db = np.array([p.in_db for p in pts], dtype=float)
    out_db = np.array([p.out_db for p in pts], dtype=float)
    if not (np.all(np.isfinite(in_db)) and np.all(np.isfinite(out_db))):
        raise DrcFitError("gain points must be finite")
    if np.ptp(in_db) < 20:
        raise DrcFitError(f"gain points span {np.ptp(in_db):.1f} dB of input; need >= 20 dB")

    lo, hi = float(in_db.min()), float(in_db.max())

    def residual(theta):
        T, W, Q = _unpack(theta)
        c = compressed_db(in_db, T, W, Q)
        gain = np.mean(out_db - c)
        return out_db - c - gain, gain

    def cost(theta):
        r, _ = residual(theta)
        return float(np.mean(r**2))

    starts = [
        (T, W, Q)
        for T, W, Q in itertools.product(np.linspace(lo, hi, GRID_T_STEPS), GRID_W, GRID_Q)
    ]
    starts.sort(key=cost)
    best = None
    for start in starts[:N_REFINED_STARTS]:
        res = minimize(cost, np.array(start), method="Nelder-Mead",
                       options={"xatol": 1e-9, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
        if best is None or res.fun < best.fun:
            best = res
    if not best.success and best.fun > (gate_db / 10) ** 2:
        raise DrcFitError(f"DRC fit did not converge: {best.message}", float(np.sqrt(best.fun)))

    T, W, Q = _unpack(best.x)
    _, gain = residual(best.x)
    params = DrcParams(float(gain), float(T), float(W), float(Q))

    if background is None:
        background = _faint_end_flattens(in_db, out_db)
    if background:
        params = _refine_with_background(in_db, out_db, params)

    rms = float(np.sqrt(np.mean((out_db - drc_out(in_db, params)) ** 2)))
    return DrcFit(params, rms, passes_rms_gate(rms, gate_db))


def _refine_with_background(in_db, out_db, params: DrcParams) -> DrcParams:
    """Bounded refit of all five parameters, started from fits that ignore the
    faint end as well as from the plain fit."""
    lo, hi = float(in_db.min()), float(in_db.max())
    span = hi - lo
    floor0 = float(out_db.min())
    seeds = [params]
    upper = in_db >= lo + 15
    if upper.sum() >= 6 and np.ptp(in_db[upper]) >= 20:
        seeds.append(fit_drc([GainPoint(a, b) for a, b in zip(in_db[upper], out_db[upper])],
                             background=False, gate_db=np.inf).params)
    bounds = [(None, None), (lo - span, hi + span), (0.0, 2 * span), (1e-3, 1.0),
              (floor0 - 60.0, float(out_db.max()))]

    def model(theta):
        gain, T, W, Q, bg = theta
        p = DrcParams(float(gain), float(T), float(max(W, 0.0)), float(np.clip(Q, 1e-3, 1.0)), float(bg))
        return p, drc_out(in_db, p)

    def cost(theta):
        return float(np.mean((out_db - model(theta)[1]) ** 2))

    best = None
    for seed in seeds:
        for bg0 in (floor0, floor0 - 10.0, floor0 - 30.0):
            x0 = np.array([seed.gain_db, seed.T, seed.W, seed.Q, bg0])
            x0 = np.array([np.clip(v, b0 if b0 is not None else -np.inf, b1 if b1 is not None else np.inf)
                           for v, (b0, b1) in zip(x0, bounds)])
            res = minimize(cost, x0, method="Nelder-Mead", bounds=bounds,
                           options={"xatol": 1e-9, "fatol": 1e-14, "maxiter": 40000, "maxfev": 80000})
            if best is None or res.fun < best.fun:
                best = res
    p, _ = model(best.x)
    no_bg = float(np.mean((out_db - drc_out(in_db, params)) ** 2))
    return p if best.fun < no_bg else params
