import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soundcal.drc_model import (DrcFitError, DrcParams, GainPoint, compressed_db, drc_out, fit_drc,
                                knee_floor, mls_level_db, passes_rms_gate)

params_st = st.builds(DrcParams, st.floats(-40, 10), st.floats(-50, -5), st.floats(0, 30),
                      st.floats(0.05, 1.0))


def curve(params, lo=-60.0, hi=-3.0, step=2.0, noise=0.0, seed=0):
    x = np.arange(lo, hi + 1e-9, step)
    y = drc_out(x, params) + np.random.default_rng(seed).normal(0, noise, x.size) * (noise > 0)
    return [GainPoint(float(a), float(b)) for a, b in zip(x, y)]


def test_branch_examples():
    p = DrcParams(gain_db=-30, T=-25, W=10, Q=0.5)
    assert drc_out(p.T - p.W, p) == pytest.approx(p.T - p.W + p.gain_db)
    assert drc_out(p.T + p.W, p) == pytest.approx(p.T + 0.5 * p.W + p.gain_db)
    assert drc_out(p.T, p) == pytest.approx(p.T - (1 - p.Q) * p.W / 8 + p.gain_db)


def test_hard_knee():
    assert compressed_db(-10.0, -20.0, 0.0, 0.5) == pytest.approx(-15.0)
    assert compressed_db(-30.0, -20.0, 0.0, 0.5) == pytest.approx(-30.0)


def test_background_term():
    p = DrcParams(0, -20, 10, 0.5, background_db=-70)
    assert drc_out(-70.0, p) == pytest.approx(-70 + 10 * np.log10(2))
    assert drc_out(-10.0, p) == pytest.approx(drc_out(-10.0, DrcParams(0, -20, 10, 0.5)), abs=1e-4)


def test_param_validation():
    with pytest.raises(ValueError):
        DrcParams(0, -20, -1, 0.5)
    with pytest.raises(ValueError):
        DrcParams(0, -20, 1, 0.0)
    with pytest.raises(ValueError):
        DrcParams(0, -20, 1, 1.5)


def test_knee_floor_examples():
    assert knee_floor(DrcParams(0, -21, 10, 0.5)) == -26
    assert knee_floor(DrcParams(0, -21, 0, 0.5)) == -21
    assert mls_level_db(-14, DrcParams(0, -21, 10, 0.5), True) == -35
    assert mls_level_db(-34, None, False) == -34
    with pytest.raises(ValueError):
        mls_level_db(-14, None, True)


@given(params_st)
def test_monotone_continuous_and_slopes(p):
    x = np.arange(p.T - 3 * max(p.W, 1), p.T + 3 * max(p.W, 1), 0.1)
    y = drc_out(x, p)
    assert np.all(np.diff(y) >= -1e-12)
    for edge in (p.T - p.W / 2, p.T + p.W / 2):
        assert drc_out(edge - 1e-9, p) == pytest.approx(drc_out(edge + 1e-9, p), abs=1e-7)
    h = 1e-4
    lo = p.T - p.W / 2 - 5
    hi = p.T + p.W / 2 + 5
    assert (drc_out(lo + h, p) - drc_out(lo - h, p)) / (2 * h) == pytest.approx(1.0, abs=1e-3)
    assert (drc_out(hi + h, p) - drc_out(hi - h, p)) / (2 * h) == pytest.approx(p.Q, abs=1e-3)


@given(params_st)
def test_knee_is_once_differentiable(p):
    if p.W == 0:
        return
    h = min(1e-5, p.W * 1e-4)
    for edge in (p.T - p.W / 2, p.T + p.W / 2):
        left = (drc_out(edge, p) - drc_out(edge - h, p)) / h
        right = (drc_out(edge + h, p) - drc_out(edge, p)) / h
        assert left == pytest.approx(right, abs=1e-3)


def test_fit_noiseless_round_trip():
    true = DrcParams(-30, -25, 10, 0.5)
    fit = fit_drc(curve(true))
    p = fit.params
    assert abs(p.gain_db - true.gain_db) <= 0.5
    assert abs(p.T - true.T) <= 0.5
    assert abs(p.W - true.W) <= 0.5
    assert abs(p.Q - true.Q) <= 0.05
    assert fit.rms_error_db < 1e-6
    assert fit.accepted


def test_fit_with_noise():
    fit = fit_drc(curve(DrcParams(-30, -25, 10, 0.5), noise=0.3, seed=3))
    assert fit.rms_error_db < 0.5
    assert fit.accepted


def test_fit_linear_system():
    pts = [GainPoint(x, x - 12.0) for x in np.arange(-60.0, -3.0, 3.0)]
    fit = fit_drc(pts)
    pred = drc_out(np.array([q.in_db for q in pts]), fit.params)
    assert np.sqrt(np.mean((pred - np.array([q.out_db for q in pts])) ** 2)) < 0.1


def test_fit_fixed_point_and_shift():
    fit = fit_drc(curve(DrcParams(-5, -20, 8, 0.4), noise=0.3, seed=1))
    refit = fit_drc(curve(fit.params))
    assert refit.rms_error_db < 1e-6
    pts = curve(DrcParams(-5, -20, 8, 0.4))
    a = fit_drc(pts).params
    b = fit_drc([GainPoint(q.in_db, q.out_db + 7.0) for q in pts]).params
    assert b.gain_db - a.gain_db == pytest.approx(7.0, abs=1e-3)
    for name in ("T", "W", "Q"):
        assert getattr(b, name) == pytest.approx(getattr(a, name), abs=1e-3)


def test_fit_errors():
    with pytest.raises(DrcFitError, match="at least 6"):
        fit_drc(curve(DrcParams(0, -20, 5, 0.5))[:5])
    with pytest.raises(DrcFitError, match="20 dB"):
        fit_drc([GainPoint(x, x) for x in np.arange(-20.0, -5.0, 2.0)])


def test_background_fit_when_faint_end_flattens():
    true = DrcParams(0, -20, 10, 0.5, background_db=-75)
    pts = curve(true, lo=-90)
    fit = fit_drc(pts)
    assert fit.params.background_db is not None
    assert fit.rms_error_db < 0.05
    assert fit_drc(curve(DrcParams(0, -20, 10, 0.5))).params.background_db is None


def test_gate_boundary():
    assert passes_rms_gate(1.0)
    assert not passes_rms_gate(1.0 + 1e-9)
    assert passes_rms_gate(1.0 - 1e-9)
