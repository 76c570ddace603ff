import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ablab.analytics import (DELTA_RATIO, ApproxParams, FitError, InsufficientCountsError,
                             alpha_approx, chsh_from_counts, eta_approx, fit_efficiency_curve,
                             forward_observables, invert_fit, mean_eta_approx, ols_slope,
                             quadrature_mean_eta, quadrature_oracle_coincidence)
from ablab.dynamics import DriveSchedule, SettingSchedule, integrate
from ablab.hvcore import DetectionModel, coincidence_probability_slit


def params(gamma=0.2, delta=0.3, alpha_tau=0.0, a=math.pi / 4, tau=1.0):
    return ApproxParams(gamma, delta, tau, alpha_tau, a)


def test_alpha_approx_limits():
    p = params()
    assert alpha_approx(1.0, p) == pytest.approx(0.0)
    assert alpha_approx(500.0, p) == pytest.approx(math.pi / 4)
    with pytest.raises(ValueError):
        alpha_approx(0.5, p)


def test_approx_warns_above_critical():
    with pytest.warns(RuntimeWarning):
        params(gamma=0.5)


def _approx_error(gt, n=500):
    hist = np.zeros(n + 1)
    tr = integrate(1.0, n, DriveSchedule.constant(gt), SettingSchedule.constant(math.pi / 4, 0),
                   hist, 10.0)
    m = tr.times >= 1.0
    return np.max(np.abs(tr.samples[m] - alpha_approx(tr.times[m], params(gamma=gt))))


def test_alpha_approx_vs_integration():
    # the approximation ignores the delay; at Γτ = 0.2 it stays within 10% of the swing
    assert _approx_error(0.2) < 0.1 * math.pi / 4
    errs = [_approx_error(g) for g in (0.05, 0.15, 0.3)]
    assert errs[0] < errs[1] < errs[2]


def test_eta_approx_examples():
    p = params(alpha_tau=math.pi / 4)
    assert np.all(eta_approx([1.0, 3.0, 9.0], p) == 1.0)
    d = DELTA_RATIO * 0.3
    p = params(alpha_tau=math.pi / 4 + d)
    assert eta_approx(1.0, p) == pytest.approx(math.exp(-1))
    t = 1.0 + math.log(2) / 0.2
    assert eta_approx(t, p) == pytest.approx(math.exp(-0.25))


def test_mean_eta_approx():
    d = math.sqrt(0.1)
    assert mean_eta_approx(1.0, params(delta=d)) == pytest.approx(0.42, abs=0.005)
    for delta in (0.05, 0.1, 0.2, 0.3):
        v = mean_eta_approx(1.0, params(delta=delta))
        assert v == pytest.approx(1.34 * delta, rel=0.005)
    p = params(delta=0.1)
    h = 1e-6
    slope = (mean_eta_approx(1.0 + h, p) - mean_eta_approx(1.0, p)) / h
    assert slope == pytest.approx(1.34 * 0.2 * 0.1, rel=1e-3)
    assert mean_eta_approx(5.0, params(gamma=0.0, delta=0.1)) == pytest.approx(math.sqrt(math.pi) * DELTA_RATIO * 0.1)
    assert mean_eta_approx(100.0, params(delta=0.1)) == 1.0


def test_mean_eta_warns_wide():
    with pytest.warns(RuntimeWarning):
        mean_eta_approx(1.0, params(delta=0.5))


def test_invert_fit_anchor():
    r = invert_fit(0.03, 1.2e-3, 3.0)
    assert r.delta_est == pytest.approx(0.067, abs=0.005)
    assert r.gamma_est == pytest.approx(0.040, abs=0.001)
    assert "factor=3.0" in r.as_text()


@given(delta=st.floats(1e-3, 1.0), gamma=st.floats(1e-4, 10.0), factor=st.floats(1.0, 10.0))
def test_invert_forward_identity(delta, gamma, factor):
    eta0, slope = forward_observables(delta, gamma, factor)
    r = invert_fit(eta0, slope, factor)
    assert r.delta_est == pytest.approx(delta, rel=1e-12)
    assert r.gamma_est == pytest.approx(gamma, rel=1e-12)


def test_invert_fit_errors():
    for args in ((0.0, 1.0), (0.1, 0.0), (0.1, 1.0, 0.5)):
        with pytest.raises(FitError):
            invert_fit(*args)


def test_ols_slope_exact_line():
    t = np.linspace(0, 5, 11)
    s, c, se = ols_slope(t, 2.5 * t - 1)
    assert s == pytest.approx(2.5) and c == pytest.approx(-1) and se == pytest.approx(0, abs=1e-12)


def test_fit_curve_on_exponential():
    tau, g, delta = 1.0, 0.2, 0.1
    t = np.linspace(0, 8, 801)
    eta = np.where(t < tau, 1.34 * delta, 1.34 * delta * np.exp(g * (t - tau)))
    fit = fit_efficiency_curve(t, eta, tau, gamma_seed=g)
    assert fit.result.delta_est == pytest.approx(delta, rel=1e-3)
    # an OLS line through one e-fold of exp(x) has slope 12 * (3 - e) / 2
    assert fit.result.gamma_est == pytest.approx(g * 6 * (3 - math.e), rel=1e-3)


@pytest.mark.parametrize("diff", [0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8])
@pytest.mark.parametrize("d", [0.1, 0.45, 1.0])
def test_quadrature_matches_closed_form(diff, d):
    m = DetectionModel("slit", d)
    for ports in (("+", "+"), ("+", "-")):
        q = quadrature_oracle_coincidence(m, 0.2, 0.2 + diff, ports)
        assert q == pytest.approx(coincidence_probability_slit(0.2, 0.2 + diff, ports, d), abs=1e-6)


def test_quadrature_full_slit_and_gaussian_ratio():
    assert quadrature_oracle_coincidence(DetectionModel("slit", 2 * math.pi), 0.0, 1.0) == \
        pytest.approx(0.25, abs=1e-6)
    m = DetectionModel("gaussian", 1e-2)
    r = quadrature_oracle_coincidence(m, 0.0, 0.0) / quadrature_oracle_coincidence(m, 0.0, math.pi / 4)
    assert r == pytest.approx(2.0, rel=1e-3)


def test_quadrature_mean_eta_limits():
    q = quadrature_mean_eta(DetectionModel("slit", 2 * math.pi), "full_circle")
    assert q["mean"] == pytest.approx(1.0) and q["pooled"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        quadrature_mean_eta(DetectionModel("slit", 1.0), "half_circle")


def test_chsh_from_counts_cases():
    ideal = np.array([[math.cos(a - b) ** 2, math.sin(a - b) ** 2, math.sin(a - b) ** 2,
                       math.cos(a - b) ** 2] for a, b in
                      ((0, math.pi / 8), (0, 3 * math.pi / 8), (math.pi / 4, math.pi / 8),
                       (math.pi / 4, 3 * math.pi / 8))])
    s, _ = chsh_from_counts(ideal)
    assert s == pytest.approx(2 * math.sqrt(2))
    s, err = chsh_from_counts(np.full((4, 4), 250))
    assert s == 0.0 and err > 0
    bad = np.full((4, 4), 10)
    bad[2] = 0
    with pytest.raises(InsufficientCountsError):
        chsh_from_counts(bad)
