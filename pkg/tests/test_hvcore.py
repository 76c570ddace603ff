import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ablab.analytics import chsh_from_counts, chsh_probability_table
from ablab.hvcore import (SQRT2, DetectionModel, HiddenPair, Outcome, PairType, ParameterError,
                          PortProbabilities, Station, Substate, chsh_closed_form,
                          coincidence_probability_slit, detection_probabilities,
                          efficiency_static, port_probabilities, sample_outcome,
                          simulate_static_counts, wrap)

angles = st.floats(-20, 20, allow_nan=False)


def test_gate_station_exact_match():
    for delta in (0.01, 0.45, 3.0):
        p = detection_probabilities(HiddenPair(PairType.ALPHA, 0.7, Substate.PLUS), Station.A, 0.7,
                                    DetectionModel("slit", delta))
        assert (p.p_plus, p.p_minus) == (1.0, 0.0)


def test_malus_station_aligned():
    p = detection_probabilities(HiddenPair(PairType.ALPHA, 1.1, Substate.PLUS), Station.B, 1.1,
                                DetectionModel("slit", 0.3))
    assert p.p_plus == pytest.approx(1.0) and p.p_minus == pytest.approx(0.0)


def test_gaussian_one_width_off():
    d = 0.4
    p = detection_probabilities(HiddenPair(PairType.ALPHA, 0.2 + d, Substate.PLUS), Station.A, 0.2,
                                DetectionModel("gaussian", d))
    assert p.p_plus == pytest.approx(math.exp(-1)) and p.p_minus == 0.0


def test_minus_substate_and_beta_mirror():
    m = DetectionModel("gaussian", 0.5)
    pa = detection_probabilities(HiddenPair(PairType.ALPHA, 0.3, Substate.MINUS), Station.A, 0.0, m)
    pb = detection_probabilities(HiddenPair(PairType.BETA, 0.3, Substate.MINUS), Station.B, 0.0, m)
    assert pa == pb
    assert pa.p_plus == 0.0 and pa.p_minus == pytest.approx(math.exp(-0.36))


def test_invalid_widths():
    with pytest.raises(ParameterError):
        DetectionModel("slit", 7.0)
    with pytest.raises(ParameterError):
        DetectionModel("gaussian", 0.0)
    with pytest.raises(ValueError):
        DetectionModel("triangle", 1.0)


@given(value=angles, setting=angles, delta=st.floats(0.01, 6.28),
       ptype=st.sampled_from(list(PairType)), sub=st.sampled_from(list(Substate)),
       station=st.sampled_from(list(Station)), kind=st.sampled_from(["slit", "gaussian"]))
def test_probabilities_bounded(value, setting, delta, ptype, sub, station, kind):
    p = detection_probabilities(HiddenPair(ptype, value, sub), station, setting, DetectionModel(kind, delta))
    assert p.p_plus + p.p_minus <= 1 + 1e-12
    malus = (ptype == PairType.ALPHA) != (station == Station.A)
    if malus:
        assert p.p_plus + p.p_minus == pytest.approx(1.0)


@given(x=angles, d1=st.floats(0.01, 3.0), d2=st.floats(0.01, 3.0))
def test_slit_acceptance_monotone(x, d1, d2):
    small, big = sorted((d1, d2))
    if DetectionModel("slit", small).acceptance(x) == 1.0:
        assert DetectionModel("slit", big).acceptance(x) == 1.0


@given(x=angles)
def test_wrap_range(x):
    w = float(wrap(x))
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(x), abs_tol=1e-9)


def test_sample_outcome_boundaries():
    assert sample_outcome(PortProbabilities(1, 0), 0.7) is Outcome.PLUS
    assert sample_outcome(PortProbabilities(0, 0), 0.0) is Outcome.NONE
    assert sample_outcome(PortProbabilities(0.5, 0.5), 0.5) is Outcome.MINUS
    with pytest.raises(ParameterError):
        PortProbabilities(0.7, 0.6)


def test_coincidence_limits():
    for a, b in ((0.0, 0.3), (1.0, -2.0)):
        assert coincidence_probability_slit(a, b, ("+", "+"), 2 * math.pi) == pytest.approx(0.25)
    d = 1e-4
    p = coincidence_probability_slit(0.0, 0.5, ("+", "+"), d) / (d / (2 * math.pi))
    assert p == pytest.approx(0.5 * math.cos(0.5) ** 2, rel=1e-6)
    assert coincidence_probability_slit(0.1, 0.4, ("-", "-"), 0.45) == \
        coincidence_probability_slit(0.1, 0.4, ("+", "+"), 0.45)


def test_chsh_closed_form_values():
    assert chsh_closed_form(1e-9) == pytest.approx(2 * SQRT2)
    assert chsh_closed_form(0.45) == pytest.approx(2.734, abs=5e-3)
    assert chsh_closed_form(math.pi) == pytest.approx(0.0, abs=1e-15)


@given(d=st.floats(1e-6, math.pi))
def test_chsh_closed_form_even_and_bounded(d):
    assert chsh_closed_form(d) == chsh_closed_form(-d)
    assert chsh_closed_form(d) <= 2 * SQRT2


@pytest.mark.parametrize("d", [0.1, 0.45, 1.0, 2.0])
def test_chsh_from_exact_probabilities(d):
    s, _ = chsh_from_counts(chsh_probability_table(d))
    assert s == pytest.approx(chsh_closed_form(d), abs=1e-9)


def test_efficiency_static():
    assert efficiency_static(0.5) == 2 / 3
    assert efficiency_static(1.0) == 1.0
    assert efficiency_static(0.0) == 0.0
    with pytest.raises(ParameterError):
        efficiency_static(1.5)


@pytest.mark.parametrize("diff", [0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8])
@pytest.mark.parametrize("d", [0.1, 0.45, 1.0])
def test_monte_carlo_matches_slit_closed_form(diff, d):
    n = 1_000_000
    counts = simulate_static_counts(n, 0.3, 0.3 + diff, DetectionModel("slit", d),
                                    np.random.default_rng([17, int(diff * 100), int(d * 100)]))
    p = coincidence_probability_slit(0.3, 0.3 + diff, ("+", "+"), d)
    se = math.sqrt(p * (1 - p) / n)
    assert abs(counts[0] / n - p) < 3 * se + 1e-12


def test_port_probabilities_vectorised():
    m = DetectionModel("gaussian", 0.3)
    v = np.linspace(0, 6, 7)
    pp, pm = port_probabilities(np.zeros(7), v, np.zeros(7), Station.A, 0.0, m)
    assert pp.shape == (7,) and np.all(pm == 0)
