import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ablab import _jit
from ablab.kernels import euler_delay, greedy_match


def _both(fn, *args):
    prev = _jit.backend()
    try:
        _jit.set_backend("numba")
        a = fn(*args)
        _jit.set_backend("numpy")
        b = fn(*args)
    finally:
        _jit.set_backend(prev)
    return a, b


def test_euler_backends_identical():
    rng = np.random.default_rng(0)
    n = 20
    hist = rng.uniform(-3, 3, size=(5, n + 1))
    gamma_lag = rng.uniform(0, 2, size=300)
    target_lag = rng.uniform(-1, 1, size=300)
    a, b = _both(euler_delay, hist, gamma_lag, target_lag, n, 0.05)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5, n + 1 + 300)
    np.testing.assert_array_equal(a[:, :n + 1], hist)


def test_euler_rejects_bad_history():
    with pytest.raises(ValueError):
        euler_delay(np.zeros((2, 5)), np.zeros(3), np.zeros(3), 6, 0.1)


def test_euler_constant_drive_single_step():
    hist = np.array([[1.0, 2.0, 3.0]])
    out = euler_delay(hist, np.array([2.0]), np.array([0.5]), 2, 0.1)
    # x[3] = x[2] - h G (x[0] - target)
    assert out[0, 3] == pytest.approx(3.0 - 0.1 * 2.0 * (1.0 - 0.5))


streams = st.lists(st.integers(0, 200), max_size=60).map(lambda x: np.sort(np.array(x, dtype=np.int64)))


@settings(max_examples=150, deadline=None)
@given(ta=streams, tb=streams, w=st.integers(0, 6))
def test_matching_backends_identical(ta, tb, w):
    (ia1, ib1), (ia2, ib2) = _both(greedy_match, ta, tb, w)
    np.testing.assert_array_equal(ia1, ia2)
    np.testing.assert_array_equal(ib1, ib2)


@settings(max_examples=150, deadline=None)
@given(ta=streams, tb=streams, w=st.integers(0, 6))
def test_matching_properties(ta, tb, w):
    ia, ib = greedy_match(ta, tb, w)
    assert len(set(ia.tolist())) == ia.size
    assert len(set(ib.tolist())) == ib.size
    assert np.all(np.abs(ta[ia] - tb[ib]) <= w)
    # swapping roles gives the same pairs
    jb, ja = greedy_match(tb, ta, w)
    assert set(zip(ia.tolist(), ib.tolist())) == set(zip(ja.tolist(), jb.tolist()))
    # a wider window keeps every pair
    wa, wb = greedy_match(ta, tb, w + 3)
    assert set(zip(ia.tolist(), ib.tolist())) <= set(zip(wa.tolist(), wb.tolist()))


def test_matching_prefers_closest():
    ia, ib = greedy_match(np.array([10]), np.array([8, 11]), 3)
    assert (ia.tolist(), ib.tolist()) == ([0], [1])


def test_matching_tie_goes_to_earliest():
    ia, ib = greedy_match(np.array([10]), np.array([9, 11]), 1)
    assert ib.tolist() == [0]


def test_backend_switch_validation():
    with pytest.raises(ValueError):
        _jit.set_backend("fortran")
