import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcert.kl_bounds import (
    BoundInputs,
    binary_kl,
    certify_bounds,
    kl_bound,
    kl_inverse,
    mcallester_bound,
)

mpmath.mp.dps = 50


def kl_mp(u, v):
    u, v = mpmath.mpf(u), mpmath.mpf(v)
    out = mpmath.mpf(0)
    if u > 0:
        out += u * mpmath.log(u / v)
    if u < 1:
        out += (1 - u) * mpmath.log((1 - u) / (1 - v))
    return out


def test_binary_kl_identity():
    assert binary_kl(0.3, 0.3) == 0.0
    assert binary_kl(0.0, 0.0) == 0.0
    assert binary_kl(1.0, 1.0) == 0.0


def test_binary_kl_zero_u():
    assert binary_kl(0.0, 0.5) == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("u,v", [(0.1, 0.3), (0.9, 0.2), (0.5, 0.999), (0.01, 0.02)])
def test_binary_kl_matches_arbitrary_precision(u, v):
    assert binary_kl(u, v) == pytest.approx(float(kl_mp(u, v)), rel=1e-13)


@pytest.mark.parametrize("u,v", [(0.2, 0.0), (0.2, 1.0), (-0.1, 0.5), (0.5, 1.5)])
def test_binary_kl_domain(u, v):
    with pytest.raises(ValueError):
        binary_kl(u, v)


def test_pinsker_on_grid():
    grid = np.linspace(0.005, 0.995, 100)
    for u in grid:
        for v in grid:
            assert binary_kl(u, v) >= 2 * (u - v) ** 2 - 1e-15


@pytest.mark.parametrize("u", [0.0, 0.1, 0.5, 0.99, 1.0])
def test_kl_inverse_zero_budget(u):
    assert kl_inverse(u, 0.0) == u
    assert kl_inverse(u, -3.0) == u


@pytest.mark.parametrize("c", [0.001, 0.01, 0.1, 1.0, 5.0])
def test_kl_inverse_zero_loss_closed_form(c):
    assert kl_inverse(0.0, c) == pytest.approx(-math.expm1(-c), abs=1e-11)


def test_kl_inverse_saturates():
    assert kl_inverse(0.2, 1000.0) == 1.0


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0.0, 0.95), c=st.floats(1e-4, 3.0))
def test_kl_inverse_solves_equation(u, c):
    v = kl_inverse(u, c)
    assert u <= v <= 1.0
    if v < 1.0:
        # v is the first double past the level set; near v = 1 one ulp can move kl by more than 1e-9
        assert binary_kl(u, math.nextafter(v, 0.0)) <= c * (1 + 1e-14)
        assert binary_kl(u, v) >= c * (1 - 1e-14)
        slope = (v - u) / (v * (1 - v))
        assert abs(binary_kl(u, v) - c) <= max(1e-9, 4 * slope * math.ulp(v))


def test_kl_inverse_grid_accuracy():
    for u in np.linspace(0.0, 0.9, 10):
        for c in (0.001, 0.01, 0.1, 0.5, 1.0):
            v = kl_inverse(u, c)
            assert v < 1.0
            assert abs(binary_kl(u, v) - c) < 1e-9


def test_kl_inverse_monotone_in_c_and_u():
    cs = np.linspace(0.0, 2.0, 30)
    for u in (0.0, 0.1, 0.4, 0.8):
        vals = [kl_inverse(u, c) for c in cs]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
    us = np.linspace(0.0, 0.9, 30)
    vals = [kl_inverse(u, 0.05) for u in us]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_mcallester_reference_value():
    b = BoundInputs(0.0, 0.0, m=100, delta=0.05, K=1)
    expected = mpmath.sqrt(mpmath.log(400) / 200)
    assert mcallester_bound(b) == pytest.approx(float(expected), rel=1e-14)
    assert mcallester_bound(b) == pytest.approx(0.173082, abs=1e-6)


def test_mcallester_clamps_and_zero_bracket():
    assert mcallester_bound(BoundInputs(0.1, 1e6, m=100, delta=0.05)) == 1.0
    b = BoundInputs(0.3, 0.0, m=100, delta=0.05)
    b = BoundInputs(0.3, -(b.xi_log + math.log(1 / 0.05)), m=100, delta=0.05)
    assert mcallester_bound(b) == pytest.approx(0.3, abs=1e-15)


def test_kl_bound_reference_value():
    b = BoundInputs(0.0, 0.0, m=100, delta=0.05, K=1)
    assert kl_bound(b) == pytest.approx(-math.expm1(-math.log(400) / 100), abs=1e-11)
    assert kl_bound(b) == pytest.approx(0.058155, abs=1e-6)
    assert kl_bound(b) <= mcallester_bound(b)


def test_default_xi_and_validation():
    b = BoundInputs(0.1, 2.0, m=400, delta=0.01, K=7)
    assert b.xi_log == math.log(40.0)
    assert b.penalty == pytest.approx(math.log(7 * 40 / 0.01))
    for bad in (dict(empirical_loss=1.2), dict(delta=0.0), dict(delta=1.0), dict(m=0), dict(K=0)):
        kwargs = dict(empirical_loss=0.1, complexity=1.0, m=10, delta=0.1, K=1)
        kwargs.update(bad)
        with pytest.raises(ValueError):
            BoundInputs(**kwargs)


@settings(max_examples=150, deadline=None)
@given(loss=st.floats(0.0, 0.9), cx=st.floats(-20.0, 2000.0), m=st.integers(1, 100000),
       delta=st.floats(1e-4, 0.5), K=st.integers(1, 100))
def test_kl_tighter_than_mcallester(loss, cx, m, delta, K):
    b = BoundInputs(loss, cx, m, delta, K)
    kl, mc = kl_bound(b), mcallester_bound(b)
    assert kl >= loss
    if mc < 1:
        assert kl <= mc + 1e-12


def test_bounds_monotone_in_parameters():
    base = dict(empirical_loss=0.2, complexity=30.0, m=500, delta=0.05, K=5)
    for fn in (kl_bound, mcallester_bound):
        def at(**kw):
            args = dict(base)
            args.update(kw)
            return fn(BoundInputs(**args))

        cx = [at(complexity=c) for c in np.linspace(-10, 400, 25)]
        assert all(b >= a for a, b in zip(cx, cx[1:]))
        ks = [at(K=k) for k in range(1, 60, 5)]
        assert all(b >= a for a, b in zip(ks, ks[1:]))
        ms = [at(m=m) for m in range(100, 5000, 300)]
        assert all(b <= a for a, b in zip(ms, ms[1:]))
        ds = [at(delta=d) for d in np.linspace(0.001, 0.9, 20)]
        assert all(b <= a for a, b in zip(ds, ds[1:]))


def test_certificate_components_reproduce_bounds():
    cert = certify_bounds(0.12, 37.5, 4.25, m=500, delta=5e-3, K=50)
    assert cert.components["log_density_ratio"] == 37.5
    assert cert.components["laplacian_integral"] == 4.25
    again = BoundInputs(0.12, 37.5 + 4.25, 500, 5e-3, 50)
    assert kl_bound(again) == cert.kl_inv
    assert mcallester_bound(again) == cert.mcallester
    assert cert.components["penalty"] == pytest.approx(math.log(50 * 2 * math.sqrt(500) / 5e-3))
