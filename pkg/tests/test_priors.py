import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import ortho_group

from flowcert.priors import PriorSpec, log_density, sample


def test_default_variance_is_inverse_dimension():
    assert PriorSpec(250).variance == pytest.approx(1 / 250)
    with pytest.raises(ValueError):
        PriorSpec(3, variance=0.0)


def test_sampling_is_deterministic_per_seed():
    spec = PriorSpec(17)
    np.testing.assert_array_equal(sample(spec, 5), sample(spec, 5))
    assert not np.array_equal(sample(spec, 5), sample(spec, 6))


def test_sample_moments():
    assert PriorSpec(1, variance=2.5).sample(0).shape == (1,)
    big = PriorSpec(10**6, variance=2.5).sample(11)
    assert abs(big.var() / 2.5 - 1) < 0.01
    assert abs(big.mean()) < 4 * math.sqrt(2.5) / 1000


def test_log_density_standard_normal_mode():
    assert log_density(PriorSpec(1, 1.0), np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_density(PriorSpec(1, 1.0), np.zeros(1)) == pytest.approx(-0.918939, abs=1e-6)


def test_log_ratio_closed_form_for_inverse_dimension_variance():
    rng = np.random.default_rng(0)
    N = 40
    spec = PriorSpec(N)
    h0, hT = rng.normal(size=N), rng.normal(size=N)
    expected = N / 2 * (hT @ hT - h0 @ h0)
    assert spec.log_ratio(h0, hT) == pytest.approx(expected, rel=1e-13)
    assert spec.log_ratio(h0, hT) == pytest.approx(spec.log_density(h0) - spec.log_density(hT), rel=1e-10)
    assert spec.log_ratio(hT, h0) == -spec.log_ratio(h0, hT)


def test_density_matches_quadrature():
    spec = PriorSpec(1, variance=0.7)

    def dens(x):
        return math.exp(spec.log_density(np.array([x])))

    total, _ = quad(dens, -math.inf, math.inf, epsabs=1e-13)
    assert abs(total - 1) < 1e-9
    # CDF check against erf
    part, _ = quad(dens, -math.inf, 0.4, epsabs=1e-13)
    assert abs(part - 0.5 * (1 + math.erf(0.4 / math.sqrt(2 * 0.7)))) < 1e-9


def test_rotation_invariance():
    spec = PriorSpec(6)
    rng = np.random.default_rng(3)
    for k in range(5):
        h = rng.normal(size=6)
        Q = ortho_group.rvs(6, random_state=k)
        assert spec.log_density(Q @ h) == pytest.approx(spec.log_density(h), rel=1e-12)
