import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import eval_gegenbauer

from singdot.errors import DegreeOverflow, SampleOutOfRegion
from singdot.gegenbauer import (
    GegenbauerEvaluator,
    bernstein_walsh_check,
    bound_check_real,
    gegenbauer_derivative,
    gegenbauer_eval,
    generating_series,
)


def test_low_degree_closed_forms():
    # nu = 1/2 reduces to Legendre: P2 = (3z^2-1)/2, P3 = (5z^3-3z)/2,
    # P4 = (35z^4-30z^2+3)/8
    assert_allclose(gegenbauer_eval(2, 0.5, 0.5), -0.125, rtol=1e-15)
    assert_allclose(gegenbauer_eval(3, 0.5, 0.7), -0.1925, rtol=1e-13)
    assert_allclose(gegenbauer_eval(4, 0.5, 0.7), -0.4120625, rtol=1e-13)
    # nu = 1: C_2^1(z) = 4z^2 - 1
    assert_allclose(gegenbauer_eval(2, 1.0, 0.3), -0.64, rtol=1e-14)
    # C_1^nu(z) = 2 nu z
    assert_allclose(gegenbauer_eval(1, 1.5, 0.2 + 0.1j), 0.6 + 0.3j, rtol=1e-15)


def test_against_scipy_on_real_axis():
    rng = np.random.default_rng(7)
    z = rng.uniform(-1.0, 1.0, size=50)
    for nu in (0.5, 1.0, 1.5, 2.5):
        ev = GegenbauerEvaluator(nu, 40)
        vals = ev.eval_many(40, z.astype(complex))
        for m in range(41):
            assert_allclose(vals[m].real, eval_gegenbauer(m, nu, z),
                            rtol=1e-10, atol=1e-12)


def test_generating_function_oracle():
    # partial sums of sum C_j t^j must match (1 - 2tz + t^2)^(-nu)
    rng = np.random.default_rng(11)
    for _ in range(20):
        nu = rng.uniform(0.5, 3.0)
        z = rng.uniform(-0.9, 0.9) + 1j * rng.uniform(-0.3, 0.3)
        t = 0.3 * np.exp(1j * rng.uniform(0, 2 * np.pi))
        exact = (1.0 - 2.0 * t * z + t * t) ** (-nu)
        partial = generating_series(nu, z, t, terms=60)
        assert_allclose(partial, exact, rtol=1e-12)


def test_generating_function_truncation_decays():
    nu, z, t = 0.5, 0.4 + 0.2j, 0.3
    exact = (1.0 - 2.0 * t * z + t * t) ** (-nu)
    err = [abs(generating_series(nu, z, t, terms=k) - exact) for k in (5, 10, 20)]
    # geometric decay in the number of retained terms
    assert err[1] < 0.1 * err[0]
    assert err[2] < 0.01 * err[1]


def test_parity():
    rng = np.random.default_rng(3)
    z = rng.normal(size=20) + 1j * rng.normal(size=20)
    ev = GegenbauerEvaluator(0.5, 30)
    plus = ev.eval_many(30, z)
    minus = ev.eval_many(30, -z)
    for m in range(31):
        assert_allclose(minus[m], (-1.0) ** m * plus[m], rtol=1e-12, atol=1e-12)


def test_derivative_identity_vs_fd():
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(10):
        nu = rng.uniform(0.5, 2.0)
        m = int(rng.integers(1, 12))
        z = rng.uniform(-0.8, 0.8) + 1j * rng.uniform(-0.2, 0.2)
        fd = (gegenbauer_eval(m, nu, z + h) - gegenbauer_eval(m, nu, z - h)) / (2 * h)
        assert_allclose(gegenbauer_derivative(m, nu, z), fd, rtol=1e-7, atol=1e-9)
    assert gegenbauer_derivative(0, 0.5, 0.3) == 0.0


def test_eval_many_matches_single():
    ev = GegenbauerEvaluator(1.0, 20)
    z = np.array([0.2 + 0.3j, -0.7 + 0.0j])
    many = ev.eval_many(15, z)
    for m in (0, 3, 9, 15):
        assert_allclose(ev.eval(m, z), many[m], rtol=0, atol=0)


def test_real_interval_bound():
    # n = 3: |C_j^{1/2}| <= 1 on [-1, 1] (Legendre), so the measured constant
    # against j^{n-3} = 1 is exactly 1 (attained at the endpoints)
    out = bound_check_real(3, 60)
    assert_allclose(out["constant"], 1.0, rtol=1e-12)
    # n = 4: C_j^1 = U_j with |U_j| = j + 1 at the endpoints, ratio <= 2
    out4 = bound_check_real(4, 60)
    assert out4["constant"] <= 2.0 + 1e-12
    assert out4["constant"] >= 1.0


def test_bernstein_walsh_region():
    # r0 = 2 gives the disk |z| <= (4 - 1) / 4 = 0.75
    rng = np.random.default_rng(13)
    w = rng.uniform(0, 0.75, size=40) * np.exp(1j * rng.uniform(0, 2 * np.pi, 40))
    out = bernstein_walsh_check(3, 2.0, w, j_max=50)
    assert_allclose(out["region_radius"], 0.75, rtol=1e-15)
    # growth inside the disk stays below r0^j times a modest constant
    assert out["constant"] <= 2.0
    with pytest.raises(SampleOutOfRegion):
        bernstein_walsh_check(3, 2.0, np.array([0.8 + 0.0j]), j_max=10)


def test_degree_overflow():
    ev = GegenbauerEvaluator(0.5, max_degree=10)
    with pytest.raises(DegreeOverflow):
        ev.eval(11, 0.3)
