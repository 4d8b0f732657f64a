import cmath
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import gammaincc

from overlap_lab.specfun import (
    EPS_F,
    ScaledComplex,
    cexpm1,
    exp_poly,
    f_fun,
    frak_F,
    gamma_ratio,
    sc_add,
    sc_mul,
    sc_pow,
)

import oracles

mp.mp.dps = 60

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
cplx = st.builds(complex, finite, finite)
small = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
small_c = st.builds(complex, small, small)


def frak_err(n, x, y, z, got, ref):
    # error relative to the size of the individual terms; the combination
    # itself can vanish identically (n = 1)
    t = y * z
    scale = max(
        (exp_poly(n, x * y) * exp_poly(n, x * z)).log_abs(),
        (exp_poly(n, x * t) * exp_poly(n, x)).log_abs() + math.log(1 + abs(x * (1 - y) * (1 - z))),
    )
    return math.exp((got - ref).log_abs() - scale)


def rel(a, b):
    return abs(complex(a) - complex(b)) / max(abs(complex(b)), 1e-300)


# ---- ScaledComplex ---------------------------------------------------------


class TestScaledComplex:
    def test_identity_product(self):
        v = sc_mul(ScaledComplex.from_log(1, 0), ScaledComplex.from_log(1, 0))
        assert v.to_complex() == 1

    def test_large_product_keeps_scale(self):
        v = sc_mul(ScaledComplex.from_log(1, 500), ScaledComplex.from_log(1, 500))
        assert v.log_abs() == pytest.approx(1000, rel=1e-15)
        assert 0.5 <= max(abs(v.mantissa.real), abs(v.mantissa.imag)) < 2

    def test_zero_absorbs(self):
        assert sc_mul(ScaledComplex(0), ScaledComplex.from_log(1, 700)).is_zero()

    def test_exact_cancellation(self):
        assert sc_add(ScaledComplex(1), ScaledComplex(-1)).is_zero()

    def test_scale_dominance(self):
        big = ScaledComplex.from_log(1, 100)
        s = sc_add(big, ScaledComplex(1))
        assert s.log_abs() == pytest.approx(100, abs=1e-15)

    def test_small_sum(self):
        assert sc_add(ScaledComplex(1), ScaledComplex(1)).to_complex() == 2

    @given(cplx)
    def test_round_trip_exact(self, z):
        # subnormal components lose bits when rescaled
        if any(0 < abs(c) < 1e-300 for c in (z.real, z.imag)):
            return
        assert ScaledComplex(z).to_complex() == z

    @given(cplx, st.integers(-2000, 2000))
    def test_mantissa_window(self, z, e):
        v = ScaledComplex(z, e)
        if z == 0:
            assert v.is_zero() and v.log_scale == 0
        else:
            assert 0.5 <= max(abs(v.mantissa.real), abs(v.mantissa.imag)) < 1.0

    @given(small_c, small_c, st.integers(-900, 900), st.integers(-900, 900))
    def test_mul_div_inverse(self, a, b, ea, eb):
        if a == 0 or b == 0:
            return
        x, y = ScaledComplex(a, ea), ScaledComplex(b, eb)
        back = (x * y) / y
        assert rel(back.mantissa * 2.0 ** (back.exponent - x.exponent), x.mantissa) < 1e-15

    @given(small_c, small_c)
    def test_add_commutes(self, a, b):
        assert (ScaledComplex(a) + ScaledComplex(b)) == (ScaledComplex(b) + ScaledComplex(a))

    def test_from_mpc_huge(self):
        v = ScaledComplex.from_mpc(mp.exp(mp.mpf(5000)) * mp.mpc(1, 1))
        assert v.log_abs() == pytest.approx(5000 + 0.5 * math.log(2), rel=1e-14)
        assert cmath.phase(v.mantissa) == pytest.approx(math.pi / 4)

    def test_power_overflow_free(self):
        v = sc_pow(10.0 + 0j, 400)
        assert v.log_abs() == pytest.approx(400 * math.log(10), rel=1e-14)

    def test_conjugate(self):
        assert ScaledComplex(1 + 2j, 7).conjugate() == ScaledComplex(1 - 2j, 7)


# ---- exponential polynomials ---------------------------------------------


class TestExpPoly:
    def test_minus_one_is_zero(self):
        for w in (0, 1, -3 + 2j):
            assert exp_poly(-1, w).is_zero()

    @pytest.mark.parametrize("w", [0, 1, -7 + 3j, 40j])
    def test_order_zero(self, w):
        assert exp_poly(0, w).to_complex() == 1

    def test_small_value(self):
        assert exp_poly(2, 1).to_complex() == pytest.approx(2.5, rel=1e-15)

    def test_gamma_link(self):
        assert (exp_poly(2, 0) * ScaledComplex.exp(0)).to_complex() == 1
        assert gamma_ratio(3, 0) == 1

    @given(cplx, st.integers(0, 120))
    def test_term_recurrence(self, w, n):
        if abs(w) > 50:
            return
        diff = exp_poly(n + 1, w) - exp_poly(n, w)
        term = sc_pow(w, n + 1) * ScaledComplex.from_log(1.0, -math.lgamma(n + 2))
        if term.is_zero():
            assert diff.is_zero()
            return
        scale = max(exp_poly(n + 1, w).log_abs(), term.log_abs())
        # the ratio recurrence accumulates about one rounding per term
        assert math.exp((diff - term).log_abs() - scale) < 2e-15 * (n + 2)

    @pytest.mark.parametrize("n,w", [(5, 2 + 1j), (30, -20 + 5j), (100, -50), (100, 80 - 30j), (400, 300j), (700, 650)])
    def test_against_mpmath(self, n, w):
        ref = oracles.e_n(n, mp.mpc(w))
        got = exp_poly(n, w)
        r = ScaledComplex.from_mpc(ref)
        assert math.exp((got - r).log_abs() - r.log_abs()) < 1e-12

    def test_huge_argument_no_overflow(self):
        v = exp_poly(2000, 1500.0)
        assert math.isfinite(v.log_abs())
        assert v.log_abs() == pytest.approx(1500, rel=1e-6)


class TestFFun:
    @given(cplx)
    def test_order_zero(self, w):
        assert f_fun(0, w).to_complex() == 1

    @given(small_c)
    def test_order_one(self, w):
        assert rel(f_fun(1, w).to_complex(), 2 + w) < 1e-14 or abs(2 + w) < 1e-12

    def test_frozen(self):
        assert f_fun(2, 2).to_complex() == pytest.approx(9, rel=1e-15)

    @given(cplx, st.integers(1, 60))
    def test_definition_cross_check(self, w, p):
        if abs(w) > 40:
            return
        ref = ScaledComplex.from_mpc(oracles.f_p(p, mp.mpc(w)))
        got = f_fun(p, w)
        if ref.is_zero():
            return
        assert math.exp((got - ref).log_abs() - ref.log_abs()) < 1e-11


class TestFrakF:
    @given(st.integers(0, 20), small_c, small_c)
    def test_y_equal_one(self, n, x, z):
        v = frak_F(n, x, 1, z)
        scale = exp_poly(n, x) * exp_poly(n, x * z)
        assert abs(v.to_complex()) <= 1e-13 * max(1.0, abs(scale.to_complex()))

    @given(st.integers(0, 20), small_c, small_c)
    def test_x_zero(self, n, y, z):
        assert abs(frak_F(n, 0, y, z).to_complex()) < 1e-13

    @given(small_c, small_c, small_c)
    def test_n_zero(self, x, y, z):
        assert abs(frak_F(0, x, y, z).to_complex()) < 1e-11 * (1 + abs(x)) ** 2 * (1 + abs(y) + abs(z)) ** 2

    def test_y_z_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            x, y, z = (complex(*rng.normal(size=2)) * s for s in (3, 1.5, 1.5))
            a, b = frak_F(n, x, y, z), frak_F(n, x, z, y)
            assert frak_err(n, x, y, z, a, b) < 1e-11

    def test_order_one_vanishes(self):
        assert abs(complex(oracles.frak_F(1, 0.7 + 1j, -0.3 + 0.2j, 1.4 - 2j))) < 1e-50

    @pytest.mark.parametrize("n", [1, 4, 12, 40])
    def test_against_mpmath(self, n):
        rng = np.random.default_rng(n)
        for _ in range(10):
            x = complex(*rng.normal(size=2)) * 2
            y = complex(*rng.normal(size=2))
            for gap in (0.5, 0.1, 3 * EPS_F, EPS_F / 3):
                z = (1 + gap * cmath.exp(1j * rng.uniform(0, 2 * math.pi))) / y
                ref = ScaledComplex.from_mpc(oracles.frak_F(n, x, y, z))
                got = frak_F(n, x, y, z)
                assert frak_err(n, x, y, z, got, ref) < 1e-10

    def test_branch_handoff(self):
        rng = np.random.default_rng(11)
        for n in (2, 5, 10, 30, 100):
            for _ in range(20):
                x = complex(*rng.normal(size=2)) * (2 + math.sqrt(n))
                y = complex(*rng.normal(size=2))
                t = 1 + EPS_F * rng.uniform(0.9, 1.1) * cmath.exp(1j * rng.uniform(0, 2 * math.pi))
                a = frak_F(n, x, y, t / y, branch="direct")
                b = frak_F(n, x, y, t / y, branch="series")
                assert frak_err(n, x, y, t / y, a, b) < 1e-9

    def test_bad_branch(self):
        with pytest.raises(ValueError):
            frak_F(3, 1, 0.5, 0.5, branch="nope")


class TestGammaRatio:
    @pytest.mark.parametrize("N", [1, 5, 80])
    def test_at_zero(self, N):
        assert gamma_ratio(N, 0) == 1

    @given(st.floats(0, 700))
    def test_order_one(self, x):
        assert gamma_ratio(1, x) == pytest.approx(math.exp(-x), rel=1e-12, abs=1e-300)

    def test_heaviside(self):
        assert abs(gamma_ratio(400, 400 * 0.25) - 1) <= 1e-10
        assert abs(gamma_ratio(400, 400 * 2.25)) <= 1e-10

    def test_against_scipy(self):
        for N in (1, 2, 10, 100, 500):
            for x in np.linspace(0, 2 * N, 41):
                ref = float(gammaincc(N, x))
                got = gamma_ratio(N, float(x))
                if ref > 1e-290:
                    assert got == pytest.approx(ref, rel=1e-12)

    def test_matches_exp_poly(self):
        for N in (3, 50, 500):
            for x in (0.0, 0.3 * N, N, 1.7 * N):
                v = (exp_poly(N - 1, x) * ScaledComplex.exp(-x)).to_complex().real
                assert gamma_ratio(N, x) == pytest.approx(v, rel=1e-12)

    @given(st.integers(1, 300), st.floats(0, 600), st.floats(0, 600))
    def test_monotone(self, N, a, b):
        lo, hi = sorted((a, b))
        assert gamma_ratio(N, lo) >= gamma_ratio(N, hi) - 4e-16

    def test_errors(self):
        with pytest.raises(ValueError):
            gamma_ratio(0, 1.0)
        with pytest.raises(ValueError):
            gamma_ratio(3, -1.0)


@given(st.builds(complex, st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3)))
def test_cexpm1_small(z):
    ref = complex(mp.expm1(mp.mpc(z)))
    if ref != 0:
        assert rel(cexpm1(z), ref) < 1e-14
