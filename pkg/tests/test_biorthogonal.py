import cmath
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from overlap_lab.biorthogonal import (
    ConditionPoint,
    DegenerateConditionError,
    QuadratureError,
    inner_product_quad,
    ldu_closed,
    ldu_numeric,
    moment_determinant,
    moment_matrix,
    partition_Z,
    partition_Zprime,
    poly_P,
    poly_P_conj,
    poly_Q,
    TridiagonalMoments,
)
from overlap_lab.specfun import ScaledComplex, f_fun

coord = st.floats(-6, 6, allow_nan=False)
lam_st = st.builds(complex, coord, coord).filter(lambda z: abs(z) <= 6)


def physical(z):
    return ConditionPoint.physical(z)


def test_condition_point_helpers():
    c = physical(1 + 2j)
    assert c.lam_bar == 1 - 2j and c.is_physical()
    assert not ConditionPoint(1, 1j).is_physical()


class TestMomentMatrix:
    def test_origin_diagonal(self):
        M = moment_matrix(2, (0, 0))
        assert list(M.diag) == [2, 3]
        assert np.all(M.super == 0) and np.all(M.sub == 0)

    def test_unit_point(self):
        M = moment_matrix(2, (1, 1))
        assert list(M.diag) == [3, 4]
        assert list(M.super) == [-1] and list(M.sub) == [-1]

    @pytest.mark.parametrize("n", [1, 4, 9])
    def test_lambda_zero_is_diagonal(self, n):
        M = moment_matrix(n, (0, 0.7 - 0.2j))
        assert np.all(M.super == 0)

    def test_origin_factorials(self):
        M = moment_matrix(6, (0, 0))
        assert M.diag == pytest.approx([math.factorial(i) * (i + 2) for i in range(6)], rel=1e-14)

    def test_against_gaussian_moments(self):
        # Gaussian moments: int zbar^a z^b e^{-|z|^2} d^2z / pi = a! if a == b
        lam, lam_bar = 0.6 - 0.3j, -0.2 + 0.9j
        n = 6
        M = moment_matrix(n, (lam, lam_bar)).dense()

        def g(a, b):
            return math.factorial(a) if a == b and a >= 0 else 0.0

        for a in range(n):
            for b in range(n):
                # conj(z^a) z^b (1 + (z - lam)(zbar - lam_bar)) expanded term by term
                val = (g(a, b) + g(a + 1, b + 1) - lam_bar * g(a, b + 1) - lam * g(a + 1, b)
                       + lam * lam_bar * g(a, b))
                assert M[a, b] == pytest.approx(val, abs=1e-12)


class TestLdu:
    def test_origin(self):
        f = ldu_closed(4, (0, 0))
        assert np.all(f.l_sub == 0) and np.all(f.u_super == 0)
        assert f.d_complex() == pytest.approx([math.factorial(m) * (m + 2) for m in range(4)], rel=1e-14)

    def test_unit_point(self):
        f = ldu_closed(3, (1, 1))
        assert f.l_sub[0] == pytest.approx(-1 / 3)

    def test_numeric_small(self):
        M = TridiagonalMoments(2, np.array([3, 4], complex), np.array([-1], complex), np.array([-1], complex))
        f = ldu_numeric(M)
        assert f.d_complex() == pytest.approx([3, 4 - 1 / 3])
        assert f.l_sub[0] == pytest.approx(-1 / 3) and f.u_super[0] == pytest.approx(-1 / 3)

    def test_numeric_diagonal(self):
        M = moment_matrix(5, (0, 0))
        f = ldu_numeric(M)
        assert np.all(f.l_sub == 0) and f.d_complex() == pytest.approx(M.diag)

    def test_cross_representation_frozen_point(self):
        cond = physical(0.7 + 0.2j)
        a, b = ldu_closed(10, cond), ldu_numeric(moment_matrix(10, cond))
        assert np.allclose(a.d_complex(), b.d_complex(), rtol=1e-12, atol=0)
        assert np.allclose(a.l_sub, b.l_sub, rtol=1e-12, atol=0)
        assert np.allclose(a.u_super, b.u_super, rtol=1e-12, atol=0)

    @given(lam_st)
    def test_closed_vs_numeric_physical(self, lam):
        cond = physical(lam)
        a, b = ldu_closed(50, cond), ldu_numeric(moment_matrix(50, cond))
        for x, y in zip(a.d, b.d):
            assert math.exp((x - y).log_abs() - y.log_abs()) < 1e-11
        nz = np.abs(b.l_sub) > 0
        # subnormal entries carry only absolute resolution
        tiny = np.finfo(float).tiny
        assert np.all(np.abs(a.l_sub - b.l_sub)[nz] <= 1e-11 * np.abs(b.l_sub)[nz] + tiny)
        assert np.all(np.abs(a.u_super - b.u_super)[nz] <= 1e-11 * np.abs(b.u_super)[nz] + tiny)

    def test_closed_vs_exact_elimination_split(self):
        # split points where plain elimination in doubles is unreliable: compare
        # against an 80-digit elimination of the exact matrix instead
        mp.mp.dps = 80
        rng = np.random.default_rng(5)
        for _ in range(5):
            lam = complex(*rng.uniform(-4, 4, 2))
            lam_bar = complex(*rng.uniform(-4, 4, 2))
            n = 40
            a = ldu_closed(n, (lam, lam_bar))
            L, Lb = mp.mpc(lam), mp.mpc(lam_bar)
            d = mp.mpc(2) + L * Lb
            for p in range(1, n):
                l = -Lb * mp.factorial(p) / d
                assert abs(complex(l) - a.l_sub[p - 1]) <= 1e-11 * abs(complex(l))
                d = mp.factorial(p) * (p + 2 + L * Lb) - l * (-L * mp.factorial(p))

    @given(lam_st)
    def test_reconstruct(self, lam):
        f = ldu_closed(20, physical(lam))
        M = moment_matrix(20, physical(lam)).dense()
        R = f.reconstruct()
        scale = np.abs(M) + np.abs(np.diag(np.diag(M)))
        assert np.all(np.abs(R - M) <= 1e-12 * np.maximum(scale, 1e-300) + 1e-300)

    @given(lam_st, st.integers(2, 40))
    def test_telescoping(self, lam, n):
        f = ldu_closed(n, physical(lam))
        prod = ScaledComplex(1)
        for d in f.d:
            prod = prod * d
        # d_m = (m+1)! f_{m+1}/f_m telescopes to f_n prod_{j<=n} j!
        log_fact = sum(math.lgamma(j + 1) for j in range(1, n + 1))
        ref = f_fun(n, abs(lam) ** 2) * ScaledComplex.from_log(1, log_fact)
        assert math.exp((prod - ref).log_abs() - ref.log_abs()) < 1e-11

    def test_nonzero_pivots_for_nonnegative_product(self):
        for lam in (0, 1, 3 + 4j, 6j):
            assert all(not d.is_zero() for d in ldu_closed(30, physical(lam)).d)

    def test_degenerate_condition(self):
        # f_1(w) = 2 + w vanishes at w = -2
        with pytest.raises(DegenerateConditionError):
            ldu_closed(3, (2, -1))

    def test_bad_size(self):
        with pytest.raises(ValueError):
            ldu_closed(0, (0, 0))


class TestPolynomials:
    @given(st.integers(0, 8), st.builds(complex, st.floats(-2, 2), st.floats(-2, 2)))
    def test_origin_monomials(self, k, z):
        assert poly_P(k, z, (0, 0)).to_complex() == pytest.approx(z**k, rel=1e-14, abs=1e-300)
        assert poly_Q(k, z, (0, 0)).to_complex() == pytest.approx(z**k, rel=1e-14, abs=1e-300)

    def test_q1_frozen(self):
        for z in (0, 1, 2 - 1j):
            assert poly_Q(1, z, (1, 1)).to_complex() == pytest.approx(z + 1 / 3)

    @given(lam_st, st.integers(0, 10))
    def test_monic(self, lam, k):
        big = 1e6
        cond = physical(lam / 3)
        for fn in (poly_P, poly_Q):
            lead = fn(k, big, cond).to_complex() / big**k
            assert lead == pytest.approx(1, rel=1e-4)

    def test_conjugate_form_matches_physical(self):
        cond = physical(0.8 - 0.5j)
        for k in range(6):
            z = 0.3 + 1.1j
            assert poly_P_conj(k, z.conjugate(), cond).to_complex() == pytest.approx(
                poly_P(k, z, cond).to_complex().conjugate(), rel=1e-13)


class TestQuadrature:
    def test_norms_at_origin(self):
        assert inner_product_quad(0, 0, (0, 0)) == pytest.approx(2, abs=1e-8)
        assert inner_product_quad(1, 1, (0, 0)) == pytest.approx(3, abs=1e-8)

    @pytest.mark.parametrize("lam", [0.3 + 0.2j, -1.2 + 0.7j])
    def test_off_diagonal_vanishes(self, lam):
        assert abs(inner_product_quad(0, 1, physical(lam))) < 1e-8

    def test_biorthogonality_grid(self):
        cond = physical(0.9 - 0.4j)
        d = ldu_closed(6, cond).d_complex()
        for i in range(6):
            for j in range(6):
                v = inner_product_quad(i, j, cond)
                assert abs(v - (d[j] if i == j else 0)) < 1e-8 * max(1, abs(d[j]))

    def test_unconjugated_convention_fails(self):
        # using L^{-1} without conjugation breaks biorthogonality off the real axis
        import overlap_lab.biorthogonal as bo

        cond = physical(0.9 - 0.4j)
        orig = bo._poly_coeffs_P
        try:
            bo._poly_coeffs_P = lambda k, c: np.conj(orig(k, c))
            assert abs(inner_product_quad(0, 1, cond)) > 1e-3 or abs(inner_product_quad(1, 0, cond)) > 1e-3
        finally:
            bo._poly_coeffs_P = orig

    def test_split_rejected(self):
        with pytest.raises(ValueError):
            inner_product_quad(0, 0, (1, 1j))

    def test_nonconvergence_reported(self):
        with pytest.raises(QuadratureError):
            inner_product_quad(4, 4, physical(0.5), R=2.0, nodes=4)


class TestDeterminantAndPartition:
    def test_partition_Z(self):
        assert partition_Z(2).to_complex() == pytest.approx(2 * math.pi**2)

    def test_partition_Zprime(self):
        assert partition_Zprime(2, (0, 0)).to_complex() == pytest.approx(12)

    def test_det_frozen(self):
        cond = physical(0.4 - 0.1j)
        prod = ScaledComplex(1)
        for d in ldu_closed(6, cond).d:
            prod = prod * d
        det = moment_determinant(6, cond)
        assert math.exp((det - prod).log_abs() - prod.log_abs()) < 1e-12

    @pytest.mark.parametrize("n", [1, 5, 17, 30])
    def test_det_split(self, n):
        cond = (1.1 + 0.3j, -0.4 + 0.8j)
        prod = ScaledComplex(1)
        for d in ldu_closed(n, cond).d:
            prod = prod * d
        det = moment_determinant(n, cond)
        assert math.exp((det - prod).log_abs() - prod.log_abs()) < 1e-11
