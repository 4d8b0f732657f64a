"""Biorthogonal polynomials for the deformed Gaussian weight.

The weight is ``w(z, zbar | lam, lam_bar) = (1 + (z-lam)(zbar-lam_bar)) exp(-z zbar) / pi``.
Its moment matrix ``M_ij = <z^i, z^j>`` is tridiagonal, and its LDU factors,
the monic polynomials ``P_k``, ``Q_k`` and the norms ``d_k`` are all ratios of
the functions ``f_p(lam * lam_bar)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, roots_legendre

from .specfun import ScaledComplex, f_fun, sc_pow

__all__ = [
    "ConditionPoint",
    "DegenerateConditionError",
    "PivotBreakdownError",
    "QuadratureError",
    "TridiagonalMoments",
    "LduFactors",
    "moment_matrix",
    "moment_determinant",
    "ldu_closed",
    "ldu_numeric",
    "f_table",
    "poly_P",
    "poly_Q",
    "poly_P_conj",
    "inner_product_quad",
    "partition_Z",
    "partition_Zprime",
]


class DegenerateConditionError(ArithmeticError):
    """Some ``f_p(lam * lam_bar)`` vanished, so the factorization does not exist."""


class PivotBreakdownError(ArithmeticError):
    pass


class QuadratureError(ArithmeticError):
    """Doubling the quadrature resolution changed the result beyond tolerance."""


@dataclass(frozen=True)
class ConditionPoint:
    """The conditioning eigenvalue as a pair of independent coordinates.

    ``lam_bar`` is only the complex conjugate of ``lam`` for physical points;
    every function of a ConditionPoint is entire in both coordinates.
    """

    lam: complex
    lam_bar: complex

    @classmethod
    def physical(cls, lam: complex) -> "ConditionPoint":
        lam = complex(lam)
        return cls(lam, lam.conjugate())

    @property
    def product(self) -> complex:
        return complex(self.lam) * complex(self.lam_bar)

    def is_physical(self, tol: float = 0.0) -> bool:
        return abs(complex(self.lam_bar) - complex(self.lam).conjugate()) <= tol


def _as_cond(cond) -> ConditionPoint:
    if isinstance(cond, ConditionPoint):
        return cond
    if isinstance(cond, tuple):
        return ConditionPoint(complex(cond[0]), complex(cond[1]))
    return ConditionPoint.physical(cond)


@dataclass(frozen=True)
class TridiagonalMoments:
    n: int
    diag: np.ndarray
    super: np.ndarray
    sub: np.ndarray

    def dense(self) -> np.ndarray:
        m = np.diag(self.diag).astype(complex)
        if self.n > 1:
            m += np.diag(self.super, 1) + np.diag(self.sub, -1)
        return m


@dataclass(frozen=True)
class LduFactors:
    """Unit lower bidiagonal L, diagonal D, unit upper bidiagonal U."""

    n: int
    d: tuple
    l_sub: np.ndarray
    u_super: np.ndarray

    def d_complex(self) -> np.ndarray:
        return np.array([v.to_complex() for v in self.d])

    def reconstruct(self) -> np.ndarray:
        """Dense ``L @ diag(d) @ U`` (plain doubles)."""
        n = self.n
        L = np.eye(n, dtype=complex)
        U = np.eye(n, dtype=complex)
        if n > 1:
            L += np.diag(self.l_sub, -1)
            U += np.diag(self.u_super, 1)
        return L @ np.diag(self.d_complex()) @ U


def moment_matrix(n: int, cond) -> TridiagonalMoments:
    """Moment matrix ``M_ij = <z^i, z^j>`` of the deformed weight, ``0 <= i,j < n``.

    From the Gaussian moments ``int zbar^a z^b exp(-|z|^2) = pi a! delta_ab``:
    ``M_ii = i! (i + 2 + lam lam_bar)``, ``M_{i,i+1} = -lam (i+1)!`` and
    ``M_{i+1,i} = -lam_bar (i+1)!``.
    """
    if n < 1:
        raise ValueError("moment_matrix requires n >= 1")
    cond = _as_cond(cond)
    i = np.arange(n)
    fact = np.exp(gammaln(i + 1))
    diag = fact * (i + 2 + cond.product)
    fact1 = np.exp(gammaln(i[:-1] + 2))
    sup = -complex(cond.lam) * fact1
    sub = -complex(cond.lam_bar) * fact1
    return TridiagonalMoments(n, diag.astype(complex), sup.astype(complex), sub.astype(complex))


def moment_determinant(n: int, cond) -> ScaledComplex:
    """``det M`` by dense pivoted LU of the symmetrically rescaled matrix.

    Rows and columns are divided by ``sqrt(i!)`` so LAPACK sees entries of
    order one; the factorials are restored in the log scale.
    """
    cond = _as_cond(cond)
    i = np.arange(n)
    scaled = np.diag(i + 2 + cond.product).astype(complex)
    if n > 1:
        root = np.sqrt(i[1:].astype(float))
        scaled += np.diag(-complex(cond.lam) * root, 1) + np.diag(-complex(cond.lam_bar) * root, -1)
    sign, logabs = np.linalg.slogdet(scaled)
    if sign == 0:
        return ScaledComplex()
    return ScaledComplex.from_log(complex(sign), float(logabs) + float(gammaln(i + 1).sum()))


@lru_cache(maxsize=256)
def f_table(n: int, w: complex) -> tuple:
    """``(f_0(w), ..., f_n(w))`` as ScaledComplex values."""
    return tuple(f_fun(p, w) for p in range(n + 1))


def _f_nonzero(fs, upto: int) -> None:
    for p in range(upto + 1):
        if fs[p].is_zero():
            raise DegenerateConditionError(f"f_{p}(lam*lam_bar) vanishes")


def ldu_closed(n: int, cond) -> LduFactors:
    """LDU factors of the moment matrix from the closed forms in ``f_p``.

    ``L_{p,p-1} = -lam_bar f_{p-1}/f_p``, ``U_{p-1,p} = -lam f_{p-1}/f_p`` and
    ``d_m = (m+1)! f_{m+1}/f_m``, all evaluated at ``lam * lam_bar``.
    """
    if n < 1:
        raise ValueError("ldu_closed requires n >= 1")
    cond = _as_cond(cond)
    fs = f_table(n, cond.product)
    _f_nonzero(fs, n)
    ratio = np.array([(fs[p - 1] / fs[p]).to_complex() for p in range(1, n)], dtype=complex)
    l_sub = -complex(cond.lam_bar) * ratio
    u_super = -complex(cond.lam) * ratio
    d = tuple(
        ScaledComplex.from_log(1.0, float(gammaln(m + 2))) * fs[m + 1] / fs[m] for m in range(n)
    )
    return LduFactors(n, d, l_sub, u_super)


def ldu_numeric(M: TridiagonalMoments) -> LduFactors:
    """Plain tridiagonal elimination without pivoting."""
    n = M.n
    d = [ScaledComplex(M.diag[0])]
    l_sub = np.zeros(max(n - 1, 0), dtype=complex)
    u_super = np.zeros(max(n - 1, 0), dtype=complex)
    for p in range(1, n):
        prev = d[-1]
        if abs(prev.to_complex()) < 1e-300:
            raise PivotBreakdownError(f"pivot {p - 1} vanished")
        inv = 1.0 / prev.to_complex()
        l_sub[p - 1] = M.sub[p - 1] * inv
        u_super[p - 1] = M.super[p - 1] * inv
        d.append(ScaledComplex(M.diag[p] - M.sub[p - 1] * M.super[p - 1] * inv))
    return LduFactors(n, tuple(d), l_sub, u_super)


def _weighted_powers(coeff_base: complex, fs, k: int, z: complex) -> ScaledComplex:
    # sum_{m<=k} coeff_base**(k-m) f_m z**m
    acc = ScaledComplex()
    zc = complex(z)
    for m in range(k + 1):
        acc = acc * coeff_base + fs[m] * sc_pow(zc, m)
    return acc


def poly_Q(k: int, z: complex, cond) -> ScaledComplex:
    """``Q_k(z) = sum_m z^m (U^{-1})_{mk}`` with ``(U^{-1})_{mk} = lam^{k-m} f_m/f_k``."""
    cond = _as_cond(cond)
    fs = f_table(k, cond.product)
    _f_nonzero(fs, k)
    return _weighted_powers(complex(cond.lam), fs, k, z) / fs[k]


def poly_P_conj(k: int, zbar: complex, cond) -> ScaledComplex:
    """``conj(P_k)`` in the split-variable sense, evaluated at ``zbar``.

    Equals ``sum_m (L^{-1})_{km} zbar^m`` with ``(L^{-1})_{km} = lam_bar^{k-m} f_m/f_k``;
    for physical arguments this is the complex conjugate of ``P_k(z)``.
    """
    cond = _as_cond(cond)
    fs = f_table(k, cond.product)
    _f_nonzero(fs, k)
    return _weighted_powers(complex(cond.lam_bar), fs, k, zbar) / fs[k]


def poly_P(k: int, z: complex, cond) -> ScaledComplex:
    """``P_k(z) = sum_m conj((L^{-1})_{km}) z^m``, monic of degree ``k``."""
    cond = _as_cond(cond)
    fs = f_table(k, cond.product)
    _f_nonzero(fs, k)
    fs_c = tuple(v.conjugate() for v in fs)
    return _weighted_powers(complex(cond.lam_bar).conjugate(), fs_c, k, z) / fs_c[k]


def _polar_rule(R: float, n_radial: int, n_angle: int):
    """Nodes and weights for ``int_{|z|<=R} g(z) d^2z``.

    Gauss-Legendre in ``s = r^2`` on ``[0, R^2]`` (``d^2z = ds dphi / 2``)
    and the trapezoid rule in angle.
    """
    x, w = roots_legendre(n_radial)
    s = 0.5 * R * R * (x + 1.0)
    ws = 0.5 * R * R * w
    phi = 2 * np.pi * np.arange(n_angle) / n_angle
    r = np.sqrt(s)
    z = (r[:, None] * np.exp(1j * phi)[None, :]).ravel()
    weights = (0.5 * ws[:, None] * np.full(n_angle, 2 * np.pi / n_angle)[None, :]).ravel()
    return z, weights


def _poly_coeffs_P(k: int, cond: ConditionPoint) -> np.ndarray:
    fs = np.array([v.to_complex() for v in f_table(k, cond.product)])
    lb = complex(cond.lam_bar)
    return np.conj(np.array([lb ** (k - m) * fs[m] / fs[k] for m in range(k + 1)]))


def _poly_coeffs_Q(k: int, cond: ConditionPoint) -> np.ndarray:
    fs = np.array([v.to_complex() for v in f_table(k, cond.product)])
    lam = complex(cond.lam)
    return np.array([lam ** (k - m) * fs[m] / fs[k] for m in range(k + 1)])


def inner_product_quad(
    i: int,
    j: int,
    cond,
    R: float | None = None,
    nodes: int | None = None,
    tol: float = 1e-9,
) -> complex:
    """``<P_i, Q_j> = int w(z, zbar) conj(P_i(z)) Q_j(z) d^2z`` by polar quadrature.

    The angular rule uses ``nodes`` points (at least ``4(i+j+4)``) and the
    radial Gauss-Legendre rule the same count; the result is accepted once
    doubling both changes it by less than ``tol``.
    """
    cond = _as_cond(cond)
    if not cond.is_physical(1e-14):
        raise ValueError("inner_product_quad needs a physical condition point")
    if R is None:
        R = math.sqrt(max(i, j) + 1) + 8.0
    if nodes is None:
        nodes = 4 * (i + j + 4)
    lam, lam_bar = complex(cond.lam), complex(cond.lam_bar)
    cP = _poly_coeffs_P(i, cond)
    cQ = _poly_coeffs_Q(j, cond)

    def run(n_nodes: int) -> complex:
        z, w = _polar_rule(R, 2 * n_nodes, n_nodes)
        zb = np.conj(z)
        weight = (1 + (z - lam) * (zb - lam_bar)) * np.exp(-z * zb) / np.pi
        P = np.polyval(cP[::-1], z)
        Q = np.polyval(cQ[::-1], z)
        return complex(np.sum(w * weight * np.conj(P) * Q))

    coarse = run(nodes)
    fine = run(2 * nodes)
    if abs(fine - coarse) > tol * max(1.0, abs(fine)):
        raise QuadratureError(f"<P_{i},Q_{j}> not converged: {coarse} vs {fine}")
    return fine


def partition_Z(n: int) -> ScaledComplex:
    """``Z_n = pi^n prod_{j<=n} j!``."""
    if n < 1:
        raise ValueError("partition_Z requires n >= 1")
    j = np.arange(n + 1)
    return ScaledComplex.from_log(1.0, n * math.log(math.pi) + float(gammaln(j + 1).sum()))


def partition_Zprime(n: int, cond) -> ScaledComplex:
    """``Z'_n = n! prod_{j<n} d_j`` for the deformed weight."""
    if n < 1:
        raise ValueError("partition_Zprime requires n >= 1")
    factors = ldu_closed(n, cond)
    out = ScaledComplex.from_log(1.0, float(gammaln(n + 1)))
    for d in factors.d:
        out = out * d
    return out
