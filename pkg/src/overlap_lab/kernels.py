"""Finite-N kernels and conditional overlap functions.

Conditional overlaps are entire in every eigenvalue coordinate and its
conjugate taken separately, so points are passed as :class:`SplitPoint`
pairs ``(z, z_bar)``.  Plain complex numbers are accepted everywhere a point
is expected and mean the physical point ``(z, conj(z))``.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import mpmath as mp
import numpy as np
from scipy.special import gammaln

from .biorthogonal import (
    ConditionPoint,
    DegenerateConditionError,
    _as_cond,
    _f_nonzero,
    _polar_rule,
    f_table,
    partition_Z,
)
from .specfun import ScaledComplex, f_fun, frak_F_terms, sc_pow

__all__ = [
    "SplitPoint",
    "weight_omega",
    "kappa_sum",
    "kappa_closed",
    "K11",
    "D11",
    "D12",
    "ev_kernel",
    "rho",
    "d11_bruteforce",
    "scaled_det",
    "swap_conjugates",
    "ring_average",
    "EPS_K",
    "EPS_T",
    "KAPPA_MAX_LOSS",
]

#: distance to the removable singular sets below which kappa_closed defers to kappa_sum
EPS_K = 1e-3
#: cancellation (natural log) in the closed-form numerator beyond which kappa_sum is used
KAPPA_MAX_LOSS = math.log(1e3)
#: half-width of the band around |lam1 - lam2| = 1 handled by ring averaging
EPS_T = 1e-3


@dataclass(frozen=True)
class SplitPoint:
    z: complex
    z_bar: complex

    @classmethod
    def physical(cls, z: complex) -> "SplitPoint":
        z = complex(z)
        return cls(z, z.conjugate())


def as_point(p) -> SplitPoint:
    if isinstance(p, SplitPoint):
        return p
    if isinstance(p, ConditionPoint):
        return SplitPoint(p.lam, p.lam_bar)
    if isinstance(p, tuple):
        return SplitPoint(complex(p[0]), complex(p[1]))
    return SplitPoint.physical(p)


def _cond_of(p: SplitPoint) -> ConditionPoint:
    return ConditionPoint(p.z, p.z_bar)


def weight_omega(z: complex, x: complex, u: complex, v: complex) -> complex:
    """Deformed weight ``(1 + (z-u)(x-v)) exp(-z x) / pi``."""
    return (1 + (z - u) * (x - v)) * cmath.exp(-z * x) / math.pi


def _omega_scaled(z: complex, x: complex, u: complex, v: complex) -> ScaledComplex:
    return ScaledComplex.exp(-z * x) * ((1 + (z - u) * (x - v)) / math.pi)


def kappa_sum(N: int, x_bar: complex, y: complex, cond) -> ScaledComplex:
    """Reduced kernel as the biorthogonal sum ``sum_{k<N} conj(P_k)(x_bar) Q_k(y) / d_k``.

    With ``S_k = sum_m lam_bar^{k-m} f_m x_bar^m`` and ``T_k`` the same with
    ``lam`` and ``y``, the summand is ``S_k T_k / ((k+1)! f_k f_{k+1})``.

    The summands can be many orders of magnitude larger than the sum, so the
    recurrence runs in mpmath with working precision raised until it covers
    the observed cancellation plus double resolution.
    """
    if N < 1:
        raise ValueError("kappa_sum requires N >= 1")
    cond = _as_cond(cond)
    digits = 30
    while True:
        value, lost = _kappa_sum_mp(N, complex(x_bar), complex(y), cond, digits)
        if lost + 18 <= digits:
            return value
        if digits > 2000:
            raise ArithmeticError("kappa_sum: cancellation beyond 2000 digits")
        digits = int(lost) + 25


def _kappa_sum_mp(N: int, x_bar: complex, y: complex, cond: ConditionPoint, digits: int):
    # returns (value, decimal digits lost to cancellation)
    with mp.workdps(digits):
        lam, lam_bar = mp.mpc(cond.lam), mp.mpc(cond.lam_bar)
        w = lam * lam_bar
        xb, yy = mp.mpc(x_bar), mp.mpc(y)
        # f_p(w) for p = 0..N; track the largest partial term for the cancellation estimate
        term = mp.mpc(1)
        e_prev, e_cur = mp.mpc(0), mp.mpc(1)
        biggest = mp.mpf(1)
        fs = [mp.mpc(1)]
        for p in range(1, N + 1):
            term = term * w / p
            biggest = max(biggest, abs(term) * (p + 1))
            e_prev, e_cur = e_cur, e_cur + term
            fs.append((p + 1) * e_cur - w * e_prev)
        if any(f == 0 for f in fs):
            raise DegenerateConditionError("f_p(lam*lam_bar) vanishes")
        lost = max(0.0, float(mp.log10(biggest / min(abs(f) for f in fs))))
        S = T = total = mp.mpc(0)
        xpow = ypow = mp.mpc(1)
        fact = mp.mpf(1)
        peak = mp.mpf(0)
        for k in range(N):
            S = S * lam_bar + fs[k] * xpow
            T = T * lam + fs[k] * ypow
            fact *= k + 1
            term_k = S * T / (fs[k] * fs[k + 1] * fact)
            total += term_k
            peak = max(peak, abs(term_k), abs(S * T) / abs(fs[k] * fs[k + 1] * fact))
            xpow *= xb
            ypow *= yy
        if total == 0:
            return ScaledComplex(), float(digits)
        lost += max(0.0, float(mp.log10(peak / abs(total))))
        return ScaledComplex.from_mpc(total), lost


def kappa_closed(N: int, x_bar: complex, y: complex, cond) -> ScaledComplex:
    """Reduced kernel from the single-sum closed form in ``frak_F``.

    Within ``EPS_K`` of ``x_bar = lam_bar``, ``y = lam`` or ``lam = 0`` (or
    ``lam_bar = 0``) the removable singularities make the closed form lose
    accuracy, and :func:`kappa_sum` is used instead.  The same fallback
    applies anywhere the terms of the numerator cancel by more than
    ``KAPPA_MAX_LOSS`` (natural log), which happens when several of these
    distances are moderately small at once.
    """
    if N < 1:
        raise ValueError("kappa_closed requires N >= 1")
    cond = _as_cond(cond)
    lam, lam_bar = complex(cond.lam), complex(cond.lam_bar)
    x_bar, y = complex(x_bar), complex(y)
    if min(abs(x_bar - lam_bar), abs(y - lam), abs(lam), abs(lam_bar)) < EPS_K:
        return kappa_sum(N, x_bar, y, cond)
    p = lam * lam_bar
    a, b = x_bar / lam_bar, y / lam
    gaps = ((lam_bar - x_bar) / lam_bar, (lam - y) / lam)
    hi, hi_scale = frak_F_terms(N + 1, p, a, b, "auto", *gaps)
    lo, lo_scale = frak_F_terms(N, p, a, b, "auto", *gaps)
    num = hi * (N + 1) - lo * p
    scale = max(hi_scale + math.log(N + 1), lo_scale + math.log(abs(p)))
    if num.is_zero() or scale - num.log_abs() > KAPPA_MAX_LOSS:
        return kappa_sum(N, x_bar, y, cond)
    den = f_fun(N, p) * ((x_bar - lam_bar) ** 2 * (y - lam) ** 2)
    return num / den


def K11(N: int, x, y, cond, kappa=kappa_closed) -> ScaledComplex:
    """``K11^{(N)}(x, y | cond) = w(x, x_bar | cond) kappa^{(N)}(x_bar, y | cond)``.

    ``y.z_bar`` does not enter.
    """
    x, y = as_point(x), as_point(y)
    cond = _as_cond(cond)
    w = _omega_scaled(x.z, x.z_bar, complex(cond.lam), complex(cond.lam_bar))
    return w * kappa(N, x.z_bar, y.z, cond)


def scaled_det(entries: Sequence[Sequence[ScaledComplex]]) -> ScaledComplex:
    """Determinant of a small matrix of ScaledComplex entries.

    The largest entry scale is factored out, the rest is handled by LAPACK's
    pivoted LU in doubles, and the scale is restored as ``n * e_max``.
    Entries more than ~1000 binary orders below the largest flush to zero.
    """
    n = len(entries)
    if n == 0:
        return ScaledComplex(1.0)
    flat = [e for row in entries for e in row if not e.is_zero()]
    if not flat:
        return ScaledComplex()
    emax = max(e.exponent for e in flat)
    a = np.array(
        [[0j if e.is_zero() else complex(math.ldexp(e.mantissa.real, max(e.exponent - emax, -1100)),
                                         math.ldexp(e.mantissa.imag, max(e.exponent - emax, -1100)))
          for e in row] for row in entries],
        dtype=complex,
    )
    sign, logabs = np.linalg.slogdet(a)
    if sign == 0:
        return ScaledComplex()
    return ScaledComplex.from_log(complex(sign), float(logabs)) * ScaledComplex(1.0, n * emax)


def _check_k(N: int, k: int, lo: int = 1) -> None:
    if k < lo:
        raise ValueError(f"need at least {lo} points, got {k}")
    if k > N:
        raise ValueError(f"number of points k={k} exceeds N={N}")


def D11(N: int, points: Sequence, kappa=kappa_closed) -> ScaledComplex:
    """Conditional diagonal overlap ``D11^{(N,k)}`` from its determinantal form.

    ``(1/pi) f_{N-1}(lam1 lam1_bar) exp(-lam1 lam1_bar) det[K11^{(N-1)}(p_i, p_j | p_1)]``
    with ``2 <= i, j <= k``; the determinant is absent for ``k = 1``.
    """
    pts = [as_point(p) for p in points]
    _check_k(N, len(pts))
    first = pts[0]
    cond = _cond_of(first)
    p = cond.product
    pref = f_fun(N - 1, p) * ScaledComplex.exp(-p) * (1.0 / math.pi)
    rest = pts[1:]
    if not rest:
        return pref
    # kappa depends only on (x_bar, y); cache over the grid of pairs
    mat = [[K11(N - 1, xi, yj, cond, kappa) for yj in rest] for xi in rest]
    return pref * scaled_det(mat)


def swap_conjugates(points: Sequence) -> list:
    """The transposition exchanging ``lam1_bar`` and ``lam2_bar``."""
    pts = [as_point(p) for p in points]
    a, b = pts[0], pts[1]
    return [SplitPoint(a.z, b.z_bar), SplitPoint(b.z, a.z_bar)] + pts[2:]


def _offdiag_from_diag(points: list, diag_fn) -> ScaledComplex:
    a, b = points[0], points[1]
    u = (a.z - b.z) * (a.z_bar - b.z_bar)
    return -(ScaledComplex.exp(-u) * diag_fn(swap_conjugates(points)) / (1 - u))


def ring_average(points: Sequence, fn, radius: float = 0.05, nodes: int = 16) -> ScaledComplex:
    """Value at ``s = 1`` of ``s -> fn(points with lam2 - lam1 scaled by s)``.

    Moving the second point along ``lam1 + s (lam2 - lam1)`` in both split
    coordinates keeps every argument in the domain of an entire function, so
    its value at ``s = 1`` is the mean over a circle of radius ``radius``
    around ``s = 1`` (trapezoid rule, exponentially convergent).  Used to step
    over the removable singularity of the off-diagonal relation.
    """
    pts = [as_point(p) for p in points]
    a, b = pts[0], pts[1]
    dz, dzb = b.z - a.z, b.z_bar - a.z_bar
    acc = ScaledComplex()
    for j in range(nodes):
        s = 1 + radius * cmath.exp(2j * math.pi * (j + 0.5) / nodes)
        moved = [a, SplitPoint(a.z + s * dz, a.z_bar + s * dzb)] + pts[2:]
        acc = acc + fn(moved)
    return acc * (1.0 / nodes)


def D12(N: int, points: Sequence, kappa=kappa_closed) -> ScaledComplex:
    """Conditional off-diagonal overlap ``D12^{(N,k)}``, ``k >= 2``.

    ``-exp(-u) / (1 - u) * D11`` with ``lam1_bar`` and ``lam2_bar`` exchanged,
    ``u = (lam1 - lam2)(lam1_bar - lam2_bar)``.  Within ``EPS_T`` of ``u = 1``
    the value comes from :func:`ring_average` of the same expression.
    """
    pts = [as_point(p) for p in points]
    _check_k(N, len(pts), lo=2)

    def direct(p):
        return _offdiag_from_diag(p, lambda q: D11(N, q, kappa))

    a, b = pts[0], pts[1]
    u = (a.z - b.z) * (a.z_bar - b.z_bar)
    if abs(1 - u) < EPS_T:
        return ring_average(pts, direct)
    return direct(pts)


def ev_kernel(N: int, x: complex, y: complex) -> ScaledComplex:
    """Ginibre eigenvalue kernel ``exp(-|x|^2) sum_{m<N} (conj(x) y)^m / (pi m!)``."""
    from .specfun import exp_poly

    x, y = complex(x), complex(y)
    return ScaledComplex.exp(-abs(x) ** 2) * exp_poly(N - 1, x.conjugate() * y) * (1.0 / math.pi)


def rho(N: int, points: Sequence[complex]) -> ScaledComplex:
    """k-point eigenvalue correlation ``det[K_ev^{(N)}(lam_i, lam_j)]``."""
    pts = [complex(p) for p in points]
    _check_k(N, len(pts))
    return scaled_det([[ev_kernel(N, xi, xj) for xj in pts] for xi in pts])


def _vandermonde_sq(zs: Sequence[complex]) -> float:
    out = 1.0
    for i, j in itertools.combinations(range(len(zs)), 2):
        out *= abs(zs[i] - zs[j]) ** 2
    return out


def d11_bruteforce(
    N: int,
    points: Sequence,
    nodes: int = 48,
    tol: float = 1e-9,
) -> complex:
    """``D11^{(N,k)}`` by direct quadrature over the free eigenvalues, ``N - k <= 2``.

    Integrates the joint eigenvalue density times the product over
    ``l = 2..N`` of ``1 + 1/|lam_1 - lam_l|^2``, with the combinatorial factor
    ``N!/(N-k)!``.  Each free eigenvalue uses the polar rule with radius
    ``sqrt(N) + 8``; the result is accepted once doubling ``nodes`` changes it
    by less than ``tol`` relative.
    """
    from .biorthogonal import QuadratureError

    pts = [complex(as_point(p).z) for p in points]
    k = len(pts)
    _check_k(N, k)
    free = N - k
    if free > 2:
        raise ValueError("d11_bruteforce handles at most two free eigenvalues")
    R = math.sqrt(N) + 8.0
    logpref = float(gammaln(N + 1) - gammaln(free + 1))

    def integrand(free_z: list) -> np.ndarray:
        # |lam_1 - lam_l|^2 (1 + 1/|lam_1 - lam_l|^2) = 1 + |lam_1 - lam_l|^2
        allz = pts + free_z
        val = np.exp(-sum(np.abs(z) ** 2 for z in allz))
        for i, j in itertools.combinations(range(len(allz)), 2):
            d2 = np.abs(allz[i] - allz[j]) ** 2
            val = val * (1 + d2 if i == 0 else d2)
        return val

    def run(n_nodes: int) -> float:
        if free == 0:
            return float(integrand([]))
        z, w = _polar_rule(R, 2 * n_nodes, n_nodes)
        if free == 1:
            return float(np.sum(w * integrand([z])))
        return float(sum(wi * np.sum(w * integrand([zi, z])) for zi, wi in zip(z, w)))

    coarse = run(nodes)
    if free == 0:
        value = coarse
    else:
        fine = run(2 * nodes)
        if abs(fine - coarse) > tol * abs(fine):
            raise QuadratureError(f"brute-force D11 not converged: {coarse} vs {fine}")
        value = fine
    return complex(value * math.exp(logpref - partition_Z(N).log_abs()))
