"""Local bulk scaling limits and finite-N convergence probes."""

from __future__ import annotations

import cmath
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .specfun import cexpm1
from .kernels import D11, SplitPoint, as_point, ring_average, swap_conjugates, EPS_T

__all__ = [
    "BulkProbeReport",
    "kappa_bulk",
    "K11_bulk",
    "D11_bulk",
    "D12_bulk",
    "ginibre_kernel",
    "rho_bulk",
    "rho_bulk_split",
    "overlap_from_density",
    "circular_density",
    "bulk_convergence_probe",
    "CoincidentPointsError",
    "EPS_B",
]

#: radius below which kappa_bulk uses its Taylor series
EPS_B = 1e-2
_SERIES_TERMS = 8


class CoincidentPointsError(ValueError):
    pass


def kappa_bulk(z: complex, branch: str = "auto") -> complex:
    """``d/dz [(e^z - 1)/z] = (e^z (z-1) + 1) / z^2``.

    The numerator is evaluated as ``(z-1) expm1(z) + z``; inside
    ``|z| < EPS_B`` the series ``sum_m (m+1) z^m / (m+2)!`` is used.
    ``branch`` forces ``"direct"`` or ``"series"``.
    """
    z = complex(z)
    if branch not in ("auto", "direct", "series"):
        raise ValueError(f"unknown branch {branch!r}")
    if branch == "series" or (branch == "auto" and abs(z) < EPS_B):
        total = 0j
        term_fact = 2.0
        zm = 1.0 + 0j
        for m in range(_SERIES_TERMS):
            total += (m + 1) * zm / term_fact
            zm *= z
            term_fact *= m + 3
        return total
    return ((z - 1) * cexpm1(z) + z) / (z * z)


def K11_bulk(u, v, cond) -> complex:
    """Limiting kernel ``(1/pi)(1 + a abar) exp(-a abar) kappa_bulk(abar b)``.

    ``a = u - lam``, ``abar = u_bar - lam_bar``, ``b = v - lam``.
    """
    u, v, c = as_point(u), as_point(v), as_point(cond)
    a = u.z - c.z
    ab = u.z_bar - c.z_bar
    return (1 + a * ab) * cmath.exp(-a * ab) * kappa_bulk(ab * (v.z - c.z)) / math.pi


def D11_bulk(points: Sequence) -> complex:
    """``(1/pi) det[K11_bulk(p_i, p_j | p_1)]_{2<=i,j<=k}``; ``1/pi`` for ``k = 1``."""
    pts = [as_point(p) for p in points]
    if not pts:
        raise ValueError("D11_bulk needs at least one point")
    rest = pts[1:]
    if not rest:
        return 1.0 / math.pi + 0j
    mat = np.array([[K11_bulk(x, y, pts[0]) for y in rest] for x in rest], dtype=complex)
    return complex(np.linalg.det(mat)) / math.pi


def D12_bulk(points: Sequence) -> complex:
    """``-exp(-u)/(1-u) * D11_bulk`` with the first two conjugate coordinates exchanged."""
    pts = [as_point(p) for p in points]
    if len(pts) < 2:
        raise ValueError("D12_bulk needs at least two points")

    def direct(p):
        a, b = p[0], p[1]
        u = (a.z - b.z) * (a.z_bar - b.z_bar)
        return -cmath.exp(-u) * D11_bulk(swap_conjugates(p)) / (1 - u)

    a, b = pts[0], pts[1]
    u = (a.z - b.z) * (a.z_bar - b.z_bar)
    if abs(1 - u) < EPS_T:
        from .specfun import ScaledComplex

        return ring_average(pts, lambda p: ScaledComplex(direct(p))).to_complex()
    return direct(pts)


def ginibre_kernel(x: complex, y: complex) -> complex:
    """``(1/pi) exp(-|x|^2/2 - |y|^2/2 + conj(x) y)``."""
    x, y = complex(x), complex(y)
    return cmath.exp(-0.5 * abs(x) ** 2 - 0.5 * abs(y) ** 2 + x.conjugate() * y) / math.pi


def _gin_matrix(pts: Sequence[SplitPoint]) -> np.ndarray:
    z = np.array([p.z for p in pts])
    zb = np.array([p.z_bar for p in pts])
    return np.exp(-0.5 * (z * zb)[:, None] - 0.5 * (z * zb)[None, :] + zb[:, None] * z[None, :]) / math.pi


def rho_bulk(points: Sequence[complex]) -> complex:
    """``det[K_Gin(lam_i, lam_j)]``."""
    pts = [SplitPoint.physical(p) for p in points]
    return complex(np.linalg.det(_gin_matrix(pts)))


def rho_bulk_split(points: Sequence) -> complex:
    """Entire extension of :func:`rho_bulk` in the split coordinates."""
    return complex(np.linalg.det(_gin_matrix([as_point(p) for p in points])))


def _density_identity_coefficients(pts: Sequence[SplitPoint]):
    first = pts[0]
    out = []
    for p in pts[1:]:
        d = p.z - first.z
        db = p.z_bar - first.z_bar
        u = d * db
        if abs(d) < 1e-8 or abs(db) < 1e-8:
            raise CoincidentPointsError("overlap_from_density needs distinct points")
        out.append(((1 + u) / (u * u), 1 - u, d))
    return out


def overlap_from_density(
    points: Sequence,
    mode: str = "analytic",
    h: float | None = None,
    stencil: int | None = None,
) -> complex:
    """Overlap from density correlations through the first-order operator product.

    Evaluates ``(-1)^{k-1} prod_m c_m (1 - u_m - (lam_m - lam_1) d/dlam_m) rho_bulk``
    with ``c_m = (1+u_m)/u_m^2`` and ``u_m = |lam_m - lam_1|^2``; the
    holomorphic derivatives keep every conjugate coordinate fixed.

    ``mode="analytic"`` differentiates the Ginibre determinant exactly: a
    derivative in ``lam_m`` multiplies column ``m`` of the kernel matrix by
    ``lam_bar_i`` and contributes ``-lam_bar_m`` from the Gaussian factor.
    ``mode="finite-difference"`` nests ``stencil``-point differences of
    radius ``h`` on a circle in the ``lam_m`` plane; two points is the
    ordinary central difference.  Defaults: central with ``h = 1e-5`` for
    ``k = 2``.  For ``k >= 3`` the nested central difference loses too much
    to rounding, so the default becomes 8 points at radius ``0.1``
    (truncation error of order ``h**8``).
    """
    pts = [as_point(p) for p in points]
    if len(pts) < 2:
        raise ValueError("overlap_from_density needs k >= 2")
    coeffs = _density_identity_coefficients(pts)
    k = len(pts)
    sign = (-1) ** (k - 1)
    pref = np.prod([c for c, _, _ in coeffs])
    if mode == "analytic":
        K = _gin_matrix(pts)
        zb = np.array([p.z_bar for p in pts])
        free = list(range(1, k))
        total = 0j
        for r in range(len(free) + 1):
            for S in itertools.combinations(free, r):
                M = K.copy()
                factor = 1 + 0j
                for m in free:
                    _, a, b = coeffs[m - 1]
                    if m in S:
                        M[:, m] = zb * M[:, m]
                        factor *= -b
                    else:
                        factor *= a + b * pts[m].z_bar
                total += factor * np.linalg.det(M)
        return complex(sign * pref * total)
    if mode in ("finite-difference", "fd"):
        if stencil is None:
            stencil = 2 if k == 2 else 8
        if h is None:
            h = 1e-5 if stencil == 2 else 0.1
        return complex(sign * pref * _apply_ops(pts, list(range(1, k)), h, stencil))
    raise ValueError(f"unknown mode {mode!r}")


def _apply_ops(pts: list, remaining: list, h: float, stencil: int) -> complex:
    if not remaining:
        return rho_bulk_split(pts)
    m = remaining[0]
    first = pts[0]
    d = pts[m].z - first.z
    a = 1 - d * (pts[m].z_bar - first.z_bar)
    # f'(z) ~ sum_j w^-j f(z + h w^j) / (M h), w = exp(2 pi i / M)
    deriv = 0j
    for j in range(stencil):
        root = cmath.exp(2j * math.pi * j / stencil)
        moved = list(pts)
        moved[m] = SplitPoint(pts[m].z + h * root, pts[m].z_bar)
        deriv += _apply_ops(moved, remaining[1:], h, stencil) / root
    deriv /= stencil * h
    return a * _apply_ops(pts, remaining[1:], h, stencil) - d * deriv


def circular_density(z0: complex) -> float:
    """``(1/pi) Theta(1 - |z0|^2)`` with the value ``1/(2 pi)`` on the unit circle."""
    r2 = abs(complex(z0)) ** 2
    if r2 < 1:
        return 1.0 / math.pi
    if r2 == 1:
        return 0.5 / math.pi
    return 0.0


@dataclass
class BulkProbeReport:
    """Finite-N against bulk-limit comparison at one base point ``z0``.

    ``sup_error[i]`` is the largest deviation of the conditioned kernel
    ratio over the test pairs at ``N_list[i]``; ``k1_error[i]`` is the
    deviation of ``D11^{(N,1)}(sqrt(N) z0) / N`` from ``(1 - |z0|^2)/pi`` and
    ``k1_value[i]`` the value itself.
    """

    z0: complex
    N_list: list
    sup_error: list = field(default_factory=list)
    k1_value: list = field(default_factory=list)
    k1_error: list = field(default_factory=list)
    ratio_samples: list = field(default_factory=list)

    def supported_k1_normalization(self) -> str:
        """Which k=1 limit the largest-N value sits closer to."""
        v = self.k1_value[-1]
        a = abs(v - (1 - abs(self.z0) ** 2) / math.pi)
        b = abs(v - 1 / math.pi)
        if a == b:
            return "indistinguishable"
        return "(1-|z0|^2)/pi" if a < b else "1/pi"


def conditioned_ratio(N: int, z0: complex, lam1: complex, lam2: complex) -> complex:
    """``D11^{(N,2)} / D11^{(N,1)}`` at ``sqrt(N) z0 + lam_i`` (prefactor free)."""
    shift = math.sqrt(N) * complex(z0)
    two = D11(N, [shift + lam1, shift + lam2])
    one = D11(N, [shift + lam1])
    return (two / one).to_complex()


def _probe_one(N: int, z0: complex, test_points):
    shift = math.sqrt(N) * complex(z0)
    k1 = D11(N, [shift]).to_complex().real / N
    rows = []
    for lam1, lam2 in test_points:
        r = conditioned_ratio(N, z0, complex(lam1), complex(lam2))
        b = K11_bulk(lam2, lam2, lam1)
        rows.append((complex(lam1), complex(lam2), r, b))
    return k1, rows


def bulk_convergence_probe(
    N_list: Sequence[int],
    z0: complex,
    test_points: Sequence[tuple],
    workers: int | None = None,
) -> BulkProbeReport:
    """Compare finite-N conditioned kernels at ``sqrt(N) z0`` with the bulk kernel.

    For each ``N`` the ratio ``D11^{(N,2)}/D11^{(N,1)}`` is compared with
    ``K11_bulk(lam2, lam2 | lam1)`` over ``test_points`` and the scalar
    ``D11^{(N,1)}(sqrt(N) z0)/N`` with ``(1 - |z0|^2)/pi``.
    """
    z0 = complex(z0)
    if abs(z0) > 0.9:
        raise ValueError("base point must satisfy |z0| <= 0.9")
    N_list = list(N_list)
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly increasing")
    if max(N_list) > 700:
        raise OverflowError("bulk probe limited to N <= 700")
    report = BulkProbeReport(z0, N_list)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda n: _probe_one(n, z0, test_points), N_list))
    else:
        results = [_probe_one(n, z0, test_points) for n in N_list]
    target = (1 - abs(z0) ** 2) / math.pi
    for N, (k1, rows) in zip(N_list, results):
        report.k1_value.append(k1)
        report.k1_error.append(abs(k1 - target))
        report.sup_error.append(max((abs(r - b) for _, _, r, b in rows), default=0.0))
        report.ratio_samples.append([(N, l1, l2, r, b) for l1, l2, r, b in rows])
    return report
