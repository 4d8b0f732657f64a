"""Overflow-safe complex arithmetic and the exponential-polynomial family.

Values such as ``e_n(w)`` grow like ``exp(|w|)`` and leave the double range
for ``|w|`` of a few hundred.  :class:`ScaledComplex` carries a mantissa
together with a binary exponent so that products and sums of such values can
be formed without overflow; the public ``log_scale`` is expressed in natural
log units.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import comb, gammaln

__all__ = [
    "ScaledComplex",
    "sc",
    "sc_mul",
    "sc_add",
    "sc_div",
    "sc_pow",
    "exp_poly",
    "f_fun",
    "frak_F",
    "frak_F_terms",
    "gamma_ratio",
    "EPS_F",
    "cexpm1",
]

LN2 = math.log(2.0)

#: switch radius in ``|1 - y z|`` between direct and series evaluation of frak_F
EPS_F = 1e-4
#: Taylor terms kept in the series branch of frak_F
RING_TERMS = 8
#: below this ``|1 - y z|`` the direct branch of frak_F avoids the division by ``1 - y z``
RING_BAND = 0.25


class ScaledComplex:
    """Complex number stored as ``mantissa * 2**exponent``.

    The mantissa is normalized so that ``0.5 <= max(|re|, |im|) < 1``, which
    places ``|mantissa|`` in ``[0.5, 2]``.  Zero is stored as ``(0, 0)``.
    Scaling by powers of two is exact, so converting a double-range complex
    number in and out is lossless.
    """

    __slots__ = ("mantissa", "exponent")

    def __init__(self, mantissa: complex = 0j, exponent: int = 0):
        m = complex(mantissa)
        if m == 0:
            self.mantissa = 0j
            self.exponent = 0
            return
        if not (math.isfinite(m.real) and math.isfinite(m.imag)):
            raise OverflowError(f"non-finite mantissa {m!r}")
        _, e = math.frexp(max(abs(m.real), abs(m.imag)))
        self.mantissa = complex(math.ldexp(m.real, -e), math.ldexp(m.imag, -e))
        self.exponent = int(exponent) + e

    # -- construction -----------------------------------------------------
    @classmethod
    def from_log(cls, mantissa: complex, log_scale: float) -> "ScaledComplex":
        """Build ``mantissa * exp(log_scale)`` for arbitrary real ``log_scale``."""
        if mantissa == 0:
            return cls()
        k = math.floor(log_scale / LN2)
        rest = log_scale - k * LN2
        return cls(complex(mantissa) * math.exp(rest), k)

    @classmethod
    def from_polar_log(cls, log_abs: float, phase: float) -> "ScaledComplex":
        if log_abs == -math.inf:
            return cls()
        return cls.from_log(complex(math.cos(phase), math.sin(phase)), log_abs)

    @classmethod
    def from_mpc(cls, z) -> "ScaledComplex":
        """Convert an mpmath number of any magnitude."""
        import mpmath

        z = mpmath.mpc(z)
        big = max(abs(z.real), abs(z.imag))
        if big == 0:
            return cls()
        e = int(mpmath.frexp(big)[1])
        return cls(complex(mpmath.ldexp(z.real, -e)) + 1j * float(mpmath.ldexp(z.imag, -e)), e)

    @classmethod
    def exp(cls, w: complex) -> "ScaledComplex":
        """``exp(w)`` without overflow."""
        w = complex(w)
        return cls.from_polar_log(w.real, w.imag)

    # -- inspection -------------------------------------------------------
    @property
    def log_scale(self) -> float:
        return self.exponent * LN2

    def is_zero(self) -> bool:
        return self.mantissa == 0

    def log_abs(self) -> float:
        if self.mantissa == 0:
            return -math.inf
        return math.log(abs(self.mantissa)) + self.exponent * LN2

    def to_complex(self) -> complex:
        """Plain complex value; may overflow to inf or underflow to 0."""
        m = self.mantissa
        e = self.exponent
        if e > 1100:
            return complex(math.copysign(math.inf, m.real) if m.real else 0.0,
                           math.copysign(math.inf, m.imag) if m.imag else 0.0)
        return complex(math.ldexp(m.real, e), math.ldexp(m.imag, e))

    def __complex__(self) -> complex:
        return self.to_complex()

    def __repr__(self) -> str:
        return f"ScaledComplex({self.mantissa!r}, log_scale={self.log_scale:.6g})"

    def __eq__(self, other) -> bool:
        if isinstance(other, ScaledComplex):
            return self.mantissa == other.mantissa and self.exponent == other.exponent
        return NotImplemented

    def __hash__(self) -> int:
        return hash((self.mantissa, self.exponent))

    # -- arithmetic -------------------------------------------------------
    def __mul__(self, other):
        other = _coerce(other)
        if self.mantissa == 0 or other.mantissa == 0:
            return ScaledComplex()
        return ScaledComplex(self.mantissa * other.mantissa, self.exponent + other.exponent)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _coerce(other)
        if other.mantissa == 0:
            raise ZeroDivisionError("ScaledComplex division by zero")
        if self.mantissa == 0:
            return ScaledComplex()
        return ScaledComplex(self.mantissa / other.mantissa, self.exponent - other.exponent)

    def __rtruediv__(self, other):
        return _coerce(other) / self

    def __add__(self, other):
        other = _coerce(other)
        if self.mantissa == 0:
            return other
        if other.mantissa == 0:
            return self
        e = max(self.exponent, other.exponent)
        a = self.mantissa * _pow2(self.exponent - e)
        b = other.mantissa * _pow2(other.exponent - e)
        return ScaledComplex(a + b, e)

    __radd__ = __add__

    def __neg__(self):
        return ScaledComplex(-self.mantissa, self.exponent)

    def __sub__(self, other):
        return self + (-_coerce(other))

    def __rsub__(self, other):
        return _coerce(other) + (-self)

    def conjugate(self) -> "ScaledComplex":
        return ScaledComplex(self.mantissa.conjugate(), self.exponent)


def _pow2(k: int) -> float:
    return math.ldexp(1.0, k) if k > -1100 else 0.0


def _coerce(x) -> ScaledComplex:
    if isinstance(x, ScaledComplex):
        return x
    return ScaledComplex(complex(x))


def sc(x) -> ScaledComplex:
    """Coerce a number (or pass through a ScaledComplex)."""
    return _coerce(x)


def sc_mul(a: ScaledComplex, b: ScaledComplex) -> ScaledComplex:
    return _coerce(a) * _coerce(b)


def sc_add(a: ScaledComplex, b: ScaledComplex) -> ScaledComplex:
    return _coerce(a) + _coerce(b)


def sc_div(a: ScaledComplex, b: ScaledComplex) -> ScaledComplex:
    return _coerce(a) / _coerce(b)


def sc_pow(w: complex, p: int) -> ScaledComplex:
    """``w**p`` for integer ``p >= 0`` without overflow or underflow."""
    w = complex(w)
    if p == 0:
        return ScaledComplex(1.0)
    if w == 0:
        return ScaledComplex()
    la = p * math.log(abs(w))
    if abs(la) < 600:
        return ScaledComplex(w ** p)
    # square-and-multiply on mantissa/exponent pairs: no logarithms, so the
    # rounding grows with log2(p) rather than with the size of the exponent
    base = ScaledComplex(w)
    out = ScaledComplex(1.0)
    while p:
        if p & 1:
            out = out * base
        p >>= 1
        if p:
            base = base * base
    return out


def _scaled_terms(n: int, w: complex) -> tuple[np.ndarray, float]:
    """Terms ``w**k / k!`` for ``k = 0..n``, possibly divided by a common scale.

    For ``|w| > 600`` the ratio recurrence ``t_{k+1} = t_k w / (k+1)`` is run
    upward and downward from the term of largest modulus, which is divided
    out, so no partial term exceeds one in modulus and distant terms
    underflow harmlessly.  Returns the terms and the natural log of the
    removed magnitude (zero for smaller ``|w|``).
    """
    r = abs(w)
    k = np.arange(n + 1)
    if r <= 600.0:
        # no term can overflow; skipping the log anchor avoids the rounding
        # of k log r - log k!, which is large when both parts are
        terms = np.empty(n + 1, dtype=complex)
        terms[0] = 1.0
        if n:
            terms[1:] = np.cumprod(w / k[1:])
        return terms, 0.0
    kmax = min(n, int(math.floor(r)))
    log_top = kmax * math.log(r) - float(gammaln(kmax + 1))
    terms = np.empty(n + 1, dtype=complex)
    # real-valued trig: cmath raises on subnormal phases
    angle = kmax * math.atan2(w.imag, w.real)
    terms[kmax] = complex(math.cos(angle), math.sin(angle))
    if kmax < n:
        terms[kmax + 1:] = terms[kmax] * np.cumprod(w / k[kmax + 1:])
    if kmax > 0:
        terms[kmax - 1::-1] = terms[kmax] * np.cumprod(k[kmax:0:-1] / w)
    return terms, log_top


def _binom_k(k: np.ndarray, j: int) -> np.ndarray:
    return comb(k, j) if j else np.ones(k.shape)


def _weighted_exp_sum(n: int, w: complex, a: float = 1.0, j: int = 0) -> ScaledComplex:
    """``sum_{k<=n} (a - C(k, j)) w**k / k!`` in scaled form, with ``C(k, 0) := 0``.

    The finite sum cancels badly when ``Re w < 0``.  The complete series is
    ``(a - w**j / j!) exp(w)`` (minus nothing for ``j = 0``), so the same value is
    also the complete series minus the tail ``k > n``; whichever form has the
    smaller estimated condition number is returned.
    """
    if n < 0:
        return ScaledComplex()
    w = complex(w)
    k = np.arange(n + 1)
    weights = a - (_binom_k(k, j) if j else np.zeros(n + 1))
    if w == 0:
        return ScaledComplex(complex(weights[0]))
    terms, log_top = _scaled_terms(n, w)
    wt = weights * terms
    s = complex(wt.sum())
    magnitude = float(np.abs(wt).sum())
    if magnitude == 0.0 or abs(s) >= 0.1 * magnitude:
        return ScaledComplex.from_log(s, log_top)
    direct = ScaledComplex.from_log(s, log_top)
    tail, tail_mag = _tail_sum(n, w, a, j, terms[-1], log_top)
    lead = a - (w ** j / math.exp(gammaln(j + 1)) if j else 0.0)
    full = ScaledComplex.exp(w) * lead
    value = full - tail
    if value.is_zero():
        return direct
    cond_tail = (math.exp(full.log_abs() - log_top) if not full.is_zero() else 0.0) + tail_mag
    cond_tail /= math.exp(value.log_abs() - log_top)
    if s == 0 and cond_tail > 1e12:
        # exact cancellation that the complement cannot resolve either
        return direct
    cond_direct = magnitude / abs(s) if s else math.inf
    return value if cond_tail < cond_direct else direct


def _tail_sum(n: int, w: complex, a: float, j: int, last: complex, log_top: float):
    """``sum_{k>n} (a - C(k, j)) w**k / k!`` relative to ``exp(log_top)``.

    Continues the ratio recurrence from the normalized term ``last`` (index
    ``n``) until the terms drop below double resolution.  Returns the sum as
    ScaledComplex and the sum of moduli in units of ``exp(log_top)``.
    """
    total = 0j
    mag = 0.0
    t = last
    k = n
    peak = abs(t)
    while True:
        k += 1
        t = t * w / k
        wk = a - (comb(k, j) if j else 0.0)
        term = wk * t
        total += term
        mag += abs(term)
        peak = max(peak, abs(term))
        if k > abs(w) + j and abs(t) * max(1.0, abs(wk)) < 1e-18 * max(peak, abs(total)):
            break
        if k > n + 100000:
            break
    return ScaledComplex.from_log(total, log_top), mag


def exp_poly(n: int, w: complex) -> ScaledComplex:
    """Truncated exponential series ``e_n(w) = sum_{k<=n} w**k / k!``.

    ``e_n`` vanishes identically for ``n < 0``.
    """
    return _weighted_exp_sum(n, w)


def f_fun(p: int, w: complex) -> ScaledComplex:
    """``f_p(w) = (p+1) e_p(w) - w e_{p-1}(w)``.

    Summed as ``sum_{k<=p} (p+1-k) w**k / k!`` so that the two series are
    never subtracted from each other.
    """
    if p < 0:
        raise ValueError("f_fun requires p >= 0")
    return _weighted_exp_sum(p, w, float(p + 1), 1)


def _ring_coefficient(n: int, j: int, x: complex) -> ScaledComplex:
    # j-th Taylor coefficient at t=1 of t**(n+1) e_n(x) - e_n(x t), over x**(n+1)
    return _weighted_exp_sum(n, x, float(comb(n + 1, j)), j)


def cexpm1(z: complex) -> complex:
    """``exp(z) - 1`` without cancellation for small complex ``z``."""
    z = complex(z)
    x, y = z.real, z.imag
    if y == 0.0:
        return complex(math.expm1(x))
    s = math.sin(0.5 * y)
    return complex(math.expm1(x) * math.cos(y) - 2.0 * s * s, math.exp(x) * math.sin(y))


def _ring_geometric(n: int, x: complex, t: complex, d: complex | None = None) -> ScaledComplex:
    """``(e_n(x t) - t**(n+1) e_n(x)) / (1 - t)`` without dividing by ``1 - t``.

    Equals ``sum_{k<=n} x**k/k! * t**k * G_{n-k}(t)`` with the geometric sums
    ``G_m(t) = sum_{j<=m} t**j``.  When that sum cancels, the complete series
    ``exp(x) (G_n(t) - expm1(x (t-1))/(t-1))`` minus its tail ``k > n`` is
    also formed and the better-conditioned value is returned.  ``d`` is
    ``t - 1`` when known more accurately than by subtraction.
    """
    terms, log_top = _scaled_terms(n, x)
    tp = t ** np.arange(n + 1)
    G = np.cumsum(tp)
    wt = terms * tp * G[::-1]
    s = complex(wt.sum())
    magnitude = float(np.abs(wt).sum())
    direct = ScaledComplex.from_log(s, log_top)
    if magnitude == 0.0 or abs(s) >= 0.1 * magnitude:
        return direct
    if d is None:
        d = t - 1
    lead = complex(G[-1]) - (cexpm1(x * d) / d if d != 0 else x)
    full = ScaledComplex.exp(x) * lead
    # tail: -t**(n+1) sum_{k>n} x**k/k! G_{k-n-2}(t)
    total, mag = 0j, 0.0
    u = terms[-1]
    g, tpow = 0j, 1 + 0j
    k = n
    peak = abs(u)
    limit = 2.0 * abs(x) * max(1.0, abs(t)) + 2.0
    while True:
        k += 1
        u = u * x / k
        if k >= n + 2:
            g += tpow
            tpow *= t
        term = u * g
        total += term
        mag += abs(term)
        peak = max(peak, abs(term))
        if k > limit and abs(u) * max(1.0, abs(g)) < 1e-18 * max(peak, abs(total)):
            break
        if k > n + 100000:
            break
    tpn = complex(tp[-1] * t)
    tail = ScaledComplex.from_log(-tpn * total, log_top)
    value = full - tail
    if value.is_zero():
        return direct
    cond_tail = (math.exp(full.log_abs() - log_top) if not full.is_zero() else 0.0) + abs(tpn) * mag
    cond_tail /= math.exp(value.log_abs() - log_top)
    if s == 0 and cond_tail > 1e12:
        # exact cancellation that the complement cannot resolve either
        return direct
    cond_direct = magnitude / abs(s) if s else math.inf
    return value if cond_tail < cond_direct else direct


def _ring_quotient(
    n: int, x: complex, t: complex, branch: str = "auto", d: complex | None = None
) -> ScaledComplex:
    """``((x t)**(n+1) e_n(x) - x**(n+1) e_n(x t)) / (1 - t)``.

    Three evaluations: the Taylor series about ``t = 1`` for
    ``|1 - t| < EPS_F``; the division-free geometric form for
    ``|1 - t| < RING_BAND``; the quotient as written beyond that.  ``branch``
    selects ``"series"`` or ``"direct"`` (the latter meaning whichever of the
    other two applies).  ``d = t - 1`` may be supplied when ``t`` itself
    carries rounding that the subtraction would amplify.
    """
    if branch not in ("auto", "direct", "series"):
        raise ValueError(f"unknown branch {branch!r}")
    if d is None:
        d = t - 1
    gap = abs(d)
    if branch == "direct" or (branch == "auto" and gap >= EPS_F):
        if gap < RING_BAND and n * math.log(max(abs(t), 1.0)) < 600:
            return -(sc_pow(x, n + 1) * _ring_geometric(n, x, t, d))
        num = sc_pow(x * t, n + 1) * exp_poly(n, x) - sc_pow(x, n + 1) * exp_poly(n, x * t)
        return num / (-d)
    # removable singularity at t = 1: Taylor expansion in (t - 1)
    total = ScaledComplex()
    for j in range(1, min(n + 1, RING_TERMS) + 1):
        total = total + _ring_coefficient(n, j, x) * (d ** (j - 1))
    return -(sc_pow(x, n + 1) * total)


def frak_F(
    n: int,
    x: complex,
    y: complex,
    z: complex,
    branch: str = "auto",
    y_gap: complex | None = None,
    z_gap: complex | None = None,
) -> ScaledComplex:
    r"""The single-sum building block of the closed-form reduced kernel.

    .. math::

        e_n(xy)e_n(xz) - e_n(xyz)e_n(x)(1 - x(1-y)(1-z))
        + \frac{(1-y)(1-z)}{n!}\frac{(xyz)^{n+1}e_n(x) - x^{n+1}e_n(xyz)}{1-yz}

    The last quotient is replaced by its Taylor expansion about ``yz = 1``
    when ``|1 - yz| < EPS_F``.  ``branch`` forces ``"direct"`` or ``"series"``.

    ``y_gap`` and ``z_gap`` are ``1 - y`` and ``1 - z``.  Callers that form
    ``y`` as a ratio close to one should pass them, computed before the
    division, since the value depends sensitively on these differences.
    """
    return frak_F_terms(n, x, y, z, branch, y_gap, z_gap)[0]


def frak_F_terms(
    n: int,
    x: complex,
    y: complex,
    z: complex,
    branch: str = "auto",
    y_gap: complex | None = None,
    z_gap: complex | None = None,
):
    """:func:`frak_F` together with the log of the largest of its terms.

    The gap between the two logs measures the cancellation in the sum.
    """
    x, y, z = complex(x), complex(y), complex(z)
    gy = 1 - y if y_gap is None else complex(y_gap)
    gz = 1 - z if z_gap is None else complex(z_gap)
    pref = gy * gz
    first = exp_poly(n, x * y) * exp_poly(n, x * z)
    ee = exp_poly(n, x * y * z) * exp_poly(n, x)
    second = ee * (1 - x * pref)
    sizes = [first.log_abs(), ee.log_abs() + math.log(1 + abs(x * pref))]
    value = first - second
    if pref != 0:
        t = y * z
        d = pref - gy - gz
        log_pref = math.log(abs(pref)) - float(gammaln(n + 1))
        third = _ring_quotient(n, x, t, branch, d) * ScaledComplex.from_log(pref, -float(gammaln(n + 1)))
        value = value + third
        sizes.append(third.log_abs())
        if abs(d) >= RING_BAND and x != 0:
            # the quotient as written subtracts two products of this size
            top = max(sc_pow(x * t, n + 1).log_abs() + exp_poly(n, x).log_abs(),
                      sc_pow(x, n + 1).log_abs() + exp_poly(n, x * t).log_abs())
            sizes.append(top + log_pref - math.log(abs(d)))
    scale = max((v for v in sizes if v > -math.inf), default=-math.inf)
    return value, scale


def gamma_ratio(N: int, x: float) -> float:
    """Regularized upper incomplete gamma ``Gamma(N, x) / Gamma(N)``.

    Evaluated as ``exp(-x) e_{N-1}(x)``, with the series scaled by its last
    term ``x**(N-1) / (N-1)!``.  Below the mean ``x < N - 1`` the value is
    close to one, and it is returned as one minus the series tail
    ``exp(-x) sum_{k>=N} x**k / k!`` instead, which keeps the small
    complement to full relative accuracy.
    """
    if N < 1:
        raise ValueError("gamma_ratio requires N >= 1")
    if x < 0:
        raise ValueError("gamma_ratio requires x >= 0")
    x = float(x)
    if x == 0.0:
        return 1.0
    k = N - 1
    log_last = _log_poisson(k, x)
    if x < k:
        tail = _tail_sum(k, complex(x), 1.0, 0, 1.0, 0.0)[0].to_complex().real
        if tail <= 0.0:
            return 1.0
        lower = math.exp(log_last + math.log(tail))
        return min(max(1.0 - lower, 0.0), 1.0)
    # terms x**j / j! relative to the last one, for j = k..0
    total = 1.0 + float(np.cumprod(np.arange(k, 0, -1) / x).sum()) if k else 1.0
    v = math.exp(log_last + math.log(total))
    return min(max(v, 0.0), 1.0)


def _log_poisson(k: int, x: float) -> float:
    """``log(x**k exp(-x) / k!)`` without forming ``k log x`` and ``log k!``.

    Both are of size ``x`` while their difference is small near ``k = x``,
    so there they are combined analytically through Stirling's series.
    """
    if k < 30 or not 0.5 * k <= x <= 2.0 * k:
        return k * math.log(x) - float(gammaln(k + 1)) - x
    inv = 1.0 / k
    inv2 = inv * inv
    corr = inv * (1.0 / 12 - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 / 1680)))
    return k * math.log1p((x - k) / k) - (x - k) - 0.5 * math.log(2 * math.pi * k) - corr
