"""Monte Carlo sampling of complex Ginibre matrices and binned overlap estimators.

Every sample index owns a private Philox stream, so a campaign is a pure
function of ``(seed, N, samples, bins)`` regardless of how chunks are spread
over worker processes.  Chunk results are merged in chunk order, which makes
histogram contents bit-for-bit reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .specfun import f_fun, gamma_ratio

__all__ = [
    "BinSpec",
    "StreamPolicy",
    "EnsembleConfig",
    "SpectralSample",
    "SpectralBatch",
    "Histogram2D",
    "PairHistogram",
    "BinComparison",
    "EstimateReport",
    "sample_ginibre",
    "sample_batch",
    "spectral_decompose",
    "decompose_batch",
    "accumulate",
    "eigenvalue_only_weights",
    "cm_eigenvalue_only_d11",
    "run_campaign",
    "compare_bins",
    "exact_bin_values",
    "exact_pair_values",
    "rho1_exact",
    "d11_one_point_exact",
    "rho2_exact",
    "d12_two_point_exact",
    "worker_count",
    "DEFAULT_CONVENTION",
    "CONVENTIONS",
]

# Elementwise convention for O_{ab}: "standard" pairs <L_a,L_b> with <R_b,R_a>,
# "literal" with <R_a,R_b>.  The default was chosen by comparing both against
# the exact two-point function at N=2 (see tests/test_montecarlo.py).
DEFAULT_CONVENTION = "standard"
CONVENTIONS = ("standard", "literal")

# Eigenvector matrices worse conditioned than this are treated as solver failures.
COND_LIMIT = 1e12
HEAVY_TAIL_WARNING = (
    "diagonal overlaps have a power-law tail with infinite variance; "
    "standard errors come from a block bootstrap and a median-of-means "
    "estimate is reported alongside the mean"
)


# ---------------------------------------------------------------------------
# binning


@dataclass(frozen=True)
class BinSpec:
    """Rectangular bins in either polar (``annular``) or Cartesian coordinates.

    ``edges_a`` are radial edges (annular) or x edges (Cartesian); ``edges_b``
    are angular edges in ``[0, 2 pi]`` or y edges.  Flat bin index is
    ``i_a * (len(edges_b) - 1) + i_b``.
    """

    kind: str
    edges_a: tuple
    edges_b: tuple

    def __post_init__(self):
        if self.kind not in ("annular", "cartesian"):
            raise ValueError(f"unknown bin kind {self.kind!r}")
        for edges in (self.edges_a, self.edges_b):
            e = np.asarray(edges, dtype=float)
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("bin edges must be strictly increasing with at least 2 entries")
        if self.kind == "annular":
            if self.edges_a[0] < 0:
                raise ValueError("radial edges must be nonnegative")
            if self.edges_b[0] < 0 or self.edges_b[-1] > 2 * math.pi + 1e-12:
                raise ValueError("angular edges must lie in [0, 2 pi]")

    @classmethod
    def annular(cls, r_max: float, n_r: int, n_phi: int = 1) -> "BinSpec":
        return cls(
            "annular",
            tuple(np.linspace(0.0, r_max, n_r + 1).tolist()),
            tuple(np.linspace(0.0, 2 * math.pi, n_phi + 1).tolist()),
        )

    @classmethod
    def cartesian(cls, center: complex, half_width: float, n_side: int) -> "BinSpec":
        c = complex(center)
        return cls(
            "cartesian",
            tuple(np.linspace(c.real - half_width, c.real + half_width, n_side + 1).tolist()),
            tuple(np.linspace(c.imag - half_width, c.imag + half_width, n_side + 1).tolist()),
        )

    @classmethod
    def cartesian_for_density(cls, center: complex, density: float, n_side: int) -> "BinSpec":
        """Square bins of side ``0.25 / sqrt(density)`` around ``center``."""
        side = 0.25 / math.sqrt(density)
        return cls.cartesian(center, side * n_side / 2, n_side)

    @classmethod
    def parse(cls, text: str) -> "BinSpec":
        """``annular:RMAX:NR[:NPHI]`` or ``cartesian:RE+IMi:HALFWIDTH:NSIDE``."""
        parts = text.split(":")
        try:
            if parts[0] == "annular" and len(parts) in (3, 4):
                n_phi = int(parts[3]) if len(parts) == 4 else 1
                return cls.annular(float(parts[1]), int(parts[2]), n_phi)
            if parts[0] == "cartesian" and len(parts) == 4:
                center = complex(parts[1].replace(" ", "").replace("i", "j"))
                return cls.cartesian(center, float(parts[2]), int(parts[3]))
        except ValueError as exc:
            raise ValueError(f"bad bin description {text!r}: {exc}") from None
        raise ValueError(f"bad bin description {text!r}")

    def describe(self) -> dict:
        return {"kind": self.kind, "edges_a": list(self.edges_a), "edges_b": list(self.edges_b)}

    @property
    def shape(self) -> tuple:
        return (len(self.edges_a) - 1, len(self.edges_b) - 1)

    @property
    def n_bins(self) -> int:
        a, b = self.shape
        return a * b

    def areas(self) -> np.ndarray:
        ea, eb = np.asarray(self.edges_a), np.asarray(self.edges_b)
        if self.kind == "annular":
            per_a = np.diff(ea**2) / 2
        else:
            per_a = np.diff(ea)
        return np.outer(per_a, np.diff(eb)).ravel()

    def centers(self) -> np.ndarray:
        ea, eb = np.asarray(self.edges_a), np.asarray(self.edges_b)
        ma, mb = (ea[1:] + ea[:-1]) / 2, (eb[1:] + eb[:-1]) / 2
        A, B = np.meshgrid(ma, mb, indexing="ij")
        if self.kind == "annular":
            return (A * np.exp(1j * B)).ravel()
        return (A + 1j * B).ravel()

    def locate(self, z: np.ndarray) -> np.ndarray:
        """Flat bin index for each point, ``-1`` for points outside every bin."""
        z = np.asarray(z)
        if self.kind == "annular":
            a = np.abs(z)
            b = np.mod(np.angle(z), 2 * math.pi)
        else:
            a, b = z.real, z.imag
        ea, eb = np.asarray(self.edges_a), np.asarray(self.edges_b)
        ia = np.searchsorted(ea, a, side="right") - 1
        ib = np.searchsorted(eb, b, side="right") - 1
        na, nb = self.shape
        ok = (ia >= 0) & (ia < na) & (ib >= 0) & (ib < nb)
        return np.where(ok, ia * nb + ib, -1)

    def quadrature(self, order: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """Nodes ``(n_bins, order**2)`` and weights summing to one per bin.

        Averages over a bin with respect to area: Gauss-Legendre in ``r^2``
        and angle for annular bins, in ``x`` and ``y`` for Cartesian ones.
        """
        from scipy.special import roots_legendre

        t, w = roots_legendre(order)
        t, w = (t + 1) / 2, w / 2
        ea, eb = np.asarray(self.edges_a), np.asarray(self.edges_b)
        if self.kind == "annular":
            lo, hi = ea[:-1] ** 2, ea[1:] ** 2
            a_nodes = np.sqrt(lo[:, None] + (hi - lo)[:, None] * t[None, :])
        else:
            a_nodes = ea[:-1, None] + np.diff(ea)[:, None] * t[None, :]
        b_nodes = eb[:-1, None] + np.diff(eb)[:, None] * t[None, :]
        na, nb = self.shape
        A = np.broadcast_to(a_nodes[:, None, :, None], (na, nb, order, order))
        B = np.broadcast_to(b_nodes[None, :, None, :], (na, nb, order, order))
        Z = A * np.exp(1j * B) if self.kind == "annular" else A + 1j * B
        W = np.broadcast_to(np.outer(w, w)[None, None], (na, nb, order, order))
        return Z.reshape(na * nb, order * order), W.reshape(na * nb, order * order).copy()


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class StreamPolicy:
    """Philox keyed by the seed; sample ``i`` starts at counter word ``(0, i, 0, 0)``.

    Draws within one sample advance only the lowest counter word, so streams
    of distinct samples never overlap.
    """

    name: str = "philox4x64-sample-counter"

    def generator(self, seed: int, index: int) -> np.random.Generator:
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, int(index), 0, 0]))


def sample_ginibre(N: int, stream: np.random.Generator) -> np.ndarray:
    """``N x N`` complex Gaussian matrix, real and imaginary parts of variance 1/2."""
    if N < 1:
        raise ValueError("N must be >= 1")
    x = stream.standard_normal((N, N, 2))
    return (x[..., 0] + 1j * x[..., 1]) * math.sqrt(0.5)


def sample_batch(N: int, seed: int, start: int, stop: int, policy: StreamPolicy = StreamPolicy()) -> np.ndarray:
    """Matrices for sample indices ``start .. stop-1`` stacked on axis 0."""
    out = np.empty((stop - start, N, N), dtype=complex)
    for row, idx in enumerate(range(start, stop)):
        out[row] = sample_ginibre(N, policy.generator(seed, idx))
    return out


# ---------------------------------------------------------------------------
# spectral decomposition


@dataclass
class SpectralSample:
    """Eigenvalues and overlap matrix of one matrix.

    ``offdiag_overlap`` holds the full matrix ``O``; its diagonal coincides
    with ``diag_overlap``.
    """

    eigenvalues: np.ndarray
    diag_overlap: np.ndarray
    offdiag_overlap: np.ndarray
    condition_estimate: float
    sum_rule_error: float = 0.0


@dataclass
class SpectralBatch:
    eigenvalues: np.ndarray  # (B, N)
    diag_overlap: np.ndarray  # (B, N) real
    overlap: Optional[np.ndarray]  # (B, N, N) complex, or None in eigenvalue-only mode
    condition: np.ndarray  # (B,)
    sum_rule_error: np.ndarray  # (B,)
    accepted: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return self.eigenvalues.shape[0]


def _overlaps(V: np.ndarray, Vinv: np.ndarray, convention: str):
    gl = Vinv @ np.conj(np.swapaxes(Vinv, -1, -2))  # <L_a, L_b>
    gr = np.conj(np.swapaxes(V, -1, -2)) @ V  # <R_a, R_b>
    if convention == "standard":
        O = gl * np.swapaxes(gr, -1, -2)
    elif convention == "literal":
        O = gl * gr
    else:
        raise ValueError(f"unknown overlap convention {convention!r}")
    rule = np.abs((gl * np.conj(gr)).sum(axis=-1) - 1).max(axis=-1)
    return O, rule


def decompose_batch(
    Ms: np.ndarray, convention: str = DEFAULT_CONVENTION, overlaps: bool = True
) -> SpectralBatch:
    """Batched eigen-decomposition with overlaps from ``V^{-1}``.

    Samples whose eigenvector matrix is non-finite or has condition number
    above ``COND_LIMIT`` are flagged as rejected rather than raising.
    """
    Ms = np.asarray(Ms, dtype=complex)
    B, N = Ms.shape[0], Ms.shape[-1]
    if not overlaps:
        try:
            w = np.linalg.eigvals(Ms)
            ok = np.all(np.isfinite(w), axis=1)
        except np.linalg.LinAlgError:
            w, ok = _per_sample(Ms, lambda M: np.linalg.eigvals(M), N)
        return SpectralBatch(w, np.ones((B, N)), None, np.ones(B), np.zeros(B), ok)
    try:
        w, V = np.linalg.eig(Ms)
    except np.linalg.LinAlgError:
        w, V = _per_sample_eig(Ms)
    finite = np.all(np.isfinite(V), axis=(1, 2)) & np.all(np.isfinite(w), axis=1)
    V = np.where(finite[:, None, None], V, np.eye(N))
    cond = np.linalg.cond(V)
    ok = finite & np.isfinite(cond) & (cond < COND_LIMIT)
    V = np.where(ok[:, None, None], V, np.eye(N))
    Vinv = np.linalg.inv(V)
    O, rule = _overlaps(V, Vinv, convention)
    diag = np.real(np.diagonal(O, axis1=1, axis2=2)).copy()
    cond = np.where(ok, cond, np.inf)
    return SpectralBatch(w, diag, O, cond, rule, ok)


def _per_sample_eig(Ms):
    B, N = Ms.shape[0], Ms.shape[-1]
    w = np.full((B, N), np.nan, dtype=complex)
    V = np.full((B, N, N), np.nan, dtype=complex)
    for i in range(B):
        try:
            w[i], V[i] = np.linalg.eig(Ms[i])
        except np.linalg.LinAlgError:
            pass
    return w, V


def _per_sample(Ms, fn, N):
    B = Ms.shape[0]
    w = np.full((B, N), np.nan, dtype=complex)
    for i in range(B):
        try:
            w[i] = fn(Ms[i])
        except np.linalg.LinAlgError:
            pass
    return w, np.all(np.isfinite(w), axis=1)


def spectral_decompose(M: np.ndarray, convention: str = DEFAULT_CONVENTION) -> SpectralSample:
    """Eigenvalues, overlap matrix and eigenvector condition number of one matrix.

    Raises ``np.linalg.LinAlgError`` when the decomposition is rejected.
    """
    b = decompose_batch(np.asarray(M, dtype=complex)[None], convention)
    if not b.accepted[0]:
        raise np.linalg.LinAlgError("eigenvector matrix is numerically singular")
    return SpectralSample(
        b.eigenvalues[0], b.diag_overlap[0], b.overlap[0], float(b.condition[0]), float(b.sum_rule_error[0])
    )


# ---------------------------------------------------------------------------
# histograms


@dataclass
class _Binned:
    areas: np.ndarray
    blocks: int = 64
    counts: np.ndarray = field(default=None)
    weighted_sums: np.ndarray = field(default=None)
    sum_sq_re: np.ndarray = field(default=None)
    sum_sq_im: np.ndarray = field(default=None)
    block_sums: np.ndarray = field(default=None)
    block_samples: np.ndarray = field(default=None)
    samples_seen: int = 0
    overflow: int = 0

    def __post_init__(self):
        n = self.areas.size
        if np.any(self.areas <= 0):
            raise ValueError("bin areas must be strictly positive")
        if self.counts is None:
            self.counts = np.zeros(n, dtype=np.int64)
            self.weighted_sums = np.zeros(n, dtype=complex)
            self.sum_sq_re = np.zeros(n)
            self.sum_sq_im = np.zeros(n)
            self.block_sums = np.zeros((self.blocks, n), dtype=complex)
            self.block_samples = np.zeros(self.blocks, dtype=np.int64)

    @property
    def n_bins(self) -> int:
        return self.areas.size

    @property
    def sum_sq(self) -> np.ndarray:
        return self.sum_sq_re + self.sum_sq_im

    def add(self, sample_index: np.ndarray, bins: np.ndarray, weights: Optional[np.ndarray]) -> None:
        """Add entries ``bins[s, j]`` with ``weights[s, j]`` for samples ``sample_index[s]``."""
        sample_index = np.asarray(sample_index, dtype=np.int64)
        B = sample_index.size
        n = self.n_bins
        bins = np.asarray(bins).reshape(B, -1)
        w = np.ones(bins.shape, dtype=complex) if weights is None else np.asarray(weights, dtype=complex).reshape(B, -1)
        inside = bins >= 0
        self.overflow += int((~inside).sum())
        rows = np.broadcast_to(np.arange(B)[:, None], bins.shape)[inside]
        b = bins[inside]
        w = w[inside]
        self.counts += np.bincount(b, minlength=n)
        self.weighted_sums += np.bincount(b, w.real, n) + 1j * np.bincount(b, w.imag, n)
        # per-sample totals for the second moment
        key = rows * n + b
        uniq, inv = np.unique(key, return_inverse=True)
        per_re = np.bincount(inv, w.real, uniq.size)
        per_im = np.bincount(inv, w.imag, uniq.size)
        ub = uniq % n
        self.sum_sq_re += np.bincount(ub, per_re**2, n)
        self.sum_sq_im += np.bincount(ub, per_im**2, n)
        blk = (sample_index % self.blocks)[rows]
        bkey = blk * n + b
        size = self.blocks * n
        self.block_sums += (np.bincount(bkey, w.real, size) + 1j * np.bincount(bkey, w.imag, size)).reshape(self.blocks, n)
        self.block_samples += np.bincount(sample_index % self.blocks, minlength=self.blocks)
        self.samples_seen += B

    def merge(self, other: "_Binned") -> None:
        if other.areas.shape != self.areas.shape or other.blocks != self.blocks:
            raise ValueError("cannot merge histograms with different binning")
        self.counts += other.counts
        self.weighted_sums += other.weighted_sums
        self.sum_sq_re += other.sum_sq_re
        self.sum_sq_im += other.sum_sq_im
        self.block_sums += other.block_sums
        self.block_samples += other.block_samples
        self.samples_seen += other.samples_seen
        self.overflow += other.overflow

    def estimate(self) -> np.ndarray:
        return self.weighted_sums / (max(self.samples_seen, 1) * self.areas)

    def naive_error(self) -> tuple[np.ndarray, np.ndarray]:
        """Standard errors of the real and imaginary estimate from ``sum_sq``."""
        S = max(self.samples_seen, 1)
        out = []
        for sq, mean in ((self.sum_sq_re, self.weighted_sums.real / S), (self.sum_sq_im, self.weighted_sums.imag / S)):
            var = np.maximum(sq / S - mean**2, 0.0) * S / max(S - 1, 1)
            out.append(np.sqrt(var / S) / self.areas)
        return out[0], out[1]

    def bootstrap_error(self, resamples: int = 100, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Block-bootstrap standard errors (real part, imaginary part)."""
        used = self.block_samples > 0
        sums, ns = self.block_sums[used], self.block_samples[used]
        nb = ns.size
        if nb < 2:
            z = np.zeros(self.n_bins)
            return z, z.copy()
        rng = np.random.Generator(np.random.Philox(key=int(seed) % 2**64, counter=[0, 0, 1, 0]))
        est = np.empty((resamples, self.n_bins), dtype=complex)
        for r in range(resamples):
            pick = rng.integers(0, nb, nb)
            est[r] = sums[pick].sum(axis=0) / (ns[pick].sum() * self.areas)
        return est.real.std(axis=0, ddof=1), est.imag.std(axis=0, ddof=1)

    def median_of_means(self, groups: int = 16) -> np.ndarray:
        """Median over ``groups`` disjoint block groups of the group estimates."""
        g = np.arange(self.blocks) % groups
        vals = []
        for i in range(groups):
            sel = g == i
            n = self.block_samples[sel].sum()
            if n > 0:
                vals.append(self.block_sums[sel].sum(axis=0) / (n * self.areas))
        if not vals:
            return np.zeros(self.n_bins, dtype=complex)
        v = np.array(vals)
        return np.median(v.real, axis=0) + 1j * np.median(v.imag, axis=0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.counts, self.weighted_sums, self.sum_sq_re, self.sum_sq_im, self.block_sums, self.block_samples):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.samples_seen}:{self.overflow}".encode())
        return h.hexdigest()


class Histogram2D(_Binned):
    """Per-bin sums of a weight attached to each eigenvalue."""

    def __init__(self, bin_spec: BinSpec, blocks: int = 64, **kw):
        self.bin_spec = bin_spec
        super().__init__(bin_spec.areas(), blocks, **kw)

    def centers(self) -> np.ndarray:
        return self.bin_spec.centers()

    def empty_like(self) -> "Histogram2D":
        return Histogram2D(self.bin_spec, self.blocks)


class PairHistogram(_Binned):
    """Per-bin-pair sums; flat index ``i * n + j`` for eigenvalue bins ``(i, j)``."""

    def __init__(self, bin_spec: BinSpec, blocks: int = 64, **kw):
        self.bin_spec = bin_spec
        a = bin_spec.areas()
        super().__init__(np.outer(a, a).ravel(), blocks, **kw)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.bin_spec.centers()
        n = c.size
        return np.repeat(c, n), np.tile(c, n)

    def empty_like(self) -> "PairHistogram":
        return PairHistogram(self.bin_spec, self.blocks)


def _pair_index(N: int) -> tuple[np.ndarray, np.ndarray]:
    ia, ib = np.nonzero(~np.eye(N, dtype=bool))
    return ia, ib


def eigenvalue_only_weights(eigenvalues: np.ndarray) -> np.ndarray:
    """``prod_{l != a} (1 + 1/|lam_a - lam_l|^2)`` for every eigenvalue, batched on axis 0."""
    w = np.asarray(eigenvalues)
    d2 = np.abs(w[..., :, None] - w[..., None, :]) ** 2
    N = w.shape[-1]
    eye = np.eye(N, dtype=bool)
    with np.errstate(divide="ignore"):
        fac = np.where(eye, 1.0, 1.0 + 1.0 / d2)
    return fac.prod(axis=-1)


def cm_eigenvalue_only_d11(eigenvalues: Sequence[complex], bin_spec: BinSpec, target_bin: int) -> float:
    """Sum of the eigenvalue-only overlap weights of eigenvalues in ``target_bin``."""
    w = np.asarray(eigenvalues, dtype=complex)
    if w.size < 2:
        raise ValueError("eigenvalue-only estimator requires N >= 2")
    weights = eigenvalue_only_weights(w)
    return float(weights[bin_spec.locate(w) == target_bin].sum())


def accumulate(
    sample: SpectralSample,
    h_rho1: Histogram2D,
    h_d11: Histogram2D,
    h_rho2: Optional[PairHistogram] = None,
    h_d12: Optional[PairHistogram] = None,
    index: int = 0,
) -> None:
    """Add one decomposed sample to the one- and two-point histograms."""
    w = np.asarray(sample.eigenvalues)[None]
    idx = np.array([index])
    b1 = h_rho1.bin_spec.locate(w)
    h_rho1.add(idx, b1, None)
    h_d11.add(idx, h_d11.bin_spec.locate(w), np.asarray(sample.diag_overlap)[None])
    if h_rho2 is not None or h_d12 is not None:
        N = w.shape[1]
        ia, ib = _pair_index(N)
        O = np.asarray(sample.offdiag_overlap)[None]
        for h, weights in ((h_rho2, None), (h_d12, None if h_d12 is None else O[:, ia, ib])):
            if h is None:
                continue
            b = h.bin_spec.locate(w)
            n = h.bin_spec.n_bins
            pb = np.where((b[:, ia] >= 0) & (b[:, ib] >= 0), b[:, ia] * n + b[:, ib], -1)
            h.add(idx, pb, weights)


# ---------------------------------------------------------------------------
# campaign


def worker_count(requested: Optional[int] = None) -> int:
    """Requested workers, capped by ``OVERLAP_LAB_THREADS`` and the CPU count."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("OVERLAP_LAB_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)


@dataclass(frozen=True)
class EnsembleConfig:
    N: int
    samples: int
    seed: int
    bin_spec: BinSpec
    pair_bin_spec: Optional[BinSpec] = None
    stream_policy: StreamPolicy = StreamPolicy()
    overlaps: bool = True
    pairs: bool = True
    eigenvalue_only: bool = True
    convention: str = DEFAULT_CONVENTION
    blocks: int = 64
    chunk: int = 2048
    workers: Optional[int] = None
    archive_path: Optional[str] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown overlap convention {self.convention!r}")
        if self.chunk < 1 or self.blocks < 2:
            raise ValueError("chunk must be >= 1 and blocks >= 2")

    @property
    def pair_spec(self) -> BinSpec:
        return self.pair_bin_spec or self.bin_spec

    def describe(self) -> dict:
        return {
            "N": self.N,
            "samples": self.samples,
            "seed": self.seed,
            "stream_policy": self.stream_policy.name,
            "bin_spec": self.bin_spec.describe(),
            "pair_bin_spec": self.pair_spec.describe(),
            "overlaps": self.overlaps,
            "pairs": self.pairs,
            "eigenvalue_only": self.eigenvalue_only,
            "convention": self.convention,
            "blocks": self.blocks,
            "chunk": self.chunk,
        }


@dataclass
class _ChunkResult:
    hists: dict
    accepted: int
    rejected: int
    min_diag: float
    max_rule: float
    max_cond: float
    archive: list


def _new_hists(cfg: EnsembleConfig) -> dict:
    h = {"rho1": Histogram2D(cfg.bin_spec, cfg.blocks)}
    if cfg.overlaps:
        h["d11"] = Histogram2D(cfg.bin_spec, cfg.blocks)
    if cfg.eigenvalue_only and cfg.N >= 2:
        h["d11_eigenvalue_only"] = Histogram2D(cfg.bin_spec, cfg.blocks)
    if cfg.pairs and cfg.N >= 2:
        h["rho2"] = PairHistogram(cfg.pair_spec, cfg.blocks)
        if cfg.overlaps:
            h["d12"] = PairHistogram(cfg.pair_spec, cfg.blocks)
    return h


def _run_chunk(cfg: EnsembleConfig, start: int, stop: int) -> _ChunkResult:
    Ms = sample_batch(cfg.N, cfg.seed, start, stop, cfg.stream_policy)
    batch = decompose_batch(Ms, cfg.convention, cfg.overlaps)
    ok = batch.accepted
    idx = np.arange(start, stop)[ok]
    w = batch.eigenvalues[ok]
    hists = _new_hists(cfg)
    b1 = cfg.bin_spec.locate(w)
    hists["rho1"].add(idx, b1, None)
    if "d11" in hists:
        hists["d11"].add(idx, b1, batch.diag_overlap[ok])
    if "d11_eigenvalue_only" in hists:
        hists["d11_eigenvalue_only"].add(idx, b1, eigenvalue_only_weights(w))
    if "rho2" in hists:
        ia, ib = _pair_index(cfg.N)
        b2 = cfg.pair_spec.locate(w)
        n = cfg.pair_spec.n_bins
        pb = np.where((b2[:, ia] >= 0) & (b2[:, ib] >= 0), b2[:, ia] * n + b2[:, ib], -1)
        hists["rho2"].add(idx, pb, None)
        if "d12" in hists:
            hists["d12"].add(idx, pb, batch.overlap[ok][:, ia, ib])
    archive = []
    if cfg.archive_path:
        for j, i in enumerate(idx):
            archive.append(
                {
                    "index": int(i),
                    "eigenvalues": [[float(z.real), float(z.imag)] for z in w[j]],
                    "diag_overlaps": [float(x) for x in batch.diag_overlap[ok][j]],
                }
            )
    n_ok = int(ok.sum())
    return _ChunkResult(
        hists,
        n_ok,
        int((~ok).sum()),
        float(batch.diag_overlap[ok].min()) if n_ok and cfg.overlaps else math.inf,
        float(batch.sum_rule_error[ok].max()) if n_ok and cfg.overlaps else 0.0,
        float(batch.condition[ok].max()) if n_ok and cfg.overlaps else 1.0,
        archive,
    )


def _run_chunk_args(args):
    return _run_chunk(*args)


@dataclass
class EstimateReport:
    config: EnsembleConfig
    histograms: dict
    accepted: int
    rejected: int
    min_diag_overlap: float
    max_sum_rule_error: float
    max_condition: float
    wall_time: float
    workers: int
    status: str = "complete"
    warnings: list = field(default_factory=list)

    @property
    def rejection_rate(self) -> float:
        return self.rejected / max(self.accepted + self.rejected, 1)

    def report_hash(self) -> str:
        """Digest of everything except timing and worker count."""
        h = hashlib.sha256(json.dumps(self.config.describe(), sort_keys=True).encode())
        for name in sorted(self.histograms):
            h.update(name.encode())
            h.update(self.histograms[name].digest().encode())
        h.update(f"{self.accepted}:{self.rejected}:{self.min_diag_overlap!r}:{self.max_sum_rule_error!r}".encode())
        return h.hexdigest()

    def summary(self) -> dict:
        return {
            "config": self.config.describe(),
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejection_rate": self.rejection_rate,
            "min_diag_overlap": self.min_diag_overlap,
            "max_sum_rule_error": self.max_sum_rule_error,
            "max_condition": self.max_condition,
            "overflow": {k: int(v.overflow) for k, v in sorted(self.histograms.items())},
            "status": self.status,
            "warnings": list(self.warnings),
            "report_hash": self.report_hash(),
        }


def run_campaign(config: EnsembleConfig, progress: Optional[Callable[[int, int], None]] = None) -> EstimateReport:
    """Sample, decompose and histogram ``config.samples`` matrices."""
    t0 = time.perf_counter()
    ranges = [(s, min(s + config.chunk, config.samples)) for s in range(0, config.samples, config.chunk)]
    workers = min(worker_count(config.workers), len(ranges))
    hists = _new_hists(config)
    accepted = rejected = 0
    min_diag, max_rule, max_cond = math.inf, 0.0, 1.0
    status = "complete"
    warnings = []
    archive = None
    if config.archive_path:
        try:
            archive = open(config.archive_path, "w", encoding="utf-8")
            archive.write(json.dumps({"format": "overlap-lab-samples", "seed": config.seed, "N": config.N,
                                      "code_version": _version()}, sort_keys=True) + "\n")
        except OSError as exc:
            status, archive = "incomplete", None
            warnings.append(f"sample archive unavailable: {exc}")

    def consume(res: _ChunkResult, done: int):
        nonlocal accepted, rejected, min_diag, max_rule, max_cond, status, archive
        for k, h in res.hists.items():
            hists[k].merge(h)
        accepted += res.accepted
        rejected += res.rejected
        min_diag = min(min_diag, res.min_diag)
        max_rule = max(max_rule, res.max_rule)
        max_cond = max(max_cond, res.max_cond)
        if archive is not None:
            try:
                for rec in res.archive:
                    archive.write(json.dumps(rec) + "\n")
            except OSError as exc:
                status = "incomplete"
                warnings.append(f"sample archive write failed: {exc}")
                archive = None
        if progress:
            progress(done, config.samples)

    jobs = [(config, a, b) for a, b in ranges]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res, (_, b) in zip(pool.map(_run_chunk_args, jobs), ranges):
                consume(res, b)
    else:
        for job, (_, b) in zip(jobs, ranges):
            consume(_run_chunk(*job), b)
    if archive is not None:
        try:
            archive.close()
        except OSError as exc:
            status = "incomplete"
            warnings.append(f"sample archive close failed: {exc}")
    if config.overlaps or config.eigenvalue_only:
        warnings.append(HEAVY_TAIL_WARNING)
    return EstimateReport(
        config, hists, accepted, rejected, min_diag, max_rule, max_cond,
        time.perf_counter() - t0, workers, status, warnings,
    )


def _version() -> str:
    from . import __version__

    return __version__


# ---------------------------------------------------------------------------
# exact values on bins (vectorized, double precision; intended for small N)


def _exp_poly_array(n: int, w: np.ndarray) -> np.ndarray:
    term = np.ones_like(w, dtype=complex)
    total = term.copy()
    for k in range(1, n + 1):
        term = term * w / k
        total = total + term
    return total


def _f_array(p: int, w: np.ndarray) -> np.ndarray:
    return (p + 1) * _exp_poly_array(p, w) - (w * _exp_poly_array(p - 1, w) if p >= 1 else 0)


def rho1_exact(N: int, z: np.ndarray) -> np.ndarray:
    """One-point eigenvalue density on an array of points."""
    r2 = np.abs(np.asarray(z)) ** 2
    flat = np.array([gamma_ratio(N, float(x)) for x in r2.ravel()])
    return flat.reshape(r2.shape) / math.pi


def d11_one_point_exact(N: int, z: np.ndarray) -> np.ndarray:
    """``D11^{(N,1)}(z) = f_{N-1}(|z|^2) exp(-|z|^2) / pi`` on an array of points."""
    r2 = np.abs(np.asarray(z)) ** 2
    flat = np.array([(f_fun(N - 1, float(x)) * _sc_exp(-float(x))).to_complex().real for x in r2.ravel()])
    return flat.reshape(r2.shape) / math.pi


def _sc_exp(x):
    from .specfun import ScaledComplex

    return ScaledComplex.exp(x)


def rho2_exact(N: int, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """Two-point eigenvalue correlation on arrays of points."""
    z1, z2 = np.asarray(z1, dtype=complex), np.asarray(z2, dtype=complex)

    def K(x, y):
        return np.exp(-np.abs(x) ** 2) * _exp_poly_array(N - 1, np.conj(x) * y) / math.pi

    return (K(z1, z1) * K(z2, z2) - K(z1, z2) * K(z2, z1)).real


def d12_two_point_exact(N: int, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """``D12^{(N,2)}`` on arrays of points, ``N >= 2``.

    Uses ``-exp(-|z1|^2-|z2|^2) f_{N-1}(z1 conj z2) kappa^{(N-1)}(conj z1, z2 | z1, conj z2) / pi^2``;
    the ring factor of the general formula cancels against the weight, so
    there is no removable singularity.  Plain double sums, adequate for the
    small ``N`` of Monte Carlo checks.
    """
    if N < 2:
        raise ValueError("D12 needs N >= 2")
    z1, z2 = np.asarray(z1, dtype=complex), np.asarray(z2, dtype=complex)
    n = N - 1
    lam, lam_bar = z1, np.conj(z2)
    xb, y = np.conj(z1), z2
    p = lam * lam_bar
    fs = [_f_array(k, p) for k in range(n + 1)]
    S = np.zeros_like(p)
    T = np.zeros_like(p)
    total = np.zeros_like(p)
    fact = 1.0
    for k in range(n):
        S = S * lam_bar + fs[k] * xb**k
        T = T * lam + fs[k] * y**k
        fact *= k + 1
        total = total + S * T / (fs[k] * fs[k + 1] * fact)
    return -np.exp(-np.abs(z1) ** 2 - np.abs(z2) ** 2) * fs[n] * total / math.pi**2


def exact_bin_values(fn: Callable[[np.ndarray], np.ndarray], spec: BinSpec, order: int = 4) -> np.ndarray:
    """Area average of ``fn`` over each bin."""
    Z, W = spec.quadrature(order)
    return (fn(Z) * W).sum(axis=1)


def exact_pair_values(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], spec: BinSpec, order: int = 4) -> np.ndarray:
    """Area average of ``fn(z1, z2)`` over each ordered bin pair (flat ``i * n + j``)."""
    Z, W = spec.quadrature(order)
    n, m = Z.shape
    out = np.empty(n * n, dtype=complex)
    for i in range(n):
        z1 = np.broadcast_to(Z[i][None, :, None], (n, m, m))
        z2 = np.broadcast_to(Z[:, None, :], (n, m, m))
        ww = W[i][None, :, None] * W[:, None, :]
        out[i * n:(i + 1) * n] = (fn(z1, z2) * ww).sum(axis=(1, 2))
    return out


# ---------------------------------------------------------------------------
# comparison


@dataclass
class BinComparison:
    """Per-bin comparison of an estimator against exact values."""

    centers: tuple
    estimate: np.ndarray
    se_re: np.ndarray
    se_im: np.ndarray
    hits: np.ndarray
    exact: np.ndarray
    sigma: np.ndarray  # max over re/im of |estimate - exact| / se
    qualifying: np.ndarray
    n_sigma: float

    @property
    def n_qualifying(self) -> int:
        return int(self.qualifying.sum())

    @property
    def pass_fraction(self) -> float:
        q = self.qualifying
        if not q.any():
            return float("nan")
        return float((self.sigma[q] <= self.n_sigma).mean())


def compare_bins(
    hist: _Binned,
    exact: np.ndarray,
    min_hits: int,
    n_sigma: float = 3.0,
    resamples: int = 100,
    seed: int = 0,
    use_imag: bool = True,
) -> BinComparison:
    """Sigma distance of every bin, using block-bootstrap standard errors."""
    est = hist.estimate()
    se_re, se_im = hist.bootstrap_error(resamples, seed)
    exact = np.asarray(exact, dtype=complex)

    def dist(diff, se):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, np.abs(diff) / se, np.where(np.abs(diff) == 0, 0.0, np.inf))

    sigma = dist(est.real - exact.real, se_re)
    if use_imag:
        sigma = np.maximum(sigma, dist(est.imag - exact.imag, se_im))
    c = hist.centers()
    centers = c if isinstance(c, tuple) else (c,)
    return BinComparison(centers, est, se_re, se_im, hist.counts.copy(), exact, sigma, hist.counts >= min_hits, n_sigma)
