import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overlap_lab import kernels
from overlap_lab.montecarlo import (
    HEAVY_TAIL_WARNING,
    BinSpec,
    EnsembleConfig,
    Histogram2D,
    PairHistogram,
    StreamPolicy,
    compare_bins,
    cm_eigenvalue_only_d11,
    d11_one_point_exact,
    d12_two_point_exact,
    decompose_batch,
    eigenvalue_only_weights,
    exact_bin_values,
    exact_pair_values,
    rho1_exact,
    rho2_exact,
    run_campaign,
    sample_batch,
    sample_ginibre,
    spectral_decompose,
    worker_count,
)

POLICY = StreamPolicy()
BINS = BinSpec.annular(2.5, 5, 4)


def small_config(**kw):
    base = dict(N=3, samples=600, seed=7, bin_spec=BINS, pair_bin_spec=BinSpec.annular(2.0, 2, 2),
                chunk=128, workers=1)
    base.update(kw)
    return EnsembleConfig(**base)


class TestSampling:
    def test_second_moment(self):
        Ms = sample_batch(4, 11, 0, 10000)
        tr = np.sum(np.abs(Ms) ** 2, axis=(1, 2))
        # each |M_ij|^2 is Exp(1): mean 16, variance 16
        assert abs(tr.mean() - 16) < 5 * math.sqrt(16 / 10000)

    def test_entry_distribution(self):
        Ms = sample_batch(3, 5, 0, 4000)
        assert abs(Ms.mean()) < 0.03
        assert np.var(Ms.real) == pytest.approx(0.5, rel=0.05)
        assert np.var(Ms.imag) == pytest.approx(0.5, rel=0.05)

    @given(st.integers(0, 2**64 - 1), st.integers(0, 10**9))
    @settings(max_examples=20)
    def test_streams_addressable(self, seed, index):
        a = sample_ginibre(3, POLICY.generator(seed, index))
        b = sample_batch(3, seed, index, index + 1)[0]
        assert np.array_equal(a, b)

    def test_streams_distinct(self):
        a, b = sample_batch(4, 1, 0, 2)
        assert not np.allclose(a, b)
        assert not np.allclose(sample_batch(4, 2, 0, 1)[0], a)

    def test_bad_seed(self):
        with pytest.raises(ValueError):
            POLICY.generator(-1, 0)


class TestDecomposition:
    def test_order_one(self):
        s = spectral_decompose(np.array([[0.3 + 0.2j]]))
        assert s.diag_overlap[0] == pytest.approx(1.0)
        assert s.offdiag_overlap[0, 0] == pytest.approx(1.0)

    @pytest.mark.parametrize("convention", ["standard", "literal"])
    def test_triangular_two_by_two(self, convention):
        l1, l2, b = 0.5 + 0.1j, -0.2 + 0.4j, 0.7 - 0.3j
        s = spectral_decompose(np.array([[l1, b], [0, l2]]), convention)
        r = abs(b) ** 2 / abs(l1 - l2) ** 2
        assert np.allclose(np.sort(s.diag_overlap), [1 + r, 1 + r])
        if convention == "standard":
            O = s.offdiag_overlap
            assert O[0, 1] == pytest.approx(-r) and O[1, 0] == pytest.approx(-r)
            assert s.sum_rule_error < 1e-13

    def test_batch_properties(self):
        batch = decompose_batch(sample_batch(6, 3, 0, 300))
        assert batch.accepted.all()
        assert np.all(batch.diag_overlap >= 1 - 1e-10)
        rows = batch.overlap.sum(axis=2)
        assert np.allclose(rows, 1, atol=1e-9)
        assert np.max(batch.sum_rule_error) < 1e-9
        # O is Hermitian
        assert np.allclose(batch.overlap, np.conj(np.swapaxes(batch.overlap, 1, 2)), atol=1e-9)

    def test_invariant_to_eigenvector_scaling(self):
        M = sample_batch(4, 9, 0, 1)[0]
        a = spectral_decompose(M)
        b = spectral_decompose(3.0 * M)
        assert np.allclose(np.sort(a.diag_overlap), np.sort(b.diag_overlap), rtol=1e-9)

    def test_eigenvalue_only_mode(self):
        batch = decompose_batch(sample_batch(5, 3, 0, 10), overlaps=False)
        assert batch.overlap is None and batch.accepted.all()

    def test_defective_rejected(self):
        J = np.array([[1.0, 1.0], [0.0, 1.0]], dtype=complex)
        batch = decompose_batch(J[None])
        assert not batch.accepted[0]
        with pytest.raises(np.linalg.LinAlgError):
            spectral_decompose(J)

    def test_unknown_convention(self):
        with pytest.raises(ValueError):
            spectral_decompose(np.eye(2), "sideways")


class TestEigenvalueOnly:
    def test_weights(self):
        w = np.array([0, 1, 2j])
        got = eigenvalue_only_weights(w)
        assert got[0] == pytest.approx((1 + 1) * (1 + 1 / 4))
        assert np.all(eigenvalue_only_weights(sample_batch(5, 1, 0, 20)[:, 0]) >= 1)

    def test_binned_sum(self):
        w = np.array([0.1, 0.2 + 1j, -1.5])
        spec = BinSpec.annular(1.0, 1)
        weights = eigenvalue_only_weights(w)
        assert cm_eigenvalue_only_d11(w, spec, 0) == pytest.approx(weights[0])
        with pytest.raises(ValueError):
            cm_eigenvalue_only_d11(w[:1], spec, 0)


class TestExactValues:
    @pytest.mark.parametrize("N", [1, 2, 5])
    def test_one_point(self, N):
        z = np.array([0.3 + 0.4j, 1.2 - 0.8j])
        for zi, r, d in zip(z, rho1_exact(N, z), d11_one_point_exact(N, z)):
            assert r == pytest.approx(kernels.rho(N, [zi]).to_complex().real, rel=1e-12)
            assert d == pytest.approx(kernels.D11(N, [zi]).to_complex().real, rel=1e-12)

    @pytest.mark.parametrize("N", [2, 3, 6])
    def test_two_point(self, N):
        rng = np.random.default_rng(N)
        z1 = rng.normal(size=6) + 1j * rng.normal(size=6)
        z2 = rng.normal(size=6) + 1j * rng.normal(size=6)
        r2 = rho2_exact(N, z1, z2)
        d12 = d12_two_point_exact(N, z1, z2)
        for a, b, r, d in zip(z1, z2, r2, d12):
            assert r == pytest.approx(kernels.rho(N, [a, b]).to_complex().real, rel=1e-10)
            ref = kernels.D12(N, [a, b]).to_complex()
            assert abs(d - ref) <= 1e-9 * abs(ref)

    def test_two_point_on_ring(self):
        # no special handling needed at |z1 - z2| = 1
        z1, z2 = np.array([0.1]), np.array([0.1 + 1j])
        ref = kernels.D12(4, [z1[0], z2[0]]).to_complex()
        assert abs(d12_two_point_exact(4, z1, z2)[0] - ref) <= 1e-9 * abs(ref)

    def test_bin_average_of_constant(self):
        v = exact_bin_values(lambda z: np.ones(z.shape), BINS)
        assert np.allclose(v, 1)
        spec = BinSpec.annular(1.0, 2, 2)
        p = exact_pair_values(lambda a, b: np.abs(a) ** 2 + 0 * b, spec)
        # mean of r^2 over r in [0, 0.5] and [0.5, 1] with area weight
        inner, outer = 0.125, (1 - 0.5**4) / 2 / (1 - 0.25)
        assert p.real.reshape(4, 4)[0] == pytest.approx([inner] * 4)
        assert p.real.reshape(4, 4)[3] == pytest.approx([outer] * 4)

    def test_d12_needs_two(self):
        with pytest.raises(ValueError):
            d12_two_point_exact(1, np.array([0.1]), np.array([0.2]))


class TestBinSpec:
    def test_parse(self):
        a = BinSpec.parse("annular:3:15:8")
        assert a.shape == (15, 8) and a.kind == "annular"
        assert BinSpec.parse("annular:2:4").shape == (4, 1)
        c = BinSpec.parse("cartesian:0.5+0.5i:1:4")
        assert c.shape == (4, 4) and c.edges_a[0] == pytest.approx(-0.5)

    @pytest.mark.parametrize("text", ["", "annular", "annular:x:3", "polar:1:2", "cartesian:0:1", "annular:1:0"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            BinSpec.parse(text)

    def test_areas_cover_disk(self):
        assert BINS.areas().sum() == pytest.approx(math.pi * 2.5**2)

    def test_locate(self):
        spec = BinSpec.annular(1.0, 2, 4)
        idx = spec.locate(np.array([0.1 + 0.1j, -0.8 - 0.1j, 2.0, 0.75j]))
        assert list(idx) == [0, 6, -1, 5]
        cart = BinSpec.cartesian(0, 1, 2)
        assert list(cart.locate(np.array([-0.5 - 0.5j, 0.5 + 0.5j, 1.5]))) == [0, 3, -1]

    def test_density_bins(self):
        spec = BinSpec.cartesian_for_density(0, 1 / math.pi, 4)
        side = 0.25 * math.sqrt(math.pi)
        assert np.allclose(spec.areas(), side**2)

    def test_quadrature_weights(self):
        Z, W = BINS.quadrature(3)
        assert np.allclose(W.sum(axis=1), 1)
        assert np.all(BINS.locate(Z) == np.arange(BINS.n_bins)[:, None])


class TestHistograms:
    def test_normalization(self):
        h = Histogram2D(BINS)
        w = sample_batch(4, 3, 0, 200)
        eig = np.linalg.eigvals(w)
        h.add(np.arange(200), BINS.locate(eig), None)
        total = (h.estimate() * h.areas).sum().real + h.overflow / 200
        assert total == pytest.approx(4.0)

    def test_merge_matches_single_pass(self):
        eig = np.linalg.eigvals(sample_batch(3, 4, 0, 100))
        b = BINS.locate(eig)
        whole = Histogram2D(BINS)
        whole.add(np.arange(100), b, None)
        part = Histogram2D(BINS)
        part.add(np.arange(50), b[:50], None)
        rest = Histogram2D(BINS)
        rest.add(np.arange(50, 100), b[50:], None)
        part.merge(rest)
        assert part.digest() == whole.digest()

    def test_merge_mismatch(self):
        with pytest.raises(ValueError):
            Histogram2D(BINS).merge(Histogram2D(BinSpec.annular(1, 2)))

    def test_pair_areas(self):
        spec = BinSpec.annular(1.0, 2)
        h = PairHistogram(spec)
        a = spec.areas()
        assert np.allclose(h.areas, np.outer(a, a).ravel())
        c1, c2 = h.centers()
        assert c1.size == 4 and c2[1] == spec.centers()[1]

    def test_error_estimates_agree(self):
        rep = run_campaign(small_config(samples=3000, chunk=512))
        h = rep.histograms["d11"]
        se, _ = h.naive_error()
        bs, _ = h.bootstrap_error(200, seed=1)
        good = h.counts > 200
        ratio = bs[good] / se[good]
        assert 0.6 < np.median(ratio) < 1.5
        mom = h.median_of_means()
        assert np.all(np.abs(mom.real - h.estimate().real)[good] < 5 * se[good] * 4)

    def test_bootstrap_reproducible(self):
        rep = run_campaign(small_config())
        h = rep.histograms["rho1"]
        assert np.array_equal(h.bootstrap_error(seed=3)[0], h.bootstrap_error(seed=3)[0])


class TestCampaign:
    def test_report_contents(self):
        rep = run_campaign(small_config())
        assert set(rep.histograms) == {"rho1", "d11", "d11_eigenvalue_only", "rho2", "d12"}
        assert rep.accepted == 600 and rep.rejected == 0 and rep.rejection_rate == 0
        assert rep.min_diag_overlap >= 1 - 1e-10
        assert rep.max_sum_rule_error < 1e-9
        assert HEAVY_TAIL_WARNING in rep.warnings
        s = rep.summary()
        assert s["report_hash"] == rep.report_hash()
        json.dumps(s)

    def test_deterministic(self):
        a, b = run_campaign(small_config()), run_campaign(small_config())
        assert a.report_hash() == b.report_hash()
        assert run_campaign(small_config(seed=8)).report_hash() != a.report_hash()

    def test_workers_and_chunks_do_not_matter(self):
        a = run_campaign(small_config(workers=1, chunk=128))
        b = run_campaign(small_config(workers=2, chunk=128))
        c = run_campaign(small_config(workers=1, chunk=600))
        assert a.report_hash() == b.report_hash()
        # the chunk size fixes the summation order, so only rounding may differ
        for k in a.histograms:
            ha, hc = a.histograms[k], c.histograms[k]
            assert np.array_equal(ha.counts, hc.counts)
            assert np.allclose(ha.weighted_sums, hc.weighted_sums, rtol=1e-12, atol=0)

    def test_standard_error_scaling(self):
        se = []
        for n in (2000, 4000):
            h = run_campaign(small_config(samples=n, chunk=1000, pairs=False)).histograms["rho1"]
            se.append(h.naive_error()[0][:8])
        ratio = np.median(se[1] / se[0])
        assert abs(ratio - 1 / math.sqrt(2)) < 0.2 / math.sqrt(2)

    def test_order_one_overlap_is_density(self):
        rep = run_campaign(small_config(N=1, samples=300))
        assert np.array_equal(rep.histograms["d11"].estimate(), rep.histograms["rho1"].estimate())
        assert "rho2" not in rep.histograms

    def test_eigenvalue_only_matches_eigenvectors(self):
        rep = run_campaign(small_config(N=4, samples=4000, chunk=1000, pairs=False))
        a, b = rep.histograms["d11"], rep.histograms["d11_eigenvalue_only"]
        sa, sb = a.bootstrap_error(seed=1)[0], b.bootstrap_error(seed=2)[0]
        good = a.counts > 200
        z = np.abs(a.estimate().real - b.estimate().real)[good] / np.hypot(sa, sb)[good]
        assert np.mean(z < 3) >= 0.9

    def test_density_matches_exact(self):
        rep = run_campaign(small_config(samples=4000, chunk=1000, pairs=False))
        exact = exact_bin_values(lambda z: rho1_exact(3, z), BINS)
        cmp = compare_bins(rep.histograms["rho1"], exact, min_hits=100, use_imag=False)
        assert cmp.n_qualifying > 5 and cmp.pass_fraction >= 0.85

    def test_permutation_symmetric_pairs(self):
        rep = run_campaign(small_config(samples=1000))
        h = rep.histograms["rho2"]
        n = h.bin_spec.n_bins
        M = h.counts.reshape(n, n)
        assert np.array_equal(M, M.T)
        D = rep.histograms["d12"].weighted_sums.reshape(n, n)
        assert np.allclose(D, np.conj(D.T))

    def test_archive(self, tmp_path):
        path = tmp_path / "samples.jsonl"
        rep = run_campaign(small_config(samples=20, archive_path=str(path)))
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        assert head["seed"] == 7 and head["N"] == 3 and len(lines) == 21
        rec = json.loads(lines[5])
        assert rec["index"] == 4 and len(rec["eigenvalues"]) == 3
        assert rep.status == "complete"

    def test_archive_failure_reported(self, tmp_path):
        rep = run_campaign(small_config(samples=20, archive_path=str(tmp_path / "missing" / "x.jsonl")))
        assert rep.status == "incomplete"
        assert any("archive" in w for w in rep.warnings)
        assert rep.accepted == 20

    def test_progress_callback(self):
        seen = []
        run_campaign(small_config(samples=300, chunk=100), progress=lambda d, t: seen.append((d, t)))
        assert seen == [(100, 300), (200, 300), (300, 300)]

    @pytest.mark.parametrize("kw", [dict(N=0), dict(samples=0), dict(seed=-1), dict(convention="x"), dict(blocks=1)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_worker_cap(self, monkeypatch):
        monkeypatch.setenv("OVERLAP_LAB_THREADS", "1")
        assert worker_count(8) == 1
        monkeypatch.setenv("OVERLAP_LAB_THREADS", "junk")
        assert worker_count(3) == 3
