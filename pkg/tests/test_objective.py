"""Kernel matrices, contrastive losses and their analytic gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avlm.adapter import AdapterConfig, DecomposedBatch, apply_adapter, init_adapter, init_model
from avlm.directional import (
    GaussParams,
    PsParams,
    VmfParams,
    bessel_ratio_bounds,
    vmf_log_normalizer_approx,
)
from avlm.objective import (
    LikelihoodMatrix,
    backprop_kernel,
    backprop_kernel_batch,
    infonce,
    kernel_matrix,
    likelihood_matrix,
    model_likelihood_matrix,
    siglip_loss,
    symmetrize_kernel,
)


def unit_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1)[:, None]


class TestLikelihoodMatrix:
    def test_uniform_rows_are_constant(self):
        mus = unit_rows(4, 5, 0)
        texts = [VmfParams(m, 0.0) for m in mus]
        lm = likelihood_matrix(texts, unit_rows(4, 5, 1))
        assert lm.kernel == "vmf"
        expected = vmf_log_normalizer_approx(5, 0.0)
        assert np.allclose(lm.entries, expected, atol=1e-12)

    def test_diagonal_at_mean_direction(self):
        images = unit_rows(3, 4, 2)
        kappas = [1.0, 2.5, 7.0]
        texts = [VmfParams(images[i], kappas[i]) for i in range(3)]
        lm = likelihood_matrix(texts, images)
        for i, k in enumerate(kappas):
            assert lm.entries[i, i] == pytest.approx(k + vmf_log_normalizer_approx(4, k), abs=1e-12)

    def test_frozen_kernel_entry(self):
        # d=3, kappa=2, cosine 0.5 -> 1 + F_3(2); value frozen from the
        # independent hand evaluation of the four-term formula
        mu = np.array([1.0, 0.0, 0.0])
        x = np.array([0.5, math.sqrt(1 - 0.25), 0.0])
        lm = likelihood_matrix([VmfParams(mu, 2.0)], [x])
        assert lm.entries[0, 0] == pytest.approx(-0.2738410250864525, abs=1e-9)

    def test_mixed_families_error(self):
        rng = np.random.default_rng(0)
        mu = unit_rows(1, 4, 0)[0]
        with pytest.raises(ValueError):
            likelihood_matrix([VmfParams(mu, 1.0), PsParams(mu, 1.0)], unit_rows(2, 4, 1))

    def test_dim_mismatch_and_length_mismatch(self):
        mu = unit_rows(1, 4, 0)[0]
        with pytest.raises(ValueError):
            likelihood_matrix([VmfParams(mu, 1.0)], unit_rows(1, 5, 1))
        with pytest.raises(ValueError):
            likelihood_matrix([VmfParams(mu, 1.0)], unit_rows(2, 4, 1))

    def test_cosine_baseline_bounds(self):
        mus = unit_rows(6, 8, 3)
        lm = likelihood_matrix(list(mus), unit_rows(6, 8, 4))
        assert lm.kernel == "cosine"
        assert np.all(lm.entries >= -1.0 - 1e-12) and np.all(lm.entries <= 1.0 + 1e-12)

    def test_ps_and_gauss_match_single_pdfs(self):
        from avlm.directional import gauss_log_pdf, ps_log_pdf

        mus = unit_rows(3, 5, 5)
        images = unit_rows(3, 5, 6)
        ps = [PsParams(m, k) for m, k in zip(mus, (0.5, 2.0, 9.0))]
        lm = likelihood_matrix(ps, images)
        for r in range(3):
            for s in range(3):
                assert lm.entries[r, s] == pytest.approx(ps_log_pdf(ps[r], images[s]), abs=1e-12)
        rng = np.random.default_rng(7)
        gs = [GaussParams(rng.standard_normal(5), rng.standard_normal(5) * 0.3) for _ in range(3)]
        lm = likelihood_matrix(gs, images)
        for r in range(3):
            for s in range(3):
                assert lm.entries[r, s] == pytest.approx(gauss_log_pdf(gs[r], images[s]), abs=1e-12)


class TestInfoNCE:
    def test_single_element(self):
        lm = LikelihoodMatrix(np.array([[3.7]]), "vmf")
        lv = infonce(lm, 0.0)
        assert lv.loss == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(lv.d_entries, 0.0)

    def test_constant_matrix(self):
        lm = LikelihoodMatrix(np.full((4, 4), 2.5), "cosine")
        assert infonce(lm, 0.0).loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal((8, 8))
        log_tau = 0.3
        lv = infonce(LikelihoodMatrix(e, "vmf"), log_tau)
        h = 1e-6
        for _ in range(12):
            i, j = rng.integers(0, 8, size=2)
            ep = e.copy(); ep[i, j] += h
            em = e.copy(); em[i, j] -= h
            fd = (infonce(LikelihoodMatrix(ep, "vmf"), log_tau).loss
                  - infonce(LikelihoodMatrix(em, "vmf"), log_tau).loss) / (2 * h)
            assert lv.d_entries[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        fd_tau = (infonce(LikelihoodMatrix(e, "vmf"), log_tau + h).loss
                  - infonce(LikelihoodMatrix(e, "vmf"), log_tau - h).loss) / (2 * h)
        assert lv.d_log_tau == pytest.approx(fd_tau, rel=1e-6)

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(1)
        e = rng.standard_normal((6, 6))
        a = infonce(LikelihoodMatrix(e, "vmf"), 0.4).loss
        b = infonce(LikelihoodMatrix(e.T.copy(), "vmf"), 0.4).loss
        assert abs(a - b) <= 1e-12

    @given(arrays(np.float64, (5, 5), elements=st.floats(-50, 50)))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative(self, e):
        assert infonce(LikelihoodMatrix(e, "cosine"), 0.0).loss >= -1e-12

    def test_saturated_diagonal_approaches_zero(self):
        e = np.full((5, 5), -1.0) + 2.0 * np.eye(5)
        loss = infonce(LikelihoodMatrix(e, "cosine"), math.log(1e4)).loss
        assert 0.0 <= loss <= 1e-6

    def test_extreme_scale_stability(self):
        rng = np.random.default_rng(2)
        e = rng.standard_normal((6, 6)) * 1e6
        lv = infonce(LikelihoodMatrix(e, "vmf"), 0.0)
        assert math.isfinite(lv.loss)
        assert np.all(np.isfinite(lv.d_entries))
        lv = infonce(LikelihoodMatrix(rng.standard_normal((6, 6)), "vmf"), math.log(1e6))
        assert math.isfinite(lv.loss)

    def test_rejects_non_finite(self):
        e = np.zeros((3, 3))
        e[1, 1] = np.inf
        with pytest.raises(ValueError):
            LikelihoodMatrix(e, "vmf")


class TestSiglipLoss:
    def test_saturated_positive_pair(self):
        lm = LikelihoodMatrix(np.array([[50.0]]), "vmf")
        assert siglip_loss(lm, math.log(40.0), 0.0).loss == pytest.approx(0.0, abs=1e-12)

    def test_zero_matrix_values(self):
        lm1 = LikelihoodMatrix(np.zeros((1, 1)), "cosine")
        assert siglip_loss(lm1, 0.0, 0.0).loss == pytest.approx(math.log(2.0), abs=1e-12)
        lm2 = LikelihoodMatrix(np.zeros((2, 2)), "cosine")
        assert siglip_loss(lm2, 0.0, 0.0).loss == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        e = rng.standard_normal((6, 6))
        log_tau, bias = 0.2, -1.5
        lv = siglip_loss(LikelihoodMatrix(e, "ps"), log_tau, bias)
        h = 1e-6
        for _ in range(10):
            i, j = rng.integers(0, 6, size=2)
            ep = e.copy(); ep[i, j] += h
            em = e.copy(); em[i, j] -= h
            fd = (siglip_loss(LikelihoodMatrix(ep, "ps"), log_tau, bias).loss
                  - siglip_loss(LikelihoodMatrix(em, "ps"), log_tau, bias).loss) / (2 * h)
            assert lv.d_entries[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        fd = (siglip_loss(LikelihoodMatrix(e, "ps"), log_tau + h, bias).loss
              - siglip_loss(LikelihoodMatrix(e, "ps"), log_tau - h, bias).loss) / (2 * h)
        assert lv.d_log_tau == pytest.approx(fd, rel=1e-6)
        fd = (siglip_loss(LikelihoodMatrix(e, "ps"), log_tau, bias + h).loss
              - siglip_loss(LikelihoodMatrix(e, "ps"), log_tau, bias - h).loss) / (2 * h)
        assert lv.d_bias == pytest.approx(fd, rel=1e-6)


class TestSymmetrize:
    def test_idempotent_and_commutative(self):
        rng = np.random.default_rng(4)
        a = LikelihoodMatrix(rng.standard_normal((4, 4)), "vmf")
        b = LikelihoodMatrix(rng.standard_normal((4, 4)), "vmf")
        assert np.allclose(symmetrize_kernel(a, a).entries, a.entries)
        assert np.allclose(symmetrize_kernel(a, b).entries, symmetrize_kernel(b, a).entries)

    def test_elementwise_mean(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 3))
        y = rng.standard_normal((3, 3))
        out = symmetrize_kernel(LikelihoodMatrix(x, "ps"), LikelihoodMatrix(y, "ps"))
        for i, j in [(0, 0), (1, 2), (2, 1)]:
            assert out.entries[i, j] == pytest.approx(0.5 * (x[i, j] + y[i, j]), abs=1e-15)

    def test_shape_mismatch(self):
        a = LikelihoodMatrix(np.zeros((3, 3)), "vmf")
        b = LikelihoodMatrix(np.zeros((4, 4)), "vmf")
        with pytest.raises(ValueError):
            symmetrize_kernel(a, b)


class TestBackpropKernel:
    def test_zero_gradient(self):
        mus = unit_rows(3, 4, 0)
        texts = [VmfParams(m, 2.0) for m in mus]
        d_raw, d_pts = backprop_kernel(texts, unit_rows(3, 4, 1), np.zeros((3, 3)))
        assert np.allclose(d_raw, 0.0) and np.allclose(d_pts, 0.0)

    def test_vmf_kappa_stationarity(self):
        # dL/dkappa = cos + F'(kappa); zero exactly at cos = (g+h)/2
        d, kappa = 6, 4.0
        lo, hi = bessel_ratio_bounds(d / 2, kappa)
        target_cos = 0.5 * (lo + hi)
        mu = np.zeros(d); mu[0] = 1.0
        x = np.zeros(d); x[0] = target_cos; x[1] = math.sqrt(1 - target_cos ** 2)
        dist = DecomposedBatch(family="vmf", mu=mu[None, :], kappa=np.array([kappa]),
                               norm=np.array([kappa]))
        d_raw, _ = backprop_kernel_batch(dist, x[None, :], np.ones((1, 1)))
        # the radial component of d_raw is the kappa gradient
        assert float(d_raw[0] @ mu) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("family", ["vmf", "ps", "gauss", "deterministic"])
    def test_matches_finite_differences_through_decompose(self, family):
        cfg = AdapterConfig(d_in=6, d_hidden=6, dist_family=family)
        rng = np.random.default_rng(10)
        raw = rng.standard_normal((5, cfg.d_out)) * 1.5
        pts = unit_rows(5, 6, 11)
        dG = rng.standard_normal((5, 5))

        from avlm.adapter import decompose_batch

        def total(r):
            return float((dG * kernel_matrix(decompose_batch(r, cfg), pts)).sum())

        dec = decompose_batch(raw, cfg)
        d_raw, d_pts = backprop_kernel_batch(dec, pts, dG, cfg.kappa_floor)
        h = 1e-6
        for _ in range(12):
            i = int(rng.integers(0, 5)); j = int(rng.integers(0, cfg.d_out))
            rp = raw.copy(); rp[i, j] += h
            rm = raw.copy(); rm[i, j] -= h
            fd = (total(rp) - total(rm)) / (2 * h)
            assert abs(d_raw[i, j] - fd) <= max(1e-4 * abs(fd), 1e-7), (family, i, j)
        # point-side gradients (used by the symmetric variant)
        for _ in range(8):
            i = int(rng.integers(0, 5)); j = int(rng.integers(0, 6))
            pp = pts.copy(); pp[i, j] += h
            pm = pts.copy(); pm[i, j] -= h
            fd = (float((dG * kernel_matrix(dec, pp)).sum())
                  - float((dG * kernel_matrix(dec, pm)).sum())) / (2 * h)
            assert abs(d_pts[i, j] - fd) <= max(1e-4 * abs(fd), 1e-7), (family, i, j)


class TestRankEquivalence:
    def test_per_row_orderings_match_cosine(self):
        # spherical kernels are per-row strictly increasing in the cosine,
        # so image rankings per fixed text equal cosine rankings
        rng = np.random.default_rng(20)
        for _ in range(50):
            b, d = int(rng.integers(2, 12)), int(rng.integers(3, 16))
            mus = rng.standard_normal((b, d))
            mus /= np.linalg.norm(mus, axis=1)[:, None]
            kappas = rng.uniform(0.1, 100.0, size=b)
            images = rng.standard_normal((b, d))
            images /= np.linalg.norm(images, axis=1)[:, None]
            cos = mus @ images.T
            vmf = kernel_matrix(DecomposedBatch("vmf", mu=mus, kappa=kappas, norm=kappas), images)
            ps = kernel_matrix(DecomposedBatch("ps", mu=mus, kappa=kappas, norm=kappas), images)
            for r in range(b):
                want = np.argsort(-cos[r], kind="stable")
                assert np.array_equal(np.argsort(-vmf[r], kind="stable"), want)
                assert np.array_equal(np.argsort(-ps[r], kind="stable"), want)


class TestModelLikelihoodMatrix:
    def test_asym_image_orientation(self):
        cfg = AdapterConfig(d_in=5, d_hidden=6, variant="asym_image")
        model = init_model(cfg, 0)
        texts = unit_rows(4, 5, 1)
        images = unit_rows(7, 5, 2)
        entries, text_side, image_side = model_likelihood_matrix(model, texts, images)
        assert entries.shape == (4, 7)
        assert text_side is None and image_side is not None
        # entry (m, n) is the image-n distribution's log-density at text m
        dec = apply_adapter(model.image_adapter, images)
        manual = kernel_matrix(dec, texts).T
        assert np.allclose(entries, manual)

    def test_symmetric_is_mean_of_two_kernels(self):
        cfg = AdapterConfig(d_in=5, d_hidden=6, variant="symmetric")
        model = init_model(cfg, 0)
        texts = unit_rows(4, 5, 1)
        images = unit_rows(3, 5, 2)
        entries, tb, ib = model_likelihood_matrix(model, texts, images)
        a = kernel_matrix(tb, ib.mu)
        b = kernel_matrix(ib, tb.mu)
        assert np.allclose(entries, 0.5 * (a + b.T))
