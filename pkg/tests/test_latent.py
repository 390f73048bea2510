"""Latent algebra tests: projection, compact KL (with a Monte-Carlo oracle),
reparameterized sampling, reprojection, and the frozen Projection type."""

import dataclasses

import numpy as np
import pytest
from scipy import stats

from pepnet import tensor as T
from pepnet.latent import (
    GaussianD,
    GaussianK,
    LatentError,
    LatentSample,
    Projection,
    inverse_reproject,
    kl_compact,
    kl_diag_fullspace,
    project_gaussian,
    sample_compact,
)
from pepnet.tensor import ShapeError, Tensor

from helpers import check_grad_direction, diag_gaussian_kl_reference, random_orthonormal


def make_gd(rng, d, scale=1.0):
    return GaussianD(
        mu=Tensor(rng.standard_normal(d) * scale),
        log_var=Tensor(rng.standard_normal(d) * 0.5),
    )


def make_projection(rng, d, k):
    return Projection(mean=rng.standard_normal(d), basis=random_orthonormal(rng, d, k))


# -- projection of Gaussians -----------------------------------------------------


class TestProjectGaussian:
    def test_coordinate_selection(self):
        rng = np.random.default_rng(0)
        d, k = 5, 3
        g = make_gd(rng, d)
        p = Projection(mean=np.zeros(d), basis=np.eye(d)[:, :k])
        out = project_gaussian(g, p)
        np.testing.assert_allclose(out.mu.data, g.mu.data[:k], atol=1e-15)
        np.testing.assert_allclose(
            out.cov.data, np.diag(np.exp(g.log_var.data[:k])), atol=1e-15
        )

    def test_identity_projection(self):
        rng = np.random.default_rng(1)
        g = make_gd(rng, 4)
        out = project_gaussian(g, Projection.identity(4))
        np.testing.assert_array_equal(out.mu.data, g.mu.data)
        np.testing.assert_allclose(out.cov.data, np.diag(np.exp(g.log_var.data)), atol=1e-15)

    def test_hand_case_diagonal_direction(self):
        u = np.array([[1.0], [1.0]]) / np.sqrt(2.0)
        p = Projection(mean=np.zeros(2), basis=u)
        g = GaussianD(mu=Tensor(np.array([1.0, 1.0])), log_var=Tensor(np.zeros(2)))
        out = project_gaussian(g, p)
        assert out.mu.data[0] == pytest.approx(np.sqrt(2.0), rel=1e-12)
        assert out.cov.data[0, 0] == pytest.approx(1.0, rel=1e-12)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            project_gaussian(make_gd(rng, 4), Projection.identity(5))

    def test_output_always_psd(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            d = int(rng.integers(2, 8))
            k = int(rng.integers(1, d + 1))
            out = project_gaussian(make_gd(rng, d, scale=3.0), make_projection(rng, d, k))
            assert out.min_eigenvalue() >= -1e-8


# -- compact KL ------------------------------------------------------------------


def random_gk(rng, k, pd_floor=0.3):
    a = rng.standard_normal((k, k))
    cov = a @ a.T + pd_floor * np.eye(k)
    return GaussianK(mu=Tensor(rng.standard_normal(k)), cov=Tensor(cov))


class TestKLCompact:
    def test_identical_is_exactly_zero(self):
        rng = np.random.default_rng(4)
        q = random_gk(rng, 3)
        assert kl_compact(q, q).item() == 0.0
        q2 = GaussianK(mu=Tensor(q.mu.data.copy()), cov=Tensor(q.cov.data.copy()))
        assert kl_compact(q, q2).item() == 0.0

    def test_unit_mean_shift_is_half(self):
        q = GaussianK(mu=Tensor(np.zeros(2)), cov=Tensor(np.eye(2)))
        p = GaussianK(mu=Tensor(np.array([1.0, 0.0])), cov=Tensor(np.eye(2)))
        assert kl_compact(q, p).item() == pytest.approx(0.5, abs=1e-12)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(5)
        q = random_gk(rng, 3)
        p = random_gk(rng, 3)
        got = kl_compact(q, p).item()

        n = 1_000_000
        draws = rng.multivariate_normal(q.mu.data, q.cov.data, size=n)
        log_q = stats.multivariate_normal(q.mu.data, q.cov.data).logpdf(draws)
        log_p = stats.multivariate_normal(p.mu.data, p.cov.data).logpdf(draws)
        diff = log_q - log_p
        mc = float(diff.mean())
        se = float(diff.std(ddof=1) / np.sqrt(n))
        assert abs(got - mc) <= 3.0 * se + 1e-9

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            assert kl_compact(random_gk(rng, k), random_gk(rng, k)).item() >= -1e-9

    def test_data_processing_inequality(self):
        rng = np.random.default_rng(7)
        d = 6
        for _ in range(50):
            k = int(rng.integers(1, d + 1))
            q, p = make_gd(rng, d), make_gd(rng, d)
            proj = make_projection(rng, d, k)
            compact = kl_compact(project_gaussian(q, proj), project_gaussian(p, proj)).item()
            full = kl_diag_fullspace(q, p).item()
            assert compact <= full + 1e-7

    def test_identity_projection_matches_fullspace(self):
        rng = np.random.default_rng(8)
        proj = Projection.identity(6)
        for _ in range(20):
            q, p = make_gd(rng, 6), make_gd(rng, 6)
            compact = kl_compact(project_gaussian(q, proj), project_gaussian(p, proj)).item()
            full = kl_diag_fullspace(q, p).item()
            assert compact == pytest.approx(full, abs=1e-9)

    def test_singular_covariance_rejected(self):
        q = GaussianK(mu=Tensor(np.zeros(2)), cov=Tensor(np.zeros((2, 2))))
        p = GaussianK(mu=Tensor(np.zeros(2)), cov=Tensor(np.eye(2)))
        with pytest.raises(LatentError):
            kl_compact(q, p)

    def test_k_mismatch_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ShapeError):
            kl_compact(random_gk(rng, 2), random_gk(rng, 3))

    def test_gradient_through_projection_and_kl(self):
        rng = np.random.default_rng(10)
        d, k = 6, 2
        proj = make_projection(rng, d, k)

        def build(mu_q, lv_q, mu_p, lv_p):
            q = GaussianD(mu=mu_q, log_var=lv_q)
            p = GaussianD(mu=mu_p, log_var=lv_p)
            return kl_compact(project_gaussian(q, proj), project_gaussian(p, proj))

        for _ in range(10):
            arrays = [
                rng.standard_normal(d),
                rng.standard_normal(d) * 0.5,
                rng.standard_normal(d),
                rng.standard_normal(d) * 0.5,
            ]
            assert check_grad_direction(build, arrays, rng) <= 1e-3


class TestKLDiagFullspace:
    def test_matches_textbook_form(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            d = int(rng.integers(1, 8))
            q, p = make_gd(rng, d), make_gd(rng, d)
            want = diag_gaussian_kl_reference(
                q.mu.data, q.log_var.data, p.mu.data, p.log_var.data
            )
            assert kl_diag_fullspace(q, p).item() == pytest.approx(want, abs=1e-10)

    def test_identical_is_exactly_zero(self):
        rng = np.random.default_rng(12)
        q = make_gd(rng, 6)
        assert kl_diag_fullspace(q, q).item() == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(13)

        def build(mu_q, lv_q, mu_p, lv_p):
            return kl_diag_fullspace(
                GaussianD(mu=mu_q, log_var=lv_q), GaussianD(mu=mu_p, log_var=lv_p)
            )

        arrays = [rng.standard_normal(4) for _ in range(4)]
        assert check_grad_direction(build, arrays, rng) <= 1e-3


# -- sampling --------------------------------------------------------------------


class TestSampleCompact:
    def test_zero_covariance_returns_mu_exactly(self):
        rng = np.random.default_rng(14)
        mu = rng.standard_normal(3)
        g = GaussianK(mu=Tensor(mu), cov=Tensor(np.zeros((3, 3))))
        for _ in range(5):
            s = sample_compact(g, rng.standard_normal(3))
            np.testing.assert_array_equal(s.z_k.data, mu)

    def test_standard_normal_passthrough(self):
        g = GaussianK(mu=Tensor(np.zeros(4)), cov=Tensor(np.eye(4)))
        noise = np.random.default_rng(15).standard_normal(4)
        s = sample_compact(g, noise)
        np.testing.assert_array_equal(s.z_k.data, noise)

    def test_sampling_statistics(self):
        rng = np.random.default_rng(16)
        k = 2
        a = rng.standard_normal((k, k))
        cov = a @ a.T + 0.2 * np.eye(k)
        mu = rng.standard_normal(k)
        g = GaussianK(mu=Tensor(mu), cov=Tensor(cov))
        n = 100_000
        draws = np.empty((n, k))
        with T.no_grad():
            for i in range(n):
                draws[i] = sample_compact(g, rng.standard_normal(k)).z_k.data
        emp_mu = draws.mean(axis=0)
        emp_cov = np.cov(draws.T, bias=True)
        assert np.max(np.abs(emp_mu - mu)) < 0.02
        assert np.max(np.abs(emp_cov - cov)) < 0.02 * max(1.0, np.max(np.abs(cov)))

    def test_noise_shape_checked(self):
        g = GaussianK(mu=Tensor(np.zeros(2)), cov=Tensor(np.eye(2)))
        with pytest.raises(ShapeError):
            sample_compact(g, np.zeros(3))

    def test_reparameterization_gradient(self):
        rng = np.random.default_rng(17)
        noise = rng.standard_normal(2)
        r = rng.standard_normal(2)

        def build(mu, free):
            sym = T.scale(T.add(free, T.transpose(free)), 0.5)
            cov = T.add(sym, Tensor(np.eye(2) * 3.0))
            g = GaussianK(mu=mu, cov=cov)
            return T.tsum(T.mul(sample_compact(g, noise).z_k, Tensor(r)))

        arrays = [rng.standard_normal(2), rng.standard_normal((2, 2))]
        assert check_grad_direction(build, arrays, rng) <= 1e-3


# -- reprojection ----------------------------------------------------------------


class TestInverseReproject:
    def test_zero_sample_returns_mean(self):
        rng = np.random.default_rng(18)
        p = make_projection(rng, 5, 2)
        out = inverse_reproject(Tensor(np.zeros(2)), p)
        np.testing.assert_array_equal(out.data, p.mean)

    def test_standard_basis_embedding(self):
        p = Projection(mean=np.zeros(5), basis=np.eye(5)[:, :2])
        z = np.array([3.0, -4.0])
        out = inverse_reproject(Tensor(z), p)
        np.testing.assert_array_equal(out.data, [3.0, -4.0, 0.0, 0.0, 0.0])

    def test_round_trip(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            d = int(rng.integers(2, 8))
            k = int(rng.integers(1, d + 1))
            p = make_projection(rng, d, k)
            z = rng.standard_normal(k)
            back = p.basis.T @ (inverse_reproject(Tensor(z), p).data - p.mean)
            assert np.max(np.abs(back - z)) <= 1e-5

    def test_latent_sample_invariant(self):
        rng = np.random.default_rng(20)
        p = make_projection(rng, 6, 3)
        g = GaussianK(mu=Tensor(rng.standard_normal(3)), cov=Tensor(np.eye(3)))
        s = sample_compact(g, rng.standard_normal(3))
        s = LatentSample(z_k=s.z_k, z_tilde=inverse_reproject(s.z_k, p))
        want = p.basis @ s.z_k.data + p.mean
        assert np.max(np.abs(s.z_tilde.data - want)) <= 1e-6

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(21)
        with pytest.raises(ShapeError):
            inverse_reproject(Tensor(np.zeros(3)), make_projection(rng, 5, 2))

    def test_gradient_wrt_sample(self):
        rng = np.random.default_rng(22)
        p = make_projection(rng, 5, 2)
        r = rng.standard_normal(5)

        def build(z):
            return T.tsum(T.mul(inverse_reproject(z, p), Tensor(r)))

        assert check_grad_direction(build, [rng.standard_normal(2)], rng) <= 1e-3


# -- the frozen Projection type ---------------------------------------------------


class TestProjection:
    def test_rejects_non_orthonormal_basis(self):
        with pytest.raises(ValueError):
            Projection(mean=np.zeros(3), basis=np.ones((3, 2)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Projection(mean=np.zeros(4), basis=np.eye(3)[:, :2])

    def test_attributes_are_frozen(self):
        p = Projection.identity(3)
        with pytest.raises(dataclasses.FrozenInstanceError):
            p.mean = np.zeros(3)

    def test_arrays_are_read_only(self):
        p = Projection.identity(3)
        with pytest.raises(ValueError):
            p.mean[0] = 1.0
        with pytest.raises(ValueError):
            p.basis[0, 0] = 2.0

    def test_identity_factory(self):
        p = Projection.identity(4)
        assert p.d == 4 and p.k == 4 and p.is_identity
        rng = np.random.default_rng(23)
        assert not make_projection(rng, 4, 4).is_identity
