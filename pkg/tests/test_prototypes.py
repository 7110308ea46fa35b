import numpy as np
import pytest
from scipy.stats import norm

from conftest import random_params
from dpdl.errors import ValidationError
from dpdl.prototypes import (MGP, MGPParams, diag_mixture_log_density,
                             mgp_log_density, mgp_new, mgp_realize, vq_init)


class TestParams:
    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            MGPParams(a=np.zeros((2, 2)), m=np.zeros((2, 3)), s=np.zeros((2, 3)), epsilon=1.0)
        with pytest.raises(ValidationError):
            MGPParams(a=np.zeros(2), m=np.zeros((3, 3)), s=np.zeros((2, 3)), epsilon=1.0)
        with pytest.raises(ValidationError):
            MGPParams(a=np.zeros(2), m=np.zeros((2, 3)), s=np.zeros((2, 3)), epsilon=0.0)

    def test_new_from_codebook(self):
        book = np.array([[1.0, 2.0], [3.0, 4.0]])
        params = mgp_new(book, 0.5)
        assert params.n_components == 2 and params.dim == 2
        assert np.array_equal(params.m, book)
        assert params.m is not book
        mgp = mgp_realize(params)
        assert np.allclose(mgp.alpha, [0.5, 0.5])
        assert np.array_equal(mgp.sigma, np.ones((2, 2)))
        assert mgp.epsilon == 0.5

    def test_realize_constraints(self, rng):
        params = random_params(rng, 5, 3)
        mgp = mgp_realize(params)
        assert mgp.alpha.min() > 0
        assert abs(mgp.alpha.sum() - 1.0) < 1e-12
        assert np.all(mgp.sigma > 0)
        assert np.allclose(mgp.sigma, np.exp(params.s))

    def test_realize_rejects_nonfinite(self):
        params = mgp_new(np.zeros((1, 1)), 1.0)
        params.m[0, 0] = np.inf
        with pytest.raises(ValidationError):
            mgp_realize(params)


class TestLogDensity:
    def test_single_gaussian_matches_scipy(self, rng):
        mu = np.array([[0.3, -1.1]])
        sigma = np.array([[0.7, 2.0]])
        mgp = MGP(alpha=np.array([1.0]), mu=mu, sigma=sigma, epsilon=1.0)
        pts = rng.normal(size=(20, 2))
        want = (norm.logpdf(pts[:, 0], 0.3, np.sqrt(0.7))
                + norm.logpdf(pts[:, 1], -1.1, np.sqrt(2.0)))
        got = mgp_log_density(mgp, pts)
        assert np.allclose(got, want, atol=1e-12)

    def test_mixture_is_logsumexp_of_components(self, rng):
        from conftest import random_mgp
        mgp = random_mgp(rng, 3, 2)
        pt = rng.normal(size=2)
        parts = [np.log(mgp.alpha[c])
                 + norm.logpdf(pt[0], mgp.mu[c, 0], np.sqrt(mgp.sigma[c, 0]))
                 + norm.logpdf(pt[1], mgp.mu[c, 1], np.sqrt(mgp.sigma[c, 1]))
                 for c in range(3)]
        want = np.logaddexp.reduce(parts)
        assert abs(mgp_log_density(mgp, pt) - want) < 1e-12

    def test_density_normalizes_in_1d(self, rng):
        from conftest import random_mgp
        mgp = random_mgp(rng, 4, 1)
        lo = float((mgp.mu - 10 * np.sqrt(mgp.sigma)).min())
        hi = float((mgp.mu + 10 * np.sqrt(mgp.sigma)).max())
        grid = np.linspace(lo, hi, 200_001)
        vals = np.exp(mgp_log_density(mgp, grid[:, None]))
        assert abs(np.trapezoid(vals, grid) - 1.0) < 1e-8

    def test_point_dimension_mismatch(self):
        mgp = MGP(alpha=np.array([1.0]), mu=np.zeros((1, 2)),
                  sigma=np.ones((1, 2)), epsilon=1.0)
        with pytest.raises(ValidationError):
            mgp_log_density(mgp, np.zeros(3))

    def test_batch_and_single_agree(self, rng):
        from conftest import random_mgp
        mgp = random_mgp(rng, 2, 3)
        pts = rng.normal(size=(5, 3))
        batch = mgp_log_density(mgp, pts)
        singles = [mgp_log_density(mgp, p) for p in pts]
        assert np.allclose(batch, singles, atol=0)

    def test_shared_kernel_against_direct_formula(self, rng):
        lw = np.log(np.array([0.25, 0.75]))
        means = rng.normal(size=(2, 2))
        variances = np.exp(rng.normal(size=(2, 2)))
        pt = rng.normal(size=2)
        comps = [lw[c] - 0.5 * np.sum((pt - means[c]) ** 2 / variances[c])
                 - 0.5 * np.sum(np.log(2 * np.pi * variances[c])) for c in range(2)]
        assert abs(diag_mixture_log_density(lw, means, variances, pt)
                   - np.logaddexp(*comps)) < 1e-12


class TestVQ:
    def test_trivial_codebook_equals_points(self, rng):
        x = rng.normal(size=(6, 3))
        init = vq_init(x, 6, seed=1)
        assert init.quantization_error < 1e-24
        got = sorted(map(tuple, np.round(init.codebook, 9)))
        want = sorted(map(tuple, np.round(x, 9)))
        assert got == want

    def test_error_monotone_nonincreasing(self, rng):
        x = np.concatenate([rng.normal(0, 1, (40, 4)),
                            rng.normal(5, 1, (40, 4)),
                            rng.normal(-5, 1, (40, 4))])
        init = vq_init(x, 8, seed=2)
        errs = np.array(init.errors)
        assert len(errs) >= 2
        assert np.all(np.diff(errs) <= 1e-12)
        assert init.quantization_error == errs[-1]

    def test_two_blob_recovery(self, rng):
        x = np.concatenate([rng.normal(-4, 0.3, (30, 2)), rng.normal(4, 0.3, (30, 2))])
        init = vq_init(x, 2, seed=0)
        centers = init.codebook[np.argsort(init.codebook[:, 0])]
        assert np.allclose(centers[0], [-4, -4], atol=0.5)
        assert np.allclose(centers[1], [4, 4], atol=0.5)
        assert (init.assignment[:30] == init.assignment[0]).all()
        assert (init.assignment[30:] == init.assignment[30]).all()
        assert init.assignment[0] != init.assignment[30]

    def test_deterministic(self, rng):
        x = rng.normal(size=(25, 3))
        a = vq_init(x, 5, seed=7)
        b = vq_init(x, 5, seed=7)
        assert np.array_equal(a.codebook, b.codebook)
        assert np.array_equal(a.assignment, b.assignment)
        assert a.errors == b.errors

    def test_duplicate_points_are_handled(self):
        # More codewords than distinct points forces empty-cluster reseeding.
        x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5 + [[2.0, 0.0]])
        init = vq_init(x, 4, seed=3)
        assert np.all(np.isfinite(init.codebook))
        assert np.all(np.diff(np.array(init.errors)) <= 1e-12)

    def test_validation(self, rng):
        x = rng.normal(size=(4, 2))
        with pytest.raises(ValidationError):
            vq_init(x, 5)
        with pytest.raises(ValidationError):
            vq_init(x, 0)
        with pytest.raises(ValidationError):
            vq_init(np.zeros((0, 2)), 1)
        with pytest.raises(ValidationError):
            vq_init(x, 2, max_iters=0)
