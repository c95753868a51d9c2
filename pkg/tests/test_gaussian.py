import numpy as np
import pytest

from el2o.errors import MarginalizationError
from el2o.gaussian import FullRankGaussian, clip_psd


def random_gaussian(rng, dim):
    a = rng.normal(size=(dim, dim))
    return FullRankGaussian(rng.normal(size=dim), a @ a.T + 0.5 * np.eye(dim))


def test_standard_normal_mode_value():
    g = FullRankGaussian([0.0], [[1.0]])
    assert g.logpdf(np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_2d_identity_at_mean():
    g = FullRankGaussian(np.zeros(2), np.eye(2))
    assert g.logpdf(np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_2d_brute_force_value():
    # hand-computed 2x2 inverse/determinant oracle
    mu = np.array([0.4, -1.1])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    det = 2.0 * 1.0 - 0.6 * 0.6
    inv = np.array([[1.0, -0.6], [-0.6, 2.0]]) / det
    z = mu + np.array([1.0, 1.0])
    expected = -0.5 * (2 * np.log(2 * np.pi) + np.log(det) + (z - mu) @ inv @ (z - mu))
    g = FullRankGaussian.from_covariance(mu, cov)
    assert g.logpdf(z) == pytest.approx(expected, rel=1e-12)


def test_gradient_zero_at_mean_and_constant_hessian():
    rng = np.random.default_rng(0)
    g = random_gaussian(rng, 3)
    assert np.allclose(g.loss_grad(g.mu), 0.0, atol=1e-12)
    z1, z2 = rng.normal(size=3), rng.normal(size=3)
    assert np.array_equal(g.loss_hess(z1), g.loss_hess(z2))


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = random_gaussian(rng, 3)
        z = rng.normal(size=3)
        h = 1e-6
        fd = np.zeros(3)
        for i in range(3):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (g.loss(zp) - g.loss(zm)) / (2 * h)
        assert np.allclose(g.loss_grad(z), fd, rtol=1e-6, atol=1e-8)


def test_sampling_moments_and_determinism():
    rng = np.random.default_rng(2)
    g = FullRankGaussian.from_covariance(np.zeros(2), np.diag([4.0, 1.0]))
    zs = g.sample(100_000, np.random.default_rng(7))
    assert np.allclose(zs.mean(axis=0), 0.0, atol=4e-2 * 2.5)
    assert np.allclose(zs.var(axis=0), [4.0, 1.0], rtol=0.05)
    again = g.sample(100_000, np.random.default_rng(7))
    assert np.array_equal(zs, again)


def test_log_density_integrates_to_one():
    g = FullRankGaussian.from_covariance([0.3], [[2.0]])
    grid = np.linspace(0.3 - 8 * np.sqrt(2), 0.3 + 8 * np.sqrt(2), 4001)
    dens = np.exp([g.logpdf(np.array([x])) for x in grid])
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)
    g2 = FullRankGaussian.from_covariance([0.0, 0.0], [[2.0, 0.6], [0.6, 1.0]])
    x = np.linspace(-8 * np.sqrt(2), 8 * np.sqrt(2), 301)
    y = np.linspace(-8, 8, 301)
    table = np.array([[g2.logpdf(np.array([a, b])) for b in y] for a in x])
    mass = np.trapezoid(np.trapezoid(np.exp(table), y, axis=1), x)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_marginalize_keep_all_is_identity():
    rng = np.random.default_rng(3)
    g = random_gaussian(rng, 3)
    m = g.marginalize([0, 1, 2])
    assert np.allclose(m.mu, g.mu)
    assert np.allclose(m.covariance, g.covariance, rtol=1e-10)


def test_marginalize_correlated_keeps_covariance_entry():
    # the marginal variance is Sigma_11, not 1/(Sigma^-1)_11
    g = FullRankGaussian.from_covariance([0.0, 0.0], [[2.0, 0.6], [0.6, 1.0]])
    m = g.marginalize([0])
    assert m.covariance[0, 0] == pytest.approx(2.0, rel=1e-10)
    # grid-quadrature marginal of the joint density as an oracle
    x = np.linspace(-12, 12, 401)
    y = np.linspace(-9, 9, 401)
    table = np.exp([[g.logpdf(np.array([a, b])) for b in y] for a in x])
    marg = np.trapezoid(table, y, axis=1)
    var = np.trapezoid(marg * x**2, x) / np.trapezoid(marg, x)
    assert var == pytest.approx(2.0, rel=1e-4)


def test_marginalize_commutes_with_sampling():
    rng = np.random.default_rng(4)
    g = random_gaussian(rng, 3)
    keep = [0, 2]
    m = g.marginalize(keep)
    zs = g.sample(200_000, rng)[:, keep]
    assert np.allclose(zs.mean(axis=0), m.mu, atol=4 * np.sqrt(np.diag(m.covariance)) / np.sqrt(200_000) * 3)
    assert np.allclose(np.cov(zs.T), m.covariance, rtol=0.05, atol=0.01)


def test_marginalize_empty_keep_raises():
    g = FullRankGaussian(np.zeros(2), np.eye(2))
    with pytest.raises(MarginalizationError):
        g.marginalize([])


def test_precision_log_det_cache_consistency():
    rng = np.random.default_rng(5)
    for _ in range(10):
        g = random_gaussian(rng, 4)
        direct = np.linalg.slogdet(g.covariance)[1]
        assert g.log_det_cov == pytest.approx(direct, rel=1e-10)


def test_non_positive_definite_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        FullRankGaussian(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_clip_psd_repairs_and_flags():
    mat = np.diag([1.0, -0.5])
    fixed, clipped = clip_psd(mat)
    assert clipped
    evals = np.linalg.eigvalsh(fixed)
    assert evals.min() >= 1e-8 * evals.max() * 0.999
    ok, flag = clip_psd(np.eye(3))
    assert not flag
    with pytest.raises(ValueError):
        clip_psd(-np.eye(2))
