import numpy as np
import pytest

from el2o.errors import TransformRangeError
from el2o.gaussian import FullRankGaussian
from el2o.transforms import (
    BoundaryTransform,
    SinhSkewTransform,
    TransformChain,
    fold_density_table,
    transformed_loss,
)


def fd_derivs(f, z, h):
    d1 = (f(z + h) - f(z - h)) / (2 * h)
    d2 = (f(z + h) - 2 * f(z) + f(z - h)) / h**2
    d3 = (f(z + 2 * h) - 2 * f(z + h) + 2 * f(z - h) - f(z - 2 * h)) / (2 * h**3)
    return d1, d2, d3


def num_grad(f, z, h=1e-6):
    g = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


def num_hess(f, z, h=1e-4):
    m = z.size
    out = np.zeros((m, m))
    e = np.eye(m)
    for i in range(m):
        for k in range(i, m):
            if i == k:
                out[i, i] = (f(z + h * e[i]) - 2 * f(z) + f(z - h * e[i])) / h**2
            else:
                out[i, k] = out[k, i] = (
                    f(z + h * (e[i] + e[k]))
                    - f(z + h * (e[i] - e[k]))
                    - f(z - h * (e[i] - e[k]))
                    + f(z - h * (e[i] + e[k]))
                ) / (4 * h**2)
    return out


class TestSinhSkew:
    def test_identity_when_both_zero(self):
        t = SinhSkewTransform(0.0, 0.0)
        for z in (-3.0, 0.0, 1.7):
            assert t.forward(z) == z
            y, j, dj, d2j = t.derivs3(z)
            assert (j, dj, d2j) == (1.0, 0.0, 0.0)

    def test_pure_curtosis_is_sinh(self):
        t = SinhSkewTransform(0.0, 1.0)
        assert t.forward(1.0) == pytest.approx(np.sinh(1.0), rel=1e-14)

    def test_jacobian_at_origin_even_odd(self):
        t = SinhSkewTransform(0.0, 1.0)
        y, j, dj, _ = t.derivs3(0.0)
        assert j == pytest.approx(np.cosh(0.0))
        assert dj == pytest.approx(np.sinh(0.0))

    def test_round_trip(self):
        t = SinhSkewTransform(0.3, -0.5)
        z = 1.2
        assert t.inverse(t.forward(z)) == pytest.approx(z, abs=1e-10)

    def test_bijectivity_property(self):
        # 1e4 evaluable triples in the parameter box
        rng = np.random.default_rng(0)
        n_ok, worst = 0, 0.0
        while n_ok < 10_000:
            t = SinhSkewTransform(rng.uniform(-2, 2), rng.uniform(-2, 2))
            z = rng.uniform(-6, 6)
            try:
                y = t.forward(z)
                if not np.isfinite(y):
                    continue
                worst = max(worst, abs(t.inverse(y) - z))
            except TransformRangeError:
                continue
            n_ok += 1
        assert worst < 1e-10

    def test_derivatives_match_finite_differences(self):
        # huge map values would drown the FD stencil in roundoff, so the
        # random configurations are kept in the numerically sane range
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 150:
            t = SinhSkewTransform(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
            z = rng.uniform(-2.0, 2.0)
            try:
                y, j, dj, d2j = t.derivs3(z)
            except TransformRangeError:
                continue
            if abs(y) > 50.0:
                continue
            f1, _, _ = fd_derivs(t.forward, z, 1e-6)
            _, f2, _ = fd_derivs(t.forward, z, 1e-4)
            assert abs(j - f1) / max(abs(f1), 1e-8) < 1e-6
            assert abs(dj - f2) < 1e-5 * max(1.0, abs(dj))
            checked += 1

    def test_monotone_increasing_on_working_range(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            t = SinhSkewTransform(rng.uniform(-2, 2), rng.uniform(-2, 2))
            zs = np.linspace(-6, 6, 101)
            try:
                ys = np.array([t.forward(z) for z in zs])
            except TransformRangeError:
                continue
            assert np.all(np.diff(ys) > 0)

    def test_series_branch_agrees_with_exact_formula(self):
        # the cubic Taylor branch matches expm1-based evaluation at the
        # same eps to well under the documented 1e-10 round-trip budget
        eps, eta, z = 9.9e-5, 0.4, 3.7
        t = SinhSkewTransform(eps, eta)
        u_exact = np.expm1(eps * z) / eps
        y_exact = np.sinh(eta * u_exact) / eta
        assert abs(t.forward(z) - y_exact) < 1e-10

    def test_taylor_structure_of_log_density(self):
        # the skew parameter fixes the cubic coefficient of 2*L_q and the
        # curtosis parameter the quartic one (eta enters quadratically at
        # zero, so the quartic coefficient is eta|eta|/3)
        g = FullRankGaussian([0.0], [[1.0]])
        zs = np.linspace(-1.0, 1.0, 201)
        for eps, eta in [(1e-3, 0.0), (0.0, 1e-3), (5e-4, -1e-3)]:
            chain = TransformChain(1, [[SinhSkewTransform(eps, eta)]])
            vals = np.array([2.0 * transformed_loss(chain, g, np.array([z]))[0] for z in zs])
            coef = np.polynomial.polynomial.polyfit(zs, vals, 4)
            assert coef[3] == pytest.approx(eps, abs=1e-4)
            assert coef[4] == pytest.approx(eta * abs(eta) / 3.0, abs=1e-4)

    def test_overflow_raises_range_error(self):
        t = SinhSkewTransform(2.0, 0.0)
        with pytest.raises(TransformRangeError):
            t.forward(400.0)

    def test_parameter_box_enforced(self):
        with pytest.raises(ValueError):
            SinhSkewTransform(2.5, 0.0)


class TestBoundary:
    def test_far_from_lower_bound_is_identity_like(self):
        # with a = 0 the map approaches z itself far from the bound
        t = BoundaryTransform("lower", 0.0, xi=1.0)
        z = 40.0
        assert abs(t.forward(z) - z) < 1e-6

    def test_near_bound_is_log_like(self):
        xi = 0.7
        t = BoundaryTransform("lower", 0.5, xi=xi)
        z = 0.5 + 1e-3 * xi
        assert t.forward(z) == pytest.approx(xi * np.log(1e-3), rel=1e-3)

    def test_round_trip_over_working_range(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            kind = "lower" if rng.random() < 0.5 else "upper"
            a = rng.uniform(-3, 3)
            xi = float(np.exp(rng.uniform(-2, 1)))
            t = BoundaryTransform(kind, a, xi)
            u = rng.uniform(1e-6, 50.0)
            z = a + xi * u if kind == "lower" else a - xi * u
            assert t.inverse(t.forward(z)) == pytest.approx(z, abs=1e-10 * max(1, abs(z)))

    def test_below_bound_raises(self):
        t = BoundaryTransform("lower", 1.0, xi=0.5)
        with pytest.raises(TransformRangeError):
            t.forward(0.9)

    def test_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            kind = "lower" if trial % 2 == 0 else "upper"
            a = rng.uniform(-2, 2)
            xi = float(np.exp(rng.uniform(-1.5, 1)))
            t = BoundaryTransform(kind, a, xi)
            u = rng.uniform(0.1, 8.0)
            z = a + xi * u if kind == "lower" else a - xi * u
            y, j, dj, d2j = t.derivs3(z)
            f1, _, _ = fd_derivs(t.forward, z, min(1e-6, 0.01 * xi * u))
            _, f2, _ = fd_derivs(t.forward, z, min(1e-4, 0.02 * xi * u))
            assert abs(j - f1) / max(abs(f1), 1e-8) < 1e-6
            assert abs(dj - f2) < 1e-4 * max(1.0, abs(dj))


class TestChainLoss:
    def test_empty_chain_reduces_to_gaussian(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 2))
        g = FullRankGaussian(rng.normal(size=2), a @ a.T + np.eye(2))
        chain = TransformChain(2)
        z = rng.normal(size=2)
        val, grad, hess = transformed_loss(chain, g, z)
        assert val == pytest.approx(g.loss(z), rel=1e-14)
        assert np.allclose(grad, g.loss_grad(z))
        assert np.allclose(hess, g.loss_hess())

    def test_gradient_matches_finite_difference_1d(self):
        g = FullRankGaussian([0.2], [[1.3]])
        chain = TransformChain(1, [[SinhSkewTransform(0.3, 0.0)]])
        z = np.array([0.7])
        val, grad, hess = transformed_loss(chain, g, z)
        f = lambda zz: transformed_loss(chain, g, zz)[0]
        assert abs(grad[0] - num_grad(f, z)[0]) / max(abs(grad[0]), 1e-8) < 1e-6

    def test_hessian_matches_finite_difference_random(self):
        rng = np.random.default_rng(6)
        for _ in range(60):
            m = int(rng.integers(1, 4))
            a = rng.normal(size=(m, m))
            g = FullRankGaussian(rng.normal(size=m), a @ a.T + 0.5 * np.eye(m))
            chain = TransformChain(
                m, [[SinhSkewTransform(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8))] for _ in range(m)]
            )
            z = rng.normal(size=m)
            _, grad, hess = transformed_loss(chain, g, z)
            f = lambda zz: transformed_loss(chain, g, zz)[0]
            ng, nh = num_grad(f, z), num_hess(f, z)
            assert np.max(np.abs(grad - ng)) / max(1.0, np.max(np.abs(ng))) < 1e-5
            assert np.max(np.abs(hess - nh)) / max(1.0, np.max(np.abs(nh))) < 1e-5

    def test_stacked_stages_compose(self):
        chain = TransformChain(
            1, [[BoundaryTransform("lower", 0.0, xi=0.5), SinhSkewTransform(0.2, -0.3)]]
        )
        z = 0.9
        y = chain.forward_dim(0, z)
        assert chain.inverse_dim(0, y) == pytest.approx(z, abs=1e-10)
        y2, j, dj, d2j = chain.derivs_dim(0, z)
        f = lambda x: chain.forward_dim(0, x)
        f1, f2, _ = fd_derivs(f, z, 1e-6)
        assert j == pytest.approx(f1, rel=1e-5)
        assert dj == pytest.approx(f2, rel=1e-3, abs=1e-5)


class TestFolding:
    def test_symmetric_density_doubles(self):
        a = 1.0
        dens = lambda z: np.exp(-0.5 * (z - a) ** 2) / np.sqrt(2 * np.pi)
        grid = np.linspace(a, a + 10, 2001)
        folded = fold_density_table(grid, dens, a, "lower")
        assert np.allclose(folded, 2 * np.array([dens(z) for z in grid]), rtol=1e-12)

    def test_far_mode_barely_changes(self):
        a, sd = 0.0, 1.0
        mode = a + 3.5 * sd
        dens = lambda z: np.exp(-0.5 * (z - mode) ** 2 / sd**2) / np.sqrt(2 * np.pi * sd**2)
        grid = np.linspace(a, a + 12, 4001)
        folded = fold_density_table(grid, dens, a, "lower")
        peak = folded.max()
        near = abs(folded[0] - dens(grid[0]))
        assert near < 0.01 * peak

    def test_folded_density_integrates_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            mu, sd = rng.normal(), np.exp(rng.uniform(-1, 0.5))
            a = mu - abs(rng.normal()) * sd
            dens = lambda z: np.exp(-0.5 * (z - mu) ** 2 / sd**2) / np.sqrt(2 * np.pi * sd**2)
            grid = np.linspace(a, mu + 10 * sd, 8001)
            folded = fold_density_table(grid, dens, a, "lower")
            assert np.trapezoid(folded, grid) == pytest.approx(1.0, abs=1e-6)

    def test_boundary_peaked_density_nonzero_at_bound(self):
        dens = lambda z: np.exp(-0.5 * z**2) / np.sqrt(2 * np.pi)
        grid = np.linspace(0.0, 8.0, 1001)
        folded = fold_density_table(grid, dens, 0.0, "lower")
        assert folded[0] == pytest.approx(2 * dens(0.0), rel=1e-12)
        assert folded[0] > 0.5
