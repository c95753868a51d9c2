"""Built-in target densities, from a 1-D Gaussian up to a 13-parameter
nonlinear least-squares regression with signal-dependent noise.

Every target carries analytic gradients (finite differences fill the
designated dimensions of the regression problem) and reports honest call
counts. `catalog()` lists the problem ids addressable from run specs;
`catalog_truth()` returns generating parameters and, where tractable,
grid-quadrature reference marginals.
"""

import numpy as np

from .core import TargetDensity
from .gaussian import FullRankGaussian
from .mixture import MixturePosterior

LN_2PI = float(np.log(2.0 * np.pi))


class Gauss1D(TargetDensity):
    """L(z) = (z - mu)^2 / (2 var); the in-family sanity problem."""

    dimension = 1
    has_gradient = True
    has_hessian = True
    can_sample = True

    def __init__(self, mu=3.0, var=4.0):
        self.mu = float(mu)
        self.var = float(var)

    def evaluate_raw(self, z, orders):
        d = float(z[0]) - self.mu
        value = 0.5 * d * d / self.var
        grad = np.array([d / self.var]) if orders & {1, 2} else None
        hess = np.array([[1.0 / self.var]]) if 2 in orders else None
        return value, grad, hess, 1

    def value_batch(self, zs):
        d = zs[:, 0] - self.mu
        return 0.5 * d * d / self.var

    def sample_exact(self, count, rng):
        return self.mu + np.sqrt(self.var) * rng.standard_normal((count, 1))

    def sample_start(self, rng):
        return self.sample_exact(1, rng)[0]


class ExpWarped2D(TargetDensity):
    """Correlated 2-D Gaussian with the second coordinate exponentiated.

    (y1, y2) ~ N(mean, cov) and z = (y1, exp(y2)), so the z-density is
    N((z1, ln z2); mean, cov) / z2 on z2 > 0. The mode is displaced from
    the mean and the z2 marginal is strongly skewed.
    """

    dimension = 2
    has_gradient = True
    has_hessian = True
    can_sample = True
    bounded_dims = {}  # support z2 > 0 enforced by rejection, not a transform

    def __init__(self, mean=(0.0, 0.0), cov=((1.0, 0.24), (0.24, 0.09))):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)

    def evaluate_raw(self, z, orders):
        z1, z2 = float(z[0]), float(z[1])
        if z2 <= 0.0:
            return np.inf, None, None, 1
        v = np.array([z1 - self.mean[0], np.log(z2) - self.mean[1]])
        pv = self.prec @ v
        value = 0.5 * float(v @ pv) + np.log(z2)
        grad = hess = None
        if orders & {1, 2}:
            grad = np.array([pv[0], (pv[1] + 1.0) / z2])
        if 2 in orders:
            hess = np.array(
                [
                    [self.prec[0, 0], self.prec[0, 1] / z2],
                    [
                        self.prec[0, 1] / z2,
                        (self.prec[1, 1] - pv[1] - 1.0) / (z2 * z2),
                    ],
                ]
            )
        return value, grad, hess, 1

    def value_batch(self, zs):
        out = np.full(zs.shape[0], np.inf)
        ok = zs[:, 1] > 0.0
        v = np.stack(
            [zs[ok, 0] - self.mean[0], np.log(zs[ok, 1]) - self.mean[1]], axis=1
        )
        quad = 0.5 * np.einsum("ka,ab,kb->k", v, self.prec, v)
        out[ok] = quad + np.log(zs[ok, 1])
        return out

    def sample_exact(self, count, rng):
        y = rng.multivariate_normal(self.mean, self.cov, size=count)
        return np.stack([y[:, 0], np.exp(y[:, 1])], axis=1)

    def sample_start(self, rng):
        return self.sample_exact(1, rng)[0]


class ForwardModel(TargetDensity):
    """Joint density of (x, z) with x ~ N(0, prior_var) and z = x^2 + n.

    L = [x^2/prior_var + (z - x^2)^2/noise_var] / 2. The density rides a
    parabola ridge and is exactly mirror symmetric in x. The Hessian is
    Gauss-Newton (the residual-weighted second-derivative term
    -2(z - x^2)/noise_var is dropped), which keeps it positive definite
    and free of the per-sample noise that term carries.
    """

    dimension = 2
    has_gradient = True
    has_hessian = True
    can_sample = True
    symmetric_dims = ((0, 0.0),)
    hessian_is_gauss_newton = True

    def __init__(self, prior_var=1.0, noise_var=0.05):
        self.prior_var = float(prior_var)
        self.noise_var = float(noise_var)

    def evaluate_raw(self, z, orders):
        x, zz = float(z[0]), float(z[1])
        r = zz - x * x
        value = 0.5 * (x * x / self.prior_var + r * r / self.noise_var)
        grad = hess = None
        if orders & {1, 2}:
            grad = np.array(
                [x / self.prior_var - 2.0 * x * r / self.noise_var, r / self.noise_var]
            )
        if 2 in orders:
            hxx = 1.0 / self.prior_var + 4.0 * x * x / self.noise_var
            hxz = -2.0 * x / self.noise_var
            hess = np.array([[hxx, hxz], [hxz, 1.0 / self.noise_var]])
        return value, grad, hess, 1

    def value_batch(self, zs):
        x, zz = zs[:, 0], zs[:, 1]
        r = zz - x * x
        return 0.5 * (x * x / self.prior_var + r * r / self.noise_var)

    def sample_exact(self, count, rng):
        x = np.sqrt(self.prior_var) * rng.standard_normal(count)
        n = np.sqrt(self.noise_var) * rng.standard_normal(count)
        return np.stack([x, x * x + n], axis=1)

    def sample_start(self, rng):
        return self.sample_exact(1, rng)[0]


class Bimodal2D(TargetDensity):
    """Sum of two full-rank 2-D Gaussians; exactly in the mixture family."""

    dimension = 2
    has_gradient = True
    has_hessian = True
    can_sample = True

    def __init__(
        self,
        means=((-1.0, -0.5), (1.2, 0.9)),
        covs=(((0.7, 0.25), (0.25, 0.5)), ((0.6, -0.2), (-0.2, 0.8))),
        weights=(0.6, 0.4),
    ):
        gaussians = [FullRankGaussian.from_covariance(np.array(m), np.array(c)) for m, c in zip(means, covs)]
        self.mix = MixturePosterior.from_parts(np.array(weights, dtype=float), gaussians)

    def evaluate_raw(self, z, orders):
        value, grad, hess = self.mix.loss_full(np.asarray(z, dtype=float))
        return (
            value,
            grad if orders & {1, 2} else None,
            hess if 2 in orders else None,
            1,
        )

    def value_batch(self, zs):
        return np.array([self.mix.loss(z) for z in zs])

    def sample_exact(self, count, rng):
        return self.mix.sample(count, rng)

    def sample_start(self, rng):
        # wide enough to land in either basin
        return rng.normal(scale=2.0, size=2)


class NlsTarget(TargetDensity):
    """Nonlinear least squares with diagonal, parameter-dependent noise.

    L = [r^T N^-1 r + sum ln N_ii + (z-m0)^T Z^-1 (z-m0)] / 2 with
    r = x - f(z). The Hessian is the Gauss-Newton / Fisher curvature
    (second derivatives of f and N dropped, residual outer products
    replaced by N), which is positive semi-definite by construction and
    costs no more than the gradient. Columns of the model Jacobian for
    ``fd_dims`` come from one-sided finite differences of the model
    output, one extra model call each.
    """

    has_gradient = True
    has_hessian = True
    can_sample = False
    hessian_is_gauss_newton = True

    def __init__(
        self,
        data,
        model_fn,
        jac_fn,
        noise_fn,
        noise_jac_fn,
        dimension,
        fd_dims=(),
        fd_step=0.05,
        fd_floor=1e-6,
        prior_mean=None,
        prior_var=None,
        bounded_dims=None,
    ):
        self.data = np.asarray(data, dtype=float)
        self.model_fn = model_fn
        self.jac_fn = jac_fn
        self.noise_fn = noise_fn
        self.noise_jac_fn = noise_jac_fn
        self.dimension = int(dimension)
        self.fd_dims = tuple(fd_dims)
        self.fd_step = float(fd_step)
        self.fd_floor = float(fd_floor)
        self.prior_mean = None if prior_mean is None else np.asarray(prior_mean, dtype=float)
        self.prior_var = None if prior_var is None else np.asarray(prior_var, dtype=float)
        self.bounded_dims = dict(bounded_dims or {})

    def _value_from(self, z, f):
        r = self.data - f
        nvar = self.noise_fn(z, f)
        value = 0.5 * float(np.sum(r * r / nvar) + np.sum(np.log(nvar)))
        if self.prior_mean is not None:
            d = z - self.prior_mean
            value += 0.5 * float(np.sum(d * d / self.prior_var))
        return value, r, nvar

    def evaluate_raw(self, z, orders):
        z = np.asarray(z, dtype=float)
        for dim, (side, a) in self.bounded_dims.items():
            if (side == "lower" and z[dim] < a) or (side == "upper" and z[dim] > a):
                return np.inf, None, None, 1
        f = self.model_fn(z)
        calls = 1
        value, r, nvar = self._value_from(z, f)
        if not orders & {1, 2}:
            return value, None, None, calls
        jac = self.jac_fn(z, f)
        for j in self.fd_dims:
            h = max(self.fd_step * abs(z[j]), self.fd_floor)
            zp = z.copy()
            zp[j] += h
            jac[:, j] = (self.model_fn(zp) - f) / h
            calls += 1
        dnvar = self.noise_jac_fn(z, f, jac)
        inv_n = 1.0 / nvar
        grad = -(r * inv_n) @ jac + 0.5 * (inv_n - (r * inv_n) ** 2) @ dnvar
        if self.prior_mean is not None:
            grad = grad + (z - self.prior_mean) / self.prior_var
        hess = None
        if 2 in orders:
            hess = (jac * inv_n[:, None]).T @ jac
            hess = hess + 0.5 * (dnvar * inv_n[:, None] ** 2).T @ dnvar
            if self.prior_mean is not None:
                hess = hess + np.diag(1.0 / self.prior_var)
        return value, grad, hess, calls

    def value_batch(self, zs):
        out = np.empty(zs.shape[0])
        for k, z in enumerate(zs):
            out[k] = self.evaluate_raw(z, {0})[0]
        return out


def _nls13_model(theta, t):
    """Sum of three damped sinusoids; broadcasts over leading axes of theta."""
    theta = np.asarray(theta, dtype=float)
    amps = theta[..., 0:9:4]
    decays = theta[..., 1:10:4]
    freqs = theta[..., 2:11:4]
    phases = theta[..., 3:12:4]
    tt = t.reshape((1,) * (theta.ndim - 1) + (-1, 1))
    terms = amps[..., None, :] * np.exp(-decays[..., None, :] * tt) * np.sin(
        freqs[..., None, :] * tt + phases[..., None, :]
    )
    return terms.sum(axis=-1)


class SyntheticNls13(NlsTarget):
    """13-parameter damped-sinusoid regression standing in for a survey fit.

    Parameters per mode m = 1..3: amplitude A_m, decay d_m, frequency
    w_m, phase p_m (indices 4m-4 .. 4m-1); the 13th parameter is the
    noise scale s. Noise variance is signal dependent:
    N_ii = s^2 (1 + 0.3 f_i^2). The third mode's amplitude is tiny
    compared to its uncertainty, so its posterior peaks at the A3 >= 0
    boundary; s > 0 is the second positivity constraint. Gradients are
    analytic except for the 4 designated dimensions (p2, d3, w3, p3),
    which use one-sided 5% finite differences of the model output; a
    gradient evaluation therefore costs 5 model calls.
    """

    A3_INDEX = 8
    NOISE_INDEX = 12
    FD_DIMS = (7, 9, 10, 11)
    TRUTH = np.array(
        [3.0, 0.40, 2.0, 0.5, 1.5, 0.25, 4.5, 1.2, 0.04, 0.30, 7.5, 0.8, 0.30]
    )
    PRIOR_MEAN = np.array(
        [0.0, 0.3, 2.0, 0.0, 0.0, 0.3, 4.5, 0.0, 0.0, 0.30, 7.5, 0.8, 0.5]
    )
    PRIOR_SD = np.array(
        [10.0, 1.0, 1.0, 1.0, 10.0, 1.0, 1.0, 1.0, 10.0, 0.2, 0.7, 0.6, 5.0]
    )
    NOISE_CURVE = 0.3

    def __init__(self, n_points=60, t_max=6.0, data_seed=20240811):
        self.t = np.linspace(0.0, t_max, n_points)
        rng = np.random.default_rng(data_seed)
        f_true = _nls13_model(self.TRUTH, self.t)
        s = self.TRUTH[self.NOISE_INDEX]
        nvar = s * s * (1.0 + self.NOISE_CURVE * f_true**2)
        data = f_true + np.sqrt(nvar) * rng.standard_normal(self.t.size)
        super().__init__(
            data=data,
            model_fn=lambda z: _nls13_model(z, self.t),
            jac_fn=self._jac_analytic,
            noise_fn=self._noise,
            noise_jac_fn=self._noise_jac,
            dimension=13,
            fd_dims=self.FD_DIMS,
            prior_mean=self.PRIOR_MEAN,
            prior_var=self.PRIOR_SD**2,
            bounded_dims={self.A3_INDEX: ("lower", 0.0), self.NOISE_INDEX: ("lower", 0.0)},
        )

    def _jac_analytic(self, z, f):
        t = self.t
        jac = np.zeros((t.size, 13))
        for m in range(3):
            a, d, w, p = z[4 * m : 4 * m + 4]
            damp = np.exp(-d * t)
            arg = w * t + p
            s, c = np.sin(arg), np.cos(arg)
            jac[:, 4 * m + 0] = damp * s
            jac[:, 4 * m + 1] = -a * t * damp * s
            jac[:, 4 * m + 2] = a * t * damp * c
            jac[:, 4 * m + 3] = a * damp * c
        # column 12 (noise scale) does not enter the model
        return jac

    def _noise(self, z, f):
        s = z[self.NOISE_INDEX]
        return s * s * (1.0 + self.NOISE_CURVE * f * f)

    def _noise_jac(self, z, f, jac):
        s = z[self.NOISE_INDEX]
        dn = (2.0 * self.NOISE_CURVE * s * s) * f[:, None] * jac
        dn[:, self.NOISE_INDEX] += 2.0 * s * (1.0 + self.NOISE_CURVE * f * f)
        return dn

    def sample_start(self, rng):
        base = np.array(
            [2.0, 0.35, 2.1, 0.3, 1.0, 0.3, 4.4, 0.8, 0.1, 0.30, 7.5, 0.8, 0.4]
        )
        jitter = rng.normal(scale=0.05, size=13)
        start = base + jitter
        start[self.A3_INDEX] = abs(start[self.A3_INDEX])
        start[self.NOISE_INDEX] = abs(start[self.NOISE_INDEX])
        return start


_CATALOG = {
    "gauss1d": lambda: Gauss1D(),
    "exp_warped_2d": lambda: ExpWarped2D(),
    "forward_model": lambda: ForwardModel(),
    "forward_model_tiny_q": lambda: ForwardModel(noise_var=1e-4),
    "bimodal_2d": lambda: Bimodal2D(),
    "synthetic_nls13": lambda: SyntheticNls13(),
}


def catalog():
    return sorted(_CATALOG)


def get_problem(problem_id):
    try:
        return _CATALOG[problem_id]()
    except KeyError:
        raise KeyError(f"unknown problem id {problem_id!r}") from None


def gauss_newton_hessian(target, z):
    """The target's positive-definite curvature approximation at z."""
    _, _, hess, _ = target.evaluate_raw(np.asarray(z, dtype=float), {0, 1, 2})
    return hess


def catalog_truth(problem_id):
    """Generating parameters plus reference marginals where tractable.

    Returns a dict with ``params`` and, for the low-dimensional problems,
    ``marginals``: {dim: (grid, density)} tables from grid quadrature or
    closed form.
    """
    from .baselines import quadrature_marginal

    target = get_problem(problem_id)
    if problem_id == "gauss1d":
        g = np.linspace(target.mu - 8 * np.sqrt(target.var), target.mu + 8 * np.sqrt(target.var), 4001)
        dens = np.exp(-0.5 * (g - target.mu) ** 2 / target.var) / np.sqrt(2 * np.pi * target.var)
        return {"params": {"mu": target.mu, "var": target.var}, "marginals": {0: (g, dens)}}
    if problem_id == "exp_warped_2d":
        bounds = ((-6.0, 6.0), (1e-6, 8.0))
        marg = {
            d: quadrature_marginal(target, d, bounds, resolution=2000) for d in (0, 1)
        }
        return {"params": {"mean": target.mean.tolist(), "cov": target.cov.tolist()}, "marginals": marg}
    if problem_id.startswith("forward_model"):
        xmax = 6.0 * np.sqrt(target.prior_var)
        zmax = 20.0 * target.prior_var
        bounds = ((-xmax, xmax), (-1.0 - 4 * np.sqrt(target.noise_var), zmax))
        marg = {d: quadrature_marginal(target, d, bounds, resolution=2000) for d in (0, 1)}
        return {
            "params": {"prior_var": target.prior_var, "noise_var": target.noise_var},
            "marginals": marg,
        }
    if problem_id == "bimodal_2d":
        mix = target.mix
        marg = {}
        for d in (0, 1):
            lo = min(c.gauss.mu[d] - 8 * np.sqrt(c.gauss.covariance[d, d]) for c in mix.components)
            hi = max(c.gauss.mu[d] + 8 * np.sqrt(c.gauss.covariance[d, d]) for c in mix.components)
            grid = np.linspace(lo, hi, 2001)
            marg[d] = (grid, mix.marginal_1d(d, grid))
        return {
            "params": {
                "means": [c.gauss.mu.tolist() for c in mix.components],
                "covs": [c.gauss.covariance.tolist() for c in mix.components],
                "weights": mix.weights.tolist(),
            },
            "marginals": marg,
        }
    if problem_id == "synthetic_nls13":
        return {"params": {"truth": target.TRUTH.tolist()}, "marginals": {}}
    raise KeyError(f"unknown problem id {problem_id!r}")
