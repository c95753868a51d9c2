"""Verification oracles and comparison baselines.

These share the target interface and the evaluation counter with the
main fitter, so budget comparisons are reproducible as call-count
ratios. The Metropolis sampler and the quadrature grids are the
reference answers the acceptance suite measures against; the
stochastic-KL minimizer exists to demonstrate the sampling noise the
squared-mismatch objective avoids.
"""

from dataclasses import dataclass

import numpy as np

from .core import Evaluator
from .errors import GridBoundsError


# -- stochastic KL(q||p) minimization (reparametrization gradient) -------------


@dataclass
class AdviState:
    mu: np.ndarray
    chol: np.ndarray  # lower triangular, positive diagonal

    @classmethod
    def init(cls, dim, mu0=None, sigma0=1.0):
        mu = np.zeros(dim) if mu0 is None else np.asarray(mu0, dtype=float).copy()
        return cls(mu=mu, chol=np.eye(dim) * sigma0)

    @property
    def covariance(self):
        return self.chol @ self.chol.T


def advi_step(state, evaluator, rng, step_size, n_samples=1):
    """One stochastic gradient step on KL(q||p).

    Samples are reparametrized as z = mu + L eps and the target gradient
    is propagated through them; the entropy term contributes -1/L_ii to
    the diagonal. A zero step size leaves the state unchanged.
    """
    dim = state.mu.size
    eps = rng.standard_normal((n_samples, dim))
    zs = state.mu + eps @ state.chol.T
    grads = []
    for z in zs:
        _, g = evaluator.raw_value_grad(z)
        grads.append(g)
    grads = np.asarray(grads)
    if step_size == 0.0:
        return state
    g_mu = grads.mean(axis=0)
    g_chol = np.tril(np.einsum("ka,kb->ab", grads, eps) / n_samples)
    # diagonal is optimized through its log to stay positive
    diag = np.diag(state.chol)
    g_log_diag = diag * np.diag(g_chol) - 1.0
    chol = state.chol - step_size * g_chol
    np.fill_diagonal(chol, diag * np.exp(-step_size * g_log_diag))
    mu = state.mu - step_size * g_mu
    return AdviState(mu=mu, chol=np.tril(chol))


def advi_run(
    target,
    budget,
    rng,
    mu0=None,
    sigma0=1.0,
    a0=1.0,
    t0=10.0,
    n_samples=1,
    average_tail=True,
):
    """Run the stochastic minimizer until ``budget`` gradient evaluations.

    The step schedule a_t = a0 / (1 + t/t0) satisfies the usual
    decaying-sum conditions. Returns (state, evaluator) where the state
    mean is the tail average of the iterates (the second half) unless
    ``average_tail`` is false.
    """
    ev = Evaluator(target)
    state = AdviState.init(target.dimension, mu0=mu0, sigma0=sigma0)
    mus = []
    t = 0
    per_step = n_samples
    while ev.n_calls + per_step <= budget:
        before = ev.n_calls
        a_t = a0 / (1.0 + t / t0)
        state = advi_step(state, ev, rng, a_t, n_samples=n_samples)
        per_step = ev.n_calls - before
        mus.append(state.mu.copy())
        t += 1
        if not np.all(np.isfinite(state.mu)):
            raise FloatingPointError("stochastic KL minimizer diverged")
    if average_tail and mus:
        tail = np.asarray(mus[len(mus) // 2 :])
        state = AdviState(mu=tail.mean(axis=0), chol=state.chol)
    return state, ev


# -- random-walk Metropolis -----------------------------------------------------


@dataclass
class McmcResult:
    samples: np.ndarray  # pooled post-burn-in, thinned samples (K, M)
    accept_rate: float
    n_evals: int


def metropolis_run(
    target,
    steps,
    proposal_cov,
    rng,
    init,
    n_chains=1,
    burn_fraction=0.1,
    thin=1,
):
    """Plain Metropolis with a symmetric Gaussian proposal.

    ``steps`` is the total target-evaluation budget across the
    ``n_chains`` independent chains (vectorized through value_batch when
    the target provides it). Burn-in is discarded per chain before
    thinning and pooling.
    """
    ev = Evaluator(target)
    dim = target.dimension
    proposal_cov = np.atleast_2d(np.asarray(proposal_cov, dtype=float))
    chol = np.linalg.cholesky(proposal_cov)
    init = np.asarray(init, dtype=float)
    states = np.tile(init, (n_chains, 1)) if init.ndim == 1 else init.copy()
    if hasattr(target, "value_batch"):
        def batch_value(z):
            ev._count(z.shape[0])
            return target.value_batch(z)
    else:
        def batch_value(z):
            out = np.empty(z.shape[0])
            for i, row in enumerate(z):
                out[i] = target.evaluate_raw(row, {0})[0]
                ev._count(1)
            return out
    current = batch_value(states)
    per_chain = max(1, steps // n_chains)
    keep_from = int(burn_fraction * per_chain)
    kept = []
    accepts = 0
    total = 0
    for step in range(per_chain):
        props = states + rng.standard_normal((n_chains, dim)) @ chol.T
        new = batch_value(props)
        logr = current - new  # negative log densities
        accept = np.log(rng.random(n_chains)) < logr
        states[accept] = props[accept]
        current[accept] = new[accept]
        accepts += int(accept.sum())
        total += n_chains
        if step >= keep_from and (step - keep_from) % thin == 0:
            kept.append(states.copy())
    samples = np.concatenate(kept, axis=0)
    return McmcResult(samples=samples, accept_rate=accepts / total, n_evals=ev.n_calls)


def histogram_density(samples, edges):
    """Normalized histogram as a (centers, density) table."""
    counts, edges = np.histogram(samples, bins=edges)
    widths = np.diff(edges)
    dens = counts / (counts.sum() * widths)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, dens


# -- grid quadrature -------------------------------------------------------------


def _tail_mass_estimate(grid, dens):
    """Off-grid mass from local exponential decay at each edge."""
    total = np.trapezoid(dens, grid)
    est = 0.0
    for f_in, f_edge in ((dens[1], dens[0]), (dens[-2], dens[-1])):
        if f_edge <= 0.0:
            continue
        if f_in <= f_edge:  # not decaying toward the edge
            return np.inf
        h = abs(grid[1] - grid[0])
        kappa = np.log(f_in / f_edge) / h
        est += f_edge / kappa
    return est / total


def quadrature_marginal(target, dim, bounds, resolution=2000):
    """Normalized 1-D marginal of a 1- or 2-D target by trapezoid quadrature.

    ``bounds`` gives (lo, hi) per dimension. Raises GridBoundsError when
    the estimated off-grid mass exceeds 1e-4 of the total.
    """
    m = target.dimension
    if m > 2:
        raise ValueError("grid quadrature supports at most 2 dimensions")
    grids = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    if m == 1:
        vals = _values_on(target, grids[0][:, None])
        dens = np.exp(-(vals - vals.min()))
        tail = _tail_mass_estimate(grids[0], dens)
        if tail > 1e-4:
            raise GridBoundsError(f"estimated off-grid mass {tail:.2e}")
        dens /= np.trapezoid(dens, grids[0])
        return grids[0], dens
    g0, g1 = grids
    table = np.empty((g0.size, g1.size))
    pts = np.empty((g1.size, 2))
    for i, x in enumerate(g0):
        pts[:, 0] = x
        pts[:, 1] = g1
        table[i] = _values_on(target, pts)
    f = np.exp(-(table - table.min()))
    other = 1 - dim
    if dim == 0:
        marg = np.trapezoid(f, g1, axis=1)
    else:
        marg = np.trapezoid(f, g0, axis=0)
    grid = grids[dim]
    tail = _tail_mass_estimate(grid, marg)
    tail_other = _tail_mass_estimate(grids[other], f.sum(axis=dim))
    if tail > 1e-4 or tail_other > 1e-4:
        raise GridBoundsError(f"estimated off-grid mass {max(tail, tail_other):.2e}")
    marg /= np.trapezoid(marg, grid)
    return grid, marg


def _values_on(target, pts):
    if hasattr(target, "value_batch"):
        return np.asarray(target.value_batch(pts), dtype=float)
    return np.array([target.evaluate_raw(p, {0})[0] for p in pts])


def total_variation(grid_a, dens_a, grid_b, dens_b):
    """TV distance between two density tables, regridding b onto a."""
    grid_a = np.asarray(grid_a, dtype=float)
    db = np.interp(grid_a, np.asarray(grid_b, dtype=float), np.asarray(dens_b, dtype=float), left=0.0, right=0.0)
    return 0.5 * np.trapezoid(np.abs(np.asarray(dens_a, dtype=float) - db), grid_a)
