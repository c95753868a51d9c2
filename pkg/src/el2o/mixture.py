"""Gaussian-mixture approximate posterior with analytic derivatives.

Each component is a full-rank Gaussian with an optional per-dimension
transform chain. Values are computed in log space throughout so that
well-separated components cannot underflow the evaluation.
"""

import numpy as np

from .errors import ComponentSeedError, TransformRangeError
from .gaussian import FullRankGaussian, clip_psd
from .transforms import (
    TransformChain,
    fold_density_table,
    transformed_loss,
    transformed_loss_batch,
)


class MixtureComponent:
    __slots__ = ("weight", "gauss", "chain")

    def __init__(self, weight, gauss, chain=None):
        if not (0.0 < weight <= 1.0):
            raise ValueError("component weight must be in (0, 1]")
        self.weight = float(weight)
        self.gauss = gauss
        self.chain = chain if chain is not None else TransformChain(gauss.dim)


class MixturePosterior:
    """Weighted sum of transformed full-rank Gaussians; weights sum to 1."""

    def __init__(self, components):
        if not components:
            raise ValueError("at least one component required")
        total = sum(c.weight for c in components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, not 1")
        dims = {c.gauss.dim for c in components}
        if len(dims) != 1:
            raise ValueError("components disagree on dimension")
        self.components = list(components)

    @classmethod
    def single(cls, gauss, chain=None):
        return cls([MixtureComponent(1.0, gauss, chain)])

    @classmethod
    def from_parts(cls, weights, gaussians, chains=None):
        if chains is None:
            chains = [None] * len(weights)
        return cls([MixtureComponent(w, g, c) for w, g, c in zip(weights, gaussians, chains)])

    @property
    def dim(self):
        return self.components[0].gauss.dim

    @property
    def n_components(self):
        return len(self.components)

    @property
    def weights(self):
        return np.array([c.weight for c in self.components])

    def component_losses(self, z):
        """Per-component (L_j, grad_j, hess_j) of -ln q_j at z."""
        return [transformed_loss(c.chain, c.gauss, z) for c in self.components]

    def _log_terms(self, z):
        # ln(w_j q_j(z)) for each component
        return np.array(
            [np.log(c.weight) - transformed_loss(c.chain, c.gauss, z)[0] for c in self.components]
        )

    def loss(self, z):
        """-ln q(z) via log-sum-exp over components."""
        lt = self._log_terms(z)
        m = lt.max()
        return -(m + np.log(np.sum(np.exp(lt - m))))

    def loss_full(self, z):
        """(value, gradient, Hessian) of -ln q at z.

        grad = sum_j r_j(z) grad_j; the Hessian adds the responsibility
        covariance of the component gradients:
        hess = sum_j r_j hess_j - [sum_j r_j g_j g_j^T - g g^T].
        """
        parts = self.component_losses(z)
        lt = np.array([np.log(c.weight) - p[0] for c, p in zip(self.components, parts)])
        m = lt.max()
        expd = np.exp(lt - m)
        norm = expd.sum()
        value = -(m + np.log(norm))
        r = expd / norm
        grads = np.array([p[1] for p in parts])
        hesses = np.array([p[2] for p in parts])
        gbar = r @ grads
        hess = np.einsum("j,jab->ab", r, hesses)
        hess = hess - np.einsum("j,ja,jb->ab", r, grads, grads) + np.outer(gbar, gbar)
        return value, gbar, 0.5 * (hess + hess.T)

    def logpdf(self, z):
        return -self.loss(z)

    def loss_batch(self, zs):
        """Values of -ln q over a batch of points, shape (K,)."""
        zs = np.asarray(zs, dtype=float)
        lt = np.stack(
            [
                np.log(c.weight) - transformed_loss_batch(c.chain, c.gauss, zs)[0]
                for c in self.components
            ],
            axis=1,
        )
        m = lt.max(axis=1)
        return -(m + np.log(np.exp(lt - m[:, None]).sum(axis=1)))

    def loss_full_batch(self, zs):
        """Batched (values, gradients, Hessians) of -ln q.

        Shapes (K,), (K, M), (K, M, M); the same responsibility-weighted
        formulas as loss_full, evaluated once per component instead of
        once per point."""
        zs = np.asarray(zs, dtype=float)
        parts = [transformed_loss_batch(c.chain, c.gauss, zs) for c in self.components]
        lt = np.stack(
            [np.log(c.weight) - p[0] for c, p in zip(self.components, parts)], axis=1
        )
        m = lt.max(axis=1)
        expd = np.exp(lt - m[:, None])
        norm = expd.sum(axis=1)
        values = -(m + np.log(norm))
        r = expd / norm[:, None]
        grads_j = np.stack([p[1] for p in parts], axis=1)  # (K, J, M)
        hess_j = np.stack([p[2] for p in parts], axis=1)  # (K, J, M, M)
        gbar = np.einsum("kj,kja->ka", r, grads_j)
        hess = (
            np.einsum("kj,kjab->kab", r, hess_j)
            - np.einsum("kj,kja,kjb->kab", r, grads_j, grads_j)
            + np.einsum("ka,kb->kab", gbar, gbar)
        )
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        return values, gbar, hess

    def responsibilities(self, z):
        """Position-dependent weights r_j(z) = w_j q_j(z) / q(z), in log space."""
        lt = self._log_terms(z)
        m = lt.max()
        expd = np.exp(lt - m)
        return expd / expd.sum()

    def sample(self, count, rng):
        """Ancestral draw: component by weight, Gaussian, inverse transform.

        Draws falling outside a skewed chain's invertible image (a
        far-tail event) are rejected and redrawn.
        """
        out = np.empty((count, self.dim))
        picks = rng.choice(self.n_components, size=count, p=self.weights)
        for k in range(count):
            c = self.components[picks[k]]
            for _ in range(100):
                y = c.gauss.sample(1, rng)[0]
                if c.chain.is_identity:
                    out[k] = y
                    break
                try:
                    out[k] = c.chain.inverse(y)
                    break
                except TransformRangeError:
                    continue
            else:
                raise TransformRangeError("could not draw a point inside the transform image")
        return out

    # -- analytic marginals ----------------------------------------------------

    def marginal_1d(self, dim, grid, fold=None):
        """Density table of the 1-D marginal of coordinate ``dim`` on ``grid``.

        Per component the marginal is the 1-D Gaussian with the (dim, dim)
        covariance entry, pushed through that component's chain for this
        dimension. ``fold=(a, side)`` applies reflective folding last.
        """
        grid = np.asarray(grid, dtype=float)
        dens = np.zeros_like(grid)
        for c in self.components:
            mu = c.gauss.mu[dim]
            var = c.gauss.covariance[dim, dim]
            norm = 1.0 / np.sqrt(2.0 * np.pi * var)
            for k, z in enumerate(grid):
                try:
                    y, j, _, _ = c.chain.derivs_dim(dim, z)
                except TransformRangeError:
                    continue  # outside a boundary stage's domain: zero density
                dens[k] += c.weight * norm * np.exp(-0.5 * (y - mu) ** 2 / var) * abs(j)
        if fold is not None:
            a, side = fold
            dens = fold_density_table(grid, dens, a, side)
        return dens

    def marginal_2d(self, dims, grid_i, grid_j):
        """Joint density of a coordinate pair on the tensor grid (analytic)."""
        di, dj = dims
        gi = np.asarray(grid_i, dtype=float)
        gj = np.asarray(grid_j, dtype=float)
        out = np.zeros((gi.size, gj.size))
        for c in self.components:
            idx = np.array([di, dj])
            mu = c.gauss.mu[idx]
            cov = c.gauss.covariance[np.ix_(idx, idx)]
            prec = np.linalg.inv(cov)
            norm = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(cov)))
            for p, zi in enumerate(gi):
                try:
                    yi, ji, _, _ = c.chain.derivs_dim(di, zi)
                except TransformRangeError:
                    continue
                for q, zj in enumerate(gj):
                    try:
                        yj, jj, _, _ = c.chain.derivs_dim(dj, zj)
                    except TransformRangeError:
                        continue
                    d = np.array([yi - mu[0], yj - mu[1]])
                    out[p, q] += c.weight * norm * np.exp(-0.5 * d @ prec @ d) * abs(ji * jj)
        return out

    # -- growth -----------------------------------------------------------------

    def add_component(self, seed_z, seed_grad, seed_hess, chain=None, weight=None):
        """Seed a new component from one (z, grad, hess) record.

        The new precision is the PSD-clipped seed Hessian and the mean is
        the Newton-style estimate z - Sigma grad at the seed. Existing
        weights are scaled down to make room; the newcomer gets 1/(J+1)
        unless an explicit weight is given.
        """
        try:
            prec, _ = clip_psd(np.asarray(seed_hess, dtype=float))
        except ValueError as exc:
            raise ComponentSeedError(str(exc)) from exc
        gauss = FullRankGaussian(np.zeros(self.dim), prec)
        mu = np.asarray(seed_z, dtype=float) - gauss.covariance @ np.asarray(seed_grad, dtype=float)
        gauss = FullRankGaussian(mu, prec)
        w_new = 1.0 / (self.n_components + 1) if weight is None else float(weight)
        comps = [MixtureComponent(c.weight * (1.0 - w_new), c.gauss, c.chain) for c in self.components]
        comps.append(MixtureComponent(w_new, gauss, chain))
        return MixturePosterior(comps)

    def with_weights(self, weights):
        weights = np.asarray(weights, dtype=float)
        weights = weights / weights.sum()
        return MixturePosterior(
            [MixtureComponent(w, c.gauss, c.chain) for w, c in zip(weights, self.components)]
        )


def truncation_mass(q):
    """Gaussian mass lying outside the invertible image of the chains.

    Skewed chains reach only a half line in the Gaussian coordinate;
    whatever mass falls beyond it is cut off the density. A healthy fit
    keeps this negligible; the outer optimizer penalizes anything more.
    """
    from scipy.special import ndtr

    worst = 0.0
    for c in q.components:
        total = 0.0
        for i in range(q.dim):
            if not c.chain.stages[i]:
                continue
            lo, hi = c.chain.image_dim(i)
            sd = np.sqrt(c.gauss.covariance[i, i])
            if np.isfinite(lo):
                total += float(ndtr((lo - c.gauss.mu[i]) / sd))
            if np.isfinite(hi):
                total += float(ndtr((c.gauss.mu[i] - hi) / sd))
        worst = max(worst, total)
    return worst


def support_overreach(q, limit=50.0):
    """How far (log scale) the 4-sigma support spills past sane coordinates.

    A chain whose inverse maps the Gaussian bulk far beyond ``limit``
    scaled units proposes junk samples; the outer optimizer penalizes
    such states.
    """
    worst = 0.0
    for c in q.components:
        for i in range(q.dim):
            if not c.chain.stages[i]:
                continue
            sd = np.sqrt(c.gauss.covariance[i, i])
            for y_edge in (c.gauss.mu[i] - 4.0 * sd, c.gauss.mu[i] + 4.0 * sd):
                try:
                    z_edge = c.chain.inverse_dim(i, y_edge)
                except TransformRangeError:
                    continue  # the truncation penalty handles that side
                worst = max(worst, np.log1p(max(0.0, abs(z_edge) - limit)))
    return worst
