"""Full-rank multivariate Gaussian with analytic derivatives and marginals.

The precision matrix is the primary parameter (it is what the Hessian
averaging produces); covariance, its Cholesky factor and log-determinant
are derived once at construction. Instances are immutable and safe to
share.
"""

import numpy as np

from .errors import MarginalizationError

LN_2PI = float(np.log(2.0 * np.pi))


def clip_psd(mat, rel_floor=1e-8):
    """Symmetrize and clip eigenvalues to keep a matrix positive definite.

    Eigenvalues below ``rel_floor`` times the largest one are raised to
    that floor. Returns ``(clipped, was_clipped)``; raises ValueError if
    no eigenvalue is positive (nothing to anchor the floor to).
    """
    sym = 0.5 * (mat + mat.T)
    evals, evecs = np.linalg.eigh(sym)
    top = evals[-1]
    if top <= 0.0:
        raise ValueError("matrix has no positive eigenvalue")
    floor = rel_floor * top
    if evals[0] >= floor:
        return sym, False
    clipped = (evecs * np.maximum(evals, floor)) @ evecs.T
    return 0.5 * (clipped + clipped.T), True


class FullRankGaussian:
    """N(mu, Sigma) parametrized by its precision matrix.

    Construction fails (LinAlgError) unless the symmetrized precision is
    positive definite.
    """

    def __init__(self, mu, precision):
        mu = np.asarray(mu, dtype=float)
        precision = np.asarray(precision, dtype=float)
        if precision.shape != (mu.size, mu.size):
            raise ValueError("precision shape does not match mean")
        self._mu = mu.copy()
        self._prec = 0.5 * (precision + precision.T)
        self._chol_prec = np.linalg.cholesky(self._prec)
        # cov = prec^-1 from the Cholesky factor of the precision
        eye = np.eye(mu.size)
        inv_l = np.linalg.solve(self._chol_prec, eye)
        self._cov = inv_l.T @ inv_l
        self._cov = 0.5 * (self._cov + self._cov.T)
        self._chol_cov = np.linalg.cholesky(self._cov)
        self._log_det_cov = -2.0 * float(np.sum(np.log(np.diag(self._chol_prec))))
        self._mu.setflags(write=False)
        self._prec.setflags(write=False)
        self._cov.setflags(write=False)

    @classmethod
    def from_covariance(cls, mu, cov):
        cov = np.asarray(cov, dtype=float)
        chol = np.linalg.cholesky(0.5 * (cov + cov.T))
        inv_l = np.linalg.solve(chol, np.eye(cov.shape[0]))
        return cls(mu, inv_l.T @ inv_l)

    @property
    def dim(self):
        return self._mu.size

    @property
    def mu(self):
        return self._mu

    @property
    def precision(self):
        return self._prec

    @property
    def covariance(self):
        return self._cov

    @property
    def chol_covariance(self):
        return self._chol_cov

    @property
    def log_det_cov(self):
        return self._log_det_cov

    def logpdf(self, z):
        """Normalized log density, including the -(M/2) ln 2pi term."""
        d = np.asarray(z, dtype=float) - self._mu
        quad = float(d @ self._prec @ d)
        return -0.5 * (self.dim * LN_2PI + self._log_det_cov + quad)

    def loss(self, z):
        """Negative log density L(z) = -ln N(z; mu, Sigma)."""
        return -self.logpdf(z)

    def loss_grad(self, z):
        """Gradient of the negative log density: Sigma^-1 (z - mu)."""
        d = np.asarray(z, dtype=float) - self._mu
        return self._prec @ d

    def loss_hess(self, z=None):
        """Hessian of the negative log density: Sigma^-1, constant in z."""
        return self._prec

    def sample(self, count, rng):
        """Draw ``count`` points as mu + L eps with L the covariance Cholesky."""
        if count < 1:
            raise ValueError("count must be >= 1")
        eps = rng.standard_normal((count, self.dim))
        return self._mu + eps @ self._chol_cov.T

    def marginalize(self, keep):
        """Marginal over the dims not in ``keep`` (0-based indices).

        Rows/columns of the covariance are selected; the precision of the
        result is recomputed from the sub-covariance.
        """
        keep = np.asarray(keep, dtype=int)
        if keep.size == 0:
            raise MarginalizationError("keep set must be non-empty")
        sub = self._cov[np.ix_(keep, keep)]
        try:
            return FullRankGaussian.from_covariance(self._mu[keep], sub)
        except np.linalg.LinAlgError as exc:
            raise MarginalizationError("sub-covariance is singular") from exc
