"""The squared-mismatch objective between approximate and true log
posteriors, its closed-form parameter updates, and the derivative-free
outer optimizer for nonlinear hyperparameters.

The objective for a batch {z_k} is the mean over records of

    N_der^-1 sum_n alpha_n sum_(sym indices) [d^n L_q(z_k) - d^n L_p(z_k)]^2

with the n = 0 term comparing L_q against logp + log_pbar, where the
nuisance normalization log_pbar is profiled out in closed form (its
minimizer is a mean). All computations happen in the engine's scaled
coordinates, which makes the terms dimensionless and the value
comparable across problems.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NeedMoreSamplesError, ObjectiveConfigError
from .gaussian import FullRankGaussian, clip_psd
from .mixture import MixtureComponent, MixturePosterior, support_overreach, truncation_mass
from .transforms import SinhSkewTransform, TransformChain

LN_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ObjectiveWeights:
    """Relative weight of value, gradient and Hessian mismatch terms."""

    a0: float = 1.0
    a1: float = 1.0
    a2: float = 1.0

    def of_order(self, n):
        return (self.a0, self.a1, self.a2)[n]


@dataclass
class El2oSnapshot:
    value: float
    value_term: float
    grad_term: float
    hess_term: float
    log_pbar: float


def n_terms(dim, orders):
    """Count of residual terms per sample for the included orders."""
    n = 0
    if 0 in orders:
        n += 1
    if 1 in orders:
        n += dim
    if 2 in orders:
        n += dim * (dim + 1) // 2
    return n


def _check_orders(records, orders):
    for rec in records:
        if 1 in orders and rec.grad is None:
            raise ObjectiveConfigError("batch record lacks a gradient")
        if 2 in orders and rec.hess is None:
            raise ObjectiveConfigError("batch record lacks a Hessian")


def fit_log_pbar(q, records):
    """Exact minimizer of the value term: mean of L_q(z_k) - logp_k."""
    return float(np.mean([q.loss(r.z) - r.logp for r in records]))


def _batch_arrays(records, orders):
    zs = np.array([r.z for r in records])
    logps = np.array([r.logp for r in records])
    grads = np.array([r.grad for r in records]) if 1 in orders else None
    hesses = np.array([r.hess for r in records]) if 2 in orders else None
    return zs, logps, grads, hesses


def el2o_value(q, records, weights=ObjectiveWeights(), orders=(0, 1, 2), log_pbar=None):
    """EL2O value over the records plus its per-order breakdown."""
    orders = set(orders)
    _check_orders(records, orders)
    dim = records[0].z.size
    nder = n_terms(dim, orders)
    nk = len(records)
    zs, logps, grads, hesses = _batch_arrays(records, orders)
    if orders & {1, 2}:
        lq, gq, hq = q.loss_full_batch(zs)
    else:
        lq, gq, hq = q.loss_batch(zs), None, None
    if log_pbar is None:
        log_pbar = float(np.mean(lq - logps))
    t_val = t_grad = t_hess = 0.0
    if 0 in orders:
        t_val = weights.a0 * float(np.sum((lq - logps - log_pbar) ** 2))
    if 1 in orders:
        t_grad = weights.a1 * float(np.sum((gq - grads) ** 2))
    if 2 in orders:
        iu = np.triu_indices(dim)
        dh = (hq - hesses)[:, iu[0], iu[1]]
        t_hess = weights.a2 * float(np.sum(dh**2))
    scale = 1.0 / (nder * nk)
    return El2oSnapshot(
        value=(t_val + t_grad + t_hess) * scale,
        value_term=t_val * scale,
        grad_term=t_grad * scale,
        hess_term=t_hess * scale,
        log_pbar=log_pbar,
    )


# -- record mapping through a transform chain ---------------------------------


def map_record_through_chain(rec, chain):
    """Push a record's target derivatives into a component's Gaussian space.

    With q(z) = N(y(z); mu, Sigma) prod|J_i|, fitting q to p in z is the
    same as fitting the plain Gaussian to the pushed-forward density in
    y. Returns (y, value_y, grad_y, hess_y); derivative entries are None
    when the record lacks them.
    """
    if chain is None or chain.is_identity:
        return rec.z, rec.logp, rec.grad, rec.hess
    y, j, dj, d2j = chain.derivs(rec.z)
    value_y = rec.logp + float(np.sum(np.log(j)))
    grad_y = hess_y = None
    if rec.grad is not None:
        h = rec.grad + dj / j
        grad_y = h / j
        if rec.hess is not None:
            htil = rec.hess + np.diag(d2j / j - (dj / j) ** 2)
            hess_y = htil / np.outer(j, j) - np.diag(h * dj / j**3)
    return y, value_y, grad_y, hess_y


# -- closed-form updates -------------------------------------------------------


def update_sigma_hessian(hessians, weights=None):
    """Precision from the (weighted) average of sample Hessians.

    The average is symmetrized and PSD-clipped; returns
    (precision, was_clipped).
    """
    hs = np.asarray(hessians, dtype=float)
    if weights is None:
        avg = hs.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        avg = np.einsum("k,kab->ab", w / w.sum(), hs)
    return clip_psd(avg)


def update_mu(zs, grads, covariance, weights=None):
    """Mean of the per-sample Newton estimates z_k - Sigma grad_k."""
    zs = np.asarray(zs, dtype=float)
    grads = np.asarray(grads, dtype=float)
    steps = zs - grads @ covariance.T
    if weights is None:
        return steps.mean(axis=0)
    w = np.asarray(weights, dtype=float)
    return (w / w.sum()) @ steps


def update_gradient_only(zs, grads, tol=1e-10, max_iter=100):
    """Joint (mu, precision) fixed point from gradients alone.

    Alternates the mean update with the outer-product solve
    Sigma^-1 = H^-1 sum_k (z_k - mu) grad_k^T, H = sum (z_k - mu)(z_k - mu)^T,
    to a joint fixed point; exact for quadratic targets once M+1 samples
    are available. The returned precision is symmetrized and clipped.
    """
    zs = np.asarray(zs, dtype=float)
    grads = np.asarray(grads, dtype=float)
    nk, dim = zs.shape
    if nk < dim + 1:
        raise NeedMoreSamplesError(f"need at least {dim + 1} gradient records, have {nk}")
    mu = zs.mean(axis=0)
    prec = None
    for _ in range(max_iter):
        d = zs - mu
        h = d.T @ d
        if np.linalg.cond(h) > 1e12:
            raise NeedMoreSamplesError("sample outer-product matrix is singular")
        s = d.T @ grads
        prec_new = np.linalg.solve(h, s)
        prec_new = 0.5 * (prec_new + prec_new.T)
        prec_new, _ = clip_psd(prec_new)
        cov = np.linalg.inv(prec_new)
        mu_new = update_mu(zs, grads, cov)
        done = (
            prec is not None
            and np.max(np.abs(mu_new - mu)) < tol
            and np.max(np.abs(prec_new - prec)) < tol
        )
        mu, prec = mu_new, prec_new
        if done:
            break
    return mu, prec


def fit_gradient_free(zs, logps):
    """Exact normal-equations fit of a full-rank Gaussian to value records.

    Regresses logp on the polynomial basis {1, z_i, z_i z_j} and maps the
    coefficients back to (mu, precision, log_pbar). Needs
    M(M+3)/2 + 1 points in general position; raises NeedMoreSamplesError
    when the design is rank deficient and ValueError when the recovered
    quadratic form is not positive definite (callers may fall back to the
    outer optimizer in that case).
    """
    zs = np.asarray(zs, dtype=float)
    logps = np.asarray(logps, dtype=float)
    nk, dim = zs.shape
    iu, ju = np.triu_indices(dim)
    ncoef = 1 + dim + iu.size
    if nk < ncoef:
        raise NeedMoreSamplesError(f"need at least {ncoef} value records, have {nk}")
    design = np.empty((nk, ncoef))
    design[:, 0] = 1.0
    design[:, 1 : 1 + dim] = zs
    design[:, 1 + dim :] = zs[:, iu] * zs[:, ju]
    coef, _, rank, _ = np.linalg.lstsq(design, logps, rcond=None)
    if rank < ncoef:
        raise NeedMoreSamplesError("design matrix is rank deficient")
    c0 = coef[0]
    b = coef[1 : 1 + dim]
    quad = np.zeros((dim, dim))
    quad[iu, ju] = coef[1 + dim :]
    quad = quad + quad.T  # doubles the diagonal: B_ii = 2 theta_ii
    prec = quad
    # positive definiteness check doubles as the Cholesky for the solve
    try:
        np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise ValueError("recovered quadratic form is not positive definite") from None
    mu = -np.linalg.solve(prec, b)
    log_det_cov = -float(np.linalg.slogdet(prec)[1])
    log_pbar = float(0.5 * mu @ prec @ mu + 0.5 * log_det_cov + 0.5 * dim * LN_2PI - c0)
    resid = design @ coef - logps
    return mu, prec, log_pbar, float(np.mean(resid**2))


# -- outer optimizer -----------------------------------------------------------


def _chol_params(prec):
    low = np.linalg.cholesky(prec)
    dim = prec.shape[0]
    idx = np.tril_indices(dim, k=-1)
    return np.concatenate([np.log(np.diag(low)), low[idx]])


def _chol_build(params, dim):
    low = np.zeros((dim, dim))
    np.fill_diagonal(low, np.exp(params[:dim]))
    idx = np.tril_indices(dim, k=-1)
    low[idx] = params[dim:]
    return low @ low.T


class ParamPack:
    """Flat-vector view of the optimizable hyperparameters of a mixture.

    Blocks, per free component: mean, precision (log-Cholesky), transform
    stage parameters; plus weight logits (relative to component 0) when
    requested. A mirror tie derives the last component by reflecting the
    first across ``mirror_dim`` (scaled coordinate zero), freezing the
    weights at one half each.
    """

    def __init__(
        self,
        q,
        means=False,
        precisions=False,
        transforms=True,
        weights=False,
        mirror_dim=None,
    ):
        self.q = q
        self.means = means
        self.precisions = precisions
        self.transforms = transforms
        self.weights = weights and q.n_components > 1 and mirror_dim is None
        self.mirror_dim = mirror_dim
        self.free = q.n_components - 1 if mirror_dim is not None else q.n_components
        if mirror_dim is not None and q.n_components != 2:
            raise ValueError("mirror tie expects exactly two components")

    def get(self):
        out = []
        for c in self.q.components[: self.free]:
            if self.means:
                out.append(c.gauss.mu)
            if self.precisions:
                out.append(_chol_params(c.gauss.precision))
            if self.transforms:
                for stages in c.chain.stages:
                    for st in stages:
                        out.append(st.get_params())
        if self.weights:
            w = self.q.weights
            out.append(np.log(w[1:] / w[0]))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    def project(self, theta):
        theta = theta.copy()
        pos = 0
        dim = self.q.dim
        for c in self.q.components[: self.free]:
            if self.means:
                pos += dim
            if self.precisions:
                pos += dim * (dim + 1) // 2
            if self.transforms:
                for stages in c.chain.stages:
                    for st in stages:
                        theta[pos : pos + st.n_params] = st.project_params(
                            theta[pos : pos + st.n_params]
                        )
                        pos += st.n_params
        return theta

    def build(self, theta):
        pos = 0
        dim = self.q.dim
        comps = []
        for c in self.q.components[: self.free]:
            mu = c.gauss.mu
            prec = c.gauss.precision
            if self.means:
                mu = theta[pos : pos + dim]
                pos += dim
            if self.precisions:
                nchol = dim * (dim + 1) // 2
                prec = _chol_build(theta[pos : pos + nchol], dim)
                pos += nchol
            stages_new = [list(s) for s in c.chain.stages]
            if self.transforms:
                for i, stages in enumerate(stages_new):
                    for k, st in enumerate(stages):
                        p = theta[pos : pos + st.n_params]
                        stages_new[i][k] = st.with_params(p)
                        pos += st.n_params
            comps.append(
                MixtureComponent(c.weight, FullRankGaussian(mu, prec), TransformChain(dim, stages_new))
            )
        if self.mirror_dim is not None:
            comps = [
                MixtureComponent(0.5, comps[0].gauss, comps[0].chain),
                reflect_component(comps[0], self.mirror_dim, weight=0.5),
            ]
        if self.weights:
            logits = np.concatenate([[0.0], theta[pos:]])
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            comps = [MixtureComponent(wi, c.gauss, c.chain) for wi, c in zip(w, comps)]
        return MixturePosterior(comps)


def reflect_component(comp, dim, weight=None):
    """Mirror image of a component across scaled coordinate ``dim`` = 0."""
    r = np.ones(comp.gauss.dim)
    r[dim] = -1.0
    mu = comp.gauss.mu * r
    prec = comp.gauss.precision * np.outer(r, r)
    stages_new = [list(s) for s in comp.chain.stages]
    flipped = []
    for st in stages_new[dim]:
        if not isinstance(st, SinhSkewTransform):
            raise ValueError("only skew stages can sit on a mirror dimension")
        flipped.append(SinhSkewTransform(-st.eps, st.eta))
    stages_new[dim] = flipped
    return MixtureComponent(
        comp.weight if weight is None else weight,
        FullRankGaussian(mu, prec),
        TransformChain(comp.gauss.dim, stages_new),
    )


TRUNCATION_ALLOWANCE = 1e-3


def residual_stack(q, records, weights, orders):
    """Weighted residual vector whose squared norm is the EL2O value.

    log_pbar is profiled out in closed form inside the stack, so value
    residuals are centered by construction. One extra penalty residual
    keeps the optimizer away from transform parameters that would
    truncate non-negligible Gaussian mass outside the invertible image
    (the profiled normalization cannot see that mass loss).
    """
    orders = set(orders)
    dim = records[0].z.size
    nder = n_terms(dim, orders)
    nk = len(records)
    scale = 1.0 / np.sqrt(nder * nk)
    zs, logps, grads, hesses = _batch_arrays(records, orders)
    if orders & {1, 2}:
        lq, gq, hq = q.loss_full_batch(zs)
    else:
        lq, gq, hq = q.loss_batch(zs), None, None
    parts = []
    if 0 in orders:
        log_pbar = float(np.mean(lq - logps))
        parts.append(np.sqrt(weights.a0) * scale * (lq - logps - log_pbar))
    if 1 in orders:
        parts.append(np.sqrt(weights.a1) * scale * (gq - grads).ravel())
    if 2 in orders:
        iu = np.triu_indices(dim)
        dh = (hq - hesses)[:, iu[0], iu[1]]
        parts.append(np.sqrt(weights.a2) * scale * dh.ravel())
    mass = truncation_mass(q)
    penalties = np.array(
        [
            100.0 * max(0.0, mass - TRUNCATION_ALLOWANCE),
            # steep cliff: gross truncation must dominate any plausible cost
            1e4 * max(0.0, mass - 50.0 * TRUNCATION_ALLOWANCE),
            10.0 * support_overreach(q),
        ]
    )
    parts.append(penalties)
    return np.concatenate(parts)


def levenberg_marquardt(
    residual_fn,
    theta0,
    project=None,
    max_iter=200,
    lam0=1e-3,
    max_damping_increases=40,
    rel_tol=1e-12,
):
    """Damped least squares with numeric Jacobians and monotone acceptance.

    Candidate steps are projected before evaluation, so accepted steps
    never increase the cost. Returns (theta, cost, stalled).
    """

    def cost_of(theta):
        try:
            r = residual_fn(theta)
        except Exception:
            return None, np.inf
        return r, float(r @ r)

    theta = theta0 if project is None else project(theta0)
    r, cost = cost_of(theta)
    if r is None:
        # starting point not evaluable (e.g. a record outside the chain's
        # numeric range): report a stall, let the caller keep its state
        return theta, np.inf, True
    if theta.size == 0:
        return theta, cost, False
    lam = lam0
    stalled = False
    patience = 0
    for _ in range(max_iter):
        # numeric Jacobian: forward differences while coarse, central when
        # converging (the deep-convergence cases need the extra accuracy)
        central = cost < 1e-4
        jac = np.empty((r.size, theta.size))
        for j in range(theta.size):
            h = 1e-6 * max(1.0, abs(theta[j]))
            tp = theta.copy()
            tp[j] += h
            rp, _ = cost_of(tp)
            if central:
                tm = theta.copy()
                tm[j] -= h
                rm, _ = cost_of(tm)
                jac[:, j] = 0.0 if rp is None or rm is None else (rp - rm) / (2.0 * h)
            else:
                jac[:, j] = 0.0 if rp is None else (rp - r) / h
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.clip(np.diag(jtj), 1e-12, None)
        increases = 0
        while True:
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                cand = theta + delta
                if project is not None:
                    cand = project(cand)
                r_new, cost_new = cost_of(cand)
            if delta is not None and cost_new < cost:
                improved = cost - cost_new
                theta, r, cost = cand, r_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 4.0
            increases += 1
            if increases > max_damping_increases:
                stalled = True
                break
        if stalled:
            break
        if improved <= rel_tol * max(cost, 1e-30):
            break
        patience = patience + 1 if improved < 1e-4 * max(cost, 1e-30) else 0
        if patience >= 3:
            break
    return theta, cost, stalled


def outer_optimize(pack, records, weights, orders, **lm_kwargs):
    """Minimize the residual stack over the pack's active parameters.

    Never calls the target; only the stored records are used. Returns
    (q_optimized, cost, stalled).
    """
    theta0 = pack.get()
    if theta0.size == 0:
        snap = el2o_value(pack.q, records, weights, orders)
        return pack.q, snap.value, False

    def residual_fn(theta):
        return residual_stack(pack.build(theta), records, weights, orders)

    theta, cost, stalled = levenberg_marquardt(
        residual_fn, theta0, project=pack.project, **lm_kwargs
    )
    if not np.isfinite(cost):
        # never hand back a state the stack could not even evaluate
        return pack.q, cost, stalled
    return pack.build(theta), cost, stalled
