"""Problem-facing abstractions: targets, sample records, coordinate scaling.

A target exposes the unnormalized negative log posterior and whatever
derivatives it can produce, together with an honest count of underlying
function calls (the budget currency of every comparison in this
package). The engine talks to targets through an Evaluator, which hides
coordinate scaling, mirror-extended evaluation for reflective bounds,
and call accounting.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ScalingError


class TargetDensity:
    """Interface for problems: evaluates L(z), the negative log joint.

    Subclasses set ``dimension`` and the capability flags and implement
    ``evaluate_raw``. Evaluation must be pure: repeated calls at the same
    point return identical values.
    """

    dimension = None
    has_gradient = False
    has_hessian = False
    can_sample = False
    # dim -> ("lower" | "upper", a): hard support bounds in raw coordinates
    bounded_dims = {}
    # dims whose posterior is exactly mirror symmetric: list of (dim, center)
    symmetric_dims = ()
    # True when the Hessian is a Gauss-Newton approximation rather than exact
    hessian_is_gauss_newton = False

    def evaluate_raw(self, z, orders):
        """Return (value, grad or None, hess or None, n_calls) at z.

        ``orders`` is a set drawn from {0, 1, 2}; implementations may
        return more than asked but must report the true call count.
        """
        raise NotImplementedError

    def sample_exact(self, count, rng):
        """Draw exact samples from the normalized density (can_sample only)."""
        raise NotImplementedError

    def sample_start(self, rng):
        """Draw a starting point (a prior draw where one exists)."""
        return rng.standard_normal(self.dimension)


@dataclass(frozen=True)
class FiniteDiffRules:
    """One-sided fractional-step differences, with a floor near zero."""

    step_fraction: float = 0.05
    floor: float = 1e-6
    central: bool = False
    dims: tuple = None  # None means every dimension

    def step(self, x):
        return max(self.step_fraction * abs(x), self.floor)


def fd_gradient(func, z, rules=FiniteDiffRules(), f0=None):
    """Finite-difference gradient of a scalar function; returns (grad, calls)."""
    z = np.asarray(z, dtype=float)
    dims = range(z.size) if rules.dims is None else rules.dims
    grad = np.zeros(z.size)
    calls = 0
    if not rules.central and f0 is None:
        f0 = func(z)
        calls += 1
    for j in dims:
        h = rules.step(z[j])
        zp = z.copy()
        zp[j] += h
        if rules.central:
            zm = z.copy()
            zm[j] -= h
            grad[j] = (func(zp) - func(zm)) / (2.0 * h)
            calls += 2
        else:
            grad[j] = (func(zp) - f0) / h
            calls += 1
    return grad, calls


class FiniteDifferenceTarget(TargetDensity):
    """Adds a finite-difference gradient to a value-only target."""

    def __init__(self, base, rules=FiniteDiffRules()):
        self.base = base
        self.rules = rules
        self.dimension = base.dimension
        self.has_gradient = True
        self.has_hessian = False
        self.can_sample = base.can_sample
        self.bounded_dims = base.bounded_dims
        self.symmetric_dims = base.symmetric_dims

    def evaluate_raw(self, z, orders):
        value, _, _, calls = self.base.evaluate_raw(z, {0})
        grad = None
        if 1 in orders:
            grad, extra = fd_gradient(
                lambda x: self.base.evaluate_raw(x, {0})[0], z, self.rules, f0=value
            )
            calls += extra
        return value, grad, None, calls

    def sample_exact(self, count, rng):
        return self.base.sample_exact(count, rng)

    def sample_start(self, rng):
        return self.base.sample_start(rng)


@dataclass
class SampleRecord:
    """One retained evaluation point, stored in scaled coordinates."""

    z: np.ndarray
    logp: float  # value of L(z), the negative log joint
    grad: np.ndarray = None
    hess: np.ndarray = None
    origin: str = "from_q"

    def to_dict(self):
        out = {"z": self.z.tolist(), "logp": self.logp, "origin": self.origin}
        out["grad"] = None if self.grad is None else self.grad.tolist()
        out["hess"] = None if self.hess is None else self.hess.ravel().tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        z = np.array(d["z"], dtype=float)
        grad = None if d.get("grad") is None else np.array(d["grad"], dtype=float)
        hess = d.get("hess")
        if hess is not None:
            hess = np.array(hess, dtype=float).reshape(z.size, z.size)
        return cls(z=z, logp=float(d["logp"]), grad=grad, hess=hess, origin=d.get("origin", "from_q"))


class SampleBatch:
    """Ordered sample records; only those at or past ``burn_in_mark`` enter
    expectations. Near-duplicate points (within 1e-12 in scaled coords)
    are refused."""

    DEDUPE_TOL = 1e-12

    def __init__(self):
        self.records = []
        self.burn_in_mark = 0

    def __len__(self):
        return len(self.records)

    def append(self, record):
        for r in self.records:
            if np.max(np.abs(r.z - record.z)) < self.DEDUPE_TOL:
                return False
        self.records.append(record)
        return True

    def mark_burn_in(self):
        self.burn_in_mark = len(self.records)

    @property
    def active(self):
        return self.records[self.burn_in_mark:]

    def save_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict()) + "\n")
            fh.write(json.dumps({"burn_in_mark": self.burn_in_mark}) + "\n")

    @classmethod
    def load_jsonl(cls, path):
        batch = cls()
        with open(path) as fh:
            for line in fh:
                d = json.loads(line)
                if "burn_in_mark" in d:
                    batch.burn_in_mark = int(d["burn_in_mark"])
                else:
                    batch.records.append(SampleRecord.from_dict(d))
        return batch


@dataclass(frozen=True)
class ScaledSpace:
    """Affine per-dimension map making fit coordinates dimensionless.

    scaled = (raw - center) / scale. Once frozen the map never changes
    for the remainder of a fit.
    """

    center: np.ndarray
    scale: np.ndarray
    frozen: bool = True

    @classmethod
    def identity(cls, dim):
        return cls(center=np.zeros(dim), scale=np.ones(dim), frozen=False)

    def to_scaled(self, z):
        return (np.asarray(z, dtype=float) - self.center) / self.scale

    def from_scaled(self, z):
        return self.center + self.scale * np.asarray(z, dtype=float)

    def scale_grad(self, grad):
        return self.scale * grad

    def scale_hess(self, hess):
        return np.outer(self.scale, self.scale) * hess


def freeze_scaling(gauss, center=None):
    """Freeze scaling at the current Gaussian estimate: s_i = sqrt(Sigma_ii)."""
    var = np.diag(gauss.covariance).copy()
    if np.any(var <= 0.0) or not np.all(np.isfinite(var)):
        raise ScalingError("non-positive variance at scaling freeze")
    c = gauss.mu if center is None else np.asarray(center, dtype=float)
    return ScaledSpace(center=c.copy(), scale=np.sqrt(var), frozen=True)


class Evaluator:
    """Counting wrapper around a target, in a fixed scaled space.

    Reflective dimensions evaluate the mirror-extended target: a point on
    the forbidden side is reflected across the boundary and its
    derivatives are reflected back, so the target appears defined (and
    symmetric) on the whole axis.
    """

    def __init__(self, target, space=None, reflective=()):
        self.target = target
        self.space = space if space is not None else ScaledSpace.identity(target.dimension)
        self.reflective = tuple(reflective)  # (dim, a_raw, side) triples
        self.n_calls = 0

    def set_space(self, space):
        """Swap the coordinate map (used once, at scaling freeze)."""
        self.space = space

    def _count(self, n):
        self.n_calls += n

    def _mirror_in(self, z_raw):
        z = np.asarray(z_raw, dtype=float).copy()
        flips = []
        for dim, a, side in self.reflective:
            beyond = z[dim] < a if side == "lower" else z[dim] > a
            if beyond:
                z[dim] = 2.0 * a - z[dim]
                flips.append(dim)
        return z, flips

    def raw_value_grad(self, z_raw, want_grad=True):
        """(value, grad) in raw coordinates, for MAP optimizers."""
        z_eval, flips = self._mirror_in(z_raw)
        orders = {0, 1} if want_grad else {0}
        value, grad, _, calls = self.target.evaluate_raw(z_eval, orders)
        self._count(calls)
        if grad is not None:
            grad = grad.copy()
            for dim in flips:
                grad[dim] = -grad[dim]
        return value, grad

    def evaluate(self, z_scaled, orders, origin="from_q"):
        """Evaluate at a scaled point; returns a scaled SampleRecord.

        Non-finite target values raise DomainError carrying the point; the
        engine treats those as rejected samples.
        """
        z_scaled = np.asarray(z_scaled, dtype=float)
        z_raw = self.space.from_scaled(z_scaled)
        z_eval, flips = self._mirror_in(z_raw)
        value, grad, hess, calls = self.target.evaluate_raw(z_eval, set(orders))
        self._count(calls)
        if not np.isfinite(value):
            raise DomainError("non-finite target value", z=z_raw)
        if grad is not None and not np.all(np.isfinite(grad)):
            raise DomainError("non-finite target gradient", z=z_raw)
        if grad is not None:
            grad = grad.copy()
            for dim in flips:
                grad[dim] = -grad[dim]
        if hess is not None:
            hess = hess.copy()
            for dim in flips:
                hess[dim, :] *= -1.0
                hess[:, dim] *= -1.0
        rec = SampleRecord(
            z=z_scaled.copy(),
            logp=float(value),
            grad=None if grad is None else self.space.scale_grad(grad),
            hess=None if hess is None else self.space.scale_hess(hess),
            origin=origin,
        )
        return rec


def evaluate(target, z, want, fd_rules=None):
    """One-off raw-coordinate evaluation helper (identity scaling).

    Fills a missing gradient by finite differences when ``fd_rules`` is
    given and the target lacks one.
    """
    t = target
    if 1 in want and not target.has_gradient and fd_rules is not None:
        t = FiniteDifferenceTarget(target, fd_rules)
    ev = Evaluator(t)
    rec = ev.evaluate(np.asarray(z, dtype=float), want, origin="deterministic")
    return rec, ev.n_calls
