"""Entropic and masked semi-relaxed optimal transport solvers.

All solving happens in the log domain. Blocked pairs are represented as
-inf entries of the log kernel, so the assembled plan carries exact zeros
there and can never leak mass across the mask. The semi-relaxed solver
keeps the row marginal hard (scaling exponent 1) and relaxes the column
marginal through a KL penalty (scaling exponent beta2 / (beta2 + lam)).

A brute-force minimizer over the same feasible sets doubles as an
independent oracle for small instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import xlogy

DEFAULT_LAM = 0.05
DEFAULT_BETA2 = 0.05
DEFAULT_MAX_ITER = 2000
DEFAULT_TOL = 1e-9

BRUTE_FORCE_MAX_CELLS = 16


class InfeasibleRowError(ValueError):
    """A row whose mask entries are all blocked cannot meet a hard marginal."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(
            f"row {row} has no open mask entries; exclude it before solving"
        )


@dataclass(frozen=True)
class Histogram:
    """Non-negative weights summing to one (probability mass per sample)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("histogram weights must be a 1-d vector")
        if w.size == 0:
            raise ValueError("histogram must have at least one bin")
        if np.any(w < 0):
            raise ValueError("histogram weights must be non-negative")
        total = float(w.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"histogram weights must sum to 1 (got {total!r})")
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, n: int) -> "Histogram":
        return cls(np.full(n, 1.0 / n))


@dataclass(frozen=True)
class CostSpec:
    """Cost matrix, open/blocked mask and regularization parameters.

    ``mask`` entries are True where transport is allowed.  ``beta1`` /
    ``beta2`` are the marginal penalties; ``math.inf`` means the marginal is
    enforced exactly.  The balanced entropic problem is the special case
    beta1 = beta2 = inf with an all-open mask.
    """

    cost: np.ndarray
    mask: np.ndarray
    lam: float = DEFAULT_LAM
    beta1: float = math.inf
    beta2: float = DEFAULT_BETA2

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if cost.ndim != 2:
            raise ValueError("cost must be a 2-d matrix")
        if mask.shape != cost.shape:
            raise ValueError(
                f"mask shape {mask.shape} does not match cost shape {cost.shape}"
            )
        if not np.all(np.isfinite(cost)):
            raise ValueError("cost entries must be finite (blocking goes in mask)")
        if np.any(cost < 0):
            raise ValueError("cost entries must be non-negative")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("marginal penalties must be non-negative")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape

    @classmethod
    def balanced(cls, cost: np.ndarray, lam: float = DEFAULT_LAM) -> "CostSpec":
        cost = np.asarray(cost, dtype=np.float64)
        return cls(cost, np.ones(cost.shape, dtype=bool), lam, math.inf, math.inf)

    @classmethod
    def semirelaxed(
        cls,
        cost: np.ndarray,
        mask: np.ndarray,
        lam: float = DEFAULT_LAM,
        beta2: float = DEFAULT_BETA2,
    ) -> "CostSpec":
        return cls(cost, mask, lam, math.inf, beta2)

    def cost_scale(self) -> float:
        """Max open cost entry, used to normalize costs before solving."""
        open_costs = self.cost[self.mask]
        if open_costs.size == 0:
            return 1.0
        top = float(open_costs.max())
        return top if top > 0 else 1.0


@dataclass(frozen=True)
class TransportPlan:
    """A solved (or derived) transport plan with its marginal metadata."""

    gamma: np.ndarray
    row_marginal: Histogram
    col_marginal_target: Histogram
    converged: bool
    iterations: int
    lam: float
    beta2: float
    cost_scale: float

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if gamma.shape != (self.row_marginal.n, self.col_marginal_target.n):
            raise ValueError("plan shape does not match its marginals")
        if np.any(gamma < 0):
            raise ValueError("plan entries must be non-negative")
        object.__setattr__(self, "gamma", gamma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.gamma.shape

    def row_sums(self) -> np.ndarray:
        return self.gamma.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.gamma.sum(axis=0)

    def total_mass(self) -> float:
        return float(self.gamma.sum())


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of x and rows of y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sq = (
        (x * x).sum(axis=1)[:, None]
        + (y * y).sum(axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    return np.maximum(sq, 0.0)


def label_mask(row_labels: np.ndarray, col_labels: np.ndarray) -> np.ndarray:
    """Open exactly the pairs whose labels agree."""
    row_labels = np.asarray(row_labels)
    col_labels = np.asarray(col_labels)
    return row_labels[:, None] == col_labels[None, :]


def _check_dims(p: Histogram, q: Histogram, spec: CostSpec):
    n, m = spec.shape
    if p.n != n or q.n != m:
        raise ValueError(
            f"marginal sizes ({p.n}, {q.n}) do not match cost shape {spec.shape}"
        )


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _log_kernel(spec: CostSpec) -> tuple[np.ndarray, float]:
    scale = spec.cost_scale()
    logk = np.where(spec.mask, -spec.cost / (scale * spec.lam), -np.inf)
    return logk, scale


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp that maps all-blocked slices to -inf without warnings."""
    amax = a.max(axis=axis)
    finite = np.isfinite(amax)
    shift = np.where(finite, amax, 0.0)
    total = np.exp(a - np.expand_dims(shift, axis)).sum(axis=axis)
    with np.errstate(divide="ignore"):
        out = np.log(total) + shift
    return np.where(finite, out, -np.inf)


def _sup_change(a: np.ndarray, b: np.ndarray) -> float:
    with np.errstate(invalid="ignore"):
        d = np.abs(a - b)
    d = np.where(np.isnan(d), 0.0, d)  # -inf stayed -inf
    return float(d.max())


def _scaling_iterations(logk, log_p, log_q, fi_col, tol, max_iter):
    n, m = logk.shape
    f = np.zeros(n)
    g = np.zeros(m)
    empty_cols = ~np.isfinite(logk).any(axis=0)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        col_lse = _logsumexp(logk + f[:, None], axis=0)
        if fi_col == 0.0:
            g_new = np.zeros(m)
        else:
            g_new = fi_col * (log_q - col_lse)
        g_new[empty_cols] = 0.0  # 0/0 column: scaling 1, zero mass
        row_lse = _logsumexp(logk + g_new[None, :], axis=1)
        f_new = log_p - row_lse
        delta = max(_sup_change(f, f_new), _sup_change(g, g_new))
        f, g = f_new, g_new
        if delta < tol:
            converged = True
            break
    return f, g, it, converged


def _assemble_plan(logk, g, p):
    """Rebuild the plan with exact row normalization (the final u-update)."""
    a = logk + g[None, :]
    row_lse = _logsumexp(a, axis=1)
    log_p = _log_weights(p)
    with np.errstate(invalid="ignore"):
        exponent = a - row_lse[:, None] + log_p[:, None]
    exponent = np.where(np.isnan(exponent), -np.inf, exponent)
    return np.exp(exponent)


def solve_entropic_ot(
    p: Histogram,
    q: Histogram,
    spec: CostSpec,
    *,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> TransportPlan:
    """Classical entropy-regularized OT with both marginals enforced.

    Requires an all-open mask and beta1 = beta2 = inf; returns a plan whose
    marginals match p and q within the convergence tolerance.
    """
    _check_dims(p, q, spec)
    if not spec.mask.all():
        raise ValueError("entropic OT requires an all-open mask")
    if not (math.isinf(spec.beta1) and math.isinf(spec.beta2)):
        raise ValueError(
            "entropic OT enforces both marginals; build the spec with "
            "beta1 = beta2 = inf (see CostSpec.balanced)"
        )
    logk, scale = _log_kernel(spec)
    _, g, it, converged = _scaling_iterations(
        logk, _log_weights(p.weights), _log_weights(q.weights), 1.0, tol, max_iter
    )
    gamma = _assemble_plan(logk, g, p.weights)
    return TransportPlan(gamma, p, q, converged, it, spec.lam, math.inf, scale)


def solve_masked_semirelaxed(
    p: Histogram,
    q: Histogram,
    spec: CostSpec,
    *,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> TransportPlan:
    """Masked OT with hard row marginal and KL-relaxed column marginal.

    Row sums match p exactly (up to float rounding); blocked entries are
    exactly zero; the column marginal is pulled toward q with strength
    beta2.  Rows whose mask is entirely blocked are rejected: drop them and
    renormalize p before calling.
    """
    _check_dims(p, q, spec)
    if not math.isinf(spec.beta1):
        raise ValueError("semi-relaxed solve requires beta1 = inf (hard rows)")
    if math.isinf(spec.beta2):
        raise ValueError("beta2 must be finite; use solve_entropic_ot instead")
    blocked_rows = np.flatnonzero(~spec.mask.any(axis=1))
    if blocked_rows.size:
        raise InfeasibleRowError(int(blocked_rows[0]))
    fi = spec.beta2 / (spec.beta2 + spec.lam)
    logk, scale = _log_kernel(spec)
    _, g, it, converged = _scaling_iterations(
        logk, _log_weights(p.weights), _log_weights(q.weights), fi, tol, max_iter
    )
    gamma = _assemble_plan(logk, g, p.weights)
    return TransportPlan(gamma, p, q, converged, it, spec.lam, spec.beta2, scale)


def transport_objective(plan: TransportPlan, spec: CostSpec) -> float:
    """Objective value of a plan under a spec, on the normalized cost."""
    return _objective_value(
        plan.gamma,
        spec.cost / spec.cost_scale(),
        spec.mask,
        spec.lam,
        spec.beta2,
        plan.col_marginal_target.weights,
    )


def _objective_value(gamma, cost_n, mask, lam, beta2, q):
    if np.any(gamma[~mask] != 0.0):
        return math.inf
    value = float((gamma * np.where(mask, cost_n, 0.0)).sum())
    value += lam * float(xlogy(gamma, gamma).sum())
    if math.isfinite(beta2):
        r = gamma.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = xlogy(r, r / q) - r + q
        kl = np.where((r == 0.0) & (q == 0.0), 0.0, kl)
        value += beta2 * float(kl.sum())
    return value


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


def brute_force_mot(
    p: Histogram,
    q: Histogram,
    spec: CostSpec,
    *,
    n_starts: int = 3,
    max_iter: int = 20000,
    certify: bool = True,
    seed: int = 0,
) -> TransportPlan:
    """Direct numerical minimizer of the transport objective.

    Independent of the scaling solver: the semi-relaxed problem is solved
    by quasi-Newton descent over per-row softmax parameterizations, the
    balanced problem by projected gradient descent on the coupling
    polytope.  Refuses instances with more than 16 cells.  When
    ``certify`` is set, local optimality is checked by perturbing the
    result by 1e-3 along feasible directions; the objective is strictly
    convex, so the certificate pins the global optimum.
    """
    _check_dims(p, q, spec)
    n, m = spec.shape
    if n * m > BRUTE_FORCE_MAX_CELLS:
        raise ValueError(
            f"instance has {n * m} cells; the brute-force oracle is limited "
            f"to {BRUTE_FORCE_MAX_CELLS}"
        )
    if not math.isinf(spec.beta1):
        raise ValueError("the oracle supports hard rows only (beta1 = inf)")
    scale = spec.cost_scale()
    cost_n = spec.cost / scale
    if math.isinf(spec.beta2):
        if not spec.mask.all():
            raise ValueError("balanced brute force requires an all-open mask")
        gamma, its = _brute_force_balanced(
            p.weights, q.weights, cost_n, spec.lam, max_iter
        )
    else:
        blocked_rows = np.flatnonzero(~spec.mask.any(axis=1))
        if blocked_rows.size:
            raise InfeasibleRowError(int(blocked_rows[0]))
        gamma, its = _brute_force_semirelaxed(
            p.weights, q.weights, cost_n, spec.mask, spec.lam, spec.beta2,
            n_starts, seed,
        )
    if certify:
        _certify_local_optimum(gamma, p.weights, q.weights, cost_n, spec)
    return TransportPlan(gamma, p, q, True, its, spec.lam, spec.beta2, scale)


def _brute_force_semirelaxed(p, q, cost_n, mask, lam, beta2, n_starts, seed):
    n, m = cost_n.shape
    open_cols = [np.flatnonzero(mask[i]) for i in range(n)]
    sizes = [c.size for c in open_cols]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def unpack(theta):
        gamma = np.zeros((n, m))
        for i, cols in enumerate(open_cols):
            t = theta[offsets[i]:offsets[i + 1]]
            t = t - t.max()
            e = np.exp(t)
            gamma[i, cols] = p[i] * e / e.sum()
        return gamma

    def fun(theta):
        gamma = unpack(theta)
        value = _objective_value(gamma, cost_n, mask, lam, beta2, q)
        r = gamma.sum(axis=0)
        with np.errstate(divide="ignore"):
            log_ratio = np.where(r > 0, np.log(np.maximum(r, 1e-300) / q), 0.0)
        grad_gamma = cost_n + lam * (1.0 + np.log(np.maximum(gamma, 1e-300)))
        grad_gamma = grad_gamma + beta2 * log_ratio[None, :]
        grad = np.zeros_like(theta)
        for i, cols in enumerate(open_cols):
            gi = gamma[i, cols]
            di = grad_gamma[i, cols]
            if p[i] > 0:
                grad[offsets[i]:offsets[i + 1]] = gi * (di - (gi / p[i]) @ di)
        return value, grad

    rng = np.random.default_rng(seed)
    starts = [np.zeros(offsets[-1])]
    informed = np.concatenate(
        [-cost_n[i, cols] / lam for i, cols in enumerate(open_cols)]
    ) if offsets[-1] else np.zeros(0)
    starts.append(informed)
    for _ in range(max(0, n_starts - len(starts))):
        starts.append(rng.normal(0.0, 1.0, offsets[-1]))

    best = None
    total_its = 0
    for x0 in starts:
        res = minimize(
            fun, x0, jac=True, method="L-BFGS-B",
            options={"maxiter": 5000, "ftol": 1e-18, "gtol": 1e-12},
        )
        total_its += res.nit
        if best is None or res.fun < best.fun:
            best = res
    return unpack(best.x), total_its


def _brute_force_balanced(p, q, cost_n, lam, max_iter):
    n, m = cost_n.shape

    def project(x):
        # orthogonal projection onto {X : X 1 = 0, X^T 1 = 0}
        return (
            x
            - x.mean(axis=1, keepdims=True)
            - x.mean(axis=0, keepdims=True)
            + x.mean()
        )

    def value(gamma):
        return float((gamma * cost_n).sum() + lam * xlogy(gamma, gamma).sum())

    gamma = np.outer(p, q)
    fval = value(gamma)
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        grad = cost_n + lam * (1.0 + np.log(gamma))
        d = project(grad)
        gnorm = float(np.abs(d).max())
        if gnorm < 1e-12:
            break
        # keep iterates strictly positive
        neg = d > 0
        if neg.any():
            max_step = 0.5 * float((gamma[neg] / d[neg]).min())
        else:
            max_step = 1.0
        t = min(step, max_step)
        while t > 1e-18:
            cand = gamma - t * d
            cval = value(cand)
            if cval <= fval - 0.5 * t * float((d * d).sum()):
                gamma, fval = cand, cval
                step = min(t * 2.0, 1.0)
                break
            t *= 0.5
        else:
            break
    return gamma, it


def _certify_local_optimum(gamma, p, q, cost_n, spec, step=1e-3, slack=1e-9):
    f0 = _objective_value(gamma, cost_n, spec.mask, spec.lam, spec.beta2, q)
    for d in _feasible_directions(gamma, spec, step):
        f1 = _objective_value(gamma + d, cost_n, spec.mask, spec.lam, spec.beta2, q)
        if f0 > f1 + slack:
            raise RuntimeError(
                "brute-force minimizer failed its local-optimality certificate"
            )


def _feasible_directions(gamma, spec, step):
    n, m = gamma.shape
    if math.isinf(spec.beta2):
        # cycle moves preserve both marginals
        for i in range(n):
            for k in range(i + 1, n):
                for j in range(m):
                    for l in range(j + 1, m):
                        for sign in (1.0, -1.0):
                            d = np.zeros((n, m))
                            d[i, j] = d[k, l] = sign
                            d[i, l] = d[k, j] = -sign
                            t = _max_feasible_step(gamma, d, step)
                            if t > 0:
                                yield t * d
    else:
        # within-row transfers preserve the hard row marginal
        for i in range(n):
            cols = np.flatnonzero(spec.mask[i])
            for a in range(cols.size):
                for b in range(cols.size):
                    if a == b:
                        continue
                    d = np.zeros((n, m))
                    d[i, cols[a]] = 1.0
                    d[i, cols[b]] = -1.0
                    t = _max_feasible_step(gamma, d, step)
                    if t > 0:
                        yield t * d


def _max_feasible_step(gamma, d, step):
    dec = d < 0
    if not dec.any():
        return step
    room = float((gamma[dec] / -d[dec]).min())
    return min(step, 0.5 * room)


# ---------------------------------------------------------------------------
# Debug dump
# ---------------------------------------------------------------------------


def dump_plan(plan: TransportPlan, csv_path, meta_path) -> None:
    """Write the plan matrix as CSV plus a small JSON metadata sidecar."""
    np.savetxt(csv_path, plan.gamma, delimiter=",", fmt="%.17g")
    meta = {
        "schema_version": 1,
        "shape": list(plan.shape),
        "lambda": plan.lam,
        "beta2": None if math.isinf(plan.beta2) else plan.beta2,
        "iterations": plan.iterations,
        "converged": plan.converged,
        "cost_scale": plan.cost_scale,
        "total_mass": plan.total_mass(),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
