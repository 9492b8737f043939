"""Optimal-transport pseudo-labeling against class centroids."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
EXACT_MAX_CELLS = 10_000


@dataclass
class TransportPlan:
    values: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    n_iters: int = 0
    violation: float = 0.0
    converged: bool = True
    trace: list = field(default_factory=list)

    def cost(self, C) -> float:
        return float(np.sum(self.values * np.asarray(C)))

    def marginal_residuals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.values.sum(axis=1) - self.mu, self.values.sum(axis=0) - self.nu

    def to_dict(self) -> dict:
        rows, cols = self.marginal_residuals()
        return {
            "shape": list(self.values.shape),
            "plan": self.values.tolist(),
            "mu": self.mu.tolist(),
            "nu": self.nu.tolist(),
            "row_residuals": rows.tolist(),
            "col_residuals": cols.tolist(),
            "n_iters": int(self.n_iters),
            "violation": float(self.violation),
            "converged": bool(self.converged),
            "trace": self.trace,
        }


def cost_matrix(centroids, unlabeled_features) -> np.ndarray:
    """K x M cost ``1 - <centroid_k, f_j>``."""
    c = np.asarray(centroids, dtype=np.float64)
    f = np.asarray(unlabeled_features, dtype=np.float64)
    if c.ndim != 2 or f.ndim != 2 or c.shape[1] != f.shape[1]:
        raise ValueError(f"dimension mismatch: centroids {c.shape}, features {f.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("all centroids must be present to build a cost matrix")
    return 1.0 - c @ f.T


def _check_marginals(C, mu, nu):
    C = np.asarray(C, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if C.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({mu.size}, {nu.size})")
    if np.any(mu < 0) or np.any(nu < 0):
        raise ValueError("marginals must be nonnegative")
    if abs(mu.sum() - 1.0) > 1e-9 or abs(nu.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    return C, mu, nu


def _violation(P, mu, nu) -> float:
    return max(np.abs(P.sum(axis=1) - mu).sum(), np.abs(P.sum(axis=0) - nu).sum())


def _dual_value(Cs, a, b, f, g, eps) -> float:
    with np.errstate(over="ignore"):
        mass = np.exp((f[:, None] + g[None, :] - Cs) / eps).sum()
    return float(f @ a + g @ b - eps * mass)


def _newton_polish(Cs, a, b, f, g, eps, tol, max_steps):
    """Damped, Levenberg-regularized Newton ascent on the entropic dual.

    The last g is pinned to fix the additive gauge.  Near-zero plan entries
    make the Hessian close to singular, so a ridge term is raised whenever
    the line search fails and relaxed after each accepted step.  Returns
    (f, g, steps, violation).
    """
    K, M = Cs.shape
    ridge = 1e-12
    steps = 0
    for steps in range(1, max_steps + 1):
        P = np.exp((f[:, None] + g[None, :] - Cs) / eps)
        r, c = P.sum(axis=1), P.sum(axis=0)
        violation = max(np.abs(r - a).sum(), np.abs(c - b).sum())
        if violation <= tol:
            return f, g, steps - 1, violation
        H = np.zeros((K + M - 1, K + M - 1))
        H[:K, :K] = np.diag(r)
        H[:K, K:] = P[:, :-1]
        H[K:, :K] = P[:, :-1].T
        H[K:, K:] = np.diag(c[:-1])
        grad = np.concatenate([a - r, (b - c)[:-1]])
        base = _dual_value(Cs, a, b, f, g, eps)
        accepted = False
        while ridge < 1e3:
            step = np.linalg.solve(H + ridge * np.eye(len(H)), eps * grad)
            slope = grad @ step
            df, dg = step[:K], np.append(step[K:], 0.0)
            t = 1.0
            while t >= 1.0 / 64:
                nf, ng = f + t * df, g + t * dg
                if _dual_value(Cs, a, b, nf, ng, eps) >= base + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            ridge *= 10.0
        if not accepted:
            break
        f, g = nf, ng
        ridge = max(ridge / 10.0, 1e-14)
    P = np.exp((f[:, None] + g[None, :] - Cs) / eps)
    violation = max(np.abs(P.sum(axis=1) - a).sum(), np.abs(P.sum(axis=0) - b).sum())
    return f, g, steps, violation


def sinkhorn(
    C,
    mu,
    nu,
    eps: float = 0.05,
    max_iters: int = 1000,
    tol: float = 1e-6,
    anneal: bool = True,
    newton: bool = True,
) -> TransportPlan:
    """Entropic OT by log-domain Sinkhorn.

    Solves ``min <P, C> - eps * H(P)`` subject to the marginals; the result
    has the form ``diag(u) exp(-C/eps) diag(v)``.  With ``anneal`` the dual
    potentials are warm-started along a geometric eps schedule from the cost
    range down to ``eps``.  With ``newton``, if scaling has not reached
    ``tol`` after a fifth of the budget, the rest of the budget goes to damped
    Newton steps on the same dual.  Non-convergence returns the last plan with
    ``converged=False``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    C, mu, nu = _check_marginals(C, mu, nu)
    K, M = C.shape
    row_on, col_on = mu > 0, nu > 0
    Cs = C[np.ix_(row_on, col_on)]
    a, b = mu[row_on], nu[col_on]
    loga, logb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)

    def plan_of(f, g, e):
        return np.exp((f[:, None] + g[None, :] - Cs) / e)

    schedule = []
    if anneal:
        e = max(float(Cs.max() - Cs.min()), eps)
        while e > eps * 2:
            schedule.append(e)
            e /= 2
    for e in schedule:
        for _ in range(20):
            f = e * (loga - logsumexp((g[None, :] - Cs) / e, axis=1))
            g = e * (logb - logsumexp((f[:, None] - Cs) / e, axis=0))

    use_newton = newton and a.size + b.size <= 2000 and b.size > 1
    scaling_budget = max(1, max_iters // 5) if use_newton else max_iters
    trace = []
    violation = np.inf
    it = 0
    for it in range(1, scaling_budget + 1):
        f = eps * (loga - logsumexp((g[None, :] - Cs) / eps, axis=1))
        g = eps * (logb - logsumexp((f[:, None] - Cs) / eps, axis=0))
        # columns are exact after the g-update, so only the rows can be off
        if it % 10 == 0 or it == scaling_budget or it == 1:
            P = plan_of(f, g, eps)
            violation = float(np.abs(P.sum(axis=1) - a).sum())
            trace.append([it, violation])
            if violation <= tol:
                break

    if violation > tol and use_newton:
        f, g, steps, violation = _newton_polish(Cs, a, b, f, g, eps, tol, max_iters - it)
        it += steps
        trace.append([it, float(violation)])

    P = plan_of(f, g, eps)
    full = np.zeros((K, M))
    full[np.ix_(row_on, col_on)] = P
    violation = _violation(full, mu, nu)
    converged = bool(violation <= tol)
    if not converged:
        log.warning("sinkhorn did not converge: violation %.3g after %d iterations", violation, it)
    return TransportPlan(full, mu, nu, it, violation, converged, trace)


def exact_ot(C, mu, nu) -> TransportPlan:
    """Exact transport LP via HiGHS dual simplex, which returns a basic (vertex) optimum."""
    C = np.asarray(C, dtype=np.float64)
    K, M = C.shape
    if K * M > EXACT_MAX_CELLS:
        raise ValueError(f"exact_ot limited to {EXACT_MAX_CELLS} cells, got {K}x{M}")
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if abs(mu.sum() - nu.sum()) > MASS_TOL:
        raise ValueError(f"infeasible marginals: mass {mu.sum()!r} vs {nu.sum()!r}")
    C, mu, nu = _check_marginals(C, mu, nu)
    A_rows = np.kron(np.eye(K), np.ones((1, M)))
    A_cols = np.kron(np.ones((1, K)), np.eye(M))
    # the last column constraint is implied by the others
    A_eq = np.vstack([A_rows, A_cols[:-1]])
    b_eq = np.concatenate([mu, nu[:-1]])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"exact OT failed: {res.message}")
    P = np.clip(res.x.reshape(K, M), 0, None)
    return TransportPlan(P, mu, nu, int(res.nit), _violation(P, mu, nu), True)


def plan_to_labels(plan) -> tuple[np.ndarray, np.ndarray]:
    """Column-argmax class per target sample; -1 for an all-zero column.

    Ties go to the lower class index.
    """
    P = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    mass = P.sum(axis=0)
    labels = np.argmax(P, axis=0).astype(np.int64)
    conf = np.zeros(P.shape[1])
    ok = mass > 0
    conf[ok] = P[labels[ok], np.flatnonzero(ok)] / mass[ok]
    labels[~ok] = -1
    return labels, conf


def consistency_loss(plan, C_strong) -> float:
    P = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    C_strong = np.asarray(C_strong, dtype=np.float64)
    if P.shape != C_strong.shape:
        raise ValueError(f"plan {P.shape} and cost {C_strong.shape} shapes differ")
    return float(np.sum(P * C_strong))


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def dump_plan(plan: TransportPlan, path, **extra) -> None:
    payload = plan.to_dict()
    payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)
