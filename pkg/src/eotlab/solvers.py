"""Entropic and exact quadratic transport solvers on grid measures.

The entropic objective uses the length-scale convention: the regularization
strength is epsilon^2, so the Gibbs kernel is exp(-|x-y|^2 / epsilon^2) and
epsilon has the units of a distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .couplings import Coupling
from .errors import CertificateError, DomainError, MassMismatchError
from .grids import GridMeasure

__all__ = [
    "SinkhornResult",
    "ExactOTResult",
    "sinkhorn",
    "exact_ot",
    "entropic_cost",
    "gibbs_identity_check",
]

logger = logging.getLogger("eotlab.solvers")

MASS_RTOL = 1e-12


@dataclass
class SinkhornResult:
    plan: Coupling
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    iterations: int
    marg_err: float
    primal_cost: float
    entropy: float
    converged: bool
    mass: float
    err_history: list[tuple[int, float]]


@dataclass
class ExactOTResult:
    plan: Coupling
    cost: float
    method: str
    duality_gap: float
    feasibility_violation: float
    u: np.ndarray
    v: np.ndarray


def _require_equal_masses(lam: GridMeasure, mu: GridMeasure) -> float:
    ml, mm = lam.total_mass, mu.total_mass
    gap = abs(ml - mm) / max(ml, mm)
    if gap > MASS_RTOL:
        raise MassMismatchError(
            f"marginal masses differ: relative gap {gap:.3e} exceeds {MASS_RTOL:.0e}"
        )
    return 0.5 * (ml + mm)


def _cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c = (
        np.sum(x**2, axis=1)[:, None]
        + np.sum(y**2, axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    np.maximum(c, 0.0, out=c)
    return c


def _epsilon_ladder(epsilon: float, cost_max: float) -> list[float]:
    """Geometric warm-start ladder from half the domain diameter down to epsilon."""
    start = 0.5 * np.sqrt(max(cost_max, 0.0))
    ladder: list[float] = []
    e = start
    while e > 1.5 * epsilon:
        ladder.append(e)
        e *= 0.5
    ladder.append(epsilon)
    return ladder


def sinkhorn(
    lam: GridMeasure,
    mu: GridMeasure,
    epsilon: float,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    stabilize_every: int = 1,
    warm_start: bool = True,
    check_every: int = 10,
) -> SinkhornResult:
    """Log-domain Sinkhorn iteration at temperature epsilon^2.

    Marginals are normalized to probability internally; the returned plan,
    potentials, cost and entropy refer to the original mass scale, and the
    plan satisfies pi = exp((f + g - c)/eps^2) * lam (x) mu entrywise.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    mass = _require_equal_masses(lam, mu)

    pos_i = np.nonzero(lam.weights > 0)[0]
    pos_j = np.nonzero(mu.weights > 0)[0]
    la = lam.weights[pos_i] / lam.total_mass
    mb = mu.weights[pos_j] / mu.total_mass
    x = lam.points[pos_i]
    y = mu.points[pos_j]
    cost = _cost_matrix(x, y)
    log_la = np.log(la)
    log_mb = np.log(mb)

    ladder = _epsilon_ladder(epsilon, float(cost.max())) if warm_start else [epsilon]

    f = np.zeros(la.shape[0])
    g = np.zeros(mb.shape[0])
    iterations = 0
    marg_err = np.inf
    err_history: list[tuple[int, float]] = []
    work = np.empty_like(cost)

    def marginal_error(eps2: float) -> float:
        np.add(f[:, None] + log_la[:, None] * eps2, g[None, :] + log_mb[None, :] * eps2,
               out=work)
        np.subtract(work, cost, out=work)
        np.divide(work, eps2, out=work)
        np.exp(work, out=work)
        err_row = float(np.sum(np.abs(work.sum(axis=1) - la)))
        err_col = float(np.sum(np.abs(work.sum(axis=0) - mb)))
        return max(err_row, err_col)

    def softmin_rows(pot: np.ndarray, log_w: np.ndarray, eps2: float) -> np.ndarray:
        """-eps2 * log sum_j exp((pot_j - c_ij)/eps2 + log_w_j), row-wise."""
        np.subtract((pot + eps2 * log_w)[None, :], cost, out=work)
        np.divide(work, eps2, out=work)
        peak = work.max(axis=1)
        np.subtract(work, peak[:, None], out=work)
        np.exp(work, out=work)
        return -eps2 * (np.log(work.sum(axis=1)) + peak)

    def softmin_cols(pot: np.ndarray, log_w: np.ndarray, eps2: float) -> np.ndarray:
        np.subtract((pot + eps2 * log_w)[:, None], cost, out=work)
        np.divide(work, eps2, out=work)
        peak = work.max(axis=0)
        np.subtract(work, peak[None, :], out=work)
        np.exp(work, out=work)
        return -eps2 * (np.log(work.sum(axis=0)) + peak)

    for stage, eps in enumerate(ladder):
        final = stage == len(ladder) - 1
        eps2 = eps * eps
        stage_tol = tol if final else max(tol, 1e-3)
        stage_iter = max_iter if final else 200
        for it in range(1, stage_iter + 1):
            f = softmin_rows(g, log_mb, eps2)
            g = softmin_cols(f, log_la, eps2)
            if stabilize_every and it % stabilize_every == 0:
                center = float(np.mean(f))
                f -= center
                g += center
            iterations += 1
            if it % check_every == 0 or it == stage_iter:
                err = marginal_error(eps2)
                if final:
                    if err_history and err > err_history[-1][1] + 1e-12:
                        logger.warning(
                            "sinkhorn marginal error increased between checks "
                            "(%.3e -> %.3e); this indicates a bug",
                            err_history[-1][1],
                            err,
                        )
                    err_history.append((iterations, err))
                    marg_err = err
                if err <= stage_tol:
                    break
        if final and marg_err > tol:
            marg_err = marginal_error(eps2)
            err_history.append((iterations, marg_err))

    eps2 = epsilon * epsilon
    log_plan = (f[:, None] + g[None, :] - cost) / eps2 + log_la[:, None] + log_mb[None, :]
    plan_sub = np.exp(log_plan)
    del work
    primal_sub = float(np.sum(cost * plan_sub))
    # Relative entropy of the normalized plan w.r.t. the normalized product,
    # evaluated in the log domain (exact for the materialized plan).
    entropy_sub = float(np.sum(plan_sub * (f[:, None] + g[None, :] - cost))) / eps2

    full = np.zeros((lam.spec.n_points, mu.spec.n_points))
    full[np.ix_(pos_i, pos_j)] = mass * plan_sub
    f_full = np.zeros(lam.spec.n_points)
    g_full = np.zeros(mu.spec.n_points)
    f_full[pos_i] = f - eps2 * np.log(mass)
    g_full[pos_j] = g

    converged = marg_err <= tol
    if not converged:
        logger.warning(
            "sinkhorn did not converge: marginal error %.3e after %d iterations",
            marg_err,
            iterations,
        )
    return SinkhornResult(
        plan=Coupling(source=lam, target=mu, mass=full, epsilon=epsilon),
        f=f_full,
        g=g_full,
        epsilon=epsilon,
        iterations=iterations,
        marg_err=marg_err,
        primal_cost=mass * primal_sub,
        entropy=mass * entropy_sub - mass * np.log(mass),
        converged=converged,
        mass=mass,
        err_history=err_history,
    )


def entropic_cost(res: SinkhornResult) -> float:
    """Quadratic cost plus epsilon^2 times the relative entropy of the plan."""
    return res.primal_cost + res.epsilon**2 * res.entropy


def gibbs_identity_check(res: SinkhornResult, n_samples: int, seed: int = 0) -> float:
    """Max relative log-ratio error of the two-point density identity.

    Both sides are evaluated independently: the left from materialized plan
    entries, the right from the cost differences at temperature epsilon^2.
    Quadruples touching an underflowed (zero) entry are skipped and resampled.
    """
    plan = res.plan.mass
    cost = res.plan.cost_matrix
    eps2 = res.epsilon**2
    # Subnormal entries carry too few significand bits for an accurate log;
    # treat them like underflowed zeros and resample.
    positive = np.finfo(float).tiny
    ii, jj = np.nonzero(plan > positive)
    if ii.size == 0:
        raise DomainError("plan has no positive entries")
    rng = np.random.default_rng(seed)
    worst = 0.0
    accepted = 0
    attempts = 0
    while accepted < n_samples:
        attempts += 1
        if attempts > 1000:
            raise DomainError("could not sample enough strictly positive quadruples")
        batch = max(n_samples - accepted, 1)
        a = rng.integers(0, ii.size, size=batch)
        b = rng.integers(0, ii.size, size=batch)
        i, j = ii[a], jj[a]
        k, l = ii[b], jj[b]
        cross1 = plan[i, l]
        cross2 = plan[k, j]
        valid = (cross1 > positive) & (cross2 > positive)
        if not np.any(valid):
            continue
        i, j, k, l = i[valid], j[valid], k[valid], l[valid]
        lhs = (
            np.log(plan[i, j])
            + np.log(plan[k, l])
            - np.log(plan[i, l])
            - np.log(plan[k, j])
        )
        rhs = -(cost[i, j] + cost[k, l] - cost[i, l] - cost[k, j]) / eps2
        scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / scale)))
        accepted += int(np.count_nonzero(valid))
    return worst


# ---------------------------------------------------------------------------
# Exact quadratic transport
# ---------------------------------------------------------------------------

MAX_SUPPORT = 4096
CERT_RTOL = 1e-9


def exact_ot(lam: GridMeasure, mu: GridMeasure) -> ExactOTResult:
    """Exact quadratic transport with a dual-feasibility certificate.

    Dimension 1 uses the monotone coupling of the sorted supports; dimension 2
    solves the transport LP.  Both paths verify complementary slackness and a
    vanishing duality gap before returning.
    """
    _require_equal_masses(lam, mu)
    n, m = lam.spec.n_points, mu.spec.n_points
    if n > MAX_SUPPORT or m > MAX_SUPPORT:
        raise DomainError(f"support sizes ({n}, {m}) exceed the cap {MAX_SUPPORT}")
    if lam.dim == 1:
        try:
            return _exact_ot_monotone(lam, mu)
        except CertificateError:
            logger.warning("monotone certificate failed; falling back to the LP path")
    return _exact_ot_lp(lam, mu)


def _certify(
    cost: np.ndarray,
    plan: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    wl: np.ndarray,
    wm: np.ndarray,
) -> tuple[float, float]:
    """Return (relative duality gap, relative dual feasibility violation)."""
    scale = max(1.0, float(np.abs(cost).max()))
    slack = u[:, None] + v[None, :] - cost
    violation = max(0.0, float(slack.max())) / scale
    support = plan > max(1e-300, 1e-12 * float(plan.max()))
    tight = float(np.abs(slack[support]).max()) / scale if support.any() else 0.0
    primal = float(np.sum(cost * plan))
    dual = float(u @ wl + v @ wm)
    gap = abs(primal - dual) / max(1.0, abs(primal))
    return gap, max(violation, tight)


def _embed_result(
    lam: GridMeasure,
    mu: GridMeasure,
    plan: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    method: str,
) -> ExactOTResult:
    cost = _cost_matrix(lam.points, mu.points)
    gap, violation = _certify(cost, plan, u, v, lam.weights, mu.weights)
    if gap > CERT_RTOL or violation > CERT_RTOL:
        raise CertificateError(
            f"optimality certificate failed (gap {gap:.3e}, violation {violation:.3e})"
        )
    return ExactOTResult(
        plan=Coupling(source=lam, target=mu, mass=plan),
        cost=float(np.sum(cost * plan)),
        method=method,
        duality_gap=gap,
        feasibility_violation=violation,
        u=u,
        v=v,
    )


def _complete_zero_weight_duals(
    cost: np.ndarray, u: np.ndarray, v: np.ndarray, zero_i: np.ndarray, zero_j: np.ndarray
) -> None:
    if zero_j.size:
        v[zero_j] = np.min(cost[:, zero_j] - u[:, None], axis=0)
    if zero_i.size:
        u[zero_i] = np.min(cost[zero_i, :] - v[None, :], axis=1)


def _exact_ot_monotone(lam: GridMeasure, mu: GridMeasure) -> ExactOTResult:
    pos_i = np.nonzero(lam.weights > 0)[0]
    pos_j = np.nonzero(mu.weights > 0)[0]
    xs = lam.points[pos_i, 0]
    ys = mu.points[pos_j, 0]
    order_i = np.argsort(xs, kind="stable")
    order_j = np.argsort(ys, kind="stable")
    xs, ys = xs[order_i], ys[order_j]
    wa = lam.weights[pos_i][order_i].copy()
    wb = mu.weights[pos_j][order_j].copy()

    def c(i: int, j: int) -> float:
        return (xs[i] - ys[j]) ** 2

    n_s, m_s = xs.size, ys.size
    plan_s = np.zeros((n_s, m_s))
    us = np.zeros(n_s)
    vs = np.zeros(m_s)
    i = j = 0
    a, b = wa[0], wb[0]
    vs[0] = c(0, 0) - us[0]
    # Leftovers below this are rounding residue of equal-mass splits; carrying
    # them forward would thread the dual chain through spurious cells.
    exhausted = 1e-15 * float(np.sum(wa))
    while True:
        t = min(a, b)
        plan_s[i, j] += t
        a -= t
        b -= t
        take_i = a <= exhausted and i + 1 < n_s
        take_j = b <= exhausted and j + 1 < m_s
        if take_i and take_j:
            # Block break: both candidate chains through the adjacent cells
            # must stay dual-feasible, so take the smaller extension.
            via_col = c(i + 1, j) - vs[j]
            via_row = c(i + 1, j + 1) - (c(i, j + 1) - us[i])
            us[i + 1] = min(via_col, via_row)
            vs[j + 1] = c(i + 1, j + 1) - us[i + 1]
            i += 1
            j += 1
            a, b = wa[i], wb[j]
        elif take_i:
            us[i + 1] = c(i + 1, j) - vs[j]
            i += 1
            a = wa[i]
        elif take_j:
            vs[j + 1] = c(i, j + 1) - us[i]
            j += 1
            b = wb[j]
        else:
            break

    n, m = lam.spec.n_points, mu.spec.n_points
    plan = np.zeros((n, m))
    plan[np.ix_(pos_i[order_i], pos_j[order_j])] = plan_s
    u = np.zeros(n)
    v = np.zeros(m)
    u[pos_i[order_i]] = us
    v[pos_j[order_j]] = vs
    cost = _cost_matrix(lam.points, mu.points)
    zero_i = np.nonzero(lam.weights == 0)[0]
    zero_j = np.nonzero(mu.weights == 0)[0]
    _complete_zero_weight_duals(cost, u, v, zero_i, zero_j)
    return _embed_result(lam, mu, plan, u, v, method="monotone_1d")


def _refine_duals_on_support(
    cost: np.ndarray, plan: np.ndarray, u: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate exact tight equalities over the support forest, keeping the
    LP duals as per-tree anchors."""
    n, m = plan.shape
    support = plan > max(1e-300, 1e-12 * float(plan.max()))
    u_new = u.copy()
    v_new = v.copy()
    seen_i = np.zeros(n, dtype=bool)
    seen_j = np.zeros(m, dtype=bool)
    rows_of = [np.nonzero(support[:, j])[0] for j in range(m)]
    cols_of = [np.nonzero(support[i, :])[0] for i in range(n)]
    for root in range(n):
        if seen_i[root] or not cols_of[root].size:
            continue
        seen_i[root] = True
        frontier_i = [root]
        frontier_j: list[int] = []
        while frontier_i or frontier_j:
            next_j: list[int] = []
            for i in frontier_i:
                for j in cols_of[i]:
                    if not seen_j[j]:
                        seen_j[j] = True
                        v_new[j] = cost[i, j] - u_new[i]
                        next_j.append(int(j))
            next_i: list[int] = []
            for j in next_j:
                for i in rows_of[j]:
                    if not seen_i[i]:
                        seen_i[i] = True
                        u_new[i] = cost[i, j] - v_new[j]
                        next_i.append(int(i))
            frontier_i, frontier_j = next_i, next_j
    return u_new, v_new


def _exact_ot_lp(lam: GridMeasure, mu: GridMeasure) -> ExactOTResult:
    n, m = lam.spec.n_points, mu.spec.n_points
    cost = _cost_matrix(lam.points, mu.points)
    a_rows = sp.kron(sp.eye(n, format="csr"), np.ones((1, m)), format="csr")
    a_cols = sp.kron(np.ones((1, n)), sp.eye(m, format="csr"), format="csr")
    a_eq = sp.vstack([a_rows, a_cols], format="csr")
    b_eq = np.concatenate([lam.weights, mu.weights])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise CertificateError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    marg = np.asarray(res.eqlin.marginals, dtype=float)
    u, v = _refine_duals_on_support(cost, plan, marg[:n], marg[n:])
    zero_i = np.nonzero(lam.weights == 0)[0]
    zero_j = np.nonzero(mu.weights == 0)[0]
    _complete_zero_weight_duals(cost, u, v, zero_i, zero_j)
    return _embed_result(lam, mu, plan, u, v, method="lp_highs")
