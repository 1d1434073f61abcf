"""Local regularity machinery: harmonic displacement fit, one-step improvement,
geometric-cascade iteration, quasi-minimality and long-trajectory experiments."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .couplings import (
    CompetitorRegion,
    Coupling,
    HashRegion,
    affine_fit,
    local_energy,
    long_trajectory_stats,
)
from .errors import AdmissibilityError, DomainError, SmallnessError
from .grids import GridMeasure, data_term, density_at, holder_seminorm
from .scalings import (
    DEFAULT_WINDOWS,
    Scaling,
    Windows,
    apply_to_coupling,
    apply_to_measures,
    compose,
    normalizing_scaling,
)
from .solvers import SinkhornResult, entropic_cost, exact_ot, sinkhorn

__all__ = [
    "RegularityConfig",
    "HarmonicFit",
    "OneStepOutcome",
    "CampanatoLevel",
    "CampanatoTrace",
    "DefectReport",
    "fit_harmonic_displacement",
    "harmonic_fit",
    "one_step",
    "campanato_iterate",
    "quasimin_defect",
    "long_traj_experiment",
    "expansion_experiment",
    "soft_lemma_check",
]

logger = logging.getLogger("eotlab.regularity")


@dataclass(frozen=True)
class RegularityConfig:
    """Exposed smallness thresholds and geometry factors.

    None of these have canonical values; they are experiment parameters with
    the defaults below, and every report records the values actually used.
    """

    eps1: float = 0.1
    delta: float = 0.05
    lam: float = 2.75
    theta: float = 0.5
    long_factor: float = 7.0
    c0: float = 5.0
    beta: float = 0.0
    # The harmonic fit sits at one tenth of the radius at which the energy is
    # measured, mirroring the fit-over-#_1 / energy-at-10 geometry.
    fit_radius_factor: float = 0.1
    normalization_tol: float = 1e-2
    windows: Windows = DEFAULT_WINDOWS


DEFAULT_CONFIG = RegularityConfig()


# ---------------------------------------------------------------------------
# Harmonic displacement fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HarmonicFit:
    """Best degree-<=2 harmonic polynomial fit of the displacement field.

    The basis has d linear terms plus d(d+1)/2 - 1 trace-free quadratics,
    so trace(hess0) = 0 holds by construction.
    """

    coeffs: np.ndarray
    grad0: np.ndarray
    hess0: np.ndarray
    residual: float
    degenerate: bool = False
    ridged: bool = False


def _basis_gradients(x: np.ndarray) -> np.ndarray:
    """Gradients of the harmonic basis at each point: shape (K, d, n_basis)."""
    k, d = x.shape
    if d == 1:
        phi = np.ones((k, 1, 1))
        return phi
    if d == 2:
        phi = np.zeros((k, 2, 4))
        phi[:, 0, 0] = 1.0
        phi[:, 1, 1] = 1.0
        phi[:, 0, 2] = 2.0 * x[:, 0]
        phi[:, 1, 2] = -2.0 * x[:, 1]
        phi[:, 0, 3] = x[:, 1]
        phi[:, 1, 3] = x[:, 0]
        return phi
    raise DomainError(f"harmonic basis only implemented for d in (1, 2), got {d}")


def _hessian_from_coeffs(coeffs: np.ndarray, d: int) -> np.ndarray:
    if d == 1:
        return np.zeros((1, 1))
    c_diag, c_off = coeffs[2], coeffs[3]
    return np.array([[2.0 * c_diag, c_off], [c_off, -2.0 * c_diag]])


def fit_harmonic_displacement(
    x: np.ndarray, y: np.ndarray, w: np.ndarray
) -> HarmonicFit:
    """Weighted least squares of y - x against the harmonic gradient basis."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    d = x.shape[1]
    if w.size == 0 or np.sum(w) <= 0:
        return HarmonicFit(
            coeffs=np.zeros(1 if d == 1 else 4),
            grad0=np.zeros(d),
            hess0=np.zeros((d, d)),
            residual=0.0,
            degenerate=True,
        )
    phi = _basis_gradients(x)
    nb = phi.shape[2]
    resid = y - x
    design = phi.reshape(-1, nb)
    rhs_flat = resid.reshape(-1)
    w_flat = np.repeat(w, d)
    gram = design.T @ (design * w_flat[:, None])
    rhs = design.T @ (w_flat * rhs_flat)
    ridged = False
    if np.linalg.cond(gram) > 1e10:
        gram = gram + 1e-12 * np.eye(nb)
        ridged = True
    coeffs = np.linalg.solve(gram, rhs)
    fitted = phi @ coeffs
    residual = float(np.sum(w[:, None] * (resid - fitted) ** 2))
    return HarmonicFit(
        coeffs=coeffs,
        grad0=coeffs[:d].copy(),
        hess0=_hessian_from_coeffs(coeffs, d),
        residual=residual,
        ridged=ridged,
    )


def harmonic_fit(pi: Coupling, fit_radius: float) -> HarmonicFit:
    """Fit the displacement over the hash region at ``fit_radius``."""
    if not fit_radius > 0:
        raise DomainError(f"fit radius must be positive, got {fit_radius}")
    mask = HashRegion(fit_radius).mask(pi) & (pi.mass > 0)
    ii, jj = np.nonzero(mask)
    return fit_harmonic_displacement(
        pi.source_points[ii], pi.target_points[jj], pi.mass[ii, jj]
    )


# ---------------------------------------------------------------------------
# One-step improvement
# ---------------------------------------------------------------------------


@dataclass
class OneStepOutcome:
    scaling_hat: Scaling
    theta: float
    E_before: float
    E_after: float
    D_before: float
    D_after: float
    fit: HarmonicFit
    det_A: float
    eps_term: float
    pi_after: Coupling
    lam_after: GridMeasure
    mu_after: GridMeasure


def _matrix_exp_symmetric(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.exp(vals)) @ vecs.T


def one_step(
    pi: Coupling,
    lam: GridMeasure,
    mu: GridMeasure,
    R: float,
    theta: float,
    epsilon: float | None = None,
    config: RegularityConfig = DEFAULT_CONFIG,
) -> OneStepOutcome:
    """Harmonic fit at radius R, affine renormalization, energies re-measured
    at theta * R.  The contraction is evaluated and recorded, never assumed.

    Preconditions: both ball-averaged densities are 1 at the origin within
    ``config.normalization_tol``, and E(R) + D(R) + eps^2/R^2 + delta is below
    ``config.eps1`` (energies are taken at the calling radius; on a bounded
    grid wider radii saturate the localization region).
    """
    if not 0.0 < theta < 1.0:
        raise DomainError(f"theta must lie in (0, 1), got {theta}")
    if not R > 0:
        raise DomainError(f"radius must be positive, got {R}")
    d = pi.dim
    eps = epsilon if epsilon is not None else (pi.epsilon or 0.0)
    r_avg = 3.0 * max(lam.spec.h, mu.spec.h)

    origin = np.zeros(d)
    lam0 = density_at(lam, origin, r_avg)
    mu0 = density_at(mu, origin, r_avg)
    if abs(lam0 - 1.0) > config.normalization_tol or abs(mu0 - 1.0) > config.normalization_tol:
        raise DomainError(
            f"marginals are not normalized at the origin: lam(0)={lam0:.4f}, "
            f"mu(0)={mu0:.4f}"
        )

    e_before = local_energy(pi, R)
    d_before = data_term(lam, mu, R, r_avg).D
    eps_term = (eps / R) ** 2
    smallness = e_before + d_before + eps_term + config.delta
    if smallness >= config.eps1:
        raise SmallnessError(
            f"smallness {smallness:.4f} >= eps1 {config.eps1} at radius {R}"
        )

    fit = harmonic_fit(pi, config.fit_radius_factor * R)
    a_mat = _matrix_exp_symmetric(-fit.hess0 / 2.0)
    det_a = float(np.linalg.det(a_mat))
    if abs(det_a - 1.0) > 1e-8:
        raise DomainError(f"improvement matrix determinant {det_a} deviates from 1")
    b_vec = fit.grad0
    try:
        gamma = density_at(mu, b_vec, r_avg) ** (1.0 / d)
    except DomainError as exc:
        raise AdmissibilityError(
            f"fitted offset {b_vec.tolist()} leaves the target grid hull"
        ) from exc
    s_hat = Scaling(A=a_mat, b=b_vec, gamma=gamma, kappa=1.0)
    s_hat.require_admissible(config.windows)

    lam_hat, mu_hat = apply_to_measures(s_hat, lam, mu, windows=config.windows)
    pi_hat = apply_to_coupling(s_hat, pi, windows=config.windows)
    e_after = local_energy(pi_hat, theta * R)
    # Averaging radius re-derived from the transformed grids' spacings.
    d_after = data_term(lam_hat, mu_hat, theta * R).D
    return OneStepOutcome(
        scaling_hat=s_hat,
        theta=theta,
        E_before=e_before,
        E_after=e_after,
        D_before=d_before,
        D_after=d_after,
        fit=fit,
        det_A=det_a,
        eps_term=eps_term,
        pi_after=pi_hat,
        lam_after=lam_hat,
        mu_after=mu_hat,
    )


# ---------------------------------------------------------------------------
# Geometric cascade of one-step improvements
# ---------------------------------------------------------------------------


@dataclass
class CampanatoLevel:
    k: int
    r: float
    E: float
    D: float
    defect: float
    holder_lam: float
    holder_mu: float
    step_scaling: Scaling | None
    composed: Scaling


@dataclass
class CampanatoTrace:
    levels: list[CampanatoLevel]
    stop_reason: str
    base_scaling: Scaling

    def radii(self) -> list[float]:
        return [lvl.r for lvl in self.levels]

    def energies(self) -> list[float]:
        return [lvl.E for lvl in self.levels]


def campanato_iterate(
    pi: Coupling,
    lam: GridMeasure,
    mu: GridMeasure,
    R0: float,
    theta: float,
    epsilon: float,
    max_levels: int = 16,
    config: RegularityConfig = DEFAULT_CONFIG,
) -> CampanatoTrace:
    """Iterate the one-step improvement down to the entropic length scale.

    The normalizing scaling is applied first; each level composes the step
    scaling onto the running transform and shrinks the radius by theta.  Stops
    at r <= c0 * epsilon, on a smallness or admissibility exit, or at
    ``max_levels``.
    """
    if not 0.0 < theta < 1.0:
        raise DomainError(f"theta must lie in (0, 1), got {theta}")
    if not (R0 > 0 and epsilon > 0):
        raise DomainError("R0 and epsilon must be positive")
    s_bar = normalizing_scaling(lam, mu)
    lam_k, mu_k = apply_to_measures(s_bar, lam, mu, windows=config.windows)
    pi_k = apply_to_coupling(s_bar, pi, windows=config.windows)

    levels: list[CampanatoLevel] = []
    composed = s_bar
    r = R0
    stop_reason = "max_levels"
    for k in range(max_levels + 1):
        levels.append(
            CampanatoLevel(
                k=k,
                r=r,
                E=local_energy(pi_k, r),
                D=data_term(lam_k, mu_k, r).D,
                defect=affine_fit(pi_k, r, beta=config.beta).defect,
                holder_lam=holder_seminorm(lam_k, r),
                holder_mu=holder_seminorm(mu_k, r),
                step_scaling=None,
                composed=composed,
            )
        )
        if r <= config.c0 * epsilon:
            stop_reason = "reached_epsilon_scale"
            break
        if k == max_levels:
            stop_reason = "max_levels"
            break
        try:
            out = one_step(pi_k, lam_k, mu_k, r, theta, epsilon=epsilon, config=config)
        except SmallnessError:
            stop_reason = "smallness_violated"
            break
        except AdmissibilityError:
            stop_reason = "admissibility_exit"
            break
        levels[-1].step_scaling = out.scaling_hat
        composed = compose(out.scaling_hat, composed, windows=None)
        pi_k, lam_k, mu_k = out.pi_after, out.lam_after, out.mu_after
        r = theta * r
    return CampanatoTrace(levels=levels, stop_reason=stop_reason, base_scaling=s_bar)


# ---------------------------------------------------------------------------
# Quasi-minimality defect
# ---------------------------------------------------------------------------


@dataclass
class DefectReport:
    R: float
    lam_factor: float
    lhs: float
    competitor_cost: float
    defect: float
    eps2_mass: float
    energy_2r: float
    degenerate: bool = False


def quasimin_defect(
    pi: Coupling,
    lam: GridMeasure,
    mu: GridMeasure,
    R: float,
    lam_factor: float = 2.75,
    epsilon: float | None = None,
) -> DefectReport:
    """Gap between local quadratic cost and the optimal cost of the coupling's
    own normalized marginals on the competitor region.

    lhs integrates |x-y|^2 over the hash region at R; the competitor is
    pi(P_R) * OT(lam_bar, mu_bar) with (lam_bar, mu_bar) the normalized
    marginals of the restriction to P_R.  Normalizers: eps^2 * pi(#_{L R}) and
    the second moment over #_{2R}.
    """
    if not lam_factor > 1.0:
        raise DomainError(f"competitor factor must exceed 1, got {lam_factor}")
    if not R > 0:
        raise DomainError(f"radius must be positive, got {R}")
    eps = epsilon if epsilon is not None else (pi.epsilon or 0.0)
    region = CompetitorRegion(R, lam_factor)
    mask = region.mask(pi)
    restricted = np.where(mask, pi.mass, 0.0)
    mass_pr = float(np.sum(restricted))
    hash_mask = HashRegion(R).mask(pi)
    lhs = float(np.sum(pi.cost_matrix * pi.mass, where=hash_mask))
    eps2_mass = eps**2 * float(np.sum(pi.mass, where=HashRegion(lam_factor * R).mask(pi)))
    energy_2r = float(np.sum(pi.cost_matrix * pi.mass, where=HashRegion(2 * R).mask(pi)))
    if mass_pr <= 0:
        return DefectReport(
            R=R,
            lam_factor=lam_factor,
            lhs=0.0,
            competitor_cost=0.0,
            defect=0.0,
            eps2_mass=eps2_mass,
            energy_2r=energy_2r,
            degenerate=True,
        )
    lam_bar = GridMeasure(lam.spec, restricted.sum(axis=1) / mass_pr, lam.alpha)
    mu_bar = GridMeasure(mu.spec, restricted.sum(axis=0) / mass_pr, mu.alpha)
    competitor = mass_pr * exact_ot(lam_bar, mu_bar).cost
    return DefectReport(
        R=R,
        lam_factor=lam_factor,
        lhs=lhs,
        competitor_cost=competitor,
        defect=lhs - competitor,
        eps2_mass=eps2_mass,
        energy_2r=energy_2r,
    )


# ---------------------------------------------------------------------------
# Ladder experiments
# ---------------------------------------------------------------------------


def _regression_slope(xs: list[float], ys: list[float]) -> tuple[float, float] | None:
    if len(xs) < 2:
        return None
    slope, intercept = np.polyfit(np.asarray(xs), np.asarray(ys), 1)
    return float(slope), float(intercept)


def _hull_covers_ball(m: GridMeasure, radius: float) -> bool:
    for a in range(m.dim):
        lo = (0 - m.spec.origin_offset[a]) * m.spec.h
        hi = (m.spec.extent[a] - 1 - m.spec.origin_offset[a]) * m.spec.h
        if lo > -radius or hi < radius:
            return False
    return True


def _solve_ladder(
    lam: GridMeasure,
    mu: GridMeasure,
    eps_ladder: list[float],
    solver_opts: dict | None,
    max_workers: int = 1,
) -> list[SinkhornResult]:
    opts = dict(solver_opts or {})
    if max_workers > 1 and len(eps_ladder) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(max_workers, len(eps_ladder))) as ex:
            return list(ex.map(lambda e: sinkhorn(lam, mu, e, **opts), eps_ladder))
    return [sinkhorn(lam, mu, e, **opts) for e in eps_ladder]


def long_traj_experiment(
    lam: GridMeasure,
    mu: GridMeasure,
    R: float,
    eps_ladder: list[float],
    solver_opts: dict | None = None,
    long_factor: float = 7.0,
    max_workers: int = 1,
) -> dict:
    """Energy/mass carried by displacements >= long_factor*R inside #_{4R},
    relative to E(pi, 5R), across an epsilon ladder.

    Also reports the regression slope of log(ratio) against R^2/eps^2.
    """
    if not R > 0:
        raise DomainError(f"radius must be positive, got {R}")
    for m, name in ((lam, "source"), (mu, "target")):
        if not _hull_covers_ball(m, long_factor * R):
            raise DomainError(
                f"{name} grid hull does not contain the ball of radius "
                f"{long_factor * R:g}; the threshold set is not representable"
            )
    rows = []
    for eps, res in zip(eps_ladder, _solve_ladder(lam, mu, eps_ladder, solver_opts, max_workers)):
        stats = long_trajectory_stats(res.plan, 4.0 * R, long_factor * R)
        e5 = local_energy(res.plan, 5.0 * R)
        rows.append(
            {
                "epsilon": float(eps),
                "long_energy": stats.energy,
                "long_mass": stats.mass,
                "E_5R": e5,
                "energy_ratio": stats.energy / e5 if e5 > 0 else 0.0,
                "mass_ratio": stats.mass / e5 if e5 > 0 else 0.0,
                "inv_temp": (R / eps) ** 2,
                "converged": res.converged,
            }
        )
    def slope_of(key: str):
        pts = [(r["inv_temp"], np.log(r[key])) for r in rows if r[key] > 0]
        return _regression_slope([p[0] for p in pts], [p[1] for p in pts])

    return {
        "R": R,
        "long_factor": long_factor,
        "rows": rows,
        "mass_slope": slope_of("mass_ratio"),
        "energy_slope": slope_of("energy_ratio"),
    }


def expansion_experiment(
    lam: GridMeasure,
    mu: GridMeasure,
    eps_ladder: list[float],
    solver_opts: dict | None = None,
    max_workers: int = 1,
) -> dict:
    """Entropic-vs-exact cost gap across an epsilon ladder.

    Both marginals are normalized to probability measures first, which makes
    the reported table invariant under simultaneous mass rescaling.
    remainder(eps) = (OT_eps - OT - (d/2) eps^2 log(1/eps^2)) / eps^2; the
    reported slope regresses (OT_eps - OT)/eps^2 on log(1/eps^2) over ladder
    points resolved by the grid (eps >= 3h).
    """
    d = lam.dim
    h = max(lam.spec.h, mu.spec.h)
    lam = lam.scaled(1.0 / lam.total_mass)
    mu = mu.scaled(1.0 / mu.total_mass)
    ot = exact_ot(lam, mu).cost
    rows = []
    for eps, res in zip(eps_ladder, _solve_ladder(lam, mu, eps_ladder, solver_opts, max_workers)):
        ot_eps = entropic_cost(res)
        log_term = np.log(eps**-2)
        gap_over_eps2 = (ot_eps - ot) / eps**2
        rows.append(
            {
                "epsilon": float(eps),
                "ot_eps": ot_eps,
                "ot": ot,
                "gap_over_eps2": gap_over_eps2,
                "remainder": gap_over_eps2 - 0.5 * d * log_term,
                "log_inv_eps2": float(log_term),
                "under_resolved": bool(eps < 3.0 * h),
                "converged": res.converged,
            }
        )
    included = [r for r in rows if not r["under_resolved"]]
    reg = _regression_slope(
        [r["log_inv_eps2"] for r in included], [r["gap_over_eps2"] for r in included]
    )
    return {"dim": d, "ot": ot, "rows": rows, "slope": reg, "reference_slope": 0.5 * d}


def soft_lemma_check(
    pi: Coupling, R: float, rho_ladder: list[float], delta_r: float
) -> dict:
    """Mass of displacements >= rho in #_{R-1} against delta_r * R^d / rho^{d+2}.

    The window condition E(pi, R) << rho^{d+2} << R^{d+2} is reported per row,
    not enforced; the implied constant is fitted, never asserted.
    """
    if not R > 1.0:
        raise DomainError(f"needs R > 1 so that the inner region #_{{R-1}} exists, got {R}")
    if delta_r < 0:
        raise DomainError(f"defect bound must be nonnegative, got {delta_r}")
    d = pi.dim
    e_r = local_energy(pi, R)
    rows = []
    for rho in rho_ladder:
        if not rho > 0:
            raise DomainError(f"rho must be positive, got {rho}")
        mask = HashRegion(R - 1.0).mask(pi) & (pi.dist_matrix >= rho)
        mass = float(np.sum(pi.mass, where=mask))
        bound = delta_r * R**d / rho ** (d + 2)
        fitted = mass * rho ** (d + 2) / (delta_r * R**d) if delta_r > 0 else np.inf
        rows.append(
            {
                "rho": float(rho),
                "mass": mass,
                "bound": bound,
                "fitted_const": fitted,
                "energy_over_rho_pow": e_r / rho ** (d + 2),
                "rho_over_R_pow": rho ** (d + 2) / R ** (d + 2),
            }
        )
    return {"R": R, "delta_r": delta_r, "E_R": e_r, "rows": rows}
