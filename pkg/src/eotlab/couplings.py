"""Couplings between grid measures: regions, local energy, affine fit, diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .grids import GridMeasure, GridSpec, data_term

__all__ = [
    "Coupling",
    "MarginalReport",
    "LongTrajStats",
    "AffineFit",
    "CrossingStats",
    "HashRegion",
    "CompetitorRegion",
    "LongTrajRegion",
    "BallPairRegion",
    "Complement",
    "check_marginals",
    "restrict",
    "local_energy",
    "long_trajectory_stats",
    "affine_fit",
    "crossing_stats",
    "product_coupling",
    "diagonal_coupling",
    "monge_coupling",
    "radius_scan_rows",
    "save_coupling",
    "load_coupling",
]

RADIUS_SCAN_COLUMNS = ["R", "E", "D", "long_energy", "long_mass", "defect_beta0"]


@dataclass
class Coupling:
    """Dense nonnegative mass matrix over (source points x target points)."""

    source: GridMeasure
    target: GridMeasure
    mass: np.ndarray
    epsilon: float | None = None

    def __post_init__(self) -> None:
        m = np.ascontiguousarray(np.asarray(self.mass, dtype=float))
        expected = (self.source.spec.n_points, self.target.spec.n_points)
        if m.shape != expected:
            raise DomainError(f"mass matrix shape {m.shape} != {expected}")
        if np.any(m < 0):
            raise DomainError("coupling entries must be nonnegative")
        if self.source.dim != self.target.dim:
            raise DomainError("source and target dimensions differ")
        m.setflags(write=False)
        self.mass = m

    @property
    def dim(self) -> int:
        return self.source.dim

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.mass))

    @cached_property
    def source_points(self) -> np.ndarray:
        return self.source.points

    @cached_property
    def target_points(self) -> np.ndarray:
        return self.target.points

    @cached_property
    def source_norms(self) -> np.ndarray:
        return self.source.spec.point_norms

    @cached_property
    def target_norms(self) -> np.ndarray:
        return self.target.spec.point_norms

    @cached_property
    def cost_matrix(self) -> np.ndarray:
        """Squared-distance matrix |x_i - y_j|^2."""
        x, y = self.source_points, self.target_points
        c = (
            np.sum(x**2, axis=1)[:, None]
            + np.sum(y**2, axis=1)[None, :]
            - 2.0 * (x @ y.T)
        )
        np.maximum(c, 0.0, out=c)
        c.setflags(write=False)
        return c

    @cached_property
    def dist_matrix(self) -> np.ndarray:
        d = np.sqrt(self.cost_matrix)
        d.setflags(write=False)
        return d


# ---------------------------------------------------------------------------
# Regions over point pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HashRegion:
    """Pairs with |x| <= R or |y| <= R."""

    radius: float

    def mask(self, pi: Coupling) -> np.ndarray:
        return (pi.source_norms <= self.radius)[:, None] | (
            pi.target_norms <= self.radius
        )[None, :]


@dataclass(frozen=True)
class CompetitorRegion:
    """Pairs with (|x| <= R and |y| <= L*R) or (|x| <= L*R and |y| <= R)."""

    radius: float
    lam: float

    def mask(self, pi: Coupling) -> np.ndarray:
        r, lr = self.radius, self.lam * self.radius
        sx, tx = pi.source_norms, pi.target_norms
        return ((sx <= r)[:, None] & (tx <= lr)[None, :]) | (
            (sx <= lr)[:, None] & (tx <= r)[None, :]
        )


@dataclass(frozen=True)
class LongTrajRegion:
    """Pairs in the hash region at R whose displacement is at least `threshold`."""

    radius: float
    threshold: float

    def mask(self, pi: Coupling) -> np.ndarray:
        return HashRegion(self.radius).mask(pi) & (pi.dist_matrix >= self.threshold)


@dataclass(frozen=True)
class BallPairRegion:
    """Pairs with |x| <= rx and |y| <= ry."""

    rx: float
    ry: float

    def mask(self, pi: Coupling) -> np.ndarray:
        return (pi.source_norms <= self.rx)[:, None] & (pi.target_norms <= self.ry)[
            None, :
        ]


@dataclass(frozen=True)
class Complement:
    inner: object

    def mask(self, pi: Coupling) -> np.ndarray:
        return ~self.inner.mask(pi)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalReport:
    max_row_err: float
    max_col_err: float
    ok: bool


def _relative_errors(sums: np.ndarray, weights: np.ndarray) -> np.ndarray:
    err = np.abs(sums - weights)
    out = np.where(
        weights > 0,
        err / np.where(weights > 0, weights, 1.0),
        np.where(err == 0.0, 0.0, np.inf),
    )
    return out


def check_marginals(pi: Coupling, tol: float = 1e-8) -> MarginalReport:
    """Per-row/column relative marginal errors against the declared measures."""
    row = float(np.max(_relative_errors(pi.mass.sum(axis=1), pi.source.weights)))
    col = float(np.max(_relative_errors(pi.mass.sum(axis=0), pi.target.weights)))
    return MarginalReport(max_row_err=row, max_col_err=col, ok=row <= tol and col <= tol)


def restrict(pi: Coupling, region) -> np.ndarray:
    """Entrywise mask of the coupling to a region (marginals not enforced)."""
    return np.where(region.mask(pi), pi.mass, 0.0)


def local_energy(pi: Coupling, R: float) -> float:
    """R^{-(d+2)} times the second displacement moment over the hash region."""
    if not R > 0:
        raise DomainError(f"radius must be positive, got {R}")
    mask = HashRegion(R).mask(pi)
    total = float(np.sum(pi.cost_matrix * pi.mass, where=mask))
    return total / R ** (pi.dim + 2)


@dataclass(frozen=True)
class LongTrajStats:
    energy: float
    mass: float


def long_trajectory_stats(pi: Coupling, R: float, threshold: float) -> LongTrajStats:
    """Normalized energy and mass of pairs in #_R with displacement >= threshold."""
    if not R > 0:
        raise DomainError(f"radius must be positive, got {R}")
    if threshold < 0:
        raise DomainError(f"threshold must be nonnegative, got {threshold}")
    mask = LongTrajRegion(R, threshold).mask(pi)
    d = pi.dim
    energy = float(np.sum(pi.cost_matrix * pi.mass, where=mask)) / R ** (d + 2)
    mass = float(np.sum(pi.mass, where=mask)) / R**d
    return LongTrajStats(energy=energy, mass=mass)


@dataclass(frozen=True)
class AffineFit:
    A: np.ndarray
    b: np.ndarray
    defect: float
    beta: float
    r: float
    degenerate: bool = False
    ridged: bool = False
    b_only: bool = False


def affine_fit(pi: Coupling, r: float, beta: float = 0.0) -> AffineFit:
    """Weighted least-squares fit of y ~ A x + b over the hash region at r.

    The defect is the minimized value of
    sum over #_r of |y - A x - b|^2 pi(x, y), divided by r^{d+2+2*beta}.
    """
    if not r > 0:
        raise DomainError(f"radius must be positive, got {r}")
    d = pi.dim
    mask = HashRegion(r).mask(pi)
    ii, jj = np.nonzero(mask & (pi.mass > 0))
    norm = r ** (d + 2 + 2 * beta)
    if ii.size == 0:
        return AffineFit(
            A=np.eye(d), b=np.zeros(d), defect=0.0, beta=beta, r=r, degenerate=True
        )
    w = pi.mass[ii, jj]
    x = pi.source_points[ii]
    y = pi.target_points[jj]

    # Augmented design [x, 1]; one weighted normal system shared by all output
    # coordinates.
    z = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    zw = z * w[:, None]
    gram = z.T @ zw
    rhs = zw.T @ y

    ridged = False
    b_only = False
    cond = np.linalg.cond(gram)
    if cond > 1e12:
        mean_x = (w @ x) / np.sum(w)
        cov = ((x - mean_x) * w[:, None]).T @ (x - mean_x) / np.sum(w)
        if np.linalg.eigvalsh(cov).min() < 1e-12 * max(1.0, float(np.trace(cov))):
            b_only = True
        else:
            gram = gram + 1e-12 * np.eye(d + 1)
            ridged = True

    if b_only:
        a_mat = np.zeros((d, d))
        b_vec = (w @ y) / np.sum(w)
    else:
        theta = np.linalg.solve(gram, rhs)
        a_mat = theta[:d, :].T
        b_vec = theta[d, :]

    resid = y - x @ a_mat.T - b_vec[None, :]
    defect = float(np.sum(w * np.sum(resid**2, axis=1))) / norm
    return AffineFit(
        A=a_mat, b=b_vec, defect=defect, beta=beta, r=r, ridged=ridged, b_only=b_only
    )


@dataclass(frozen=True)
class CrossingStats:
    crossing_energy: float
    crossing_mass: float


def crossing_stats(pi: Coupling, R: float) -> CrossingStats:
    """Energy and mass of pairs whose segment [x, y] meets the sphere of radius R.

    A pair is counted when min_{t in [0,1]} |(1-t)x + t y| <= R <= max(|x|, |y|).
    """
    if not R > 0:
        raise DomainError(f"radius must be positive, got {R}")
    x, y = pi.source_points, pi.target_points
    sq_x = np.sum(x**2, axis=1)[:, None]
    dot = x @ y.T
    seg_sq = pi.cost_matrix
    with np.errstate(divide="ignore", invalid="ignore"):
        t_star = np.clip((sq_x - dot) / seg_sq, 0.0, 1.0)
    t_star[seg_sq == 0.0] = 0.0
    min_sq = sq_x + 2.0 * t_star * (dot - sq_x) + t_star**2 * seg_sq
    np.maximum(min_sq, 0.0, out=min_sq)
    outer = np.maximum(pi.source_norms[:, None], pi.target_norms[None, :])
    mask = (min_sq <= R**2) & (outer >= R)
    energy = float(np.sum(pi.cost_matrix * pi.mass, where=mask))
    mass = float(np.sum(pi.mass, where=mask))
    return CrossingStats(crossing_energy=energy, crossing_mass=mass)


# ---------------------------------------------------------------------------
# Constructors used throughout the tests and experiments
# ---------------------------------------------------------------------------


def product_coupling(lam: GridMeasure, mu: GridMeasure) -> Coupling:
    """Independent coupling lam (x) mu / total mass."""
    mass = np.outer(lam.weights, mu.weights) / lam.total_mass
    return Coupling(source=lam, target=mu, mass=mass)


def diagonal_coupling(lam: GridMeasure) -> Coupling:
    """Identity-map coupling of a measure with itself."""
    mass = np.diag(lam.weights)
    return Coupling(source=lam, target=lam, mass=mass)


def monge_coupling(
    lam: GridMeasure, target: GridMeasure, assignment: np.ndarray
) -> Coupling:
    """Deterministic-map coupling sending source point i to target point assignment[i]."""
    assignment = np.asarray(assignment, dtype=int)
    if assignment.shape != (lam.spec.n_points,):
        raise DomainError("assignment must map every source point")
    mass = np.zeros((lam.spec.n_points, target.spec.n_points))
    np.add.at(mass, (np.arange(assignment.size), assignment), lam.weights)
    return Coupling(source=lam, target=target, mass=mass)


def radius_scan_rows(
    pi: Coupling,
    lam: GridMeasure,
    mu: GridMeasure,
    radii: list[float],
    long_factor: float = 7.0,
    r_avg: float | None = None,
) -> list[dict]:
    """Per-radius report rows with columns R,E,D,long_energy,long_mass,defect_beta0."""
    rows = []
    for r in radii:
        stats = long_trajectory_stats(pi, r, long_factor * r)
        rows.append(
            {
                "R": float(r),
                "E": local_energy(pi, r),
                "D": data_term(lam, mu, r, r_avg).D,
                "long_energy": stats.energy,
                "long_mass": stats.mass,
                "defect_beta0": affine_fit(pi, r, beta=0.0).defect,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Binary dump + JSON header I/O
# ---------------------------------------------------------------------------


def save_coupling(pi: Coupling, bin_path: str | Path) -> None:
    """Row-major little-endian float64 dump plus a JSON header sidecar."""
    bin_path = Path(bin_path)
    with open(bin_path, "wb") as fh:
        fh.write(pi.mass.astype("<f8").tobytes(order="C"))
    header = {
        "n_source": pi.source.spec.n_points,
        "n_target": pi.target.spec.n_points,
        "epsilon": pi.epsilon,
        "source_grid": dict(pi.source.spec.to_json_dict(), alpha=pi.source.alpha),
        "target_grid": dict(pi.target.spec.to_json_dict(), alpha=pi.target.alpha),
    }
    with open(bin_path.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_coupling(
    bin_path: str | Path,
    source: GridMeasure | None = None,
    target: GridMeasure | None = None,
) -> Coupling:
    """Read a coupling written by :func:`save_coupling`.

    When the marginal measures are not given they are reconstructed from the
    row/column sums, which is only faithful for marginal-consistent couplings.
    """
    bin_path = Path(bin_path)
    header_path = bin_path.with_suffix(".json")
    if not header_path.exists():
        raise ConfigError(f"missing JSON header for coupling dump: {header_path}")
    with open(header_path) as fh:
        header = json.load(fh)
    n, m = int(header["n_source"]), int(header["n_target"])
    raw = np.fromfile(bin_path, dtype="<f8")
    if raw.size != n * m:
        raise ConfigError(
            f"coupling dump holds {raw.size} values, expected {n}x{m}={n * m}"
        )
    mass = raw.reshape(n, m)
    if source is None:
        spec = GridSpec.from_json_dict(header["source_grid"])
        source = GridMeasure(spec, mass.sum(axis=1), float(header["source_grid"]["alpha"]))
    if target is None:
        spec = GridSpec.from_json_dict(header["target_grid"])
        target = GridMeasure(spec, mass.sum(axis=0), float(header["target_grid"]["alpha"]))
    eps = header.get("epsilon")
    return Coupling(
        source=source, target=target, mass=mass, epsilon=None if eps is None else float(eps)
    )
