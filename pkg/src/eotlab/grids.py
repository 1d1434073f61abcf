"""Discrete measures on regular grids: densities, Hölder seminorms, data term."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "GridSpec",
    "GridMeasure",
    "DataTermReport",
    "density_at",
    "holder_seminorm",
    "data_term",
    "symmetric_grid",
    "make_measure",
    "measure_from_density",
    "save_measure",
    "load_measure",
    "DENSITY_KINDS",
]

# Pair blocks of this many rows when forming the O(n^2) Hölder sup, to cap
# peak memory at desk scale.
_PAIR_BLOCK = 512


@dataclass(frozen=True)
class GridSpec:
    """Regular grid in dimension 1 or 2 with uniform spacing.

    The physical coordinate of the grid index ``i`` along axis ``a`` is
    ``(i - origin_offset[a]) * h``.  ``origin_offset`` may be fractional; the
    origin is only required to lie inside the grid's convex hull.
    """

    dim: int
    h: float
    extent: tuple[int, ...]
    origin_offset: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise DomainError(f"dim must be 1 or 2, got {self.dim}")
        if not self.h > 0:
            raise DomainError(f"grid spacing must be positive, got {self.h}")
        if len(self.extent) != self.dim or len(self.origin_offset) != self.dim:
            raise DomainError("extent and origin_offset must have length dim")
        for a, (n, off) in enumerate(zip(self.extent, self.origin_offset)):
            if n < 2:
                raise DomainError(f"extent along axis {a} must be >= 2, got {n}")
            if not 0.0 <= off <= n - 1:
                raise DomainError(
                    f"origin lies outside the grid hull along axis {a}: "
                    f"offset {off} not in [0, {n - 1}]"
                )

    @property
    def n_points(self) -> int:
        return int(np.prod(self.extent))

    @property
    def cell_volume(self) -> float:
        return float(self.h) ** self.dim

    @cached_property
    def points(self) -> np.ndarray:
        """All grid points as an (n_points, dim) array, row-major index order."""
        axes = [
            (np.arange(n, dtype=float) - off) * self.h
            for n, off in zip(self.extent, self.origin_offset)
        ]
        if self.dim == 1:
            pts = axes[0][:, None]
        else:
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack(mesh, axis=-1).reshape(-1, self.dim)
        pts.setflags(write=False)
        return pts

    @cached_property
    def point_norms(self) -> np.ndarray:
        norms = np.linalg.norm(self.points, axis=1)
        norms.setflags(write=False)
        return norms

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "h": self.h,
            "extent": list(self.extent),
            "origin_offset": list(self.origin_offset),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GridSpec":
        return cls(
            dim=int(d["dim"]),
            h=float(d["h"]),
            extent=tuple(int(n) for n in d["extent"]),
            origin_offset=tuple(float(o) for o in d["origin_offset"]),
        )


@dataclass(frozen=True)
class GridMeasure:
    """Nonnegative weights on a regular grid; density = weight / h^dim."""

    spec: GridSpec
    weights: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float).ravel())
        if w.shape[0] != self.spec.n_points:
            raise DomainError(
                f"weights length {w.shape[0]} does not match grid with "
                f"{self.spec.n_points} points"
            )
        if np.any(w < 0):
            raise DomainError("weights must be nonnegative")
        if not np.sum(w) > 0:
            raise DomainError("total mass must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def points(self) -> np.ndarray:
        return self.spec.points

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    @cached_property
    def densities(self) -> np.ndarray:
        d = self.weights / self.spec.cell_volume
        d.setflags(write=False)
        return d

    def scaled(self, factor: float) -> "GridMeasure":
        """Return a copy with all weights multiplied by ``factor``."""
        return GridMeasure(self.spec, self.weights * factor, self.alpha)


@dataclass(frozen=True)
class DataTermReport:
    """Hölder seminorms of two densities plus their squared origin gap."""

    R: float
    holder_lambda: float
    holder_mu: float
    origin_gap: float
    D: float


def _as_point(x, dim: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(x, dtype=float))
    if p.shape != (dim,):
        raise DomainError(f"point must have shape ({dim},), got {p.shape}")
    return p


def _in_hull(spec: GridSpec, x: np.ndarray) -> bool:
    for a in range(spec.dim):
        lo = (0 - spec.origin_offset[a]) * spec.h
        hi = (spec.extent[a] - 1 - spec.origin_offset[a]) * spec.h
        if not lo - 1e-12 <= x[a] <= hi + 1e-12:
            return False
    return True


def density_at(m: GridMeasure, x, r_avg: float) -> float:
    """Ball-averaged density at ``x``: mass of B_r(x) over its discrete volume."""
    p = _as_point(x, m.dim)
    if not _in_hull(m.spec, p):
        raise DomainError(f"point {p.tolist()} lies outside the grid hull")
    if r_avg < m.spec.h:
        raise DomainError(
            f"averaging radius {r_avg} is below the grid spacing {m.spec.h}"
        )
    inside = np.linalg.norm(m.points - p[None, :], axis=1) <= r_avg
    count = int(np.count_nonzero(inside))
    if count == 0:
        raise DomainError(f"no grid points inside the ball of radius {r_avg} at {p.tolist()}")
    return float(np.sum(m.weights[inside]) / (count * m.spec.cell_volume))


def holder_seminorm(m: GridMeasure, R: float) -> float:
    """Exact discrete sup over point pairs in B_R of |density gap| / dist^alpha."""
    inside = m.spec.point_norms <= R
    pts = m.points[inside]
    dens = m.densities[inside]
    n = pts.shape[0]
    if n < 2:
        raise DomainError(f"fewer than 2 grid points inside B_{R}")
    best = 0.0
    for start in range(0, n, _PAIR_BLOCK):
        stop = min(start + _PAIR_BLOCK, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        gap = np.abs(dens[start:stop, None] - dens[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = gap / dist**m.alpha
        ratio[dist == 0.0] = 0.0
        best = max(best, float(ratio.max()))
    return best


def data_term(
    lam: GridMeasure, mu: GridMeasure, R: float, r_avg: float | None = None
) -> DataTermReport:
    """Assemble R^{2a}(Hölder seminorms squared) + squared origin density gap."""
    if lam.dim != mu.dim:
        raise DomainError("measures must share the same dimension")
    if lam.alpha != mu.alpha:
        raise DomainError("measures must share the same Hölder exponent")
    if r_avg is None:
        r_avg = 3.0 * max(lam.spec.h, mu.spec.h)
    hl = holder_seminorm(lam, R)
    hm = holder_seminorm(mu, R)
    origin = np.zeros(lam.dim)
    gap = abs(density_at(lam, origin, r_avg) - density_at(mu, origin, r_avg))
    d_val = R ** (2.0 * lam.alpha) * (hl**2 + hm**2) + gap**2
    return DataTermReport(R=R, holder_lambda=hl, holder_mu=hm, origin_gap=gap, D=d_val)


# ---------------------------------------------------------------------------
# Grid construction and analytic densities
# ---------------------------------------------------------------------------


def symmetric_grid(dim: int, n: int, lo: float, hi: float) -> GridSpec:
    """Endpoint-inclusive grid with ``n`` points per axis on [lo, hi]^dim."""
    if not lo < 0.0 < hi:
        raise DomainError(f"interval [{lo}, {hi}] must contain 0 in its interior")
    if n < 2:
        raise DomainError("need at least 2 points per axis")
    h = (hi - lo) / (n - 1)
    off = -lo / h
    return GridSpec(dim=dim, h=h, extent=(n,) * dim, origin_offset=(off,) * dim)


def _density_uniform(pts: np.ndarray, params: dict) -> np.ndarray:
    value = float(params.get("value", 1.0))
    return np.full(pts.shape[0], value)


def _density_affine(pts: np.ndarray, params: dict) -> np.ndarray:
    intercept = float(params.get("intercept", 1.0))
    slope = np.atleast_1d(np.asarray(params.get("slope", 0.0), dtype=float))
    if slope.shape == (1,) and pts.shape[1] > 1:
        slope = np.repeat(slope, pts.shape[1])
    return intercept + pts @ slope


def _density_gaussian(pts: np.ndarray, params: dict) -> np.ndarray:
    sigma = float(params.get("sigma", 0.5))
    amplitude = float(params.get("amplitude", 1.0))
    floor = float(params.get("floor", 0.0))
    center = np.atleast_1d(np.asarray(params.get("center", 0.0), dtype=float))
    if center.shape == (1,) and pts.shape[1] > 1:
        center = np.repeat(center, pts.shape[1])
    sq = np.sum((pts - center[None, :]) ** 2, axis=1)
    return floor + amplitude * np.exp(-sq / (2.0 * sigma**2))


def _density_perturbed_uniform(pts: np.ndarray, params: dict) -> np.ndarray:
    amplitude = float(params.get("amplitude", 0.1))
    freq = float(params.get("freq", 1.0))
    wave = np.prod(np.cos(freq * np.pi * pts), axis=1)
    return 1.0 + amplitude * wave


def _density_shifted_profile(pts: np.ndarray, params: dict) -> np.ndarray:
    """Image of the unit density under x -> x + u(x) on [-1, 1], with
    u = (c0 + c1|x|^{1+p}) * (1-x^2)^w.

    One-dimensional only.  The displacement vanishes at the interval ends so the
    map sends [-1, 1] onto itself; the density of the image measure is
    1 / T'(T^{-1}(y)), computed by bisection on the monotone map T.
    """
    if pts.shape[1] != 1:
        raise ConfigError("shifted_profile densities are one-dimensional")
    c0 = float(params.get("c0", 0.0))
    c1 = float(params.get("c1", 0.0))
    p = float(params.get("exponent", 0.25))
    w = float(params.get("window_power", 1.0))

    def u(x: np.ndarray) -> np.ndarray:
        return (c0 + c1 * np.abs(x) ** (1.0 + p)) * (1.0 - x**2) ** w

    def du(x: np.ndarray) -> np.ndarray:
        cusp = c1 * (1.0 + p) * np.sign(x) * np.abs(x) ** p
        win = (1.0 - x**2) ** w
        dwin = -2.0 * w * x * (1.0 - x**2) ** (w - 1.0)
        return cusp * win + dwin * (c0 + c1 * np.abs(x) ** (1.0 + p))

    probe = np.linspace(-1.0, 1.0, 4001)
    if np.min(1.0 + du(probe)) <= 1e-6:
        raise ConfigError(
            "shifted_profile parameters make the transport map non-monotone"
        )
    y = pts[:, 0]
    lo = np.full_like(y, -1.0)
    hi = np.full_like(y, 1.0)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        too_low = mid + u(mid) < y
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    x = 0.5 * (lo + hi)
    return 1.0 / (1.0 + du(x))


def _density_ramp_shift(pts: np.ndarray, params: dict) -> np.ndarray:
    """Image of the unit density under an odd inward ramp displacement.

    u'(x) = -c * S((|x| - offset)/width) with S the cubic smoothstep, plus an
    optional centered shift c0*(1-x^2)^2.  The slope vanishes near the origin,
    so the displacement energy is carried at the ramp scale and decays when the
    observation radius drops below it.  One-dimensional only.
    """
    if pts.shape[1] != 1:
        raise ConfigError("ramp_shift densities are one-dimensional")
    c0 = float(params.get("c0", 0.0))
    c = float(params.get("c", 0.1))
    offset = float(params.get("offset", 0.05))
    width = float(params.get("width", 0.3))

    def smoothstep(t: np.ndarray) -> np.ndarray:
        t = np.clip(t, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)

    def ramp_integral(t: np.ndarray) -> np.ndarray:
        # integral of smoothstep from 0 to t
        t_c = np.clip(t, 0.0, 1.0)
        inner = t_c**3 - 0.5 * t_c**4
        return inner + np.maximum(t - 1.0, 0.0)

    def u(x: np.ndarray) -> np.ndarray:
        shelf = width * ramp_integral((np.abs(x) - offset) / width)
        return c0 * (1.0 - x**2) ** 2 - c * np.sign(x) * shelf * (1.0 - x**2) ** 2

    def du(x: np.ndarray) -> np.ndarray:
        win = (1.0 - x**2) ** 2
        dwin = -4.0 * x * (1.0 - x**2)
        shelf = width * ramp_integral((np.abs(x) - offset) / width)
        dshelf = smoothstep((np.abs(x) - offset) / width) * np.sign(x)
        return (
            c0 * dwin
            - c * np.sign(x) * (dshelf * win + shelf * dwin)
        )

    probe = np.linspace(-1.0, 1.0, 4001)
    if np.min(1.0 + du(probe)) <= 1e-6:
        raise ConfigError("ramp_shift parameters make the transport map non-monotone")
    y = pts[:, 0]
    lo = np.full_like(y, -1.0)
    hi = np.full_like(y, 1.0)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        too_low = mid + u(mid) < y
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    x = 0.5 * (lo + hi)
    return 1.0 / (1.0 + du(x))


DENSITY_KINDS: dict[str, Callable[[np.ndarray, dict], np.ndarray]] = {
    "uniform": _density_uniform,
    "affine": _density_affine,
    "gaussian": _density_gaussian,
    "perturbed_uniform": _density_perturbed_uniform,
    "shifted_profile": _density_shifted_profile,
    "ramp_shift": _density_ramp_shift,
}


def measure_from_density(
    spec: GridSpec,
    density: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    alpha: float,
    normalize: bool = False,
) -> GridMeasure:
    """Build a measure with weight = density(x) * cell volume at each point."""
    values = density(spec.points) if callable(density) else np.asarray(density, float)
    if np.any(values < 0):
        raise ConfigError("density takes negative values on the grid")
    weights = values * spec.cell_volume
    if normalize:
        weights = weights / np.sum(weights)
    return GridMeasure(spec=spec, weights=weights, alpha=alpha)


def make_measure(cfg: dict) -> GridMeasure:
    """Build a GridMeasure from a config dict (analytic density or CSV file)."""
    if "file" in cfg:
        try:
            return load_measure(Path(cfg["file"]))
        except OSError as exc:
            raise ConfigError(f"cannot read measure file {cfg['file']}: {exc}") from exc
    try:
        grid_cfg = cfg["grid"]
        density_cfg = cfg["density"]
        alpha = float(cfg["alpha"])
    except KeyError as exc:
        raise ConfigError(f"marginal spec missing required key: {exc}") from exc
    spec = symmetric_grid(
        dim=int(grid_cfg.get("dim", 1)),
        n=int(grid_cfg["n"]),
        lo=float(grid_cfg.get("lo", -1.0)),
        hi=float(grid_cfg.get("hi", 1.0)),
    )
    kind = density_cfg.get("kind")
    if kind not in DENSITY_KINDS:
        raise ConfigError(
            f"unknown density kind {kind!r}; valid kinds: {sorted(DENSITY_KINDS)}"
        )
    fn = DENSITY_KINDS[kind]
    params = {k: v for k, v in density_cfg.items() if k != "kind"}
    return measure_from_density(
        spec,
        lambda pts: fn(pts, params),
        alpha=alpha,
        normalize=bool(cfg.get("normalize", True)),
    )


# ---------------------------------------------------------------------------
# CSV + JSON sidecar I/O
# ---------------------------------------------------------------------------


def _sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".json")


def save_measure(m: GridMeasure, csv_path: str | Path) -> None:
    """Write weights as CSV (header index_0[,index_1],weight) plus a JSON sidecar."""
    csv_path = Path(csv_path)
    header = ["index_0", "weight"] if m.dim == 1 else ["index_0", "index_1", "weight"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        if m.dim == 1:
            for i, w in enumerate(m.weights):
                writer.writerow([i, repr(float(w))])
        else:
            n1 = m.spec.extent[1]
            for flat, w in enumerate(m.weights):
                writer.writerow([flat // n1, flat % n1, repr(float(w))])
    sidecar = dict(m.spec.to_json_dict(), alpha=m.alpha)
    with open(_sidecar_path(csv_path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_measure(csv_path: str | Path) -> GridMeasure:
    """Read a measure written by :func:`save_measure`."""
    csv_path = Path(csv_path)
    sidecar = _sidecar_path(csv_path)
    if not sidecar.exists():
        raise ConfigError(f"missing JSON sidecar for measure file: {sidecar}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    spec = GridSpec.from_json_dict(meta)
    weights = np.zeros(spec.n_points)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        index_cols = len(header) - 1
        if index_cols != spec.dim:
            raise ConfigError(
                f"CSV has {index_cols} index columns but the sidecar says dim={spec.dim}"
            )
        for row in reader:
            idx = tuple(int(v) for v in row[:index_cols])
            flat = idx[0] if spec.dim == 1 else idx[0] * spec.extent[1] + idx[1]
            weights[flat] = float(row[-1])
    return GridMeasure(spec=spec, weights=weights, alpha=float(meta["alpha"]))
