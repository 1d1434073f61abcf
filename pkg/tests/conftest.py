import numpy as np
import pytest

from eotlab import GridMeasure, GridSpec, measure_from_density, symmetric_grid


@pytest.fixture
def uniform_1d():
    spec = symmetric_grid(dim=1, n=41, lo=-1.0, hi=1.0)
    return measure_from_density(spec, lambda p: np.ones(p.shape[0]), alpha=0.5)


@pytest.fixture
def uniform_2d():
    spec = symmetric_grid(dim=2, n=11, lo=-1.0, hi=1.0)
    return measure_from_density(spec, lambda p: np.ones(p.shape[0]), alpha=0.5)


def line_measure(xs, ws, h, alpha=0.5):
    """1-d measure with the given atoms; coordinates must sit on the lattice h*Z."""
    xs = np.asarray(xs, dtype=float)
    ws = np.asarray(ws, dtype=float)
    k = np.round(xs / h).astype(int)
    assert np.allclose(k * h, xs, atol=1e-12), "atoms must be lattice-representable"
    kmin = min(int(k.min()), 0)
    kmax = max(int(k.max()), 0)
    if kmax == kmin:
        kmax += 1  # extent >= 2 even for a single atom
    n = kmax - kmin + 1
    spec = GridSpec(dim=1, h=h, extent=(n,), origin_offset=(float(-kmin),))
    w = np.zeros(n)
    np.add.at(w, k - kmin, ws)
    return GridMeasure(spec=spec, weights=w, alpha=alpha)


def plane_measure(points, ws, h, alpha=0.5):
    """2-d measure with the given atoms; coordinates must sit on the lattice (h*Z)^2."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ws = np.asarray(ws, dtype=float)
    k = np.round(points / h).astype(int)
    assert np.allclose(k * h, points, atol=1e-12), "atoms must be lattice-representable"
    kmin = np.minimum(k.min(axis=0), 0)
    kmax = np.maximum(k.max(axis=0), 0)
    kmax = np.where(kmax == kmin, kmax + 1, kmax)
    extent = tuple(int(v) for v in (kmax - kmin + 1))
    spec = GridSpec(
        dim=2, h=h, extent=extent, origin_offset=tuple(float(-v) for v in kmin)
    )
    w = np.zeros(spec.n_points)
    flat = (k[:, 0] - kmin[0]) * extent[1] + (k[:, 1] - kmin[1])
    np.add.at(w, flat, ws)
    return GridMeasure(spec=spec, weights=w, alpha=alpha)
