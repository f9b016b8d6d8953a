"""Far-field loading descriptions and decay-rate fitting.

A loading bundles everything the coupled energy needs to know about the
applied far field: per-bond base differences on lattice sites, the base
deformation gradient at continuum quadrature points, and the per-site
reference energies that normalise the atomistic sum.  Point defects use an
affine map, the screw dislocation uses the classical anti-plane predictor
with nearest-image reduced differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NEIGHBOR_VECTORS
from .lattice import SCREW_CORE, Lattice
from .potential import EamParams, reference_site_energy, site_energies


@dataclass(frozen=True)
class UniformLoading:
    """Affine in-plane loading y = B x + u."""

    B: np.ndarray
    antiplane = False

    def bond_base(self, lat: Lattice, sites: np.ndarray) -> np.ndarray:
        base = np.asarray(self.B, dtype=float) @ NEIGHBOR_VECTORS.T  # (2, 6)
        return np.broadcast_to(base.T, (len(sites), 6, 2)).copy()

    def grad_base(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.B, dtype=float), (len(points), 2, 2))

    def site_reference(self, params: EamParams, lat: Lattice, sites, mask) -> np.ndarray:
        return reference_site_energy(params, mask, antiplane=False)


@dataclass(frozen=True)
class AntiplaneLoading:
    """Affine anti-plane loading u3 = g . x + u."""

    g: np.ndarray
    antiplane = True

    def bond_base(self, lat: Lattice, sites: np.ndarray) -> np.ndarray:
        base = NEIGHBOR_VECTORS @ np.asarray(self.g, dtype=float)  # (6,)
        return np.broadcast_to(base, (len(sites), 6)).copy()

    def grad_base(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.g, dtype=float), (len(points), 2))

    def site_reference(self, params: EamParams, lat: Lattice, sites, mask) -> np.ndarray:
        return reference_site_energy(params, mask, antiplane=True)


@dataclass(frozen=True)
class ScrewLoading:
    """Anti-plane screw dislocation predictor.

    u0(x) = burgers * arg(x - core) / 2pi with the branch cut along the
    positive x ray from the core.  Bond differences are reduced to the
    nearest image so the cut is invisible to the energy.
    """

    burgers: float = 1.0
    core: tuple = SCREW_CORE
    antiplane = True

    def displacement(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float) - np.asarray(self.core)
        theta = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2.0 * np.pi)
        return self.burgers * theta / (2.0 * np.pi)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float) - np.asarray(self.core)
        rr = np.sum(p * p, axis=-1)
        out = np.stack([-p[..., 1], p[..., 0]], axis=-1)
        return self.burgers / (2.0 * np.pi) * out / rr[..., None]

    def reduce(self, s: np.ndarray) -> np.ndarray:
        """Nearest-image reduction of a difference of the predictor field."""
        return s - self.burgers * np.round(s / self.burgers)

    def bond_base(self, lat: Lattice, sites: np.ndarray) -> np.ndarray:
        p = lat.pos[sites]
        u0 = self.displacement(p)
        s = np.empty((len(sites), 6))
        for d in range(6):
            s[:, d] = self.displacement(p + NEIGHBOR_VECTORS[d]) - u0
        return self.reduce(s)

    def grad_base(self, points: np.ndarray) -> np.ndarray:
        return self.gradient(points)

    def site_reference(self, params: EamParams, lat: Lattice, sites, mask) -> np.ndarray:
        return site_energies(params, self.bond_base(lat, sites), mask, antiplane=True)


def make_loading(defect_kind: str, strain: np.ndarray | None = None,
                 burgers: float = 1.0):
    """Loading matching a defect: affine strain for point defects, the
    predictor for the screw."""
    if defect_kind == "screw":
        return ScrewLoading(burgers=burgers)
    if strain is None:
        strain = default_strain()
    return UniformLoading(np.asarray(strain, dtype=float))


def default_strain() -> np.ndarray:
    """Mild shear plus vertical stretch used by the point-defect studies."""
    return np.array([[1.0, 0.03], [0.0, 1.03]])


def gradient_decay_slope(loading, radii, n_angles: int = 64) -> float:
    """Log-log slope of the ring-averaged predictor gradient magnitude.

    Rings are circles around the loading core (the origin for affine maps).
    The screw predictor has |grad u0| = burgers / (2 pi r), so the expected
    slope is exactly -1.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.min() < 2:
        raise ValueError("radii must be at least 2")
    angles = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    core = np.asarray(getattr(loading, "core", (0.0, 0.0)), dtype=float)
    means = np.empty(len(radii))
    for k, r in enumerate(radii):
        g = loading.grad_base(core + r * ring)
        means[k] = np.sqrt((np.atleast_2d(g).reshape(n_angles, -1) ** 2)
                           .sum(axis=1)).mean()
    return float(np.polyfit(np.log(radii), np.log(means), 1)[0])


def log_binned_slope(r: np.ndarray, mag: np.ndarray, r_min: float,
                     n_bins: int = 12) -> float:
    """Least-squares slope of log(mag) vs log(r) using bin means.

    Binning evens out the weight of the (many) far-field samples so the fit
    reflects the radial trend rather than the sample density.
    """
    r = np.asarray(r, dtype=float)
    mag = np.asarray(mag, dtype=float)
    sel = (r >= r_min) & (mag > 0)
    if sel.sum() < 4:
        raise ValueError("not enough samples beyond r_min")
    lr, lm = np.log(r[sel]), np.log(mag[sel])
    edges = np.linspace(lr.min(), lr.max() * (1 + 1e-12) + 1e-12, n_bins + 1)
    idx = np.clip(np.digitize(lr, edges) - 1, 0, n_bins - 1)
    xs, ys = [], []
    for b in range(n_bins):
        hit = idx == b
        if hit.any():
            xs.append(lr[hit].mean())
            ys.append(lm[hit].mean())
    if len(xs) < 2:
        raise ValueError("degenerate binning")
    slope = np.polyfit(xs, ys, 1)[0]
    return float(slope)
