"""Residual estimators driving the adaptive loop.

Three ingredients are assembled per step: a truncation term measuring the
far-field mismatch against the predictor stress, an edge-jump coarsening
term over the continuum triangulation, and a modeling term comparing the
lattice stress with the coarse coupled stress.  The modeling term can be
evaluated exactly, replaced by a scaled coarsening term, or blended
between the two by distance to the buffer band.  Results are collected in
an EstimatorReport and can be dumped to CSV one row per element.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import stress
from .geometry import TRI_AREA, intersection_area
from .mesh import ATOM_CORE, BUFFER, CONTINUUM, INTERFACE

MODES = ("original", "direct", "blended", "coarsening")

REGION_NAMES = {
    ATOM_CORE: "core",
    INTERFACE: "interface",
    BUFFER: "buffer",
    CONTINUUM: "continuum",
}

SQRT3 = np.sqrt(3.0)


@dataclass
class EstimatorConfig:
    """Mode switch plus the empirical constants entering the totals."""

    mode: str = "original"
    r_buf: int = 3
    r_bld: float = 2.0
    c_tr: float = 1.0
    c_mesh: float = 1.0
    c_mo_cg: float | None = None  # None resolves per step from the buffer ring

    def check(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown estimator mode {self.mode!r}")
        if self.r_buf < 1:
            raise ValueError("buffer width must be at least one layer")
        if self.mode == "blended" and not self.r_bld > 1.0:
            raise ValueError("blending width must exceed 1")
        if self.c_tr <= 0.0 or self.c_mesh <= 0.0:
            raise ValueError("empirical constants must be positive")
        if self.c_mo_cg is not None and self.c_mo_cg <= 0.0:
            raise ValueError("mo-to-cg constant must be positive when given")


@dataclass
class EstimatorReport:
    """Per-element residuals and global totals for one solved state."""

    mode: str
    n_free: int
    eta_tr: float
    eta_cg: float
    eta_mo: float
    rho: float
    c_mo_cg: float
    element_ids: np.ndarray
    region: np.ndarray
    h: np.ndarray
    eta_cg_local: np.ndarray
    eta_mo_local: np.ndarray
    eta_mo_kind: tuple
    rho_local: np.ndarray
    solve_seconds: float = 0.0
    estimate_seconds: float = 0.0

    def check(self) -> None:
        """Nonnegativity and exact additivity of the local indicators."""
        if min(self.eta_tr, self.eta_cg, self.eta_mo, self.rho) < 0.0:
            raise AssertionError("negative global estimator")
        for arr in (self.eta_cg_local, self.eta_mo_local, self.rho_local):
            if np.any(arr < 0.0):
                raise AssertionError("negative local estimator")
        total = self.eta_mo + self.eta_cg
        if abs(self.rho - total) > 1e-12 * max(1.0, total):
            raise AssertionError("global indicator drifted from its parts")
        if abs(float(self.rho_local.sum()) - total) > 1e-12 * max(1.0, total):
            raise AssertionError("local indicators do not sum to the global one")


def truncation_estimator(lat, params, loading, u_sites, c_tr: float = 1.0) -> float:
    """Far-field lattice-stress mismatch against the predictor, outer half."""
    return stress.truncation_norm(lat, params, loading, u_sites, c_tr)


def coarsening_local(mesh, sigma_ac: np.ndarray):
    """Edge-jump residual per element over the continuum triangulation.

    Only interior edges whose both flanks lie outside the atomistic section
    contribute.  Each edge spreads half its squared weight to either flank,
    so the element squares sum to the once-per-edge total, returned second.
    """
    v = mesh.view()
    table = mesh.edge_table()
    cont = (v.label == BUFFER) | (v.label == CONTINUUM)
    left, right = table.flanks[:, 0], table.flanks[:, 1]
    keep = right >= 0
    keep[keep] &= cont[left[keep]] & cont[right[keep]]
    e = np.flatnonzero(keep)
    eta_sq = np.zeros(len(v.tri))
    if not len(e):
        return np.sqrt(eta_sq), 0.0
    tang = v.xy[table.nodes[e, 1]] - v.xy[table.nodes[e, 0]]
    nrm = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    jump = np.einsum("eij,ej->ei", sigma_ac[left[e]] - sigma_ac[right[e]], nrm)
    w_sq = (table.length[e] * np.linalg.norm(jump, axis=1)) ** 2
    np.add.at(eta_sq, left[e], 0.5 * w_sq)
    np.add.at(eta_sq, right[e], 0.5 * w_sq)
    return np.sqrt(eta_sq), float(w_sq.sum())


def coarsening_global(edge_sq_total: float, c_tr: float = 1.0, c_mesh: float = 1.0) -> float:
    """Once-per-edge jump total with the empirical prefactors."""
    return float(SQRT3 * c_tr * c_mesh * np.sqrt(edge_sq_total))


def _micro_pool(mesh) -> np.ndarray:
    """Mask of micro triangles in the continuum section: all three corners
    present and not owned by a core or interface element."""
    lat = mesh.lattice
    v = mesh.view()
    pool = ~np.any(lat.is_vacant[lat.tri], axis=1)
    owned = v.ta[(v.label == ATOM_CORE) | (v.label == INTERFACE)]
    pool[owned[owned >= 0]] = False
    return pool


def modeling_exact_local(mesh, sigma_a, sigma_ac, rows=None, full_scan: bool = False):
    """Exact modeling residual for the requested view rows.

    A canonical element coincides with its micro triangle and reduces to a
    single mismatch term with no geometric search.  A coarse element
    integrates the mismatch between the lattice stress and the micro-averaged
    coupled stress over every overlapped micro triangle; with full_scan the
    candidates are the entire continuum pool instead of a bounding-box
    neighbourhood, which is the cost the exact mode is expected to pay.
    """
    v = mesh.view()
    lat = mesh.lattice
    if rows is None:
        rows = np.flatnonzero((v.label == BUFFER) | (v.label == CONTINUUM))
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros(len(v.tri))
    if not len(rows):
        return out
    canon = v.ta[rows] >= 0
    crows = rows[canon]
    if len(crows):
        diff = sigma_a[v.ta[crows]] - sigma_ac[crows]
        out[crows] = np.sqrt(TRI_AREA) * np.linalg.norm(diff.reshape(len(crows), 4), axis=1)
    nrows = rows[~canon]
    if not len(nrows):
        return out
    sbar = stress.micro_average_field(mesh, sigma_ac)
    mis = np.linalg.norm((sigma_a - sbar).reshape(len(sigma_a), 4), axis=1) ** 2
    if full_scan:
        pool = np.flatnonzero(_micro_pool(mesh))
        corners = lat.pos[lat.tri[pool]]
        lo, hi = corners.min(axis=1), corners.max(axis=1)
        for r in nrows:
            pts = v.xy[v.tri[r]]
            blo, bhi = pts.min(axis=0), pts.max(axis=0)
            hit = pool[
                (lo[:, 0] <= bhi[0]) & (hi[:, 0] >= blo[0])
                & (lo[:, 1] <= bhi[1]) & (hi[:, 1] >= blo[1])
            ]
            acc = 0.0
            for t in hit:
                a = intersection_area(lat.pos[lat.tri[t]], pts)
                if a > 1e-12:
                    acc += a * mis[t]
            out[r] = np.sqrt(acc)
    else:
        for r in nrows:
            ids, areas = mesh.intersection_areas(int(v.ids[r]))
            out[r] = np.sqrt(float(np.sum(areas * mis[ids])))
    return out


def buffer_distance(mesh) -> np.ndarray:
    """Element-barycenter distance to the nearest buffer-band atom."""
    lat = mesh.lattice
    v = mesh.view()
    sites = np.flatnonzero(mesh.zone_mask & ~mesh.region_mask & lat.atom_mask)
    if not len(sites):
        return np.full(len(v.tri), np.inf)
    tree = cKDTree(lat.pos[sites])
    dist, _ = tree.query(v.bary)
    return dist


def blend_weight(r: float, r_bld: float) -> float:
    """Linear ramp: zero through the first ring, one beyond the blend width."""
    if r >= r_bld:
        return 1.0
    if r <= 1.0:
        return 0.0
    return (r - 1.0) / (r_bld - 1.0)


def modeling_local(mesh, sigma_a, sigma_ac, cfg: EstimatorConfig, c_mo_cg: float, eta_cg_local):
    """Per-element modeling residual under the configured approximation.

    Buffer elements always carry the exact single-triangle value; the
    atomistic section carries none.  Off the buffer the residual is exact,
    scaled from the coarsening term, blended between the two by distance
    to the buffer band, or dropped entirely.
    """
    v = mesh.view()
    eta = np.zeros(len(v.tri))
    kinds = np.full(len(v.tri), "none", dtype=object)
    buf = np.flatnonzero(v.label == BUFFER)
    far = np.flatnonzero(v.label == CONTINUUM)

    if cfg.mode == "original":
        eta = modeling_exact_local(mesh, sigma_a, sigma_ac, full_scan=True)
        kinds[buf] = "exact"
        kinds[far] = "exact"
    elif cfg.mode == "direct":
        eta = modeling_exact_local(mesh, sigma_a, sigma_ac, rows=buf)
        eta[far] = (c_mo_cg / v.h[far]) * eta_cg_local[far]
        kinds[buf] = "exact"
        kinds[far] = "direct"
    elif cfg.mode == "blended":
        beta = np.array([blend_weight(r, cfg.r_bld) for r in buffer_distance(mesh)])
        need = far[beta[far] > 0.0]
        exact = modeling_exact_local(mesh, sigma_a, sigma_ac, rows=np.concatenate([buf, need]))
        eta[buf] = exact[buf]
        kinds[buf] = "exact"
        direct = np.zeros(len(v.tri))
        direct[far] = (c_mo_cg / v.h[far]) * eta_cg_local[far]
        for r in far:
            b = beta[r]
            if b >= 1.0:
                eta[r] = exact[r]
                kinds[r] = "exact"
            elif b <= 0.0:
                eta[r] = direct[r]
                kinds[r] = "direct"
            else:
                eta[r] = b * exact[r] + (1.0 - b) * direct[r]
                kinds[r] = "blended"
    else:  # coarsening only
        eta = modeling_exact_local(mesh, sigma_a, sigma_ac, rows=buf)
        kinds[buf] = "exact"
    return eta, tuple(str(k) for k in kinds)


def estimate_constant(mesh, sigma_a, sigma_ac, eta_cg_local, previous=None) -> float:
    """Empirical mo-to-cg ratio taken from the first continuum ring.

    Returns the largest h-scaled ratio over elements touching the atomistic
    or buffer section, skipping degenerate jump residuals.  Falls back to
    the previous value, then to one, when every candidate degenerates.
    """
    v = mesh.view()
    near = np.zeros(len(v.xy), dtype=bool)
    near[np.unique(v.tri[v.label != CONTINUUM])] = True
    ring = np.flatnonzero((v.label == CONTINUUM) & near[v.tri].any(axis=1))
    ring = ring[eta_cg_local[ring] >= 1e-14]
    if len(ring):
        eta_mo = modeling_exact_local(mesh, sigma_a, sigma_ac, rows=ring)
        return float(np.max(v.h[ring] * eta_mo[ring] / eta_cg_local[ring]))
    if previous is not None and previous > 0.0:
        return float(previous)
    warnings.warn("no usable ring element for the mo-to-cg ratio; using 1.0")
    return 1.0


def local_estimator(eta_mo_local, eta_cg_local, edge_sq_total, c_tr=1.0, c_mesh=1.0):
    """Combined per-element indicator plus the two global totals.

    Each term normalizes its squared local residual by the matching global
    first power, so the indicators sum exactly to the sum of the globals;
    a vanishing global drops its term rather than dividing by zero.
    """
    mo_glob = float(c_tr * np.sqrt(np.sum(eta_mo_local**2)))
    cg_glob = coarsening_global(edge_sq_total, c_tr, c_mesh)
    rho = np.zeros_like(eta_mo_local)
    if mo_glob > 0.0:
        rho += (c_tr**2) * eta_mo_local**2 / mo_glob
    if cg_glob > 0.0:
        rho += 3.0 * (c_tr * c_mesh) ** 2 * eta_cg_local**2 / cg_glob
    return rho, mo_glob, cg_glob


def estimate(coupling, u, cfg: EstimatorConfig, solve_seconds: float = 0.0, previous_constant=None) -> EstimatorReport:
    """Evaluate every residual for one solved state.

    Interpolates the solution to the lattice, assembles both stress fields,
    applies the divergence-free interface correction, and reduces the
    per-element residuals to the combined indicator.
    """
    cfg.check()
    t0 = time.perf_counter()
    mesh = coupling.mesh
    lat = mesh.lattice
    v = mesh.view()
    u_sites = stress.interpolate_to_sites(mesh, u)
    sigma_a = stress.atomistic_stress(lat, coupling.params, coupling.loading, u_sites)
    sigma_ac = stress.ac_stress(coupling, u)
    sigma_ac, _ = stress.correct_stress(mesh, sigma_a, sigma_ac)
    eta_tr = truncation_estimator(lat, coupling.params, coupling.loading, u_sites, cfg.c_tr)
    eta_cg_local, edge_sq = coarsening_local(mesh, sigma_ac)
    c_mo = cfg.c_mo_cg
    if c_mo is None and cfg.mode in ("direct", "blended"):
        c_mo = estimate_constant(mesh, sigma_a, sigma_ac, eta_cg_local, previous_constant)
    eta_mo_local, kinds = modeling_local(mesh, sigma_a, sigma_ac, cfg, c_mo or 0.0, eta_cg_local)
    rho_local, mo_glob, cg_glob = local_estimator(eta_mo_local, eta_cg_local, edge_sq, cfg.c_tr, cfg.c_mesh)
    ncomp = 1 if u.ndim == 1 else u.shape[1]
    report = EstimatorReport(
        mode=cfg.mode,
        n_free=int(v.free.sum()) * ncomp,
        eta_tr=float(eta_tr),
        eta_cg=cg_glob,
        eta_mo=mo_glob,
        rho=mo_glob + cg_glob,
        c_mo_cg=float(c_mo) if c_mo is not None else 0.0,
        element_ids=v.ids.copy(),
        region=v.label.copy(),
        h=v.h.copy(),
        eta_cg_local=eta_cg_local,
        eta_mo_local=eta_mo_local,
        eta_mo_kind=kinds,
        rho_local=rho_local,
        solve_seconds=float(solve_seconds),
    )
    report.estimate_seconds = time.perf_counter() - t0
    report.check()
    return report


def _num(x) -> str:
    return f"{float(x):.17g}"


def write_report_csv(report: EstimatorReport, path) -> None:
    """One row per element in id order, then a global trailer row carrying
    the totals, the truncation term, and the wall-clock split."""
    order = np.argsort(report.element_ids)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["element_id", "region", "h_T", "eta_cg", "eta_mo_kind", "eta_mo", "rho_T"])
        for k in order:
            out.writerow(
                [
                    int(report.element_ids[k]),
                    REGION_NAMES[int(report.region[k])],
                    _num(report.h[k]),
                    _num(report.eta_cg_local[k]),
                    report.eta_mo_kind[k],
                    _num(report.eta_mo_local[k]),
                    _num(report.rho_local[k]),
                ]
            )
        pack = ";".join(
            [
                "mode=" + report.mode,
                "eta_tr=" + _num(report.eta_tr),
                "c_mo_cg=" + _num(report.c_mo_cg),
                "t_solve=" + _num(report.solve_seconds),
                "t_estimate=" + _num(report.estimate_seconds),
            ]
        )
        out.writerow(
            ["global", "all", report.n_free, _num(report.eta_cg), pack, _num(report.eta_mo), _num(report.rho)]
        )
