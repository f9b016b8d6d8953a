"""Solve, estimate, mark, refine: the driver loop.

Each cycle relaxes the coupled energy, evaluates the residual estimators on
the corrected stress, and then mutates the mesh: the domain is enlarged when
the truncation term dominates, the atomistic region is expanded when the
marked indicator mass concentrates within a few hop layers of the region
boundary, and the remaining marked continuum elements are bisected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import estimator as est
from . import mesh as msh
from . import solver as sv
from .coupling import Coupling
from .mesh import BUFFER, CONTINUUM, MeshParams

# canonical elements sit at the lattice scale; splitting below it would put
# mesh resolution inside a single bond, so marking stops at this edge length
H_FLOOR = 1.25

MARKING_RULES = ("mean", "paper_literal", "all")


@dataclass
class AdaptiveConfig:
    """Loop thresholds plus the nested component configurations."""

    n_max: int = 20000
    rho_tol: float = 0.0
    r_max: int = 300
    r0: int = 60
    tau1: float = 0.7
    tau2: float = 1.0
    k_max: int = 3
    marking: str = "mean"
    enlarge_factor: float = 1.5
    max_steps: int = 40
    estimator: est.EstimatorConfig = field(default_factory=est.EstimatorConfig)
    mesh: MeshParams = field(default_factory=MeshParams)
    solver: sv.SolveConfig = field(default_factory=sv.SolveConfig)

    def check(self) -> None:
        if not 0.0 < self.tau1 < 1.0:
            raise ValueError("tau1 must lie strictly between 0 and 1")
        if self.tau2 <= 0.0:
            raise ValueError("tau2 must be positive")
        if self.k_max < 1:
            raise ValueError("at least one expansion layer must be probed")
        if self.marking not in MARKING_RULES:
            raise ValueError(f"unknown marking rule {self.marking!r}")
        if self.enlarge_factor <= 1.0:
            raise ValueError("enlargement must grow the domain")
        if self.max_steps < 1 or self.n_max < 1 or self.r_max < 1 or self.r0 < 1:
            raise ValueError("loop bounds must be positive")
        self.estimator.check()


@dataclass
class AdaptiveStep:
    """Record of one cycle: state measured, then the action taken."""

    index: int
    n_free: int
    radius: int
    rho: float
    eta_tr: float
    eta_cg: float
    eta_mo: float
    error: float
    n_split: int = 0
    expanded: int = 0
    enlarged: bool = False
    regions: int = 1
    stopped: str = ""
    solve_seconds: float = 0.0
    estimate_seconds: float = 0.0
    snapshot: str = ""


@dataclass
class AdaptiveResult:
    steps: list
    mesh: object
    coupling: object
    u: np.ndarray
    reports: list


def mark(report: est.EstimatorReport, rule: str = "mean") -> np.ndarray:
    """Rows of the report's view carrying the dominant indicator mass.

    The threshold rule keeps every element at or above the mean indicator;
    the literal rule keeps the shortest descending prefix whose sum reaches
    the mean; the uniform rule marks everything, which turns the loop into
    an a-priori graded-mesh baseline.  No region filter is applied here:
    lattice-scale elements must stay visible to the interface probe, and
    the refine stage drops whatever cannot be split.
    """
    rho = report.rho_local
    if rule == "all":
        return np.arange(len(rho), dtype=np.int64)
    if not len(rho) or rho.sum() <= 0.0:
        return np.empty(0, dtype=np.int64)
    if rule == "mean":
        chosen = rho >= rho.mean()
    else:
        order = np.argsort(rho)[::-1]
        need = rho.mean()
        take = int(np.searchsorted(np.cumsum(rho[order]), need) + 1)
        chosen = np.zeros(len(rho), dtype=bool)
        chosen[order[: min(take, len(rho))]] = True
    return np.flatnonzero(chosen)


def splittable_rows(view, rows: np.ndarray) -> np.ndarray:
    """Restrict marked rows to bisectable ones: continuum-section elements
    above the lattice scale."""
    ok = ((view.label[rows] == BUFFER) | (view.label[rows] == CONTINUUM)) & (view.h[rows] > H_FLOOR)
    return rows[ok]


def interface_probe(report: est.EstimatorReport, view, mesh, marked_rows, tau1: float, k_max: int):
    """First layer count whose near-interface marked mass dominates.

    Returns (k, rows inside k layers); k = 0 when no probed layer reaches
    the tau1 share of the marked indicator mass.  Distances run from the
    barycenters of the report's view to the current interface atoms.
    """
    if not len(marked_rows):
        return 0, np.empty(0, dtype=np.int64)
    lat = mesh.lattice
    sites = np.flatnonzero(mesh.interface_mask & lat.atom_mask)
    if not len(sites):
        return 0, np.empty(0, dtype=np.int64)
    dist, _ = cKDTree(lat.pos[sites]).query(view.bary[marked_rows])
    rho = report.rho_local
    total = float(rho[marked_rows].sum())
    if total <= 0.0:
        return 0, np.empty(0, dtype=np.int64)
    for k in range(1, k_max + 1):
        near = marked_rows[dist <= k]
        if float(rho[near].sum()) >= tau1 * total:
            return k, near
    return 0, np.empty(0, dtype=np.int64)


class ReferenceBank:
    """Full-lattice relaxations keyed by domain radius, warm-started from
    the previous radius where possible.  Entries may be preloaded with
    `put`; anything missing is solved on demand."""

    def __init__(self, params, loading, cfg: sv.SolveConfig):
        self.params = params
        self.loading = loading
        self.cfg = cfg
        self.cache = {}
        self.solved = set()
        self.last = None

    def put(self, radius: int, u: np.ndarray) -> None:
        self.cache[int(radius)] = np.asarray(u, dtype=float)

    def error(self, mesh, u) -> float:
        lat = mesh.lattice
        if lat.radius in self.cache and len(self.cache[lat.radius]) != lat.n_sites:
            raise ValueError(
                f"stored reference at radius {lat.radius} has "
                f"{len(self.cache[lat.radius])} sites, lattice has {lat.n_sites}"
            )
        if lat.radius not in self.cache:
            u0 = None
            if self.last is not None:
                prev_lat, prev_u = self.last
                idx = lat.site_index(prev_lat.coords)
                ok = idx >= 0
                shape = (lat.n_sites,) if prev_u.ndim == 1 else (lat.n_sites, prev_u.shape[1])
                u0 = np.zeros(shape)
                u0[idx[ok]] = prev_u[ok]
            res = sv.solve_reference(lat, self.params, self.loading, self.cfg, u0=u0)
            if not res.converged:
                raise RuntimeError(f"reference relaxation stalled at radius {lat.radius}")
            self.cache[lat.radius] = res.u
            self.solved.add(lat.radius)
            self.last = (lat, res.u)
        return sv.true_error(mesh, u, self.cache[lat.radius])


def _warm_start(coupling, prev_view, prev_u):
    """Carry the previous solution onto the current mesh by P1 evaluation."""
    if prev_u is None:
        return None
    v = coupling.mesh.view()
    u0 = coupling.zero_field()
    rows = np.flatnonzero(v.free)
    u0[rows] = sv.evaluate_p1(prev_view, prev_u, v.xy[rows])
    return u0


def run(mesh, loading, params, cfg: AdaptiveConfig,
        reference: bool | ReferenceBank = False,
        out_dir=None, snapshots: bool = False) -> AdaptiveResult:
    """Drive the adaptive loop until a stopping rule fires.

    The mesh is mutated in place across cycles.  Per-step estimator CSVs
    and optional mesh snapshots are written under out_dir when given.  A
    reference relaxation per domain radius supplies true errors on demand.
    Solver failure stops the loop and returns the partial step list.
    """
    cfg.check()
    steps: list[AdaptiveStep] = []
    reports: list[est.EstimatorReport] = []
    if isinstance(reference, ReferenceBank):
        bank = reference
    else:
        bank = ReferenceBank(params, loading, cfg.solver) if reference else None
    prev_view = None
    prev_u = None
    prev_constant = None
    coupling = Coupling(mesh, loading, params)
    u = coupling.zero_field()

    for index in range(cfg.max_steps):
        res = sv.minimize_ac(coupling, u0=_warm_start(coupling, prev_view, prev_u), cfg=cfg.solver)
        u = res.u
        if not res.converged:
            steps.append(
                AdaptiveStep(
                    index=index, n_free=0, radius=mesh.lattice.radius,
                    rho=np.nan, eta_tr=np.nan, eta_cg=np.nan, eta_mo=np.nan,
                    error=np.nan, stopped="solver", solve_seconds=res.seconds,
                )
            )
            break
        report = est.estimate(coupling, u, cfg.estimator, solve_seconds=res.seconds,
                              previous_constant=prev_constant)
        reports.append(report)
        if cfg.estimator.mode in ("direct", "blended"):
            prev_constant = report.c_mo_cg
        error = bank.error(mesh, u) if bank is not None else np.nan
        step = AdaptiveStep(
            index=index,
            n_free=report.n_free,
            radius=mesh.lattice.radius,
            rho=report.rho,
            eta_tr=report.eta_tr,
            eta_cg=report.eta_cg,
            eta_mo=report.eta_mo,
            error=error,
            regions=msh.components(mesh.lattice, mesh.region_mask)[1],
            solve_seconds=report.solve_seconds,
            estimate_seconds=report.estimate_seconds,
        )
        if out_dir is not None:
            est.write_report_csv(report, f"{out_dir}/step_{index:03d}.csv")
            if snapshots:
                step.snapshot = f"{out_dir}/mesh_{index:03d}.json"
                mesh.write_snapshot(step.snapshot)
        view = mesh.view()
        prev_view = view
        prev_u = u

        if report.eta_tr > cfg.tau2 * report.rho:
            mesh.enlarge_domain(cfg.enlarge_factor)
            step.enlarged = True
        if report.n_free > cfg.n_max:
            step.stopped = "n_max"
        elif report.rho < cfg.rho_tol:
            step.stopped = "rho_tol"
        elif mesh.lattice.radius > cfg.r_max:
            step.stopped = "r_max"
        elif index == cfg.max_steps - 1:
            step.stopped = "max_steps"
        if step.stopped:
            steps.append(step)
            break

        marked = mark(report, cfg.marking)
        k, near = interface_probe(report, view, mesh, marked, cfg.tau1, cfg.k_max)
        if k:
            marked = np.setdiff1d(marked, near)
            mesh.expand_interface(k)
            step.expanded = k
        marked = splittable_rows(view, marked)
        if len(marked):
            outcome = mesh.bisect(report.element_ids[marked])
            step.n_split = outcome["split"]
        if not (step.n_split or step.expanded or step.enlarged):
            step.stopped = "stalled"
            steps.append(step)
            break
        steps.append(step)
        coupling = Coupling(mesh, loading, params)
    return AdaptiveResult(steps=steps, mesh=mesh, coupling=coupling, u=u, reports=reports)
