"""Energy minimization and the true-error functional.

One nonlinear conjugate gradient drives both problems: the coupled energy
over mesh nodes and the reference atomistic energy over every lattice site.
Search directions are preconditioned with a factored P1 stiffness matrix of
the corresponding triangulation, which keeps the iteration count flat as
elements coarsen away from the defect.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import line_search
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu

from .lattice import Lattice
from .potential import site_energies
from .stress import interpolate_to_sites, site_bond_gradients


@dataclass
class SolveConfig:
    force_tolerance: float = 1e-8
    max_iterations: int = 4000
    armijo: float = 1e-4
    curvature: float = 0.1
    backtrack: float = 0.5
    max_backtracks: int = 40
    precondition: bool = True


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    force_norm: float
    converged: bool
    seconds: float


def _stiffness_factor(tri, areas, grads, free):
    """LU factorization of the P1 stiffness restricted to free nodes."""
    n = int(free.sum())
    index = -np.ones(len(free), dtype=np.int64)
    index[free] = np.arange(n)
    rows, cols, vals = [], [], []
    local = np.einsum("m,mki,mli->mkl", areas, grads, grads)
    for k in range(3):
        for l in range(3):
            a = index[tri[:, k]]
            b = index[tri[:, l]]
            ok = (a >= 0) & (b >= 0)
            rows.append(a[ok])
            cols.append(b[ok])
            vals.append(local[ok, k, l])
    mat = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsc()
    # clamped boundary keeps this positive definite; tiny shift guards
    # degenerate corner cases
    mat = mat + 1e-12 * csr_matrix((np.ones(n), (np.arange(n), np.arange(n))), shape=(n, n))
    return splu(mat), index


class _Preconditioner:
    def __init__(self, lu, index, free, shape):
        self.lu = lu
        self.index = index
        self.free = free
        self.shape = shape

    def apply(self, g):
        out = np.zeros_like(g)
        if g.ndim == 1:
            out[self.free] = self.lu.solve(g[self.free])
        else:
            for c in range(g.shape[1]):
                out[self.free, c] = self.lu.solve(g[self.free, c])
        return out


def _identity_precond():
    class _Id:
        def apply(self, g):
            return g

    return _Id()


def _ncg(energy, gradient, u0, free_mask, cfg, precond):
    """Preconditioned Polak-Ribiere conjugate gradient.

    Steps come from a strong Wolfe line search. Near the minimum the energy
    decrease per step drops below the rounding noise of the total energy and
    any sufficient-decrease test becomes meaningless, so on Wolfe failure the
    step is chosen by a secant iteration on the directional derivative alone
    (the assembled forces stay accurate to their own rounding), guarded only
    against a genuine energy increase.
    """
    t0 = time.perf_counter()
    shape = u0.shape
    u = u0.ravel().copy()
    cache = {"key": None, "g": None}

    def f(x):
        return energy(x.reshape(shape))

    def fp(x):
        key = x.tobytes()
        if cache["key"] != key:
            cache["g"] = gradient(x.reshape(shape)).ravel()
            cache["key"] = key
        return cache["g"]

    def wolfe(d, gd, E_prev):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ls = line_search(f, fp, u, d, gfk=g, old_fval=E,
                             old_old_fval=E_prev, c1=cfg.armijo,
                             c2=cfg.curvature, maxiter=25)
        return ls[0], ls[3]

    def dline(d, gd, start):
        """Secant search for |phi'(a)| <= c2 |phi'(0)| using forces only."""
        def slope(a):
            return float(fp(u + a * d) @ d)

        start = min(max(start, 1e-3), 4.0)
        a, p = start, slope(start)
        grown = 0
        while p < 0.0 and grown < 12:
            if abs(p) <= cfg.curvature * abs(gd):
                return a
            a *= 2.0
            p = slope(a)
            grown += 1
        if p < 0.0:
            return a
        lo, plo, hi, phi = 0.0, gd, a, p
        for _ in range(25):
            a = hi - phi * (hi - lo) / (phi - plo)
            if not (lo < a < hi):
                a = 0.5 * (lo + hi)
            p = slope(a)
            if abs(p) <= cfg.curvature * abs(gd):
                return a
            if p < 0.0:
                lo, plo = a, p
            else:
                hi, phi = a, p
            if hi - lo <= 1e-10 * max(start, hi):
                return a
        return a

    E = f(u)
    g = fp(u).copy()
    z = precond.apply(g.reshape(shape)).ravel()
    d = -z
    gz = float(g @ z)
    E_prev = None
    last_alpha = 1.0
    it = 0
    fnorm = float(np.abs(g).max()) if g.size else 0.0
    while fnorm > cfg.force_tolerance and it < cfg.max_iterations:
        gd = float(g @ d)
        fresh = gd >= 0.0
        if fresh:
            d, gd = -z, -gz
        alpha, E_new = wolfe(d, gd, E_prev)
        if alpha is None and not fresh:
            d, gd = -z, -gz
            fresh = True
            alpha, E_new = wolfe(d, gd, E_prev)
        if alpha is None:
            alpha = dline(d, gd, last_alpha)
            E_new = f(u + alpha * d)
            if E_new > E + 1e-11 * (1.0 + abs(E)):
                alpha = None
        if alpha is None:
            break
        last_alpha = alpha
        u = u + alpha * d
        E_prev, E = E, E_new
        g_new = fp(u).copy()
        z_new = precond.apply(g_new.reshape(shape)).ravel()
        gz_new = float(g_new @ z_new)
        beta = max(0.0, float(g_new @ (z_new - z)) / gz) if gz > 0 else 0.0
        d = -z_new + beta * d
        g, z, gz = g_new, z_new, gz_new
        fnorm = float(np.abs(g).max())
        it += 1
    return SolveResult(
        u=u.reshape(shape),
        iterations=it,
        force_norm=fnorm,
        converged=fnorm <= cfg.force_tolerance,
        seconds=time.perf_counter() - t0,
    )


def minimize_ac(coupling, u0: np.ndarray | None = None,
                cfg: SolveConfig | None = None) -> SolveResult:
    """Minimize the coupled energy over free mesh nodes."""
    cfg = cfg or SolveConfig()
    v = coupling.mesh.view()
    if u0 is None:
        u0 = coupling.zero_field()
    u0 = u0.copy()
    u0[~coupling.free] = 0.0

    if cfg.precondition:
        lu, index = _stiffness_factor(v.tri, v.area, v.grad, coupling.free)
        precond = _Preconditioner(lu, index, coupling.free, u0.shape)
    else:
        precond = _identity_precond()

    def energy(u):
        return coupling.energy(u)

    def gradient(u):
        return coupling.energy_and_gradient(u)[1]

    return _ncg(energy, gradient, u0, coupling.free, cfg, precond)


def reference_gradient(lat, params, loading, u_sites, free):
    """Gradient of the full atomistic energy; rows outside `free` are zeroed."""
    grad, mask = site_bond_gradients(lat, params, loading, u_sites)
    out = np.zeros_like(u_sites)
    for d in range(6):
        g = grad[:, d]
        m = mask[:, d]
        np.subtract.at(out, np.flatnonzero(m), g[m])
        nbr = lat.neighbors[:, d]
        both = m & (nbr >= 0)
        np.add.at(out, nbr[both], g[both])
    out[~free] = 0.0
    return out


def _lattice_stiffness(lat, free):
    """Graph Laplacian over lattice bonds (clamped bonds hit the diagonal)."""
    n = int(free.sum())
    index = -np.ones(lat.n_sites, dtype=np.int64)
    index[free] = np.arange(n)
    rows, cols, vals = [], [], []
    present = ~lat.is_vacant
    for d in range(6):
        nbr = lat.neighbors[:, d]
        inside = nbr >= 0
        vac_nbr = np.zeros(lat.n_sites, dtype=bool)
        vac_nbr[inside] = lat.is_vacant[nbr[inside]]
        ok = present & ~vac_nbr
        src = index[np.flatnonzero(ok)]
        keep = src >= 0
        src = src[keep]
        rows.append(src)
        cols.append(src)
        vals.append(np.ones(len(src)))
        both = ok & inside
        a = index[np.flatnonzero(both)]
        b = index[nbr[both]]
        pair = (a >= 0) & (b >= 0)
        rows.append(a[pair])
        cols.append(b[pair])
        vals.append(-np.ones(int(pair.sum())))
    mat = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsc()
    mat = mat + 1e-12 * csr_matrix((np.ones(n), (np.arange(n), np.arange(n))), shape=(n, n))
    return splu(mat), index


def solve_reference(lat, params, loading, cfg: SolveConfig | None = None,
                    u0: np.ndarray | None = None) -> SolveResult:
    """Relax every present lattice site against the clamped far field.

    The clamped surroundings carry energy too: the functional is assembled
    on a one-ring skin extension whose sites are pinned at the predictor.
    Every bond with a relaxed end is then counted from both flanking site
    energies, so the homogeneous state is an exact equilibrium and no
    spurious surface force builds up at the domain rim.  The returned
    displacement is restricted to the sites of `lat`.
    """
    cfg = cfg or SolveConfig()
    anti = loading.antiplane
    skin = Lattice(lat.radius + 1, lat.defect)
    inner = skin.site_index(lat.coords)
    free = np.zeros(skin.n_sites, dtype=bool)
    free[inner] = ~lat.is_vacant
    present = ~skin.is_vacant
    shape = (skin.n_sites,) if anti else (skin.n_sites, 2)
    u_init = np.zeros(shape)
    if u0 is not None:
        u_init[inner] = u0
    u_init[~free] = 0.0

    sites = np.arange(skin.n_sites)
    base = loading.bond_base(skin, sites)

    def state(u):
        grad_mask = np.zeros((skin.n_sites, 6), dtype=bool)
        ext = base.copy()
        for d in range(6):
            nbr = skin.neighbors[:, d]
            inside = nbr >= 0
            vac_nbr = np.zeros(skin.n_sites, dtype=bool)
            vac_nbr[inside] = skin.is_vacant[nbr[inside]]
            ok = present & ~vac_nbr
            grad_mask[:, d] = ok
            du = np.zeros_like(u)
            both = ok & inside
            du[both] = u[nbr[both]]
            du[ok] -= u[ok]
            ext[ok, d] += du[ok]
        return ext, grad_mask

    ext0, mask0 = state(np.zeros(shape))
    e0_sites = site_energies(params, ext0, mask0, antiplane=anti)

    def energy(u):
        # referenced per site before summing: the total would otherwise drown
        # its own decrease in the rounding of a large near-constant sum
        ext, mask = state(u)
        e = site_energies(params, ext, mask, antiplane=anti)
        return float((e - e0_sites).sum())

    def gradient(u):
        return reference_gradient(skin, params, loading, u, free)

    if cfg.precondition:
        lu, index = _lattice_stiffness(skin, free)
        precond = _Preconditioner(lu, index, free, shape)
    else:
        precond = _identity_precond()
    res = _ncg(energy, gradient, u_init, free, cfg, precond)
    return SolveResult(res.u[inner], res.iterations, res.force_norm,
                       res.converged, res.seconds)


def canonical_gradients(lat, site_values: np.ndarray) -> np.ndarray:
    """P1 gradients per canonical micro triangle of an extended site field."""
    vals = lat.extend(site_values)
    tp = lat.pos[lat.tri]
    e0 = tp[:, 2] - tp[:, 1]
    e1 = tp[:, 0] - tp[:, 2]
    e2 = tp[:, 1] - tp[:, 0]
    area = 0.5 * (e2[:, 0] * (-e1[:, 1]) - e2[:, 1] * (-e1[:, 0]))
    grad = np.empty((lat.n_tri, 3, 2))
    for k, e in enumerate((e0, e1, e2)):
        grad[:, k, 0] = -e[:, 1]
        grad[:, k, 1] = e[:, 0]
    grad /= (2.0 * area)[:, None, None]
    if vals.ndim == 2:
        return np.einsum("mki,mkj->mij", vals[lat.tri], grad)
    return np.einsum("mk,mkj->mj", vals[lat.tri], grad)


def true_error(mesh, u_h: np.ndarray, u_ref: np.ndarray) -> float:
    """L2 norm over the canonical triangulation of grad(I_a u_h - u_ref)."""
    from .geometry import TRI_AREA

    lat = mesh.lattice
    diff = interpolate_to_sites(mesh, u_h) - u_ref
    g = canonical_gradients(lat, diff)
    return float(np.sqrt(TRI_AREA * np.sum(g * g)))


def difference_magnitudes(lat, u_sites: np.ndarray):
    """Per-site root-sum-square of present-bond differences of a field.

    Returns (hex_radius, magnitude) arrays over present sites; the decay of
    these magnitudes away from the defect is what the error curves fit.
    """
    sq = np.zeros(lat.n_sites)
    for d in range(6):
        diff, mask = lat.differences(u_sites, d)
        contrib = diff**2 if diff.ndim == 1 else (diff**2).sum(axis=1)
        sq[mask] += contrib[mask]
    present = ~lat.is_vacant
    return lat.hex_norms()[present], np.sqrt(sq[present])


def evaluate_p1(view, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate a nodal P1 field of a (possibly stale) mesh view at points.

    Used to carry a solution across mesh mutations; points must lie inside
    the view's cover. Nearest-element barycentric evaluation keeps points on
    shared edges consistent.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out_shape = (len(pts),) if values.ndim == 1 else (len(pts), values.shape[1])
    out = np.zeros(out_shape)
    for i, q in enumerate(pts):
        rel = q[None, :] - view.bary
        lam = 1.0 / 3.0 + np.einsum("mj,mkj->mk", rel, view.grad)
        best = int(np.argmax(lam.min(axis=1)))
        w = np.clip(lam[best], 0.0, None)
        w = w / w.sum()
        out[i] = w @ values[view.tri[best]]
    return out
