"""Piecewise-constant stress fields and the interface stress correction.

Three fields live here. The atomistic stress assigns each directed bond's
energy-gradient dyad to the two canonical micro triangles flanking the bond,
half each, so a homogeneous state reproduces the Cauchy-Born stress exactly.
The coupled stress does the same on the coarse mesh for core and interface
bonds (interface gradients pulled back through the reconstruction adjoint)
and adds the omega-weighted continuum stress. The correction fits a rotated
P1 gradient to the interface mismatch between the two, which leaves the
weak divergence of the coupled field untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .geometry import CELL_AREA, NEIGHBOR_VECTORS, TRI_AREA, hex_norm, to_lattice
from .mesh import INTERFACE
from .potential import cauchy_born, site_energy_and_bond_grad

# fixed 90-degree rotation; rotated P1 gradients are the piecewise-constant
# divergence-free fields used by the correction
ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


def interpolate_to_sites(mesh, u: np.ndarray) -> np.ndarray:
    """Evaluate a nodal field at every present lattice site (vacant rows 0)."""
    tri, w = mesh.site_interpolation()
    if u.ndim == 2:
        return np.einsum("nk,nki->ni", w, u[tri])
    return np.einsum("nk,nk->n", w, u[tri])


def site_bond_gradients(lat, params, loading, u_sites: np.ndarray):
    """Per-site bond gradients of the full state (predictor plus u_sites).

    The displacement is clamped to zero beyond the domain, so bonds that
    leave the hexagon still exist and carry the base difference minus u(s);
    only bonds into defect vacancies are masked. Returns (grad, mask) shaped
    like the 6-bond stencils; masked entries are 0.
    """
    anti = loading.antiplane
    sites = np.arange(lat.n_sites)
    ext = loading.bond_base(lat, sites).copy()
    u = np.asarray(u_sites, dtype=float)
    present = ~lat.is_vacant
    mask = np.zeros((lat.n_sites, 6), dtype=bool)
    for d in range(6):
        nbr = lat.neighbors[:, d]
        inside = nbr >= 0
        vac_nbr = np.zeros(lat.n_sites, dtype=bool)
        vac_nbr[inside] = lat.is_vacant[nbr[inside]]
        ok = present & ~vac_nbr
        mask[:, d] = ok
        du = np.zeros_like(u)
        both = ok & inside
        du[both] = u[nbr[both]]
        du[ok] -= u[ok]
        ext[ok, d] += du[ok]
    _, grad = site_energy_and_bond_grad(params, ext, mask, antiplane=anti)
    return grad, mask


def atomistic_stress(lat, params, loading, u_sites: np.ndarray) -> np.ndarray:
    """Bond-dyad stress per canonical micro triangle.

    Each directed bond's dyad goes half to each flanking triangle; with the
    clamped extension every stencil is complete, so a homogeneous state
    reproduces dW on every element, and sum_T |T| sigma : grad_T v equals
    the first variation of the atomistic energy for compactly supported P1
    fields v (bonds crossing the domain boundary lose the outside half, but
    their test difference is zero there).
    """
    anti = loading.antiplane
    grad, mask = site_bond_gradients(lat, params, loading, u_sites)
    shape = (lat.n_tri, 2) if anti else (lat.n_tri, 2, 2)
    sigma = np.zeros(shape)
    for d in range(6):
        a = NEIGHBOR_VECTORS[d]
        if anti:
            dyad = grad[:, d, None] * a
        else:
            dyad = grad[:, d, :, None] * a
        flanks = lat.bond_flanks(d)
        for col in range(2):
            f = flanks[:, col]
            sel = mask[:, d] & (f >= 0)
            np.add.at(sigma, f[sel], dyad[sel] / CELL_AREA)
    return sigma


def continuum_stress(coupling, u: np.ndarray) -> np.ndarray:
    """Unweighted Cauchy-Born stress dW per alive element (0 off FE support)."""
    v = coupling.mesh.view()
    shape = (len(v.ids), 2) if coupling.antiplane else (len(v.ids), 2, 2)
    out = np.zeros(shape)
    _, dW = cauchy_born(coupling.params, coupling.fe_gradients(u), coupling.antiplane)
    out[coupling.fe_sel] = dW
    return out


def ac_stress(coupling, u: np.ndarray) -> np.ndarray:
    """Coupled stress per alive coarse element.

    Atomistic-site bond dyads land on their flanking canonical elements (a
    bond with only one alive flank, at a vacancy hole, puts its whole dyad
    there); every FE-active element adds omega * dW on top.
    """
    mesh = coupling.mesh
    lat = mesh.lattice
    v = mesh.view()
    anti = coupling.antiplane
    ing = coupling.stress_ingredients(u)

    ta_row = np.full(lat.n_tri, -1, dtype=np.int64)
    canon = v.ta >= 0
    ta_row[v.ta[canon]] = np.flatnonzero(canon)

    shape = (len(v.ids), 2) if anti else (len(v.ids), 2, 2)
    sigma = np.zeros(shape)

    for sites, gr, mask in (
        (ing["core_sites"], ing["core_grad"], ing["core_mask"]),
        (ing["iface_sites"], ing["iface_grad"], np.ones(ing["iface_grad"].shape[:2], dtype=bool)),
    ):
        if not len(sites):
            continue
        for d in range(6):
            a = NEIGHBOR_VECTORS[d]
            if anti:
                dyad = gr[:, d, None] * a
            else:
                dyad = gr[:, d, :, None] * a
            rows = ta_row[lat.bond_flanks(d)[sites]]  # (m, 2)
            present = rows >= 0
            n_flank = present.sum(axis=1)
            for col in range(2):
                sel = mask[:, d] & present[:, col]
                w = (2.0 / n_flank[sel]) / CELL_AREA
                np.add.at(sigma, rows[sel, col], dyad[sel] * w.reshape((-1,) + (1,) * (dyad.ndim - 1)))
    _, dW = cauchy_born(coupling.params, coupling.fe_gradients(u), anti)
    wsel = coupling.fe_w / v.area[coupling.fe_sel]  # omega
    sigma[coupling.fe_sel] += dW * wsel.reshape((-1,) + (1,) * (sigma.ndim - 1))
    return sigma


def micro_average_field(mesh, sigma_ac: np.ndarray) -> np.ndarray:
    """Coarse-element stress averaged onto every micro triangle.

    For micro T' the value is sum over coarse T of |T cap T'| / |T'| times
    sigma_ac(T); canonical coarse elements copy their value straight in.
    """
    lat = mesh.lattice
    v = mesh.view()
    out = np.zeros((lat.n_tri,) + sigma_ac.shape[1:])
    for row in range(len(v.ids)):
        if v.ta[row] >= 0:
            out[v.ta[row]] = sigma_ac[row]
            continue
        ids, areas = mesh.intersection_areas(v.ids[row])
        np.add.at(out, ids, sigma_ac[row] * (areas / TRI_AREA).reshape((-1,) + (1,) * (sigma_ac.ndim - 1)))
    return out


@dataclass
class CorrectionField:
    """Nodal rotated-gradient potential; zero away from the interface band."""

    values: np.ndarray
    ok: bool


def _rotated_gradients(grads: np.ndarray, c_nodal: np.ndarray) -> np.ndarray:
    """Per-element rotated gradient (d2 c, -d1 c) of a nodal scalar field."""
    g = np.einsum("mk,mkj->mj", c_nodal, grads)
    return np.stack([g[:, 1], -g[:, 0]], axis=1)


def correct_stress(mesh, sigma_a_micro: np.ndarray, sigma_ac: np.ndarray):
    """Add the best-fit divergence-free correction on the interface band.

    Minimizes the area-weighted mismatch between the atomistic and coupled
    stresses over interface elements among rotated P1 gradients whose edge
    midpoints vanish on every edge not meeting an interface atom. Those
    constraints are imposed exactly through a nullspace basis.
    """
    v = mesh.view()
    anti = sigma_ac.ndim == 2
    iface_rows = np.flatnonzero(v.label == INTERFACE)
    corrected = sigma_ac.copy()
    ncomp = 1 if anti else 2
    values = np.zeros((mesh.n_nodes,)) if anti else np.zeros((mesh.n_nodes, 2))
    if not len(iface_rows):
        return corrected, CorrectionField(values, False)

    residual = sigma_a_micro[v.ta[iface_rows]] - sigma_ac[iface_rows]

    # active nodes: interface-element nodes grown by two element layers
    active_mask = np.zeros(mesh.n_nodes, dtype=bool)
    active_mask[v.tri[iface_rows].ravel()] = True
    for _ in range(2):
        touched = active_mask[v.tri].any(axis=1)
        active_mask[v.tri[touched].ravel()] = True
    active = np.flatnonzero(active_mask)
    pos = -np.ones(mesh.n_nodes, dtype=np.int64)
    pos[active] = np.arange(len(active))

    iface_sites = set(mesh.interface_atom_sites().tolist())
    ns = v.node_site
    node_is_iface = np.zeros(mesh.n_nodes, dtype=bool)
    has_site = ns >= 0
    node_is_iface[has_site] = np.isin(ns[has_site], list(iface_sites))

    et = mesh.edge_table()
    en = et.nodes
    edge_iface = node_is_iface[en].any(axis=1)
    edge_active = active_mask[en].any(axis=1)
    con_edges = en[~edge_iface & edge_active]

    n_act = len(active)
    rows = []
    for a, b in con_edges:
        r = np.zeros(n_act)
        if pos[a] >= 0:
            r[pos[a]] += 1.0
        if pos[b] >= 0:
            r[pos[b]] += 1.0
        rows.append(r)
    B = np.array(rows) if rows else np.zeros((0, n_act))

    null = linalg.null_space(B) if B.size else np.eye(n_act)
    if null.shape[1] == 0:
        return corrected, CorrectionField(values, False)

    # per-element design matrix over interface elements: sqrt(|T|) weights
    gi = v.grad[iface_rows]  # (m, 3, 2)
    tri_i = v.tri[iface_rows]
    sw = np.sqrt(v.area[iface_rows])
    # rotated gradient of basis node k on element m: (g2, -g1)
    basis = np.zeros((len(iface_rows), 2, n_act))
    for k in range(3):
        cols = pos[tri_i[:, k]]
        ok = cols >= 0
        m_idx = np.flatnonzero(ok)
        basis[m_idx, 0, cols[ok]] += gi[m_idx, k, 1]
        basis[m_idx, 1, cols[ok]] -= gi[m_idx, k, 0]
    M = (basis * sw[:, None, None]).reshape(-1, n_act) @ null

    sol = np.zeros((n_act, ncomp))
    for comp in range(ncomp):
        target = residual[:, comp] if not anti else residual
        b = (target * sw[:, None]).reshape(-1)
        z, *_ = np.linalg.lstsq(M, b, rcond=None)
        sol[:, comp] = null @ z

    if anti:
        values[active] = sol[:, 0]
    else:
        values[active] = sol

    # apply the rotated gradient on every element the correction touches
    touched = active_mask[v.tri].any(axis=1)
    rows_t = np.flatnonzero(touched)
    if anti:
        c_el = values[v.tri[rows_t]]
        corrected[rows_t] += _rotated_gradients(v.grad[rows_t], c_el)
    else:
        for comp in range(2):
            c_el = values[v.tri[rows_t], comp]
            corrected[rows_t, comp] += _rotated_gradients(v.grad[rows_t], c_el)
    return corrected, CorrectionField(values, True)


def truncation_norm(lat, params, loading, u_sites: np.ndarray, c_tr: float = 1.0) -> float:
    """Far-field L2 mismatch between the lattice stress and the predictor's.

    Integrates |sigma_a - dW(grad y_base)|^2 over micro triangles whose
    barycenter lies outside half the domain radius.
    """
    sigma = atomistic_stress(lat, params, loading, u_sites)
    bary = lat.pos[lat.tri].mean(axis=1)
    far = hex_norm(to_lattice(bary)) > lat.radius / 2.0
    if not np.any(far):
        return 0.0
    _, dW = cauchy_born(params, loading.grad_base(bary[far]), loading.antiplane)
    diff = sigma[far] - dW
    sq = diff.reshape(len(diff), -1)
    return float(c_tr * np.sqrt(TRI_AREA * np.sum(sq * sq)))
