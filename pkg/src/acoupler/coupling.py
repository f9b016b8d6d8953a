"""Consistent atomistic/continuum coupling energy and forces.

The coupled energy sums full site potentials over core atoms, reconstructed
site potentials over interface atoms, and Cauchy-Born element energies
weighted by effective volumes:

    E(u) = sum_core V(Dy) + sum_interface V(C Dy) + sum_T omega_T |T| W(grad y)

with y the base loading plus the nodal corrector u.  The interface
reconstruction mixes each bond difference with its two angular neighbours,
r_p = c_p D_p y + (1 - c_p)(D_{p-1} y + D_{p+1} y), where c_p is 1 when the
neighbour site lies in the atomistic region and 2/3 otherwise; since
a_{p-1} + a_{p+1} = a_p this reproduces every affine field exactly.  The
effective volume of an element is the fraction of its vertices that are not
region atoms, which carves out exactly the Voronoi cells of the atoms and
makes uniform deformations an equilibrium of the coupled energy.
"""

from __future__ import annotations

import numpy as np

from .geometry import CELL_AREA
from .mesh import CoarseMesh
from .potential import EamParams, cauchy_born, site_energies, site_energy_and_bond_grad


class Coupling:
    """Assembled coupled energy for one mesh snapshot.

    Instances capture the mesh state at construction; rebuild after any mesh
    mutation.  Displacement arrays are nodal: (n_nodes, 2) in plane or
    (n_nodes,) anti-plane, with clamped rows held at zero.
    """

    def __init__(self, mesh: CoarseMesh, loading, params: EamParams):
        self.mesh = mesh
        self.loading = loading
        self.params = params
        self.antiplane = bool(loading.antiplane)
        self.ncomp = 1 if self.antiplane else 2
        if mesh.lattice.ncomp != self.ncomp:
            raise ValueError("loading arity does not match the defect")
        self._build()

    def _build(self) -> None:
        mesh, lat = self.mesh, self.mesh.lattice
        v = mesh.view()
        self._view = v
        s2n = mesh.site_to_node()

        core = mesh.core_atom_sites()
        iface = mesh.interface_atom_sites()
        self.core_sites, self.iface_sites = core, iface

        self.core_node = s2n[core]
        self.core_mask = lat.bond_present[core]
        nbr = lat.neighbors[core]
        self.core_nbr_node = np.where(self.core_mask, s2n[np.clip(nbr, 0, None)], -1)
        if np.any(self.core_node < 0) or np.any(self.core_nbr_node[self.core_mask] < 0):
            raise AssertionError("core atom without a mesh node")

        if len(iface):
            if not lat.bond_present[iface].all():
                raise AssertionError("interface atom with an incomplete stencil")
        self.iface_node = s2n[iface]
        inbr = lat.neighbors[iface]
        self.iface_nbr_node = s2n[np.clip(inbr, 0, None)]
        if np.any(self.iface_node < 0) or np.any(self.iface_nbr_node < 0):
            raise AssertionError("interface atom without a mesh node")
        self.iface_diag = np.where(mesh.region_mask[np.clip(inbr, 0, None)], 1.0, 2.0 / 3.0)

        self.core_base = self.loading.bond_base(lat, core)
        self.iface_base = self.loading.bond_base(lat, iface)
        self.core_ref = self.loading.site_reference(self.params, lat, core, self.core_mask)
        iface_mask = np.ones((len(iface), 6), dtype=bool)
        self.iface_mask = iface_mask
        self.iface_ref = self.loading.site_reference(self.params, lat, iface, iface_mask)

        fe = v.omega * v.area > 0.0
        self.fe_sel = fe
        self.fe_tri = v.tri[fe]
        self.fe_grad = v.grad[fe]
        self.fe_w = (v.omega * v.area)[fe]
        self.fe_base = self.loading.grad_base(v.bary[fe])
        self.free = v.free

    # ------------------------------------------------------------- stencils

    def zero_field(self) -> np.ndarray:
        if self.antiplane:
            return np.zeros(self.mesh.n_nodes)
        return np.zeros((self.mesh.n_nodes, 2))

    def _diffs(self, u, node, nbr_node, mask):
        d = u[np.clip(nbr_node, 0, None)] - u[node][:, None]
        if self.antiplane:
            return np.where(mask, d, 0.0)
        return np.where(mask[..., None], d, 0.0)

    def _reconstruct(self, d):
        # r_p = c_p d_p + (1 - c_p) (d_{p-1} + d_{p+1}); the side weights are
        # tied to the centre direction, which makes r_p = d_p exact whenever
        # the differences come from an affine map (a_{p-1} + a_{p+1} = a_p).
        c = self.iface_diag if self.antiplane else self.iface_diag[..., None]
        return c * d + (1.0 - c) * (np.roll(d, 1, axis=1) + np.roll(d, -1, axis=1))

    def _reconstruct_adjoint(self, g):
        # transpose of _reconstruct: ghat_s = c_s g_s + sum over p = s -+ 1
        # of (1 - c_p) g_p
        c = self.iface_diag if self.antiplane else self.iface_diag[..., None]
        side = (1.0 - c) * g
        return c * g + np.roll(side, 1, axis=1) + np.roll(side, -1, axis=1)

    def core_stencils(self, u) -> np.ndarray:
        return self.core_base + self._diffs(u, self.core_node, self.core_nbr_node, self.core_mask)

    def iface_stencils(self, u) -> np.ndarray:
        d = self.iface_base + self._diffs(
            u, self.iface_node, self.iface_nbr_node, np.ones_like(self.iface_diag, dtype=bool)
        )
        return self._reconstruct(d)

    def fe_gradients(self, u) -> np.ndarray:
        """Deformation gradient (or anti-plane slope) per weighted element."""
        un = u[self.fe_tri]  # (m, 3[, 2])
        if self.antiplane:
            du = np.einsum("mk,mkj->mj", un, self.fe_grad)
        else:
            du = np.einsum("mki,mkj->mij", un, self.fe_grad)
        return self.fe_base + du

    # ------------------------------------------------------- energy, forces

    def energy(self, u) -> float:
        e_core = site_energies(self.params, self.core_stencils(u), self.core_mask, self.antiplane)
        e_if = site_energies(self.params, self.iface_stencils(u), self.iface_mask, self.antiplane)
        W, _ = cauchy_born(self.params, self.fe_gradients(u), self.antiplane)
        return (
            float((e_core - self.core_ref).sum())
            + float((e_if - self.iface_ref).sum())
            + float((self.fe_w * W).sum())
        )

    def energy_and_gradient(self, u):
        out = np.zeros_like(u)

        e_core, g_core = site_energy_and_bond_grad(
            self.params, self.core_stencils(u), self.core_mask, self.antiplane
        )
        self._scatter_bonds(out, self.core_node, self.core_nbr_node, self.core_mask, g_core)

        e_if, g_if = site_energy_and_bond_grad(
            self.params, self.iface_stencils(u), self.iface_mask, self.antiplane
        )
        ghat = self._reconstruct_adjoint(g_if)
        self._scatter_bonds(out, self.iface_node, self.iface_nbr_node, self.iface_mask, ghat)

        W, dW = cauchy_born(self.params, self.fe_gradients(u), self.antiplane)
        if self.antiplane:
            f = np.einsum("m,mkj,mj->mk", self.fe_w, self.fe_grad, dW)
        else:
            f = np.einsum("m,mkj,mij->mki", self.fe_w, self.fe_grad, dW)
        for k in range(3):
            np.add.at(out, self.fe_tri[:, k], f[:, k])

        energy = (
            float((e_core - self.core_ref).sum())
            + float((e_if - self.iface_ref).sum())
            + float((self.fe_w * W).sum())
        )
        out[~self.free] = 0.0
        return energy, out

    def gradient(self, u) -> np.ndarray:
        return self.energy_and_gradient(u)[1]

    def _scatter_bonds(self, out, node, nbr_node, mask, g) -> None:
        for k in range(6):
            ok = mask[:, k]
            np.add.at(out, nbr_node[ok, k], g[ok, k])
            np.add.at(out, node[ok], -g[ok, k])

    # ----------------------------------------------------- stress ingredients

    def stress_ingredients(self, u):
        """Bond gradients and element stresses entering the coupled stress.

        Returns core bond gradients, interface bond gradients already pulled
        back through the reconstruction, and the Cauchy-Born stress per
        weighted element.
        """
        _, g_core = site_energy_and_bond_grad(
            self.params, self.core_stencils(u), self.core_mask, self.antiplane
        )
        _, g_if = site_energy_and_bond_grad(
            self.params, self.iface_stencils(u), self.iface_mask, self.antiplane
        )
        _, dW = cauchy_born(self.params, self.fe_gradients(u), self.antiplane)
        return {
            "core_sites": self.core_sites,
            "core_mask": self.core_mask,
            "core_grad": g_core,
            "iface_sites": self.iface_sites,
            "iface_grad": self._reconstruct_adjoint(g_if),
            "fe_sel": self.fe_sel,
            "fe_dW": dW,
        }

    # ---------------------------------------------------------- volume info

    def coupled_volume(self) -> float:
        """Voronoi cells of the atoms plus the weighted element areas."""
        n_atoms = len(self.core_sites) + len(self.iface_sites)
        return n_atoms * CELL_AREA + float((self.fe_w).sum())
