"""Triangular-lattice model: sites, defects, neighbour stencils, micro triangulation.

A `Lattice` covers the hexagonal domain of all sites with hop norm <= radius.
Defects remove sites (vacancies, micro-cracks) or prescribe a topological
predictor (screw dislocation); removed sites stay in the site table as
geometric nodes of the micro triangulation and are skipped by every stencil.
Site order is lexicographic in lattice indices, which fixes every reduction
order in the code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BASIS,
    CELL_AREA,
    NEIGHBOR_STEPS,
    NEIGHBOR_VECTORS,
    TRI_AREA,
    hex_ball,
    hex_norm,
    to_cartesian,
)

#: Core offset of the screw predictor: barycenter of the lattice triangle
#: {(0,0), (1,0), (1/2, sqrt(3)/2)}, so the singular point avoids every site.
SCREW_CORE = (0.5, 1.0 / (2.0 * np.sqrt(3.0)))


@dataclass(frozen=True)
class Defect:
    """Defect description: 'none', 'microcrack', 'multivacancy' or 'screw'."""

    kind: str = "none"
    k: int = 0
    sites: tuple[tuple[int, int], ...] = ()
    burgers: float = 1.0
    core: tuple[float, float] = SCREW_CORE

    @property
    def ncomp(self) -> int:
        return 1 if self.kind == "screw" else 2

    def removed_sites(self) -> np.ndarray:
        if self.kind == "microcrack":
            k = int(self.k)
            if k < 1:
                raise ValueError("microcrack needs k >= 1")
            lo = -((k - 1) // 2) if k % 2 == 1 else -(k // 2)
            return np.array([(m, 0) for m in range(lo, lo + k)], dtype=np.int64)
        if self.kind == "multivacancy":
            if not self.sites:
                raise ValueError("multivacancy needs at least one site")
            return np.array(sorted(self.sites), dtype=np.int64)
        return np.zeros((0, 2), dtype=np.int64)

    def seed_sites(self) -> np.ndarray:
        """Lattice sites whose neighbourhood the atomistic region must cover."""
        if self.kind in ("microcrack", "multivacancy"):
            return self.removed_sites()
        if self.kind == "screw":
            return np.array([(0, 0), (1, 0), (0, 1)], dtype=np.int64)
        return np.array([(0, 0)], dtype=np.int64)


def no_defect() -> Defect:
    return Defect("none")


def micro_crack(k: int) -> Defect:
    return Defect("microcrack", k=k)


def multi_vacancy(sites) -> Defect:
    return Defect("multivacancy", sites=tuple(tuple(map(int, s)) for s in sites))


def screw_dislocation(burgers: float = 1.0) -> Defect:
    return Defect("screw", burgers=float(burgers))


class Lattice:
    """Hexagonal patch of the triangular lattice with one defect applied."""

    def __init__(self, radius: int, defect: Defect | None = None):
        if radius < 2:
            raise ValueError("radius must be at least 2")
        self.radius = int(radius)
        self.defect = defect if defect is not None else no_defect()
        self.ncomp = self.defect.ncomp

        self.coords = hex_ball(self.radius)                  # (n, 2) int, lex order
        self.n_sites = len(self.coords)
        self.pos = to_cartesian(self.coords)

        pad = 2
        self._off = self.radius + pad
        side = 2 * self._off + 1
        self._grid = np.full((side, side), -1, dtype=np.int64)
        self._grid[self.coords[:, 0] + self._off, self.coords[:, 1] + self._off] = (
            np.arange(self.n_sites)
        )

        self.is_vacant = np.zeros(self.n_sites, dtype=bool)
        removed = self.defect.removed_sites()
        if len(removed):
            idx = self.site_index(removed)
            if np.any(idx < 0):
                raise ValueError("defect site outside the domain")
            self.is_vacant[idx] = True

        # neighbors[s, k]: site index one step k away, -1 outside the domain.
        self.neighbors = np.empty((self.n_sites, 6), dtype=np.int64)
        for k, step in enumerate(NEIGHBOR_STEPS):
            self.neighbors[:, k] = self._lookup(self.coords + step)

        # A bond exists when both endpoints are present atoms.
        exists = self.neighbors >= 0
        nbr_vacant = np.zeros_like(exists)
        nbr_vacant[exists] = self.is_vacant[self.neighbors[exists]]
        self.bond_present = exists & ~nbr_vacant & ~self.is_vacant[:, None]

        self._build_triangulation()

    # ------------------------------------------------------------------ sites

    def _lookup(self, ij: np.ndarray) -> np.ndarray:
        ij = np.asarray(ij, dtype=np.int64)
        i = ij[..., 0] + self._off
        j = ij[..., 1] + self._off
        ok = (i >= 0) & (i < self._grid.shape[0]) & (j >= 0) & (j < self._grid.shape[1])
        out = np.full(ij.shape[:-1], -1, dtype=np.int64)
        out[ok] = self._grid[i[ok], j[ok]]
        return out

    def site_index(self, ij) -> np.ndarray:
        """Site indices for lattice index pairs; -1 where outside the domain."""
        return self._lookup(np.asarray(ij, dtype=np.int64))

    @property
    def atom_mask(self) -> np.ndarray:
        return ~self.is_vacant

    def hex_norms(self) -> np.ndarray:
        return hex_norm(self.coords).astype(np.int64)

    # -------------------------------------------------------- triangulation

    def _build_triangulation(self) -> None:
        """Canonical triangulation of the covered plane region.

        Each unit triangle is anchored at its unique bottom vertex s:
        'up' triangles are {s, s+a1, s+a2} and 'down' triangles are
        {s, s+a2, s+a3}; both are counterclockwise.  Vacant sites remain
        geometric nodes, so the triangulation has no holes.
        """
        i, j = self.coords[:, 0], self.coords[:, 1]
        n1 = self._lookup(self.coords + NEIGHBOR_STEPS[0])
        n2 = self._lookup(self.coords + NEIGHBOR_STEPS[1])
        n3 = self._lookup(self.coords + NEIGHBOR_STEPS[2])

        up_ok = (n1 >= 0) & (n2 >= 0)
        dn_ok = (n2 >= 0) & (n3 >= 0)

        base = np.arange(self.n_sites)
        up = np.stack([base[up_ok], n1[up_ok], n2[up_ok]], axis=1)
        dn = np.stack([base[dn_ok], n2[dn_ok], n3[dn_ok]], axis=1)
        self.tri = np.concatenate([up, dn], axis=0)
        self.n_tri = len(self.tri)
        self.tri_area = TRI_AREA

        side = self._grid.shape[0]
        self._up_id = np.full((side, side), -1, dtype=np.int64)
        self._dn_id = np.full((side, side), -1, dtype=np.int64)
        ii, jj = i[up_ok] + self._off, j[up_ok] + self._off
        self._up_id[ii, jj] = np.arange(len(up))
        ii, jj = i[dn_ok] + self._off, j[dn_ok] + self._off
        self._dn_id[ii, jj] = len(up) + np.arange(len(dn))

        self.tri_bary = self.pos[self.tri].mean(axis=1)
        # Anchor key (i, j, up/down) per triangle, used by intersection search.
        cells_up = np.stack([i[up_ok], j[up_ok], np.zeros(up_ok.sum(), np.int64)], 1)
        cells_dn = np.stack([i[dn_ok], j[dn_ok], np.ones(dn_ok.sum(), np.int64)], 1)
        self.tri_cell = np.concatenate([cells_up, cells_dn], axis=0)

    def _cell_tri_id(self, ij: np.ndarray, down: bool) -> np.ndarray:
        ij = np.asarray(ij, dtype=np.int64)
        i = ij[..., 0] + self._off
        j = ij[..., 1] + self._off
        ok = (i >= 0) & (i < self._grid.shape[0]) & (j >= 0) & (j < self._grid.shape[1])
        out = np.full(ij.shape[:-1], -1, dtype=np.int64)
        table = self._dn_id if down else self._up_id
        out[ok] = table[i[ok], j[ok]]
        return out

    def bond_flanks(self, direction: int) -> np.ndarray:
        """Triangle ids flanking the bond from each site along `direction`.

        Returns (n_sites, 2); -1 where a flank's triangle does not exist.
        The two flanks of a bond do not depend on its orientation.
        """
        ij = self.coords
        d = direction % 6
        if d == 0:
            pairs = [(ij, False), (ij + (1, -1), True)]
        elif d == 1:
            pairs = [(ij, False), (ij, True)]
        elif d == 2:
            pairs = [(ij + (-1, 0), False), (ij, True)]
        elif d == 3:
            pairs = [(ij + (-1, 0), False), (ij + (0, -1), True)]
        elif d == 4:
            pairs = [(ij + (0, -1), False), (ij + (0, -1), True)]
        else:
            pairs = [(ij + (0, -1), False), (ij + (1, -1), True)]
        return np.stack(
            [self._cell_tri_id(c, down) for c, down in pairs], axis=1
        )

    # ------------------------------------------------------------ field ops

    def extend(self, values: np.ndarray) -> np.ndarray:
        """Copy `values` with vacant rows replaced by the mean over present
        neighbours, so piecewise-linear gradients are defined across holes."""
        out = np.array(values, dtype=float)
        vac = np.where(self.is_vacant)[0]
        for s in vac:
            nbrs = self.neighbors[s]
            nbrs = nbrs[(nbrs >= 0)]
            nbrs = nbrs[~self.is_vacant[nbrs]]
            out[s] = values[nbrs].mean(axis=0) if len(nbrs) else 0.0
        return out

    def differences(self, values: np.ndarray, direction: int) -> np.ndarray:
        """Finite differences v(site + a_d) - v(site) over present bonds.

        Returns (diff, mask); rows with mask False are zero-filled.
        """
        mask = self.bond_present[:, direction]
        out = np.zeros_like(np.asarray(values, dtype=float))
        nbr = self.neighbors[mask, direction]
        out[mask] = values[nbr] - values[mask]
        return out, mask

    def stencil(self, site: int, values: np.ndarray):
        """Ordered (direction, difference) pairs over the site's present bonds."""
        out = []
        for d in range(6):
            if self.bond_present[site, d]:
                out.append((d, values[self.neighbors[site, d]] - values[site]))
        return out

    def energy_norm(self, values: np.ndarray) -> float:
        """Root of the summed squared differences over all directed bonds."""
        total = 0.0
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        for d in range(6):
            diff, mask = self.differences(v, d)
            total += float(np.sum(diff[mask] ** 2))
        return float(np.sqrt(total))

    # -------------------------------------------------------------- export

    def dump(self, path) -> None:
        """Plain-text dump: site table then triangle table."""
        with open(path, "w") as fh:
            fh.write(f"sites {self.n_sites}\n")
            for s in range(self.n_sites):
                flags = 1 if self.is_vacant[s] else 0
                fh.write(
                    f"{s} {self.pos[s, 0]:.17g} {self.pos[s, 1]:.17g} {flags}\n"
                )
            fh.write(f"triangles {self.n_tri}\n")
            for t in range(self.n_tri):
                a, b, c = self.tri[t]
                fh.write(f"tri {a} {b} {c}\n")


def hull_area(lat: Lattice) -> float:
    """Area of the convex hull of the site positions."""
    from scipy.spatial import ConvexHull

    return float(ConvexHull(lat.pos).volume)
