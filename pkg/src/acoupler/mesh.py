"""Coarse finite element mesh coupled to the lattice description.

The mesh partitions the hexagonal domain into four element classes: atomistic
core, interface, buffer, and continuum.  The atomistic region plus its buffer
annulus (the "zone") is covered by the canonical unit triangulation out to a
hexagonal envelope; outside, rings of lattice sites at geometrically growing
radii are zipped into triangle annuli so the element size follows
h(r) ~ c0 (r / R_a)^beta.  Every mesh node sits on a lattice site except
bisection midpoints, which are snapped back to sites when they land on one.

Refinement is newest-vertex bisection with conformity closure.  Elements that
coincide with canonical micro triangles are never bisected; a closure chain
that would have to cut one is refused, leaving the mesh conforming and the
requesting element unsplit.  Interface expansion dilates the atomistic region
by whole hop layers, extends the canonical fill, and re-zips the band between
the new envelope and the first preserved ring.  Domain enlargement rebuilds
the lattice at the larger radius and appends graded annuli outward.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import (
    NEIGHBOR_STEPS,
    TRI_AREA,
    chord_fractions,
    hex_norm,
    intersection_area,
    to_cartesian,
    to_lattice,
    zip_chains,
)
from .lattice import Lattice

ATOM_CORE, INTERFACE, BUFFER, CONTINUUM = 0, 1, 2, 3
LABEL_NAMES = ("atom_core", "interface", "buffer", "continuum")

SNAP_TOL = 1e-9


class DomainExhausted(RuntimeError):
    """The requested mesh operation needs space beyond the current domain."""


@dataclass(frozen=True)
class MeshParams:
    core_radius: int = 6          # initial atomistic radius per region, hop layers
    buffer_width: int = 3         # buffer annulus width, hop layers
    grading_constant: float = 0.9
    grading_exponent: float = 1.5

    def __post_init__(self):
        if not 1.0 < self.grading_exponent < 2.0:
            raise ValueError("grading exponent must lie in (1, 2)")
        if self.core_radius < 1 or self.buffer_width < 1:
            raise ValueError("core radius and buffer width must be positive")


# ----------------------------------------------------------------- site masks

def dilate(lattice: Lattice, mask: np.ndarray, layers: int = 1) -> np.ndarray:
    """Grow a site mask by whole hop layers (vacant sites participate)."""
    out = mask.copy()
    for _ in range(layers):
        grown = out.copy()
        for k in range(6):
            idx = lattice.neighbors[:, k]
            ok = idx >= 0
            grown[ok] |= out[idx[ok]]
        out = grown
    return out


def components(lattice: Lattice, mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Hop-connected component label per site (-1 outside the mask)."""
    sites = np.flatnonzero(mask)
    labels = np.full(lattice.n_sites, -1, dtype=np.int64)
    if len(sites) == 0:
        return labels, 0
    local = np.full(lattice.n_sites, -1, dtype=np.int64)
    local[sites] = np.arange(len(sites))
    rows, cols = [], []
    for k in range(3):  # three directions cover every undirected pair
        nbr = lattice.neighbors[sites, k]
        ok = (nbr >= 0) & mask[np.clip(nbr, 0, None)]
        rows.append(local[sites[ok]])
        cols.append(local[nbr[ok]])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)),
        shape=(len(sites), len(sites)),
    )
    n, lab = connected_components(graph, directed=False)
    labels[sites] = lab
    return labels, n


def bridge_clusters(lattice: Lattice, mask: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Join region clusters whose hop gap is at most two.

    Adds the sites adjacent to both clusters, then repeats until no pair is
    that close.  Returns the new mask with the component counts before and
    after bridging.
    """
    _, n_before = components(lattice, mask)
    while True:
        labels, n = components(lattice, mask)
        if n <= 1:
            break
        halos = [dilate(lattice, labels == c, 1) for c in range(n)]
        bridge = np.zeros_like(mask)
        for a in range(n):
            for b in range(a + 1, n):
                bridge |= halos[a] & halos[b] & ~mask
        if not bridge.any():
            break
        mask = mask | bridge
    _, n_after = components(lattice, mask)
    return mask, n_before, n_after


# ------------------------------------------------------------------ the mesh

class CoarseMesh:
    """Adaptive conforming triangulation with lattice-aware bookkeeping."""

    def __init__(
        self,
        lattice: Lattice,
        params: MeshParams | None = None,
        region_mask: np.ndarray | None = None,
    ):
        self.lattice = lattice
        self.params = params if params is not None else MeshParams()

        if region_mask is None:
            seeds = self.lattice.defect.seed_sites()
            idx = self.lattice.site_index(seeds)
            if np.any(idx < 0):
                raise ValueError("defect seed outside the domain")
            base = np.zeros(self.lattice.n_sites, dtype=bool)
            base[idx] = True
            region_mask = dilate(self.lattice, base, self.params.core_radius)
        self.region_mask = region_mask

        # node store
        self.node_pos: list[tuple[float, float]] = []
        self.node_site: list[int] = []
        self._node_key: dict = {}

        # element store; an element's base edge is (v0, v1), newest vertex v2
        self.el_nodes: list[tuple[int, int, int]] = []
        self.el_label: list[int] = []
        self.el_annulus: list[int] = []   # inner ring radius of the band, -1 canonical
        self.el_ta: list[int] = []        # canonical micro-triangle id, -1 otherwise
        self.el_parent: list[int] = []
        self.el_omega: list[float] = []
        self.el_alive: list[bool] = []
        self._edge_map: dict[tuple[int, int], list[int]] = defaultdict(list)

        self.version = 0
        self._view = None
        self._view_version = -1
        self._interp = None
        self._interp_version = -1

        self._refresh_zone()
        self.ring_radii: list[int] = []
        self.meshed_envelope = -1
        self._build_initial()

    # ------------------------------------------------------------ zone masks

    def _refresh_zone(self) -> None:
        lat = self.lattice
        self.zone_mask = dilate(lat, self.region_mask, self.params.buffer_width)
        has_outside = np.zeros(lat.n_sites, dtype=bool)
        for k in range(6):
            idx = lat.neighbors[:, k]
            ok = idx >= 0
            has_outside[ok] |= ~self.region_mask[idx[ok]]
            has_outside |= ~ok
        self.interface_mask = self.region_mask & has_outside
        self.buffer_mask = self.zone_mask & ~self.region_mask
        self.envelope = int(lat.hex_norms()[self.zone_mask].max())

    def region_atom_sites(self) -> np.ndarray:
        return np.flatnonzero(self.region_mask & self.lattice.atom_mask)

    def core_atom_sites(self) -> np.ndarray:
        mask = self.region_mask & ~self.interface_mask & self.lattice.atom_mask
        return np.flatnonzero(mask)

    def interface_atom_sites(self) -> np.ndarray:
        return np.flatnonzero(self.interface_mask & self.lattice.atom_mask)

    # ------------------------------------------------------------ node store

    def _site_node(self, site: int) -> int:
        key = ("s", int(site))
        nid = self._node_key.get(key)
        if nid is None:
            nid = len(self.node_pos)
            self._node_key[key] = nid
            self.node_pos.append(tuple(self.lattice.pos[site]))
            self.node_site.append(int(site))
        return nid

    def _point_node(self, pos: np.ndarray) -> int:
        lat_ij = to_lattice(np.asarray(pos, dtype=float))
        rounded = np.round(lat_ij)
        if np.max(np.abs(lat_ij - rounded)) < SNAP_TOL:
            site = int(self.lattice.site_index(rounded.astype(np.int64)))
            if site >= 0:
                return self._site_node(site)
        key = ("p", round(float(pos[0]), 9), round(float(pos[1]), 9))
        nid = self._node_key.get(key)
        if nid is None:
            nid = len(self.node_pos)
            self._node_key[key] = nid
            self.node_pos.append((float(pos[0]), float(pos[1])))
            self.node_site.append(-1)
        return nid

    @property
    def n_nodes(self) -> int:
        return len(self.node_pos)

    # --------------------------------------------------------- element store

    @staticmethod
    def _edge_key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def _add_element(
        self,
        nodes: tuple[int, int, int],
        label: int,
        annulus: int,
        ta: int,
        parent: int = -1,
        assign_base: bool = True,
    ) -> int:
        if assign_base:
            nodes = self._rotate_longest(nodes)
        eid = len(self.el_nodes)
        self.el_nodes.append(nodes)
        self.el_label.append(label)
        self.el_annulus.append(annulus)
        self.el_ta.append(ta)
        self.el_parent.append(parent)
        self.el_omega.append(1.0)
        self.el_alive.append(True)
        a, b, c = nodes
        for u, v in ((a, b), (b, c), (c, a)):
            self._edge_map[self._edge_key(u, v)].append(eid)
        return eid

    @staticmethod
    def _rotate_base_to(nodes: tuple[int, int, int], edge: set) -> tuple[int, int, int]:
        """Cyclic rotation putting the given edge first as the base."""
        for r in range(3):
            rot = (nodes[r], nodes[(r + 1) % 3], nodes[(r + 2) % 3])
            if {rot[0], rot[1]} == edge:
                return rot
        raise AssertionError("edge is not part of the element")

    def _rotate_longest(self, nodes: tuple[int, int, int]) -> tuple[int, int, int]:
        """Cyclic rotation putting the base (longest, ties by node pair) first."""
        p = [np.asarray(self.node_pos[n]) for n in nodes]
        best, best_key = nodes, None
        for r in range(3):
            a, b = nodes[r], nodes[(r + 1) % 3]
            ln = float(np.linalg.norm(p[(r + 1) % 3] - p[r]))
            key = (-ln, self._edge_key(a, b))
            if best_key is None or key < best_key:
                best_key = key
                best = (nodes[r], nodes[(r + 1) % 3], nodes[(r + 2) % 3])
        return best

    def _kill(self, eid: int) -> None:
        self.el_alive[eid] = False

    def alive_ids(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.el_alive))

    @property
    def n_elements(self) -> int:
        return int(np.count_nonzero(self.el_alive))

    # -------------------------------------------------------- initial build

    def _build_initial(self) -> None:
        lat = self.lattice
        if self.envelope + 1 > lat.radius:
            raise DomainExhausted("buffer envelope reaches the domain boundary")
        self._fill_canonical(self.envelope)
        self.meshed_envelope = self.envelope
        self.ring_radii = [self.envelope]
        chain = self._ring_chain(self.envelope, self.envelope)
        self._extend_rings(chain, self.envelope)
        self._relabel_canonical()
        self.version += 1

    def _fill_canonical(self, r_to: int) -> None:
        """Add the canonical micro elements with every vertex inside hex ring
        r_to that the mesh does not already hold."""
        lat = self.lattice
        present = np.zeros(lat.n_tri, dtype=bool)
        for t in self.alive_ids():
            if self.el_ta[t] >= 0:
                present[self.el_ta[t]] = True
        vmax = lat.hex_norms()[lat.tri].max(axis=1)
        sel = (vmax <= r_to) & ~present & ~lat.is_vacant[lat.tri].any(axis=1)
        for t in np.flatnonzero(sel):
            a, b, c = (self._site_node(int(s)) for s in lat.tri[t])
            self._add_element((a, b, c), CONTINUUM, -1, int(t), assign_base=False)

    def _ring_chain(self, r: int, n_per_sector: int) -> list[int]:
        """Closed CCW chain of site nodes around hex ring r (6*n nodes)."""
        lat = self.lattice
        ids = []
        for s in range(6):
            corner = r * np.asarray(NEIGHBOR_STEPS[s])
            step = np.asarray(NEIGHBOR_STEPS[(s + 2) % 6])
            for m in range(n_per_sector):
                t = int(round(m * r / n_per_sector))
                site = int(lat.site_index(corner + t * step))
                if site < 0:
                    raise DomainExhausted("ring site outside the domain")
                ids.append(self._site_node(site))
        return ids

    def _extend_rings(self, chain: list[int], r_start: int) -> None:
        """Append zipped annuli from `chain` at radius r_start out to the boundary."""
        p = self.params
        lat = self.lattice
        r = r_start
        while r < lat.radius:
            pos = np.asarray([self.node_pos[n] for n in chain])
            perim = np.linalg.norm(np.diff(np.vstack([pos, pos[:1]]), axis=0), axis=1).sum()
            s_in = perim / len(chain)
            h_goal = p.grading_constant * (r / p.core_radius) ** p.grading_exponent
            h_lim = max(min(h_goal, 2.0 * s_in), 1.0)
            dr = max(1, int(round(0.8 * h_lim)))
            r2 = min(r + dr, lat.radius)
            if lat.radius - r2 < max(1, dr // 2):
                r2 = lat.radius
            n_sec_in = max(1, len(chain) // 6)
            n2 = int(round(r2 / h_lim))
            n2 = int(np.clip(n2, (n_sec_in + 1) // 2, max(n_sec_in, 1)))
            n2 = max(min(n2, r2), 1)
            nxt = self._ring_chain(r2, n2)
            self._zip_annulus(chain, nxt, r)
            self.ring_radii.append(r2)
            chain, r = nxt, r2

    def _zip_annulus(self, inner: list[int], outer: list[int], inner_radius: int) -> None:
        pos_in = np.asarray([self.node_pos[n] for n in inner])
        pos_out = np.asarray([self.node_pos[n] for n in outer])
        # rotate the outer chain so both loops start at about the same angle
        a0 = np.arctan2(pos_in[0, 1], pos_in[0, 0])
        ang = np.arctan2(pos_out[:, 1], pos_out[:, 0])
        diff = np.angle(np.exp(1j * (ang - a0)))
        k = int(np.argmin(np.abs(diff)))
        outer = outer[k:] + outer[:k]
        pos_out = np.vstack([pos_out[k:], pos_out[:k]])

        loop_in = inner + [inner[0]]
        loop_out = outer + [outer[0]]
        f_in = chord_fractions(np.vstack([pos_in, pos_in[:1]]))
        f_out = chord_fractions(np.vstack([pos_out, pos_out[:1]]))
        # both loops run counterclockwise, so the inner one lies to the left
        # of the outer direction of travel
        tris = zip_chains(np.asarray(loop_out), np.asarray(loop_in), f_out, f_in)
        # The strip has even length and consecutive triangles share an edge.
        # Pairing them and using the shared edge as both base edges gives a
        # compatible assignment: conformity closure never cascades, and
        # uniform marking refines exactly one level per round.
        for k in range(0, len(tris) - 1, 2):
            a, b = tris[k], tris[k + 1]
            shared = set(a) & set(b)
            tris[k] = self._rotate_base_to(a, shared)
            tris[k + 1] = self._rotate_base_to(b, shared)
        if len(tris) % 2:
            tris[-1] = self._rotate_longest(tris[-1])
        for tri in tris:
            self._add_element(tri, CONTINUUM, inner_radius, -1, assign_base=False)

    # ------------------------------------------------------------- labeling

    def _relabel_canonical(self) -> None:
        """Recompute labels and effective volumes from the current site masks."""
        alive = self.alive_ids()
        ta = np.asarray(self.el_ta)
        canon = alive[ta[alive] >= 0]
        site = np.asarray(self.node_site)
        labels = np.asarray(self.el_label)
        omega = np.asarray(self.el_omega)
        omega[alive] = 1.0
        if len(canon):
            verts = np.asarray(self.el_nodes)[canon]
            vsite = site[verts]
            if np.any(vsite < 0):
                raise AssertionError("canonical element with an off-site vertex")
            in_region = self.region_mask[vsite]
            on_iface = self.interface_mask[vsite]
            in_zone = self.zone_mask[vsite]
            lab = np.full(len(canon), CONTINUUM, dtype=np.int64)
            lab[in_zone.all(axis=1)] = BUFFER
            lab[in_region.all(axis=1)] = ATOM_CORE
            lab[on_iface.any(axis=1)] = INTERFACE
            labels[canon] = lab
            omega[canon] = (3 - in_region.sum(axis=1)) / 3.0
            self._point_bases_outward(canon[lab >= BUFFER], verts[lab >= BUFFER], vsite[lab >= BUFFER])
        self.el_label = labels.tolist()
        self.el_omega = omega.tolist()
        self.version += 1

    def _point_bases_outward(self, eids: np.ndarray, verts: np.ndarray, vsite: np.ndarray) -> None:
        """Rotate splittable canonical elements so their base edge faces away
        from the atomistic region.

        Conformity closure then walks outward and terminates in the graded
        annuli instead of cascading toward the interface.
        """
        if not len(eids):
            return
        dist = self._region_hop_distance()
        dv = dist[vsite].astype(np.int64)
        key = dv * (1 << 32) + verts
        k = np.argmin(key, axis=1)
        order = np.stack([(k + 1) % 3, (k + 2) % 3, k], axis=1)
        rotated = np.take_along_axis(verts, order, axis=1)
        for eid, row in zip(eids, rotated):
            self.el_nodes[eid] = (int(row[0]), int(row[1]), int(row[2]))

    def _region_hop_distance(self) -> np.ndarray:
        """Hop distance from each site to the atomistic region, capped."""
        cap = self.params.buffer_width + 3
        dist = np.full(self.lattice.n_sites, cap, dtype=np.int64)
        cur = self.region_mask.copy()
        dist[cur] = 0
        for d in range(1, cap):
            cur = dilate(self.lattice, cur, 1)
            fresh = cur & (dist == cap)
            dist[fresh] = d
        return dist

    # ------------------------------------------------------------ refinement

    def bisect(self, marked) -> dict:
        """Newest-vertex bisection of the marked elements with closure.

        Atomistic-side elements (atom core and interface) are never split:
        marking one is skipped, and a closure chain that would have to cut one
        is refused, which leaves the requesting element unsplit.  Canonical
        buffer and continuum elements may be split; their children become
        plain continuum elements.  Returns counts of split and skipped
        elements.
        """
        split = 0
        skipped = []
        for t in sorted(int(t) for t in marked):
            if not self.el_alive[t]:
                continue
            if self.el_label[t] in (ATOM_CORE, INTERFACE):
                skipped.append(t)
                continue
            if self._bisect_to_conformity(t):
                split += 1
            else:
                skipped.append(t)
        self.version += 1
        return {"split": split, "skipped": skipped}

    def _base_edge(self, t: int) -> tuple[int, int]:
        v = self.el_nodes[t]
        return self._edge_key(v[0], v[1])

    def _flank(self, edge: tuple[int, int], not_el: int) -> int:
        for o in self._edge_map[edge]:
            if o != not_el and self.el_alive[o]:
                return o
        return -1

    def _bisect_to_conformity(self, t0: int) -> bool:
        stack = [t0]
        on_stack = {t0}
        while stack:
            t = stack[-1]
            if not self.el_alive[t]:
                stack.pop()
                on_stack.discard(t)
                continue
            e = self._base_edge(t)
            nb = self._flank(e, t)
            if nb >= 0 and self.el_label[nb] in (ATOM_CORE, INTERFACE):
                return False
            if nb >= 0 and self._base_edge(nb) != e:
                if nb in on_stack:  # compatibility cycle; refuse, nothing split yet
                    return False
                stack.append(nb)
                on_stack.add(nb)
                continue
            mid = self._edge_midpoint(e)
            self._split(t, mid)
            if nb >= 0:
                self._split(nb, mid)
            stack.pop()
            on_stack.discard(t)
        return True

    def _edge_midpoint(self, edge: tuple[int, int]) -> int:
        pa = np.asarray(self.node_pos[edge[0]])
        pb = np.asarray(self.node_pos[edge[1]])
        return self._point_node(0.5 * (pa + pb))

    def _split(self, t: int, mid: int) -> None:
        a, b, c = self.el_nodes[t]
        # children of a split canonical element are plain continuum elements
        lab = CONTINUUM if self.el_ta[t] >= 0 else self.el_label[t]
        ann = self.el_annulus[t]
        self._kill(t)
        self._add_element((c, a, mid), lab, ann, -1, parent=t, assign_base=False)
        self._add_element((b, c, mid), lab, ann, -1, parent=t, assign_base=False)

    def descendants(self, eid: int) -> list[int]:
        """Alive descendants of an element (the element itself if unsplit)."""
        parent = np.asarray(self.el_parent)
        out = []
        stack = [eid]
        kids = defaultdict(list)
        for e, p in enumerate(parent):
            if p >= 0:
                kids[p].append(e)
        while stack:
            e = stack.pop()
            if self.el_alive[e]:
                out.append(e)
            stack.extend(kids.get(e, ()))
        return sorted(out)

    # ----------------------------------------------------- interface growth

    def expand_interface(self, layers: int = 1) -> dict:
        """Move the atomistic region outward by whole hop layers.

        Clusters that come within two hop layers of each other are merged by
        adding the sites adjacent to both.  The canonical fill is extended to
        the new envelope and the band up to the first preserved ring is
        re-zipped.  Returns component counts and the ids of nodes created.
        """
        if layers < 1:
            raise ValueError("expansion needs at least one layer")
        n_nodes_before = self.n_nodes
        mask = dilate(self.lattice, self.region_mask, layers)
        mask, n_before, n_after = bridge_clusters(self.lattice, mask)
        self.region_mask = mask
        self._refresh_zone()

        keep = [r for r in self.ring_radii if r > self.envelope]
        if not keep:
            raise DomainExhausted("interface expansion reaches the domain boundary")
        r_keep = keep[0]

        if self.envelope > self.meshed_envelope:
            for t in self.alive_ids():
                ann = self.el_annulus[t]
                # drop the band annuli plus any children of split canonical
                # elements; the canonical fill below gets restored whole
                if 0 <= ann < r_keep or (ann < 0 and self.el_ta[t] < 0):
                    self._kill(t)
            self._fill_canonical(self.envelope)
            self.meshed_envelope = self.envelope
            inner = self._ring_chain(self.envelope, self.envelope)
            outer = self._preserved_chain(r_keep, annulus_min=r_keep)
            self._zip_annulus(inner, outer, self.envelope)
            self.ring_radii = [self.envelope] + keep

        self._relabel_canonical()
        self.version += 1
        return {
            "components_before": n_before,
            "components_after": n_after,
            "merged": n_after < n_before,
            "new_nodes": list(range(n_nodes_before, self.n_nodes)),
        }

    def _preserved_chain(self, radius: int, annulus_min: int | None = None) -> list[int]:
        """Angle-ordered closed chain of alive-mesh nodes on hex ring `radius`."""
        nodes = set()
        for t in self.alive_ids():
            if annulus_min is not None and self.el_annulus[t] < annulus_min:
                continue
            for n in self.el_nodes[t]:
                nodes.add(n)
        pos = np.asarray(self.node_pos)
        cand = np.asarray(sorted(nodes))
        norms = hex_norm(to_lattice(pos[cand]))
        on_ring = cand[np.abs(norms - radius) < 1e-7]
        ang = np.arctan2(pos[on_ring, 1], pos[on_ring, 0])
        return [int(n) for n in on_ring[np.argsort(ang)]]

    # ----------------------------------------------------- domain enlargement

    def enlarge_domain(self, factor: float = 1.5) -> dict:
        """Grow the domain radius and extend the graded mesh outward.

        The lattice is rebuilt at the larger radius; site-keyed bookkeeping is
        remapped and new annuli are appended from the current outer chain.
        """
        old = self.lattice
        new_radius = int(np.ceil(old.radius * factor))
        if new_radius <= old.radius:
            new_radius = old.radius + 1
        new_lat = Lattice(new_radius, old.defect)

        site_map = new_lat.site_index(old.coords)
        if np.any(site_map < 0):
            raise AssertionError("domain enlargement lost lattice sites")

        tri_map = np.empty(old.n_tri, dtype=np.int64)
        for kind in (0, 1):
            rows = old.tri_cell[:, 2] == kind
            tri_map[rows] = new_lat._cell_tri_id(old.tri_cell[rows, :2], bool(kind))
        if np.any(tri_map < 0):
            raise AssertionError("domain enlargement lost micro elements")

        ns = np.asarray(self.node_site)
        self.node_site = np.where(ns >= 0, site_map[np.clip(ns, 0, None)], -1).tolist()
        self._node_key = {}
        for nid, s in enumerate(self.node_site):
            if s >= 0:
                self._node_key[("s", int(s))] = nid
            else:
                x, y = self.node_pos[nid]
                self._node_key[("p", round(x, 9), round(y, 9))] = nid

        ta = np.asarray(self.el_ta)
        self.el_ta = np.where(ta >= 0, tri_map[np.clip(ta, 0, None)], -1).tolist()

        region = np.zeros(new_lat.n_sites, dtype=bool)
        region[site_map[self.region_mask]] = True
        self.lattice = new_lat
        self.region_mask = region
        self._refresh_zone()

        n_nodes_before = self.n_nodes
        chain = self._preserved_chain(old.radius)
        self._extend_rings(chain, old.radius)
        self._relabel_canonical()
        self.version += 1
        return {
            "radius": new_radius,
            "new_nodes": list(range(n_nodes_before, self.n_nodes)),
        }

    # ------------------------------------------------------------- geometry

    def view(self) -> SimpleNamespace:
        """Compiled numpy snapshot of the alive mesh (cached per version)."""
        if self._view is not None and self._view_version == self.version:
            return self._view
        ids = self.alive_ids()
        tri = np.asarray(self.el_nodes, dtype=np.int64)[ids]
        xy = np.asarray(self.node_pos, dtype=float)
        p = xy[tri]  # (m, 3, 2)
        e0 = p[:, 2] - p[:, 1]
        e1 = p[:, 0] - p[:, 2]
        e2 = p[:, 1] - p[:, 0]
        cross = e2[:, 0] * (-e1[:, 1]) - e2[:, 1] * (-e1[:, 0])
        area = 0.5 * cross
        if np.any(area <= 0):
            raise AssertionError("non-positive element area")
        grad = np.empty((len(ids), 3, 2))
        for k, e in enumerate((e0, e1, e2)):
            grad[:, k, 0] = -e[:, 1]
            grad[:, k, 1] = e[:, 0]
        grad /= (2.0 * area)[:, None, None]
        lengths = np.stack(
            [np.linalg.norm(e0, axis=1), np.linalg.norm(e1, axis=1), np.linalg.norm(e2, axis=1)],
            axis=1,
        )
        active = np.zeros(self.n_nodes, dtype=bool)
        active[tri.ravel()] = True
        norms = hex_norm(to_lattice(xy))
        boundary = np.abs(norms - self.ring_radii[-1]) < 1e-7
        self._view = SimpleNamespace(
            ids=ids,
            tri=tri,
            xy=xy,
            label=np.asarray(self.el_label, dtype=np.int64)[ids],
            omega=np.asarray(self.el_omega, dtype=float)[ids],
            ta=np.asarray(self.el_ta, dtype=np.int64)[ids],
            annulus=np.asarray(self.el_annulus, dtype=np.int64)[ids],
            area=area,
            bary=p.mean(axis=1),
            grad=grad,
            h=lengths.max(axis=1),
            edge_len=lengths,
            node_site=np.asarray(self.node_site, dtype=np.int64),
            active=active,
            boundary=boundary,
            free=active & ~boundary,
        )
        self._view_version = self.version
        return self._view

    def site_to_node(self) -> np.ndarray:
        """Site index -> node id (-1 where the site has no mesh node)."""
        out = np.full(self.lattice.n_sites, -1, dtype=np.int64)
        ns = np.asarray(self.node_site)
        has = np.flatnonzero(ns >= 0)
        out[ns[has]] = has
        return out

    def site_interpolation(self):
        """P1 evaluation map from nodal fields to every present lattice site.

        Returns (tri, w): site s evaluates as sum_k w[s, k] * field[tri[s, k]].
        Vacant sites keep zero weights; fill them with Lattice.extend if a
        value is needed there. Cached per mesh version.
        """
        if self._interp is not None and self._interp_version == self.version:
            return self._interp
        lat = self.lattice
        v = self.view()
        tri = np.zeros((lat.n_sites, 3), dtype=np.int64)
        wts = np.zeros((lat.n_sites, 3))
        filled = np.zeros(lat.n_sites, dtype=bool)

        node_of = self.site_to_node()
        direct = np.flatnonzero(node_of >= 0)
        tri[direct, 0] = node_of[direct]
        wts[direct, 0] = 1.0
        filled[direct] = True

        # remaining present sites sit strictly inside non-canonical elements
        todo = np.flatnonzero(~filled & ~lat.is_vacant)
        if len(todo):
            order = np.flatnonzero(v.ta < 0)
            for row in order:
                p = v.xy[v.tri[row]]
                lo = np.floor(to_lattice(p).min(axis=0)).astype(np.int64)
                hi = np.ceil(to_lattice(p).max(axis=0)).astype(np.int64)
                ii, jj = np.meshgrid(
                    np.arange(lo[0], hi[0] + 1),
                    np.arange(lo[1], hi[1] + 1),
                    indexing="ij",
                )
                cand = lat.site_index(np.stack([ii.ravel(), jj.ravel()], axis=1))
                cand = cand[cand >= 0]
                cand = cand[~filled[cand] & ~lat.is_vacant[cand]]
                if not len(cand):
                    continue
                rel = lat.pos[cand] - v.bary[row]
                lam = 1.0 / 3.0 + rel @ v.grad[row].T  # (k, 3)
                inside = lam.min(axis=1) >= -1e-9
                hit = cand[inside]
                tri[hit] = v.tri[row]
                wts[hit] = np.clip(lam[inside], 0.0, None)
                wts[hit] /= wts[hit].sum(axis=1, keepdims=True)
                filled[hit] = True
        if not np.all(filled[~lat.is_vacant]):
            raise AssertionError("lattice site not covered by any element")
        self._interp = (tri, wts)
        self._interp_version = self.version
        return self._interp

    def min_angles(self) -> np.ndarray:
        v = self.view()
        a, b, c = v.edge_len[:, 0], v.edge_len[:, 1], v.edge_len[:, 2]
        angles = []
        for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
            cosang = np.clip((y**2 + z**2 - x**2) / (2 * y * z), -1.0, 1.0)
            angles.append(np.arccos(cosang))
        return np.degrees(np.min(angles, axis=0))

    def edge_table(self) -> SimpleNamespace:
        """Unique edges of the alive mesh with their one or two flank elements."""
        v = self.view()
        edges = np.concatenate([v.tri[:, [0, 1]], v.tri[:, [1, 2]], v.tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        owner = np.tile(np.arange(len(v.tri)), 3)
        uniq, inv, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise AssertionError("edge shared by more than two elements")
        flanks = np.full((len(uniq), 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        slot = np.zeros(len(uniq), dtype=np.int64)
        for k in order:
            e = inv[k]
            flanks[e, slot[e]] = owner[k]
            slot[e] += 1
        length = np.linalg.norm(v.xy[uniq[:, 1]] - v.xy[uniq[:, 0]], axis=1)
        return SimpleNamespace(nodes=uniq, flanks=flanks, length=length)

    # ------------------------------------------------------- intersections

    def intersection_areas(self, el: int) -> tuple[np.ndarray, np.ndarray]:
        """Overlap areas |T ∩ T'| of one alive coarse element against the
        canonical micro triangulation.

        Canonical elements short-circuit to their own micro pair; otherwise
        candidates come from a lattice-coordinate bounding box and each is
        clipped.  The returned areas sum to |T|.
        """
        lat = self.lattice
        ta = self.el_ta[el]
        if ta >= 0:
            return np.asarray([ta]), np.asarray([TRI_AREA])
        pts = np.asarray([self.node_pos[n] for n in self.el_nodes[el]])
        lc = to_lattice(pts)
        i0 = int(np.floor(lc[:, 0].min())) - 1
        i1 = int(np.ceil(lc[:, 0].max())) + 1
        j0 = int(np.floor(lc[:, 1].min())) - 1
        j1 = int(np.ceil(lc[:, 1].max())) + 1
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        cells = np.stack([ii.ravel(), jj.ravel()], axis=1)
        cand = np.concatenate(
            [lat._cell_tri_id(cells, False), lat._cell_tri_id(cells, True)]
        )
        cand = cand[cand >= 0]
        ids, areas = [], []
        for t in cand:
            micro = lat.pos[lat.tri[t]]
            a = intersection_area(micro, pts)
            if a > 1e-12:
                ids.append(int(t))
                areas.append(a)
        return np.asarray(ids, dtype=np.int64), np.asarray(areas)

    # ------------------------------------------------------------ validation

    def validate(self) -> None:
        """Structural invariants; raises AssertionError on the first failure."""
        v = self.view()
        table = self.edge_table()
        lat = self.lattice
        single = np.flatnonzero(table.flanks[:, 1] < 0)
        vacant_adjacent = np.zeros(lat.n_sites, dtype=bool)
        for k in range(6):
            idx = lat.neighbors[:, k]
            ok = idx >= 0
            vacant_adjacent[ok] |= lat.is_vacant[idx[ok]]
        for e in single:
            a, b = table.nodes[e]
            if v.boundary[a] and v.boundary[b]:
                continue
            sa, sb = v.node_site[a], v.node_site[b]
            if sa >= 0 and sb >= 0 and vacant_adjacent[sa] and vacant_adjacent[sb]:
                continue
            raise AssertionError("dangling interior edge")
        canon = v.ta >= 0
        if np.any(np.abs(v.area[canon] - TRI_AREA) > 1e-12):
            raise AssertionError("canonical element with wrong area")
        for eid, t in zip(v.ids[canon], v.ta[canon]):
            got = {self.node_site[n] for n in self.el_nodes[eid]}
            if got != set(int(s) for s in lat.tri[t]):
                raise AssertionError("canonical element does not match its micro pair")
        if np.any((v.omega < -1e-12) | (v.omega > 1 + 1e-12)):
            raise AssertionError("effective volume outside [0, 1]")
        if np.any(v.omega[v.label == CONTINUUM] != 1.0):
            raise AssertionError("continuum element with reduced volume")
        buffer_not_canon = (v.label == BUFFER) & ~canon
        if np.any(buffer_not_canon):
            raise AssertionError("buffer element not coinciding with a micro element")

    # --------------------------------------------------------------- output

    def write_snapshot(self, path) -> None:
        v = self.view()
        table = self.edge_table()
        with open(path, "w") as fh:
            fh.write(f"nodes {self.n_nodes}\n")
            for nid, (x, y) in enumerate(self.node_pos):
                fh.write("%d %.17g %.17g\n" % (nid, x, y))
            fh.write(f"elements {len(v.ids)}\n")
            for row, lab in zip(v.tri, v.label):
                fh.write("%d %d %d %s\n" % (row[0], row[1], row[2], LABEL_NAMES[lab]))
            fh.write(f"edges {len(table.nodes)}\n")
            for a, b in table.nodes:
                fh.write("%d %d\n" % (a, b))
