"""Planar geometry for the triangular lattice: index arithmetic and convex clipping.

The lattice is A Z^2 with basis column vectors (1,0) and (1/2, sqrt(3)/2), so
every nearest-neighbour step has unit length and the six step directions come
in opposite pairs (k and k+3 mod 6).  Most routines work in integer lattice
indices; Cartesian positions are obtained by multiplying with the basis.
"""
from __future__ import annotations

import numpy as np

BASIS = np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2.0]])
BASIS_INV = np.linalg.inv(BASIS)
CELL_AREA = np.sqrt(3.0) / 2.0          # det(BASIS), area per lattice site
TRI_AREA = CELL_AREA / 2.0              # area of one canonical triangle

# Neighbour steps in lattice indices; step k+3 is the negation of step k.
NEIGHBOR_STEPS = np.array(
    [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)], dtype=np.int64
)
NEIGHBOR_VECTORS = NEIGHBOR_STEPS @ BASIS.T
# Ring walk: corner direction of sector s is NEIGHBOR_STEPS[s]; walking the ring
# edge of sector s advances by NEIGHBOR_STEPS[(s+2) % 6].

ORIENT_EPS = 1e-12


def hex_norm(ij: np.ndarray) -> np.ndarray:
    """Hop distance to the origin in lattice indices (hexagonal ring number).

    Works for integer and fractional index pairs; shape (..., 2) -> (...).
    """
    ij = np.asarray(ij)
    i, j = ij[..., 0], ij[..., 1]
    return (np.abs(i) + np.abs(j) + np.abs(i + j)) / 2


def to_cartesian(ij: np.ndarray) -> np.ndarray:
    return np.asarray(ij, dtype=float) @ BASIS.T


def to_lattice(xy: np.ndarray) -> np.ndarray:
    return np.asarray(xy, dtype=float) @ BASIS_INV.T


def hex_ball(radius: int) -> np.ndarray:
    """All lattice index pairs with hex_norm <= radius, lexicographically sorted."""
    r = int(radius)
    rng = np.arange(-r, r + 1, dtype=np.int64)
    i, j = np.meshgrid(rng, rng, indexing="ij")
    keep = (np.abs(i) + np.abs(j) + np.abs(i + j)) // 2 <= r
    return np.stack([i[keep], j[keep]], axis=1)


def hex_ring_sites(radius: int) -> np.ndarray:
    """Lattice index pairs on ring `radius`, ordered counterclockwise per sector.

    Starts at the corner radius * (1, 0); 6 * radius sites for radius >= 1.
    """
    r = int(radius)
    if r == 0:
        return np.zeros((1, 2), dtype=np.int64)
    sites = []
    for s in range(6):
        corner = r * NEIGHBOR_STEPS[s]
        walk = NEIGHBOR_STEPS[(s + 2) % 6]
        for t in range(r):
            sites.append(corner + t * walk)
    return np.array(sites, dtype=np.int64)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counterclockwise polygons."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex `clipper` (both CCW).

    Points within ORIENT_EPS of a clip edge count as inside, which keeps
    shared-edge and shared-vertex cases from dropping slivers.
    """
    poly = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clipper = np.asarray(clipper, dtype=float)
    n = len(clipper)
    for k in range(n):
        if not poly:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        out = []
        prev = poly[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in poly:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= -ORIENT_EPS:
                if prev_side < -ORIENT_EPS:
                    t = prev_side / (prev_side - cur_side)
                    out.append((prev[0] + t * (cur[0] - prev[0]),
                                prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= -ORIENT_EPS:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]),
                            prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
        poly = out
    return np.array(poly, dtype=float) if poly else np.zeros((0, 2))


def intersection_area(tri_a: np.ndarray, tri_b: np.ndarray) -> float:
    """Area of the overlap of two CCW triangles; tiny negatives are clamped to 0."""
    clipped = clip_convex(tri_a, tri_b)
    area = abs(polygon_area(clipped)) if len(clipped) >= 3 else 0.0
    return area if area > ORIENT_EPS else 0.0


def ensure_ccw(tri: np.ndarray) -> np.ndarray:
    return tri if polygon_area(tri) >= 0.0 else tri[::-1]


def chord_fractions(points: np.ndarray) -> np.ndarray:
    """Cumulative chord-length parameter of a polyline, scaled to [0, 1]."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        return np.linspace(0.0, 1.0, len(pts))
    return cum / total


def zip_chains(
    inner: np.ndarray,
    outer: np.ndarray,
    frac_inner: np.ndarray | None = None,
    frac_outer: np.ndarray | None = None,
) -> list[tuple[int, int, int]]:
    """Triangulate the strip between two node chains running the same way.

    `inner` and `outer` are index arrays into a common node table with the
    outer chain to the left of the inner one, which yields counterclockwise
    triangles.  The advance rule interleaves the chains by chord-length
    fraction (uniform index fraction when no fractions are given), so a 2:1
    node ratio reproduces the standard triangle transition pattern.
    """
    na, nb = len(inner) - 1, len(outer) - 1
    if frac_inner is None:
        frac_inner = np.linspace(0.0, 1.0, na + 1)
    if frac_outer is None:
        frac_outer = np.linspace(0.0, 1.0, nb + 1)
    tris: list[tuple[int, int, int]] = []
    ia = ib = 0
    while ia < na or ib < nb:
        take_inner = ib >= nb or (
            ia < na and frac_inner[ia + 1] <= frac_outer[ib + 1] + 1e-12
        )
        if take_inner:
            tris.append((int(inner[ia]), int(inner[ia + 1]), int(outer[ib])))
            ia += 1
        else:
            tris.append((int(inner[ia]), int(outer[ib + 1]), int(outer[ib])))
            ib += 1
    return tris
