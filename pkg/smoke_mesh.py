import numpy as np

from acoupler import geometry as g
from acoupler import lattice as L
from acoupler import mesh as M

# --- initial build, single vacancy R=60 ---
lat = L.Lattice(60, L.multi_vacancy([(0, 0)]))
mesh = M.CoarseMesh(lat, M.MeshParams())
mesh.validate()
v = mesh.view()
print("rings:", mesh.ring_radii)
print("elements:", mesh.n_elements, "nodes:", mesh.n_nodes,
      "active:", v.active.sum(), "free:", v.free.sum(), "boundary:", v.boundary.sum())
canon = (v.ta >= 0).sum()
print("canonical:", canon, "expected:", 6 * 9 * 9 - 6)
labels, counts = np.unique(v.label, return_counts=True)
print("labels:", dict(zip([M.LABEL_NAMES[i] for i in labels], counts)))

# area partition: hexagon minus the six dropped hole triangles at the vacancy
total = v.area.sum()
hex_area = 6 * (np.sqrt(3) / 4) * 60**2
want = hex_area - 6 * g.TRI_AREA
print("area total:", total, "want:", want, "rel err:", abs(total - want) / want)

# min angles
print("min angle:", mesh.min_angles().min())

# grading window for non-canonical elements
r = np.linalg.norm(v.bary, axis=1)
out = v.ta < 0
ratio = v.h[out] / (r[out] / 6.0) ** 1.5
print("grading ratio range (want within [0.5, 2]):", ratio.min(), ratio.max())

# omega: interface elements partial, atom-core zero, continuum one
for name, lab in (("core", M.ATOM_CORE), ("iface", M.INTERFACE), ("buffer", M.BUFFER)):
    sel = v.label == lab
    print(name, "omega range:", v.omega[sel].min(), v.omega[sel].max())

# energy-area identity: atom cells + weighted element area = hex area (no defect holes?)
# with one vacancy the hole (6 triangles) is uncovered by the mesh: account for it
atoms = mesh.region_atom_sites()
acc = len(atoms) * g.CELL_AREA + (v.omega * v.area).sum()
print("volume identity (expect hex - vacancy cell):", acc, hex_area - g.CELL_AREA)

# --- intersection areas ---
rng = np.random.default_rng(0)
ids = np.flatnonzero(v.ta < 0)
for el in rng.choice(ids, 12, replace=False):
    t_ids, areas = mesh.intersection_areas(int(v.ids[el]))
    assert abs(areas.sum() - v.area[el]) < 1e-10 * max(1, v.area[el]), (el, areas.sum(), v.area[el])
el0 = int(v.ids[np.flatnonzero(v.ta >= 0)[0]])
t_ids, areas = mesh.intersection_areas(el0)
assert len(t_ids) == 1 and abs(areas[0] - g.TRI_AREA) < 1e-14
print("intersection partition ok")

# --- bisection: 3 uniform rounds on continuum split everything into 8 ---
lat2 = L.Lattice(30, L.multi_vacancy([(0, 0)]))
mesh2 = M.CoarseMesh(lat2, M.MeshParams())
v2 = mesh2.view()
orig = [int(e) for e in v2.ids[v2.label == M.CONTINUUM]]
n_orig = len(orig)
for _ in range(3):
    vv = mesh2.view()
    marked = vv.ids[vv.label == M.CONTINUUM]
    rep = mesh2.bisect(marked)
    assert not rep["skipped"], rep["skipped"][:5]
    mesh2.validate()
desc = [len(mesh2.descendants(e)) for e in orig]
print("descendants after 3 uniform rounds:", min(desc), max(desc), "(want 8, 8)")
print("min angle after refinement:", mesh2.min_angles().min())

# empty marking is a no-op
before = mesh2.n_elements
mesh2.bisect([])
assert mesh2.n_elements == before

# --- interface expansion ---
lat3 = L.Lattice(40, L.multi_vacancy([(0, 0)]))
mesh3 = M.CoarseMesh(lat3, M.MeshParams())
n_region = mesh3.region_mask.sum()
rep = mesh3.expand_interface(1)
print("expansion: region", n_region, "->", mesh3.region_mask.sum(), "(+%d, want +42)" % (mesh3.region_mask.sum() - n_region))
mesh3.validate()
v3 = mesh3.view()
print("post-expansion canonical:", (v3.ta >= 0).sum(), "envelope:", mesh3.envelope, "rings:", mesh3.ring_radii[:4])

# expansion after refinement near envelope (stress the preserved-chain path)
vv = mesh3.view()
near = vv.ids[(vv.ta < 0) & (np.linalg.norm(vv.bary, axis=1) < 16)]
mesh3.bisect(near)
mesh3.validate()
rep = mesh3.expand_interface(2)
mesh3.validate()
print("expansion after refinement ok; envelope:", mesh3.envelope)

# --- multi-vacancy: three regions, merge by expansion ---
lat4 = L.Lattice(60, L.multi_vacancy([(-7, -7), (13, -7), (-7, 13)]))
mesh4 = M.CoarseMesh(lat4, M.MeshParams())
mesh4.validate()
v4 = mesh4.view()
_, ncomp = M.components(lat4, mesh4.region_mask)
print("multivac components:", ncomp, "(want 3)")

# AtomCore element components: count via edge connectivity of core elements
core = np.flatnonzero(v4.label == M.ATOM_CORE)
import scipy.sparse as sp
import scipy.sparse.csgraph as csg
tbl = mesh4.edge_table()
both = (tbl.flanks[:, 1] >= 0)
lab_of = np.full(len(v4.ids), -1)
lab_of[core] = np.arange(len(core))
fa, fb = tbl.flanks[both, 0], tbl.flanks[both, 1]
sel = (lab_of[fa] >= 0) & (lab_of[fb] >= 0)
gr = sp.csr_matrix((np.ones(sel.sum()), (lab_of[fa[sel]], lab_of[fb[sel]])), shape=(len(core), len(core)))
ncc, _ = csg.connected_components(gr, directed=False)
print("AtomCore element components:", ncc, "(want 3)")

merged = False
for step in range(8):
    rep = mesh4.expand_interface(1)
    mesh4.validate()
    if rep["merged"]:
        print("merge at expansion", step + 1, ":", rep["components_before"], "->", rep["components_after"])
        merged = True
        break
print("merged:", merged)

# --- domain enlargement ---
lat5 = L.Lattice(30, L.micro_crack(5))
mesh5 = M.CoarseMesh(lat5, M.MeshParams())
v5 = mesh5.view()
n_el_before = mesh5.n_elements
rep = mesh5.enlarge_domain(1.5)
print("enlarged to radius:", rep["radius"], "rings:", mesh5.ring_radii)
mesh5.validate()
v5b = mesh5.view()
print("elements:", n_el_before, "->", mesh5.n_elements)
print("boundary nodes on new ring:", v5b.boundary.sum())
hex_area2 = 6 * (np.sqrt(3) / 4) * rep["radius"] ** 2
print("area rel err after enlarge:", abs(v5b.area.sum() - hex_area2) / hex_area2)

# enlargement then expansion interplay
mesh5.expand_interface(1)
mesh5.validate()
print("post-enlarge expansion ok")

print("mesh smoke ok")
