import numpy as np

from acoupler import geometry as g
from acoupler import lattice as L
from acoupler import mesh as M
from acoupler import potential as P
from acoupler import predictor as pr
from acoupler import stress as S
from acoupler.coupling import Coupling

rng = np.random.default_rng(11)
params = P.EamParams()
B = pr.default_strain()

# ---- interpolation sanity: affine nodal data reproduces exactly at sites
lat = L.Lattice(30, L.micro_crack(5))
mesh = M.CoarseMesh(lat, M.MeshParams())
v = mesh.view()
A = rng.random((2, 2)) - 0.5
ua = v.xy @ A.T
us = S.interpolate_to_sites(mesh, ua)
pres = ~lat.is_vacant
print("interp affine err:", np.abs(us[pres] - lat.pos[pres] @ A.T).max())

# ---- homogeneous atomistic stress equals dW everywhere
lat0 = L.Lattice(20, L.no_defect())
load = pr.UniformLoading(B)
sig = S.atomistic_stress(lat0, params, load, np.zeros((lat0.n_sites, 2)))
_, dW = P.cauchy_born(params, B)
print("homog sigma_a max dev:", np.abs(sig - dW).max())

# ---- atomistic stress identity, crack lattice, compact random v
lat_c = lat
u = 0.05 * (rng.random((lat_c.n_sites, 2)) - 0.5)
sig = S.atomistic_stress(lat_c, params, load, u)
worst = 0.0
for _ in range(5):
    w = np.zeros((lat_c.n_sites, 2))
    interior = np.flatnonzero((lat_c.hex_norms() < lat_c.radius - 2) & pres)
    pick = rng.choice(interior, 40, replace=False)
    w[pick] = rng.random((40, 2)) - 0.5
    w = lat_c.extend(w)
    # left side: bond-gradient sum (independent of flank attribution)
    grads, mask = S.site_bond_gradients(lat_c, params, load, u)
    lhs = 0.0
    for d in range(6):
        dv, m = lat_c.differences(w, d)
        lhs += np.sum(grads[:, d][mask[:, d] & m] * dv[mask[:, d] & m])
    # right side: element sum with P1 gradients over the full canonical cover
    tp = lat_c.pos[lat_c.tri]
    e1 = tp[:, 1] - tp[:, 0]
    e2 = tp[:, 2] - tp[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    gl = np.empty((lat_c.n_tri, 3, 2))
    for k, e in enumerate((tp[:, 2] - tp[:, 1], tp[:, 0] - tp[:, 2], tp[:, 1] - tp[:, 0])):
        gl[:, k, 0] = -e[:, 1]
        gl[:, k, 1] = e[:, 0]
    gl /= (2.0 * area)[:, None, None]
    gradv = np.einsum("mki,mkj->mij", w[lat_c.tri], gl)
    rhs = np.sum(area[:, None, None] * sig * gradv)
    worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
print("sigma_a identity worst rel:", worst)

# ---- coupled stress identity on the coarse mesh
cp = Coupling(mesh, load, params)
sac = S.ac_stress(cp, cp.zero_field())
u_h = cp.zero_field()
u_h += 0.03 * (rng.random(u_h.shape) - 0.5)
u_h[~cp.free] = 0.0
sac = S.ac_stress(cp, u_h)
_, gr = cp.energy_and_gradient(u_h)
worst = 0.0
for _ in range(8):
    w = np.zeros_like(u_h)
    idx = np.flatnonzero(cp.free)
    pick = rng.choice(idx, 30, replace=False)
    w[pick] = rng.random((30, 2)) - 0.5
    lhs = np.sum(gr * w)
    gradw = np.einsum("mki,mkj->mij", w[v.tri], v.grad)
    rhs = np.sum(v.area[:, None, None] * sac * gradw)
    worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
print("sigma_ac identity worst rel:", worst)

# ---- homogeneous coupled stress by label on a defect-free mesh
mesh0 = M.CoarseMesh(lat0, M.MeshParams())
v0 = mesh0.view()
cp0 = Coupling(mesh0, load, params)
sac00 = S.ac_stress(cp0, cp0.zero_field())
dev = np.abs(sac00 - dW).max(axis=(1, 2))
for lab in range(4):
    sel = v0.label == lab
    print(f"  homog sigma_ac dev label {M.LABEL_NAMES[lab]}: {dev[sel].max():.3e}")
vol_mean = np.einsum("m,mij->ij", v0.area, sac00) / v0.area.sum()
print("  homog sigma_ac volume mean dev:", np.abs(vol_mean - dW).max())

# ---- correction: matched fields on the interface leave everything unchanged
sac0 = S.ac_stress(cp, cp.zero_field())
sa_fake = np.zeros((lat.n_tri, 2, 2))
iface0 = np.flatnonzero(v.label == M.INTERFACE)
sa_fake[v.ta[iface0]] = sac0[iface0]
corr0, cf0 = S.correct_stress(mesh, sa_fake, sac0)
print("correction on zero residual:", np.abs(corr0 - sac0).max(), "ok:", cf0.ok)

# ---- correction on a relaxed-ish random state
us_h = S.interpolate_to_sites(mesh, u_h)
sa = S.atomistic_stress(lat, params, load, us_h)
corr, cf = S.correct_stress(mesh, sa, sac)
iface_rows = np.flatnonzero(v.label == M.INTERFACE)
pre = np.sum(v.area[iface_rows, None, None] * (sa[v.ta[iface_rows]] - sac[iface_rows]) ** 2)
post = np.sum(v.area[iface_rows, None, None] * (sa[v.ta[iface_rows]] - corr[iface_rows]) ** 2)
print(f"mismatch pre {pre:.6e} post {post:.6e} (must not increase)")

# divergence-free: the added field integrates to zero against every P1 field
delta = corr - sac
worst = 0.0
for _ in range(20):
    w = rng.random((mesh.n_nodes, 2)) - 0.5
    gradw = np.einsum("mki,mkj->mij", w[v.tri], v.grad)
    worst = max(worst, abs(np.sum(v.area[:, None, None] * delta * gradw)))
print("divergence-free worst:", worst)

# idempotency
corr2, cf2 = S.correct_stress(mesh, sa, corr)
print("idempotency:", np.abs(corr2 - corr).max())

# ---- truncation norm vanishes for the homogeneous state
print("eta_tr homog:", S.truncation_norm(lat0, params, load, np.zeros((lat0.n_sites, 2))))

# ---- anti-plane pass through the same machinery
lat_s = L.Lattice(25, L.screw_dislocation())
mesh_s = M.CoarseMesh(lat_s, M.MeshParams())
load_s = pr.ScrewLoading()
cs = Coupling(mesh_s, load_s, params)
u_s = cs.zero_field()
u_s += 0.02 * (rng.random(u_s.shape) - 0.5)
u_s[~cs.free] = 0.0
vs = mesh_s.view()
us_sites = S.interpolate_to_sites(mesh_s, u_s)
sa_s = S.atomistic_stress(lat_s, params, load_s, us_sites)
sac_s = S.ac_stress(cs, u_s)
_, gr_s = cs.energy_and_gradient(u_s)
worst = 0.0
for _ in range(8):
    w = np.zeros_like(u_s)
    idx = np.flatnonzero(cs.free)
    pick = rng.choice(idx, 30, replace=False)
    w[pick] = rng.random(30) - 0.5
    lhs = np.sum(gr_s * w)
    gradw = np.einsum("mk,mkj->mj", w[vs.tri], vs.grad)
    rhs = np.sum(vs.area[:, None] * sac_s * gradw)
    worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
print("antiplane sigma_ac identity worst rel:", worst)
corr_s, cf_s = S.correct_stress(mesh_s, sa_s, sac_s)
print("antiplane correction ok:", cf_s.ok)
print("eta_tr screw predictor:", S.truncation_norm(lat_s, params, load_s, np.zeros(lat_s.n_sites)))

print("stress smoke done")
