import numpy as np

from acoupler import geometry as g
from acoupler import lattice as L
from acoupler import mesh as M
from acoupler import potential as P
from acoupler import predictor as pr
from acoupler.coupling import Coupling

rng = np.random.default_rng(7)
params = P.EamParams()

# ---------- patch tests on a defect-free configuration ----------
lat = L.Lattice(30, L.no_defect())
mesh = M.CoarseMesh(lat, M.MeshParams())
hex_area = 6 * (np.sqrt(3) / 4) * 30**2

B = np.array([[1.0, 0.03], [0.0, 1.03]])
cp = Coupling(mesh, pr.UniformLoading(B), params)
print("coupled volume:", cp.coupled_volume(), "hex:", hex_area,
      "err:", abs(cp.coupled_volume() - hex_area))

u0 = cp.zero_field()
E0 = cp.energy(u0)
W, dW = P.cauchy_born(params, B)
print("energy patch rel err:", abs(E0 - hex_area * W) / abs(hex_area * W))

E, grad = cp.energy_and_gradient(u0)
print("force patch inf norm:", np.abs(grad).max())

worst = np.unravel_index(np.argmax(np.abs(grad)), grad.shape)
vw = mesh.view()
print("worst node:", worst, "site:", vw.node_site[worst[0]],
      "pos:", vw.xy[worst[0]])

# several random strains near identity
worst_resid = 0.0
for _ in range(8):
    Br = np.eye(2) + 0.05 * (rng.random((2, 2)) - 0.5)
    c2 = Coupling(mesh, pr.UniformLoading(Br), params)
    E2, g2 = c2.energy_and_gradient(c2.zero_field())
    W2, _ = P.cauchy_born(params, Br)
    worst_resid = max(worst_resid, np.abs(g2).max())
    assert abs(E2 - hex_area * W2) <= 1e-10 * abs(hex_area * W2)
print("worst force residual over strains:", worst_resid)

# anti-plane affine patch
lat_ap = L.Lattice(30, L.screw_dislocation())
mesh_ap = M.CoarseMesh(lat_ap, M.MeshParams())
gvec = np.array([0.02, -0.01])
cap = Coupling(mesh_ap, pr.AntiplaneLoading(gvec), params)
Eap, gap = cap.energy_and_gradient(cap.zero_field())
Wap, _ = P.cauchy_born(params, gvec, antiplane=True)
print("antiplane energy patch rel err:",
      abs(Eap - hex_area * Wap) / abs(hex_area * Wap))
print("antiplane force patch inf norm:", np.abs(gap).max())

# ---------- finite-difference consistency ----------
def fd_check(cp, n_dirs=6, h=1e-6):
    u = cp.zero_field()
    flat = u.reshape(-1)
    flat += 0.02 * (rng.random(flat.shape) - 0.5)
    free = cp.free
    if u.ndim == 2:
        u[~free] = 0.0
    else:
        u[~free] = 0.0
    E, grad = cp.energy_and_gradient(u)
    worst = 0.0
    idx_free = np.flatnonzero(free)
    for _ in range(n_dirs):
        d = np.zeros_like(u)
        nid = rng.choice(idx_free)
        if u.ndim == 2:
            comp = rng.integers(2)
            d[nid, comp] = 1.0
            gd = grad[nid, comp]
        else:
            d[nid] = 1.0
            gd = grad[nid]
        Ep = cp.energy(u + h * d)
        Em = cp.energy(u - h * d)
        fd = (Ep - Em) / (2 * h)
        worst = max(worst, abs(fd - gd) / max(1.0, abs(gd)))
    return worst

lat_c = L.Lattice(20, L.micro_crack(5))
mesh_c = M.CoarseMesh(lat_c, M.MeshParams())
cc = Coupling(mesh_c, pr.UniformLoading(B), params)
print("fd worst (crack, in-plane):", fd_check(cc))

cs = Coupling(mesh_ap, pr.ScrewLoading(), params)
print("fd worst (screw predictor):", fd_check(cs))

lat_mv = L.Lattice(40, L.multi_vacancy([(-7, -7), (13, -7), (-7, 13)]))
mesh_mv = M.CoarseMesh(lat_mv, M.MeshParams())
cmv = Coupling(mesh_mv, pr.UniformLoading(B), params)
print("fd worst (multivacancy):", fd_check(cmv))

# after refinement the patch identity must survive (non-canonical continuum)
vv = mesh.view()
far = vv.ids[(vv.ta < 0)]
mesh.bisect(rng.choice(far, 60, replace=False))
cp3 = Coupling(mesh, pr.UniformLoading(B), params)
E3, g3 = cp3.energy_and_gradient(cp3.zero_field())
print("post-refinement force patch:", np.abs(g3).max(),
      "energy rel err:", abs(E3 - cp3.coupled_volume() * W) / abs(hex_area * W))

print("coupling smoke done")
