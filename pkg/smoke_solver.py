import numpy as np

from acoupler import lattice as L
from acoupler import mesh as M
from acoupler import potential as P
from acoupler import predictor as pr
from acoupler import solver as SV
from acoupler import stress as S
from acoupler.coupling import Coupling

rng = np.random.default_rng(3)
params = P.EamParams()
B = pr.default_strain()
load = pr.UniformLoading(B)

# patch equilibrium: defect-free converges immediately
lat0 = L.Lattice(20, L.no_defect())
mesh0 = M.CoarseMesh(lat0, M.MeshParams())
cp0 = Coupling(mesh0, load, params)
res = SV.minimize_ac(cp0)
print("patch solve iters:", res.iterations, "fnorm:", res.force_norm,
      "converged:", res.converged, "u max:", np.abs(res.u).max())

# micro-crack coupled solve
lat = L.Lattice(30, L.micro_crack(5))
mesh = M.CoarseMesh(lat, M.MeshParams())
cp = Coupling(mesh, load, params)
E0 = cp.energy(cp.zero_field())
res = SV.minimize_ac(cp)
E1 = cp.energy(res.u)
print(f"crack solve: iters {res.iterations} fnorm {res.force_norm:.3e} "
      f"converged {res.converged} E0 {E0:.6f} E1 {E1:.6f} dt {res.seconds:.2f}s")

# restart stability
res2 = SV.minimize_ac(cp, u0=res.u)
print("restart iters:", res2.iterations, "drift:", np.abs(res2.u - res.u).max())

# reference solve on the same lattice
ref = SV.solve_reference(lat, params, load)
print(f"reference: iters {ref.iterations} fnorm {ref.force_norm:.3e} "
      f"converged {ref.converged} dt {ref.seconds:.2f}s")

# true error: identical fields -> 0; affine offset -> |g| sqrt(area)
err0 = SV.true_error(mesh, res.u, S.interpolate_to_sites(mesh, res.u))
print("true_error self:", err0)
lat_nd = lat0
g_lin = np.array([[0.001, 0.0], [0.0, -0.002]])
u_aff_nodes = mesh0.view().xy @ g_lin.T
u_zero = np.zeros((lat_nd.n_sites, 2))
e_aff = SV.true_error(mesh0, u_aff_nodes, u_zero)
area = 6 * (np.sqrt(3) / 4) * lat_nd.radius**2
print("affine true_error:", e_aff, "expected:",
      np.sqrt(np.sum(g_lin**2) * area))

# a/c error vs reference
err = SV.true_error(mesh, res.u, ref.u)
print("crack a/c error vs reference:", err)

# decay of the reference corrector
def profile(r, mag, label):
    edges = np.geomspace(2.0, r.max(), 13)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (r >= lo) & (r < hi)
        if sel.any():
            print(f"  {label} r in [{lo:6.2f},{hi:6.2f}): "
                  f"mean {mag[sel].mean():.3e} max {mag[sel].max():.3e} n {sel.sum()}")

r, mag = SV.difference_magnitudes(lat, ref.u)
profile(r, mag, "crack")
slope = pr.log_binned_slope(r, mag, r_min=10.0)
keep = r <= 20.0
slope_w = pr.log_binned_slope(r[keep], mag[keep], r_min=8.0)
print("crack |Du| decay slope (R=30):", slope, "windowed [8,20]:", slope_w)

# screw reference + decay
lat_s = L.Lattice(30, L.screw_dislocation())
load_s = pr.ScrewLoading()
ref_s = SV.solve_reference(lat_s, params, load_s)
print(f"screw reference: iters {ref_s.iterations} fnorm {ref_s.force_norm:.3e} "
      f"converged {ref_s.converged}")
r, mag = SV.difference_magnitudes(lat_s, ref_s.u)
profile(r, mag, "screw")
slope_s = pr.log_binned_slope(r, mag, r_min=10.0)
keep = r <= 20.0
slope_sw = pr.log_binned_slope(r[keep], mag[keep], r_min=8.0)
print("screw corrector |Du| decay slope (R=30):", slope_s,
      "windowed [8,20]:", slope_sw)

# evaluate_p1 transfer: refine then carry the solution over
v_old = mesh.view()
u_old = res.u
far = v_old.ids[v_old.ta < 0]
mesh.bisect(rng.choice(far, 25, replace=False))
cp2 = Coupling(mesh, load, params)
v_new = mesh.view()
u_init = np.zeros((mesh.n_nodes, 2))
act = np.flatnonzero(v_new.active)
u_init[act] = SV.evaluate_p1(v_old, u_old, v_new.xy[act])
u_init[~cp2.free] = 0.0
res3 = SV.minimize_ac(cp2, u0=u_init)
print("warm-start solve iters:", res3.iterations, "converged:", res3.converged)

print("solver smoke done")
