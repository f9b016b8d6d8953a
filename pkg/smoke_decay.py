import numpy as np

from acoupler import lattice as L
from acoupler import predictor as pr
from acoupler import solver as SV

params = __import__("acoupler.potential", fromlist=["EamParams"]).EamParams()

R = 60
lat = L.Lattice(R, L.micro_crack(5))
load = pr.UniformLoading(pr.default_strain())
ref = SV.solve_reference(lat, params, load)
print(f"crack R={R}: iters {ref.iterations} fnorm {ref.force_norm:.2e} "
      f"converged {ref.converged} dt {ref.seconds:.1f}s")
r, mag = SV.difference_magnitudes(lat, ref.u)
for rmax in (R, R / 2, R / 3):
    keep = r <= rmax
    s = pr.log_binned_slope(r[keep], mag[keep], r_min=10.0)
    print(f"  crack slope fit [10,{rmax:.0f}]: {s:.3f}")

lat_s = L.Lattice(R, L.screw_dislocation())
load_s = pr.ScrewLoading()
ref_s = SV.solve_reference(lat_s, params, load_s)
print(f"screw R={R}: iters {ref_s.iterations} fnorm {ref_s.force_norm:.2e} "
      f"converged {ref_s.converged} dt {ref_s.seconds:.1f}s")
r, mag = SV.difference_magnitudes(lat_s, ref_s.u)
edges = np.geomspace(2.0, r.max(), 16)
for lo, hi in zip(edges[:-1], edges[1:]):
    sel = (r >= lo) & (r < hi)
    if sel.any():
        print(f"  screw r in [{lo:6.2f},{hi:6.2f}): mean {mag[sel].mean():.3e}")
for rmax in (R, R / 2, R / 3):
    keep = r <= rmax
    s = pr.log_binned_slope(r[keep], mag[keep], r_min=10.0)
    print(f"  screw slope fit [10,{rmax:.0f}]: {s:.3f}")
