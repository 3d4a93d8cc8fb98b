"""Run the structural checks on a fresh model, then break it on purpose.

Run:  python demos/03_verify_structure.py

The same report backs ``geonew verify``.  Corrupting one column of W breaks
the partition of unity, and the report names the failing check.
"""
import numpy as np

from geonew.data import reference_poisson_solve
from geonew.feec import assemble
from geonew.geofeat import compute_features
from geonew.mesh import GeometrySpec, generate_annulus_polygon
from geonew.model import GeoNeW, ModelConfig, Problem
from geonew.reduced import build_boundary_rows
from geonew.verify import verify_model

mesh = generate_annulus_polygon(GeometrySpec(n_sides=6, poly_radius=0.45))
ops = assemble(mesh)
feats = compute_features(mesh, ops)
bc = {"inner": np.ones(len(mesh.sidesets["inner"].nodes)), "outer": np.zeros(len(mesh.sidesets["outer"].nodes))}
bnd = build_boundary_rows(mesh, bc)
prob = Problem(ops, feats.matrix, bnd, reference_poisson_solve(mesh, None, bc, ops)[:, None])
model = GeoNeW(ModelConfig(d_in=feats.d_in, n_fixed=bnd.n_fixed))

for corrupt in (False, True):
    report = verify_model(model, prob, mesh, bc, corrupt_partition=corrupt)
    print("corrupted W" if corrupt else "fresh model", "->", "PASS" if report["passed"] else "FAIL")
    for c in report["checks"]:
        print(f"  {c['name']:28s} {c['value']:10.2e}  tol {c['tol']:.0e}  {'ok' if c['passed'] else 'FAILED'}")
