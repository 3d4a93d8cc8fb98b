"""Structure checks on a model and one geometry, reported as plain dicts."""
from __future__ import annotations

import numpy as np

from . import flux as fx
from .feec import stiffness_identity_check
from .model import GeoNeW, Problem
from .reduced import partition_of_unity_error, project_operators
from .solver import all_partition_divergence
from .autodiff import Tape

TOLERANCES = {
    "fine_stiffness_identity": 1e-10,
    "partition_of_unity": 1e-12,
    "projection_identity": 1e-10,
    "reduced_stiffness_identity": 1e-10,
    "reduced_stiffness_galerkin": 1e-10,
    "newton_converged": 0.0,
    "conservation": 1e-12,
    "dirichlet_exactness": 1e-14,
    "lipschitz_certified": 0.0,
    "lipschitz_cap": 0.0,
    "tau": 1.0,
}


def _check(name, value, passed, **extra):
    return {"name": name, "value": float(value), "tol": TOLERANCES[name], "passed": bool(passed), **extra}


def verify_model(model: GeoNeW, prob: Problem, mesh, dirichlet: dict | None = None, n_pairs: int = 200,
                 seed: int = 0, corrupt_partition: bool = False) -> dict:
    """Run every structural check; ``corrupt_partition`` injects a column-sum fault."""
    rng = np.random.default_rng(seed)
    checks = []
    checks.append(_check("fine_stiffness_identity", dev := stiffness_identity_check(prob.ops, mesh),
                         dev <= TOLERANCES["fine_stiffness_identity"]))

    pred = model.predict(prob, np.random.default_rng(seed))
    w = pred.w[0].copy()
    if corrupt_partition:
        w[:, 0] *= 1.25
    pou = partition_of_unity_error(w)
    checks.append(_check("partition_of_unity", pou, pou <= TOLERANCES["partition_of_unity"]))

    rs = project_operators(prob.ops, w, model.cfg.p_free)
    proj = float(np.abs(prob.ops.d0 @ w.T - rs.w1.T @ rs.d0).max())
    checks.append(_check("projection_identity", proj, proj <= TOLERANCES["projection_identity"]))
    kdev = float(np.abs(rs.k - rs.d0.T @ rs.m1 @ rs.d0).max())
    checks.append(_check("reduced_stiffness_identity", kdev, kdev <= TOLERANCES["reduced_stiffness_identity"]))
    kgal = float(np.abs(rs.k - w @ (prob.ops.k @ w.T)).max())
    checks.append(_check("reduced_stiffness_galerkin", kgal, kgal <= TOLERANCES["reduced_stiffness_galerkin"]))

    res = pred.solve
    checks.append(_check("newton_converged", 0.0 if res.converged else 1.0, res.converged,
                         iterations=res.iterations, residual=res.residual_norm))

    _, parts = model.graph(Tape(), prob, requires_grad=False, zeta_eff=pred.zeta_eff)
    rp = model.reduced_problem(prob, parts)
    div = all_partition_divergence(res.u_star, rp)
    cons = float(np.abs(div.sum(axis=0)).max())
    checks.append(_check("conservation", cons, cons <= TOLERANCES["conservation"]))

    if dirichlet:
        from .train import boundary_error

        berr = boundary_error(pred.u_fine, dirichlet, mesh)
        checks.append(_check("dirichlet_exactness", berr, berr <= TOLERANCES["dirichlet_exactness"]))

    cert = fx.certified_lipschitz(rp.beta, rp.gamma, model.gain, rp.flux.bounds)
    emp = fx.empirical_lipschitz(rp.flux, rp.beta, rp.gamma, model.cfg.p_total, model.cfg.n_fields, n_pairs, rng,
                                 model.cfg.flux.mean_channel)
    checks.append(_check("lipschitz_certified", emp - cert, emp <= cert * (1 + 1e-12), empirical=emp,
                         certified=cert))
    cap = pred.zeta_eff
    checks.append(_check("lipschitz_cap", cert - cap, cert <= cap * (1 + 1e-12), zeta_eff=cap))
    d0f = rs.d0[:, : model.cfg.p_free]
    t = max(fx.tau(cert, kf[: model.cfg.p_free, : model.cfg.p_free], d0f, model.cfg.flux.epsilon)
            for kf in parts["k_np"])
    checks.append(_check("tau", t, t < TOLERANCES["tau"]))
    return {"passed": all(c["passed"] for c in checks), "checks": checks,
            "failed": [c["name"] for c in checks if not c["passed"]]}
