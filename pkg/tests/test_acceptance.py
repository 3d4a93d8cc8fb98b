"""Acceptance criteria 1-10, one pass/fail line each in the terminal summary.

Criterion 9 trains the full desk-scale model and takes roughly 20 minutes.
"""
import functools
import math
import time

import numpy as np
import pytest

from geonew import flux as fx
from geonew.autodiff import Tape
from geonew.data import DataConfig, generate_dataset, l2_error, load_dataset, reference_poisson_solve
from geonew.feec import assemble
from geonew.geofeat import compute_features
from geonew.mesh import GeometrySpec, generate_annulus_polygon, generate_rectangle
from geonew.model import GeoNeW, ModelConfig, Problem
from geonew import model as model_mod
from geonew.nn import EncoderConfig
from geonew.reduced import build_boundary_rows, project_operators
from geonew.solver import SolveConfig, SolveResult, accept_batch, all_partition_divergence, jacobian, newton_solve, \
    solve_batch
from geonew.train import TrainConfig, Trainer, boundary_error, evaluate, to_problem

from conftest import random_stochastic, rel_err

RESULTS = {}
SIDES = (3, 4, 5, 6, 8)


def criterion(n, title):
    """Record a pass/fail line for criterion ``n``; the test returns its detail string."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS[n] = (False, title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
                raise
            RESULTS[n] = (True, title, detail or "")

        return run

    return wrap


def geometry_problem(n_sides, poly_radius=0.5, amp=1.0, anchor_seed=0):
    mesh = generate_annulus_polygon(GeometrySpec(n_sides, poly_radius=poly_radius))
    ops = assemble(mesh)
    feats = compute_features(mesh, ops)
    bc = {"inner": np.full(len(mesh.sidesets["inner"].nodes), amp),
          "outer": np.zeros(len(mesh.sidesets["outer"].nodes))}
    u = reference_poisson_solve(mesh, None, bc, ops)
    return mesh, Problem(ops, feats.matrix, build_boundary_rows(mesh, bc), u[:, None], anchor_seed), bc


@pytest.fixture(scope="module")
def geometries():
    return {n: geometry_problem(n) for n in SIDES}


def perturbed_model(prob, seed, scale=0.3, **kw):
    cfg = ModelConfig(d_in=prob.features.shape[1], n_fixed=prob.boundary.n_fixed, seed=seed, **kw)
    model = GeoNeW(cfg)
    rng = np.random.default_rng(seed)
    # large moves of the partition network can starve a partition; keep those small
    model.params.update_values({k: v + (scale if k.startswith("flux.") else 0.05) * rng.standard_normal(v.shape)
                                for k, v in model.params.items()})
    return model


@criterion(1, "exact Dirichlet enforcement")
def test_c1_dirichlet(geometries):
    worst, count = 0.0, 0
    for k, n in enumerate(SIDES):
        for amp in (1.0, 0.5, 2.0):
            mesh, prob, bc = geometry_problem(n, 0.4 + 0.05 * k, amp, anchor_seed=k)
            model = perturbed_model(prob, seed=k)
            pred = model.predict(prob)
            worst = max(worst, boundary_error(pred.u_fine, bc, mesh))
            count += 1
    assert worst <= 1e-14
    return f"max boundary error {worst:.1e} over {count} samples"


@criterion(2, "discrete conservation")
def test_c2_conservation(geometries):
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(100):
        _, prob, _ = geometries[SIDES[trial % len(SIDES)]]
        model = perturbed_model(prob, seed=trial, p_free=4, w_hidden=8,
                                encoder=EncoderConfig(d_model=8, n_heads=2, n_anchors=6, n_blocks=1))
        _, parts = model.graph(Tape(), prob, requires_grad=False)
        rp = model.reduced_problem(prob, parts)
        u = 3.0 * rng.standard_normal((model.cfg.p_free, 1))
        div = all_partition_divergence(u, rp)
        worst = max(worst, float(np.abs(div.sum(axis=0)).max() / max(1.0, np.abs(div).sum())))
    assert worst <= 1e-12
    return f"max |sum of partition divergences| {worst:.1e} over 100 triples"


@criterion(3, "projection identities")
def test_c3_projection():
    meshes = [generate_annulus_polygon(GeometrySpec(n)) for n in (3, 4, 6)]
    meshes += [generate_rectangle(5, 4, 2.0, 1.0), generate_annulus_polygon(GeometrySpec(8, poly_radius=0.6))]
    rng = np.random.default_rng(3)
    e_proj = e_k = 0.0
    for mesh in meshes:
        ops = assemble(mesh)
        for _ in range(20):
            p = int(rng.integers(2, 16))
            w = random_stochastic(rng, p, mesh.n_nodes)
            rs = project_operators(ops, w, p_free=p - 1)
            e_proj = max(e_proj, float(np.abs(ops.d0 @ w.T - rs.w1.T @ rs.d0).max()))
            e_k = max(e_k, float(np.abs(rs.k - rs.d0.T @ rs.m1 @ rs.d0).max()))
    assert e_proj <= 1e-10 and e_k <= 1e-10
    return f"projection {e_proj:.1e}, stiffness {e_k:.1e} on 100 (W, mesh) pairs"


@criterion(4, "well-posedness under the tau cap")
def test_c4_well_posed(geometries):
    cfg = SolveConfig()
    worst_gap, worst_tau, min_sv = 0.0, 0.0, np.inf
    for s in range(20):
        _, prob, _ = geometries[SIDES[s % len(SIDES)]]
        model = perturbed_model(prob, seed=100 + s)
        _, parts = model.graph(Tape(), prob, requires_grad=False)
        rp = model.reduced_problem(prob, parts)
        cert = fx.certified_lipschitz(rp.beta, rp.gamma, model.gain, rp.flux.bounds)
        d0f = model_mod.free_incidence(model.cfg.p_total, model.cfg.p_free)
        pf = model.cfg.p_free
        worst_tau = max(worst_tau, max(fx.tau(cert, k[:pf, :pf], d0f, rp.epsilon) for k in parts["k_np"]))
        sols = []
        for init in range(5):
            res = newton_solve(rp, cfg, np.random.default_rng([s, init]))
            assert res.converged
            sols.append(res.u_star)
            min_sv = min(min_sv, np.linalg.svd(jacobian(res.u_star, rp), compute_uv=False)[-1])
        for i in range(5):
            for j in range(i + 1, 5):
                worst_gap = max(worst_gap, float(np.abs(sols[i] - sols[j]).max()))
    assert worst_tau < 1
    assert worst_gap <= 10 * cfg.tol
    assert min_sv > 0
    return f"tau <= {worst_tau:.3f}, max pairwise gap {worst_gap:.1e}, min Jacobian singular value {min_sv:.2e}"


@criterion(5, "implicit gradient vs finite differences")
def test_c5_gradient():
    _, prob, _ = geometry_problem(4, 0.45)
    model = perturbed_model(prob, seed=5, scale=0.2)
    solve = SolveConfig(tol=1e-12)
    zeta_eff = model.predict(prob).zeta_eff
    _, grads, _ = model.loss_and_grad(prob, np.random.default_rng(0), solve, zeta_eff=zeta_eff)
    rng = np.random.default_rng(5)
    picks = [("flux.log_beta", ()), ("flux.log_gamma", ())]
    for prefix in ("enc.", "pool_w.", "pool_f.", "part.", "flux."):
        flat = [(k, i) for k in model.params if k.startswith(prefix) for i in np.ndindex(model.params[k].shape)]
        picks += [flat[j] for j in rng.choice(len(flat), 4, replace=False)]
    analytic, num = [], []
    for k, i in picks:
        base = model.params[k].copy()

        def f(val):
            arr = base.copy()
            arr[i] = val
            model.params.update_values({k: arr})
            out = model.loss_only(prob, np.random.default_rng(0), solve, zeta_eff)
            model.params.update_values({k: base})
            return out

        h = 1e-5 * (1 + abs(base[i]))
        num.append((f(base[i] + h) - f(base[i] - h)) / (2 * h))
        analytic.append(grads[k][i])
    err = rel_err(np.array(analytic), np.array(num))
    assert len(picks) >= 20 and err <= 1e-4
    return f"relative error {err:.1e} on {len(picks)} parameters"


@criterion(6, "empirical Lipschitz below the certified cap")
def test_c6_lipschitz(geometries):
    worst, tight = 0.0, 0.0
    for s, n in enumerate(SIDES):
        _, prob, _ = geometries[n]
        model = perturbed_model(prob, seed=200 + s, scale=1.0)
        pred = model.predict(prob)
        _, parts = model.graph(Tape(), prob, requires_grad=False, zeta_eff=pred.zeta_eff)
        rp = model.reduced_problem(prob, parts)
        cert = fx.certified_lipschitz(rp.beta, rp.gamma, model.gain, rp.flux.bounds)
        assert pred.zeta_eff == pytest.approx(pred.zeta / 2, rel=1e-12)
        assert cert <= pred.zeta_eff * (1 + 1e-12)
        emp = fx.empirical_lipschitz(rp.flux, rp.beta, rp.gamma, model.cfg.p_total, 1, 1000,
                                     np.random.default_rng(s))
        worst = max(worst, emp / pred.zeta_eff)
        tight = max(tight, emp / cert)
    assert worst <= 1.0
    return (f"max empirical / cap = {worst:.2e} (empirical / certified <= {tight:.2e}) over 1000 pairs "
            f"on {len(SIDES)} geometries")


@criterion(7, "reference solver convergence rate")
def test_c7_manufactured():
    errs = []
    for n in (8, 16, 32, 64):
        mesh = generate_rectangle(n, n, 1.0, 1.0)
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        bc = {name: np.zeros(len(ss.nodes)) for name, ss in mesh.sidesets.items()}
        u = reference_poisson_solve(mesh, 2 * (x * (1 - x) + y * (1 - y)), bc)
        errs.append(l2_error(mesh, u, x * (1 - x) * y * (1 - y)))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(3)]
    assert min(rates) >= 1.8
    return "observed rates " + ", ".join(f"{r:.3f}" for r in rates)


@criterion(8, "geometry feature invariance")
def test_c8_invariance():
    worst = 0.0
    for k, n in enumerate(SIDES):
        mesh = generate_annulus_polygon(GeometrySpec(n, rotation=0.1 * k))
        base = compute_features(mesh, assemble(mesh))
        moved = mesh.transformed(0.3 + 0.7 * k, (1.5 - k, 0.25 * k))
        other = compute_features(moved, assemble(moved))
        worst = max(worst, float(np.abs(other.hks - base.hks).max()),
                    float(np.abs(other.harmonic - base.harmonic).max()))
    assert worst <= 1e-9
    return f"max HKS / harmonic deviation {worst:.1e}"


@pytest.mark.slow
@criterion(9, "end-to-end desk-scale learning")
def test_c9_end_to_end(tmp_path_factory):
    t0 = time.perf_counter()
    manifest = generate_dataset(DataConfig(), tmp_path_factory.mktemp("poly"))
    train_s, id_s, ood_s = (load_dataset(manifest, sp) for sp in ("train", "test_id", "test_ood"))
    train_p, id_p, ood_p = ([to_problem(s) for s in ss] for ss in (train_s, id_s, ood_s))
    cfg = TrainConfig(epochs=300)
    assert cfg.p_free == 8 and cfg.encoder.d_model == 32 and len(train_p) == 200
    trainer = Trainer.create(cfg, train_p)
    init = trainer.evaluate(id_p, id_s).row
    for _ in range(cfg.epochs):
        trainer.train_epoch(train_p, np.random.default_rng([cfg.seed, trainer.epoch]))
    id_row = trainer.evaluate(id_p, id_s).row
    ood_row = trainer.evaluate(ood_p, ood_s, "test_ood").row
    minutes = (time.perf_counter() - t0) / 60
    ratio = id_row["eps_l2"] / init["eps_l2"]
    detail = (f"ID {init['eps_l2']:.4f} -> {id_row['eps_l2']:.5f} (ratio {ratio:.4f}), OOD {ood_row['eps_l2']:.5f} "
              f"conv {ood_row['conv_frac']:.2f}, boundary {max(id_row['boundary_err'], ood_row['boundary_err']):.1e}, "
              f"{minutes:.1f} min")
    print(detail)
    assert ratio <= 0.2
    assert np.isfinite(ood_row["eps_l2"]) and ood_row["conv_frac"] == 1.0
    assert id_row["boundary_err"] == 0.0 and ood_row["boundary_err"] == 0.0
    assert minutes <= 30
    return detail


@criterion(10, "solver discipline under fault injection")
def test_c10_solver_discipline(monkeypatch):
    cfg = TrainConfig()
    sc = cfg.solve_config()
    assert (sc.threshold, sc.tol, sc.max_iter) == (0.8, 1e-6, 200)
    assert accept_batch([True] * 8 + [False] * 2, 0.8)[0]
    assert not accept_batch([True] * 7 + [False] * 3, 0.8)[0]

    _, prob, _ = geometry_problem(3, 0.5)
    probs = [Problem(prob.ops, prob.features, prob.boundary, prob.target, k) for k in range(10)]
    real = model_mod.newton_solve
    failing = set()

    def flaky(rp, solve_cfg, rng=None, u0=None):
        res = real(rp, solve_cfg, rng, u0)
        if flaky.calls in failing:
            res = SolveResult(res.u_star, False, solve_cfg.max_iter, 1.0)
        flaky.calls += 1
        return res

    monkeypatch.setattr(model_mod, "newton_solve", flaky)
    small = dict(p_free=4, w_hidden=8, encoder=EncoderConfig(d_model=8, n_heads=2, n_anchors=6, n_blocks=1),
                 zeta_mode="sample")
    outcomes = {}
    for n_fail in (2, 3):
        trainer = Trainer.create(TrainConfig(epochs=1, batch_size=10, **small), probs)
        before = {k: v.copy() for k, v in trainer.model.params.items()}
        flaky.calls, failing = 0, set(range(n_fail))
        info = trainer.train_step(probs, np.random.default_rng(0))
        moved = any(not np.array_equal(v, trainer.model.params[k]) for k, v in before.items())
        outcomes[n_fail] = (info["accepted"], info["conv_frac"], moved)
    assert outcomes[2] == (True, 0.8, True)
    assert outcomes[3] == (False, 0.7, False)

    # batch-level solver report agrees
    def stub(p, c, rng):
        stub.calls += 1
        return SolveResult(np.zeros((1, 1)), stub.calls > 3, 1, 0.0)

    stub.calls = 0
    report = solve_batch([None] * 10, SolveConfig(), solve=stub)
    assert not report.accepted and report.fraction == 0.7
    return "8/10 converged accepted and stepped; 7/10 rejected with parameters unchanged"


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
