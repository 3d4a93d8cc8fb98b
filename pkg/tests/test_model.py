import numpy as np
import pytest

from geonew.model import GeoNeW, ModelConfig, Problem
from geonew.nn import EncoderConfig
from geonew.solver import SolveConfig
from geonew.verify import verify_model

from conftest import annulus_problem, rel_err

SOLVE = SolveConfig(tol=1e-12)
ZETA = 2e-3


@pytest.fixture(scope="module")
def small():
    mesh, prob, bc = annulus_problem(poly_radius=0.45)
    cfg = ModelConfig(d_in=prob.features.shape[1], n_fixed=prob.boundary.n_fixed, p_free=4, w_hidden=8,
                      encoder=EncoderConfig(d_model=8, n_heads=2, n_anchors=6, n_blocks=1))
    model = GeoNeW(cfg)
    # move the flux amplitudes off their init so the nonlinear path carries gradient
    rng = np.random.default_rng(0)
    model.params.update_values({k: v + 0.2 * rng.standard_normal(v.shape) for k, v in model.params.items()})
    return mesh, prob, bc, model


def test_prediction_shapes_and_boundary(small):
    mesh, prob, bc, model = small
    pred = model.predict(prob, zeta_eff=ZETA)
    assert pred.u_fine.shape == (mesh.n_nodes, 1)
    assert pred.solve.converged
    for name, vals in bc.items():
        np.testing.assert_array_equal(pred.u_fine[mesh.sidesets[name].nodes, 0], vals)


def test_predict_deterministic(small):
    _, prob, _, model = small
    a, b = model.predict(prob), model.predict(prob)
    assert np.array_equal(a.u_fine, b.u_fine)


def test_adjoint_gradient_matches_fd(small):
    _, prob, _, model = small
    loss, grads, pred = model.loss_and_grad(prob, np.random.default_rng(0), SOLVE, zeta_eff=ZETA)
    assert grads is not None and loss == pytest.approx(model.loss_only(prob, np.random.default_rng(0), SOLVE, ZETA))
    rng = np.random.default_rng(1)
    # stratify the draw so every parameter group is represented
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
            out = model.loss_only(prob, np.random.default_rng(0), SOLVE, ZETA)
            model.params.update_values({k: base})
            return out

        h = 1e-5 * (1 + abs(base[i]))
        num.append((f(base[i] + h) - f(base[i] - h)) / (2 * h))
        analytic.append(grads[k][i])
    assert len(picks) >= 20
    assert rel_err(np.array(analytic), np.array(num)) <= 1e-4


def test_every_group_receives_gradient(small):
    _, prob, _, model = small
    _, grads, _ = model.loss_and_grad(prob, np.random.default_rng(0), SOLVE, zeta_eff=ZETA)
    for prefix in ("enc.", "pool_w.", "pool_f.", "part.", "flux."):
        assert any(np.any(g != 0) for k, g in grads.items() if k.startswith(prefix)), prefix


def test_mismatched_problem_rejected(small):
    _, prob, _, model = small
    bad = Problem(prob.ops, prob.features[:, :-1], prob.boundary, prob.target)
    with pytest.raises(ValueError, match="columns"):
        model.predict(bad)


def test_loss_requires_target(small):
    _, prob, _, model = small
    with pytest.raises(ValueError, match="target"):
        model.loss_and_grad(Problem(prob.ops, prob.features, prob.boundary), np.random.default_rng(0))


def test_config_round_trip():
    cfg = ModelConfig(d_in=7, n_fixed=2, encoder=EncoderConfig(d_model=8, n_heads=2))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_verify_fresh_model_passes(problem, model):
    mesh, prob, bc = problem
    report = verify_model(model, prob, mesh, bc)
    assert report["passed"], report["failed"]
    names = {c["name"] for c in report["checks"]}
    assert {"partition_of_unity", "conservation", "lipschitz_certified", "tau", "dirichlet_exactness"} <= names


def test_verify_detects_corrupt_partition(problem, model):
    mesh, prob, bc = problem
    report = verify_model(model, prob, mesh, bc, corrupt_partition=True)
    assert not report["passed"]
    assert "partition_of_unity" in report["failed"]
