import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geonew import autodiff as ad
from geonew import flux as fx
from geonew import nn
from geonew.autodiff import Tape
from geonew.linalg import LinAlgError, sym_eig
from geonew.reduced import complete_graph

from conftest import numeric_grad, rel_err

P_TOTAL, N_FIELDS, N_C, D_MODEL = 6, 2, 2, 4


def make_ops(seed=0, cfg=None, randomize=True, c_scale=1.0):
    cfg = cfg or fx.FluxConfig(d_op=4, d_hid=5, hyper_hidden=6)
    params = nn.ParamBundle()
    fx.init_flux(params, "flux", cfg, N_FIELDS, P_TOTAL, N_C, D_MODEL, seed)
    rng = np.random.default_rng(seed)
    if randomize:
        params.update_values({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.items()
                              if k.startswith("flux.head_") or k in ("flux.pi_t", "flux.a0")})
    t = Tape()
    p = params.to_tape(t)
    c = t.const(c_scale * rng.standard_normal((N_C, D_MODEL)))
    return fx.flux_operators(p, "flux", c, cfg, P_TOTAL).frozen(), params, cfg


def test_edge_features_examples():
    u = np.array([[1.0, 0.0], [0.0, 1.0]])
    xi = fx.edge_features(u, 0, 1, np.eye(2))
    np.testing.assert_array_equal(xi, [1, -1, 0.5, 0.5])
    np.testing.assert_array_equal(fx.edge_features(u, 1, 0, np.eye(2)), -xi)
    same = np.array([[2.0, 3.0], [2.0, 3.0]])
    assert np.all(fx.edge_features(same, 0, 1, np.eye(2))[:2] == 0)
    with pytest.raises(ValueError):
        fx.edge_features(u, 1, 1, np.eye(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_antisymmetry(seed):
    ops, _, _ = make_ops(seed % 50)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((P_TOTAL, N_FIELDS))
    for i, j in [(0, 1), (2, 5), (4, 3)]:
        f_ij = fx.oriented_edge_flux(u, i, j, ops, 0.3, 0.2)
        f_ji = fx.oriented_edge_flux(u, j, i, ops, 0.3, 0.2)
        assert np.max(np.abs(f_ij + f_ji)) <= 1e-12


def test_primal_matches_oriented_reference():
    ops, _, _ = make_ops(1)
    u = np.random.default_rng(1).standard_normal((P_TOTAL, N_FIELDS))
    f = fx.primal_flux(Tape().const(u), ops, 0.3, 0.2).value
    pairs, _ = complete_graph(P_TOTAL)
    ref = np.array([fx.oriented_edge_flux(u, i, j, ops, 0.3, 0.2) for i, j in pairs])
    np.testing.assert_allclose(f, ref, atol=1e-14)


def test_linear_limit_is_graph_flux():
    cfg = fx.FluxConfig(d_op=1, d_hid=1, hyper_hidden=3)
    params = nn.ParamBundle()
    fx.init_flux(params, "flux", cfg, 1, P_TOTAL, N_C, D_MODEL, 0)
    params.update_values({"flux.pi_t": np.ones((1, 1))})
    t = Tape()
    ops = fx.flux_operators(params.to_tape(t), "flux", t.const(np.ones((N_C, D_MODEL))), cfg, P_TOTAL).frozen()
    u = np.random.default_rng(2).standard_normal((P_TOTAL, 1))
    beta = 0.7
    f = fx.primal_flux(Tape().const(u), ops, beta, 0.0).value
    pairs, _ = complete_graph(P_TOTAL)
    np.testing.assert_allclose(f[:, 0], beta * (u[pairs[:, 0], 0] - u[pairs[:, 1], 0]), atol=1e-15)


def test_constant_field_zero_flux_without_mean_channel():
    ops, _, _ = make_ops(3)
    u = np.tile([[1.5, -0.4]], (P_TOTAL, 1))
    f = fx.primal_flux(Tape().const(u), ops, 0.3, 0.2, mean_channel=False).value
    assert np.all(f == 0)
    assert np.any(fx.primal_flux(Tape().const(u), ops, 0.3, 0.2, mean_channel=True).value != 0)


def test_zero_hypernet_independent_of_context():
    a, _, _ = make_ops(4, randomize=False, c_scale=1.0)
    b, _, _ = make_ops(4, randomize=False, c_scale=5.0)
    for name in ("pi_t", "a", "b", "c", "h"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    # H is the bounded identity: (1 - eps_h) I / P1 + eps_h I
    p1, eps_h = a.h.shape[0], fx.FluxConfig().eps_h
    np.testing.assert_allclose(a.h, ((1 - eps_h) / p1 + eps_h) * np.eye(p1), atol=1e-15)


def test_hodge_zero_is_eps_identity():
    # a hyper output of -I cancels the identity offset, leaving eps_h I
    n = 5
    h = fx.hodge_map(Tape().const(-np.eye(n)), 0.01).value
    np.testing.assert_allclose(h, 0.01 * np.eye(n), atol=1e-16)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 10.0), eps_h=st.floats(1e-4, 0.5))
def test_hodge_spd_bounds(seed, scale, eps_h):
    n = 6
    hyper = scale * np.random.default_rng(seed).standard_normal((n, n))
    h = fx.hodge_map(Tape().const(hyper), eps_h).value
    assert np.array_equal(h, h.T)
    lam, _ = sym_eig(h)
    assert lam[0] >= eps_h * (1 - 1e-12)
    assert lam[-1] <= 1 + 1e-12


def test_dual_equals_primal_for_identity_hodge():
    ops, _, _ = make_ops(5)
    ops.h = np.eye(ops.h.shape[0])
    u = np.random.default_rng(5).standard_normal((P_TOTAL, N_FIELDS))
    t = Tape()
    np.testing.assert_allclose(fx.dual_flux(t.const(u), ops, 0.3, 0.1).value,
                               fx.primal_flux(t.const(u), ops, 0.3, 0.1).value, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_conservation(seed):
    ops, _, _ = make_ops(seed % 20)
    u = np.random.default_rng(seed).standard_normal((P_TOTAL, N_FIELDS)) * 10
    f = fx.dual_flux(Tape().const(u), ops, 0.4, 0.3).value
    _, d0 = complete_graph(P_TOTAL)
    div = d0.T @ f
    assert np.max(np.abs(div.sum(axis=0))) <= 1e-12 * max(1.0, np.abs(f).sum())


def test_feature_gain_closed_form():
    for p in (2, 5, 12):
        assert fx.feature_gain(p) == pytest.approx(math.sqrt((5 * p - 2) / 4), rel=1e-10)
        assert fx.feature_gain(p, mean_channel=False) == pytest.approx(math.sqrt(p), rel=1e-10)


def test_empirical_below_certified_many_draws():
    gain = fx.feature_gain(P_TOTAL)
    for draw in range(10):
        ops, params, cfg = make_ops(100 + draw)
        zeta_eff = 0.05 * (draw + 1)
        t = Tape()
        beta, gamma = fx.amplitudes(params.to_tape(t), "flux", zeta_eff, gain)
        beta, gamma = float(beta.value), float(gamma.value)
        cert = fx.certified_lipschitz(beta, gamma, gain, ops.bounds)
        assert cert <= zeta_eff * (1 + 1e-12)
        emp = fx.empirical_lipschitz(ops, beta, gamma, P_TOTAL, N_FIELDS, 100, np.random.default_rng(draw))
        assert emp <= cert * (1 + 1e-12)


def test_amplitudes_respect_cap_for_large_parameters():
    params = nn.ParamBundle()
    params["flux.log_beta"] = np.array(5.0)
    params["flux.log_gamma"] = np.array(5.0)
    gain = fx.feature_gain(4)
    beta, gamma = fx.amplitudes(params.to_tape(Tape()), "flux", 0.2, gain)
    assert float(beta.value) + float(gamma.value) <= 0.2 / gain * (1 + 1e-15)
    assert float(beta.value) >= 0 and float(gamma.value) >= 0


def test_compute_zeta_examples():
    assert fx.compute_zeta(np.eye(3), np.array([[1.0, 0, 0]])) == pytest.approx(0.99)
    k = np.array([[2.0, -1.0], [-1.0, 2.0]])
    d0 = np.array([[1.0, -1.0], [0.5, 0.0]])
    z = fx.compute_zeta(k, d0)
    assert fx.compute_zeta(3.0 * k, d0) == pytest.approx(3.0 * z, rel=1e-12)
    with pytest.raises(LinAlgError, match="singular"):
        fx.compute_zeta(np.array([[1.0, -1.0], [-1.0, 1.0]]), d0)


def test_tau_below_one_when_capped():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 5))
    k = a @ a.T + np.eye(5)
    d0 = rng.standard_normal((10, 5))
    zeta = fx.compute_zeta(k, d0)
    assert fx.tau(0.5 * zeta, k, d0) < 1
    assert fx.tau(zeta, k, d0) == pytest.approx(0.99)


def test_budget_moving_average():
    b = fx.LipschitzBudget(decay=0.9, refresh=10)
    assert b.due(3)
    b.observe([1.0, 3.0])
    assert b.zeta == 2.0
    b.observe([4.0])
    assert b.zeta == pytest.approx(0.9 * 2 + 0.1 * 4)
    assert not b.due(3) and b.due(20)
    assert b.effective() == pytest.approx(0.5 * b.zeta)


def test_budget_sample_mode():
    b = fx.LipschitzBudget(mode="sample")
    assert b.effective(0.4) == pytest.approx(0.2)
    with pytest.raises(fx.BudgetError):
        b.effective()
    with pytest.raises(ValueError):
        fx.LipschitzBudget(mode="bogus")


def test_flux_gradcheck_wrt_parameters():
    cfg = fx.FluxConfig(d_op=3, d_hid=4, hyper_hidden=5)
    params = nn.ParamBundle()
    fx.init_flux(params, "flux", cfg, 1, 4, 1, 3, 0)
    rng = np.random.default_rng(7)
    params.update_values({k: v + 0.2 * rng.standard_normal(v.shape) for k, v in params.items()})
    u = rng.standard_normal((4, 1))
    c = rng.standard_normal((1, 3))
    probe = rng.standard_normal((6, 1))
    gain = fx.feature_gain(4)

    def loss(values, name):
        t = Tape()
        p = params.to_tape(t)
        p[name] = t.leaf(values)
        ops = fx.flux_operators(p, "flux", t.const(c), cfg, 4)
        beta, gamma = fx.amplitudes(p, "flux", 0.5, gain)
        return t, p[name], ad.sum(fx.dual_flux(t.const(u), ops, beta, gamma) * probe)

    for name in ("flux.head_h.w", "flux.head_b.w", "flux.pi_t", "flux.log_gamma"):
        t, leaf, out = loss(params[name], name)
        (g,) = t.backward(out, wrt=[leaf])
        num = numeric_grad(lambda v: float(loss(v, name)[2].value), params[name])
        assert rel_err(g, num) <= 1e-5, name


def test_config_validation():
    with pytest.raises(ValueError):
        fx.FluxConfig(eps_h=0.0)
    with pytest.raises(ValueError):
        fx.FluxConfig(epsilon=-1.0)
