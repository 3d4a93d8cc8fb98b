"""The full Geo-NeW pipeline for one geometry.

    features -> anchor encoder z -> pooled contexts (c_W, c_F)
             -> partitions W -> reduced K -> flux maps
             -> Newton solve for the free coefficients -> W^T u

:meth:`GeoNeW.loss_and_grad` runs the parameter graph once, solves the
reduced system on numpy snapshots of it, then sweeps the same graph backward
with the adjoint seed.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import flux as fx
from . import nn
from .autodiff import Tape
from .feec import FineOperators
from .reduced import BoundaryRows, complete_graph, partition_forward, init_partition_model, project_vars
from .solver import ReducedProblem, SolveConfig, SolveResult, adjoint_multiplier, newton_solve, residual_graph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    p_free: int = 8
    n_fixed: int = 4
    n_fields: int = 1
    n_c: int = 2
    w_hidden: int = 64
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)
    flux: fx.FluxConfig = field(default_factory=fx.FluxConfig)
    seed: int = 0

    @property
    def p_total(self) -> int:
        return self.p_free + self.n_fixed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = nn.EncoderConfig(**d.get("encoder", {}))
        d["flux"] = fx.FluxConfig(**d.get("flux", {}))
        return cls(**d)


@dataclass
class Problem:
    """Per-geometry inputs: fine operators, features, boundary rows, target."""

    ops: FineOperators
    features: np.ndarray
    boundary: BoundaryRows
    target: np.ndarray | None = None  # N x F
    anchor_seed: int = 0
    name: str = ""


@dataclass
class Prediction:
    u_fine: np.ndarray
    u_reduced: np.ndarray  # P_total x F
    w: list
    solve: SolveResult
    zeta: float
    zeta_eff: float


def init_params(cfg: ModelConfig) -> nn.ParamBundle:
    p = nn.ParamBundle()
    d = cfg.encoder.d_model
    nn.init_encoder(p, "enc", cfg.d_in, cfg.encoder)
    nn.init_pool(p, "pool_w", cfg.n_c, d, cfg.seed)
    nn.init_pool(p, "pool_f", cfg.n_c, d, cfg.seed)
    init_partition_model(p, "part", d, cfg.n_c, cfg.p_free, cfg.n_fields, cfg.w_hidden, cfg.seed)
    fx.init_flux(p, "flux", cfg.flux, cfg.n_fields, cfg.p_total, cfg.n_c, d, cfg.seed)
    return p


def free_incidence(p_total: int, p_free: int) -> np.ndarray:
    return complete_graph(p_total)[1][:, :p_free]


def sample_zeta(k: np.ndarray, p_free: int, epsilon: float, safety: float) -> float:
    """Per-sample ``zeta``: the smallest over fields."""
    d0f = free_incidence(k.shape[-1], p_free)
    return min(fx.compute_zeta(kf[:p_free, :p_free], d0f, epsilon, safety) for kf in k)


class GeoNeW:
    def __init__(self, cfg: ModelConfig, params: nn.ParamBundle | None = None,
                 budget: fx.LipschitzBudget | None = None, solve_cfg: SolveConfig | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        self.budget = budget or fx.LipschitzBudget(epsilon=cfg.flux.epsilon, safety=cfg.flux.safety)
        self.solve_cfg = solve_cfg or SolveConfig()
        self.gain = fx.feature_gain(cfg.p_total, cfg.flux.mean_channel)

    # -------------------------------------------------------------- graph

    def graph(self, tape: Tape, prob: Problem, requires_grad: bool = True, zeta_eff: float | None = None):
        """Build the parameter graph up to the reduced problem.

        Returns ``(leaves, parts)``; ``parts`` holds tape variables ``w``
        (per field), ``k`` (per field), flux maps and amplitudes.
        """
        cfg = self.cfg
        if prob.boundary.n_fixed != cfg.n_fixed:
            raise ValueError(f"problem has {prob.boundary.n_fixed} boundary partitions, model expects {cfg.n_fixed}")
        if prob.features.shape[1] != cfg.d_in:
            raise ValueError(f"features have {prob.features.shape[1]} columns, model expects {cfg.d_in}")
        leaves = self.params.to_tape(tape, requires_grad)
        rng = np.random.default_rng(prob.anchor_seed)
        z = nn.anchor_encoder(leaves, "enc", tape.const(prob.features), cfg.encoder, rng)
        c_w = nn.perceiver_pool(leaves, "pool_w", z, cfg.encoder.n_heads)
        c_f = nn.perceiver_pool(leaves, "pool_f", z, cfg.encoder.n_heads)
        ws = partition_forward(leaves, "part", z, c_w, prob.boundary, cfg.p_free)
        ks = [project_vars(prob.ops, w)["k"] for w in ws]
        k_np = np.stack([k.value for k in ks])
        zeta = sample_zeta(k_np, cfg.p_free, cfg.flux.epsilon, cfg.flux.safety)
        if zeta_eff is None:
            zeta_eff = self.budget.effective(zeta)
        ops = fx.flux_operators(leaves, "flux", c_f, cfg.flux, cfg.p_total)
        beta, gamma = fx.amplitudes(leaves, "flux", zeta_eff, self.gain)
        parts = {"w": ws, "k": ks, "k_np": k_np, "flux": ops, "beta": beta, "gamma": gamma,
                 "zeta": zeta, "zeta_eff": zeta_eff}
        return leaves, parts

    def reduced_problem(self, prob: Problem, parts: dict, frozen: bool = True) -> ReducedProblem:
        if frozen:
            flux_ops = parts["flux"].frozen()
            k = parts["k_np"]
            beta, gamma = float(parts["beta"].value), float(parts["gamma"].value)
        else:
            flux_ops, k = parts["flux"], parts["k"]
            beta, gamma = parts["beta"], parts["gamma"]
        return ReducedProblem(k=k, flux=flux_ops, beta=beta, gamma=gamma, u_fixed=prob.boundary.coefs,
                              p_free=self.cfg.p_free, epsilon=self.cfg.flux.epsilon,
                              mean_channel=self.cfg.flux.mean_channel)

    def sample_zeta(self, prob: Problem) -> float:
        _, parts = self.graph(Tape(), prob, requires_grad=False, zeta_eff=1.0)
        return parts["zeta"]

    # ------------------------------------------------------------ predict

    def predict(self, prob: Problem, rng: np.random.Generator | None = None,
                solve_cfg: SolveConfig | None = None, zeta_eff: float | None = None) -> Prediction:
        tape = Tape()
        _, parts = self.graph(tape, prob, requires_grad=False, zeta_eff=zeta_eff)
        rp = self.reduced_problem(prob, parts)
        rng = np.random.default_rng(prob.anchor_seed) if rng is None else rng
        res = newton_solve(rp, solve_cfg or self.solve_cfg, rng)
        u_red = np.vstack([res.u_star, prob.boundary.coefs])
        ws = [w.value for w in parts["w"]]
        u_fine = np.column_stack([ws[f].T @ u_red[:, f] for f in range(self.cfg.n_fields)])
        return Prediction(u_fine, u_red, ws, res, parts["zeta"], parts["zeta_eff"])

    # ---------------------------------------------------------- training

    def loss_and_grad(self, prob: Problem, rng: np.random.Generator, solve_cfg: SolveConfig | None = None,
                      zeta_eff: float | None = None):
        """Squared reconstruction error summed over fine nodes and its gradient.

        Returns ``(loss, grads, prediction)``; ``grads`` is ``None`` when the
        solve did not converge.
        """
        if prob.target is None:
            raise ValueError("problem has no target field")
        tape = Tape()
        leaves, parts = self.graph(tape, prob, requires_grad=True, zeta_eff=zeta_eff)
        rp = self.reduced_problem(prob, parts)
        res = newton_solve(rp, solve_cfg or self.solve_cfg, rng)
        u_red = np.vstack([res.u_star, prob.boundary.coefs])
        ws = [w.value for w in parts["w"]]
        nf = self.cfg.n_fields
        u_fine = np.column_stack([ws[f].T @ u_red[:, f] for f in range(nf)])
        err = u_fine - prob.target
        loss = float(np.sum(err**2))
        pred = Prediction(u_fine, u_red, ws, res, parts["zeta"], parts["zeta_eff"])
        if not res.converged:
            return loss, None, pred
        # dL/du* over the free coefficients
        dl_du = np.column_stack([2.0 * ws[f][: self.cfg.p_free] @ err[:, f] for f in range(nf)])
        lam = adjoint_multiplier(res.u_star, dl_du, rp)
        live = self.reduced_problem(prob, parts, frozen=False)
        g = residual_graph(tape.const(res.u_star), live)
        total = ad.sum(g * (-lam))
        for f, w in enumerate(parts["w"]):
            rec = w.T @ u_red[:, f:f + 1]
            total = total + ad.sum((rec - prob.target[:, f:f + 1]) * (rec - prob.target[:, f:f + 1]))
        names = list(leaves)
        grads = tape.backward(total, wrt=[leaves[n] for n in names])
        return loss, dict(zip(names, grads)), pred

    def loss_only(self, prob: Problem, rng: np.random.Generator, solve_cfg: SolveConfig | None = None,
                  zeta_eff: float | None = None) -> float:
        pred = self.predict(prob, rng, solve_cfg, zeta_eff)
        return float(np.sum((pred.u_fine - prob.target) ** 2))
