"""Training loop: implicit solves, adjoint gradients, Adam with cosine annealing.

Metrics go to an append-only CSV; checkpoints use the ``GNWC`` container::

    b"GNWC" | u32 version | u32 header_len | header JSON | f64 parameters

The header stores the model and training configs, the step counter, seeds,
the Lipschitz budget state and the parameter names/shapes in storage order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import flux as fx
from . import nn
from .data import LoadedSample
from .model import GeoNeW, ModelConfig, Problem
from .reduced import build_boundary_rows
from .solver import SolveConfig, accept_batch

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GNWC"
CKPT_VERSION = 1
METRIC_COLUMNS = ("epoch", "split", "eps_l2", "boundary_err", "conv_frac", "mean_newton_iters", "zeta", "lr",
                  "seconds")


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ metrics


def normalized_l2(pred, target) -> float:
    """Mean over samples of ``||pred - target|| / ||target||``.

    Accepts a single array pair or sequences of per-sample arrays.
    """
    if isinstance(pred, np.ndarray) and isinstance(target, np.ndarray):
        pred, target = [pred], [target]
    ratios = []
    for p, t in zip(pred, target, strict=True):
        denom = float(np.linalg.norm(t))
        if denom == 0:
            raise ValueError("target has zero norm")
        ratios.append(float(np.linalg.norm(np.asarray(p) - t)) / denom)
    return float(np.mean(ratios))


def boundary_error(u_fine: np.ndarray, dirichlet: dict, mesh) -> float:
    """Max absolute deviation from the Dirichlet data over all constrained nodes."""
    err = 0.0
    for name, vals in dirichlet.items():
        nodes = mesh.sidesets[name].nodes
        v = np.asarray(vals, dtype=np.float64).reshape(len(nodes), -1)
        err = max(err, float(np.max(np.abs(u_fine[nodes] - v))))
    return err


# ---------------------------------------------------------------- optimizer


def cosine_lr(step: int, total_steps: int, max_lr: float, min_lr: float) -> float:
    """Cosine annealing: ``max_lr`` at step 0, ``min_lr`` at ``total_steps - 1``."""
    if total_steps <= 1:
        return max_lr
    s = min(max(step, 0), total_steps - 1)
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * s / (total_steps - 1)))


class Adam:
    def __init__(self, params: nn.ParamBundle, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: nn.ParamBundle, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        new = {}
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            new[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.update_values(new)

    def state_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    max_lr: float = 1e-3
    min_lr: float | None = None
    p_free: int = 8
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)
    flux: fx.FluxConfig = field(default_factory=fx.FluxConfig)
    n_c: int = 2
    w_hidden: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    zeta_mode: str = "tracked"
    zeta_subset: int = 4
    tol: float = 1e-6
    max_iter: int = 200
    threshold: float = 0.8
    retries: int = 2

    def __post_init__(self):
        if self.max_lr <= 0 or (self.min_lr is not None and self.min_lr <= 0):
            raise ValueError("learning rates must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.zeta_mode not in ("tracked", "sample"):
            raise ValueError(f"unknown zeta_mode {self.zeta_mode!r}")

    @property
    def lr_floor(self) -> float:
        return self.max_lr / 100.0 if self.min_lr is None else self.min_lr

    def solve_config(self) -> SolveConfig:
        return SolveConfig(tol=self.tol, max_iter=self.max_iter, threshold=self.threshold, retries=self.retries)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown train config key {unknown[0]!r}")
        if "encoder" in d:
            d["encoder"] = _strict(nn.EncoderConfig, d["encoder"], "encoder")
        if "flux" in d:
            d["flux"] = _strict(fx.FluxConfig, d["flux"], "flux")
        return cls(**d)


def _strict(cls, d, where):
    unknown = sorted(set(d) - set(cls.__dataclass_fields__))
    if unknown:
        raise ValueError(f"unknown {where} config key {unknown[0]!r}")
    return cls(**d)


# ----------------------------------------------------------------- problems


def to_problem(s: LoadedSample, anchor_seed: int | None = None) -> Problem:
    bnd = build_boundary_rows(s.sample.mesh, s.sample.dirichlet, s.sample.u.shape[1])
    return Problem(s.ops, s.features.matrix, bnd, s.sample.u, anchor_seed=s.index if anchor_seed is None else anchor_seed,
                   name=s.file)


def model_config(cfg: TrainConfig, d_in: int, n_fixed: int, n_fields: int = 1) -> ModelConfig:
    enc = replace(cfg.encoder, seed=cfg.seed)
    return ModelConfig(d_in=d_in, p_free=cfg.p_free, n_fixed=n_fixed, n_fields=n_fields, n_c=cfg.n_c,
                       w_hidden=cfg.w_hidden, encoder=enc, flux=cfg.flux, seed=cfg.seed)


@dataclass
class EvalResult:
    row: dict
    per_sample: list
    predictions: list


class Trainer:
    def __init__(self, cfg: TrainConfig, model: GeoNeW, steps_per_epoch: int):
        self.cfg = cfg
        self.model = model
        self.model.budget = fx.LipschitzBudget(epsilon=cfg.flux.epsilon, safety=cfg.flux.safety,
                                               mode=cfg.zeta_mode)
        self.solve_cfg = cfg.solve_config()
        self.model.solve_cfg = self.solve_cfg
        self.opt = Adam(model.params)
        self.step = 0
        self.epoch = 0
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = max(1, cfg.epochs * steps_per_epoch)
        self.skipped_batches = 0
        self.grad_seen: set[str] = set()

    @classmethod
    def create(cls, cfg: TrainConfig, train_problems: list[Problem]) -> "Trainer":
        p0 = train_problems[0]
        mcfg = model_config(cfg, p0.features.shape[1], p0.boundary.n_fixed, p0.boundary.rows.shape[0])
        spe = math.ceil(len(train_problems) / cfg.batch_size)
        return cls(cfg, GeoNeW(mcfg), spe)

    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.cfg.max_lr, self.cfg.lr_floor)

    def refresh_budget(self, batch: list[Problem], rng: np.random.Generator) -> None:
        budget = self.model.budget
        if budget.mode != "tracked" or not budget.due(self.step):
            return
        k = min(self.cfg.zeta_subset, len(batch))
        pick = rng.choice(len(batch), size=k, replace=False)
        zetas = [self.model.sample_zeta(batch[i]) for i in sorted(pick)]
        budget.observe(zetas)

    def train_step(self, batch: list[Problem], rng: np.random.Generator) -> dict:
        self.refresh_budget(batch, rng)
        losses, grads_list, iters, conv, errs, berr = [], [], [], [], [], 0.0
        for prob in batch:
            loss, grads, pred = self.model.loss_and_grad(prob, rng, self.solve_cfg)
            conv.append(pred.solve.converged)
            if grads is not None:
                mask = prob.boundary.dirichlet
                berr = max(berr, float(np.abs(pred.u_fine[mask] - prob.target[mask]).max()))
                errs.append(normalized_l2(pred.u_fine, prob.target))
                losses.append(loss)
                grads_list.append(grads)
                iters.append(pred.solve.iterations)
        accepted, frac = accept_batch(conv, self.cfg.threshold)
        lr = self.lr()
        info = {"loss": float(np.mean(losses)) if losses else float("nan"), "conv_frac": frac,
                "accepted": accepted, "lr": lr, "iters": float(np.mean(iters)) if iters else float("nan"),
                "eps_l2": float(np.mean(errs)) if errs else float("nan"), "boundary_err": berr}
        if not accepted or not grads_list:
            self.skipped_batches += 1
            log.info("step %d: batch skipped (convergence %.2f < %.2f)", self.step, frac, self.cfg.threshold)
            self.step += 1
            return info
        mean = {k: sum(g[k] for g in grads_list) / len(grads_list) for k in grads_list[0]}
        for k, g in mean.items():
            if np.any(g != 0):
                self.grad_seen.add(k)
        self.opt.step(self.model.params, mean, lr)
        self.model.params.check_finite()
        self.step += 1
        return info

    def train_epoch(self, problems: list[Problem], rng: np.random.Generator) -> dict:
        t0 = time.perf_counter()
        order = rng.permutation(len(problems))
        infos = []
        for b in range(0, len(order), self.cfg.batch_size):
            batch = []
            for i in order[b:b + self.cfg.batch_size]:
                p = problems[i]
                seed = int(rng.integers(2**31))
                batch.append(Problem(p.ops, p.features, p.boundary, p.target, seed, p.name))
            infos.append(self.train_step(batch, rng))
        self.epoch += 1
        losses = [i["loss"] for i in infos if np.isfinite(i["loss"])]
        iters = [i["iters"] for i in infos if np.isfinite(i["iters"])]
        return {
            "epoch": self.epoch,
            "split": "train",
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "eps_l2": float(np.nanmean([i["eps_l2"] for i in infos])) if losses else float("nan"),
            "boundary_err": max(i["boundary_err"] for i in infos),
            "conv_frac": float(np.mean([i["conv_frac"] for i in infos])),
            "mean_newton_iters": float(np.mean(iters)) if iters else float("nan"),
            "zeta": self.model.budget.zeta if self.model.budget.zeta is not None else float("nan"),
            "lr": infos[-1]["lr"] if infos else self.lr(),
            "seconds": time.perf_counter() - t0,
        }

    def evaluate(self, problems: list[Problem], samples: list[LoadedSample] | None = None,
                 split: str = "test_id") -> EvalResult:
        return evaluate(self.model, problems, samples, split, self.epoch, self.lr(), self.solve_cfg)


def evaluate(model: GeoNeW, problems: list[Problem], samples=None, split: str = "test_id", epoch: int = 0,
             lr: float = float("nan"), solve_cfg: SolveConfig | None = None) -> EvalResult:
    """Deterministic evaluation; no parameter updates."""
    t0 = time.perf_counter()
    preds, per = [], []
    for k, prob in enumerate(problems):
        rng = np.random.default_rng(prob.anchor_seed)
        pred = model.predict(prob, rng, solve_cfg)
        preds.append(pred)
        rec = {"name": prob.name, "converged": pred.solve.converged, "iterations": pred.solve.iterations,
               "residual": pred.solve.residual_norm, "zeta": pred.zeta}
        if prob.target is not None:
            rec["eps_l2"] = normalized_l2(pred.u_fine, prob.target) if pred.solve.converged else float("nan")
        if samples is not None:
            s = samples[k].sample
            rec["boundary_err"] = boundary_error(pred.u_fine, s.dirichlet, s.mesh)
        per.append(rec)
    conv = [r["converged"] for r in per]
    errs = [r["eps_l2"] for r in per if r.get("converged") and "eps_l2" in r]
    row = {
        "epoch": epoch,
        "split": split,
        "eps_l2": float(np.mean(errs)) if errs else float("nan"),
        "boundary_err": max((r.get("boundary_err", 0.0) for r in per), default=0.0),
        "conv_frac": float(np.mean(conv)) if conv else float("nan"),
        "mean_newton_iters": float(np.mean([r["iterations"] for r in per])) if per else float("nan"),
        "zeta": model.budget.zeta if model.budget.zeta is not None else float(np.mean([r["zeta"] for r in per])),
        "lr": lr,
        "seconds": time.perf_counter() - t0,
    }
    return EvalResult(row, per, preds)


# ------------------------------------------------------------------ metrics IO


class MetricsWriter:
    """Append-only CSV with a fixed column order."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)
        else:
            with self.path.open(newline="") as fh:
                head = next(csv.reader(fh), None)
            if tuple(head or ()) != METRIC_COLUMNS:
                raise ValueError(f"{self.path}: existing metrics file has a different schema")

    def write(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, float("nan"))) for c in METRIC_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, trainer_or_model, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Write a GNWC checkpoint (parameters, and optimizer state for a trainer)."""
    if isinstance(trainer_or_model, Trainer):
        tr = trainer_or_model
        model, train_cfg = tr.model, tr.cfg
        arrays = dict(model.params)
        arrays.update(tr.opt.state_arrays())
        state = {"step": tr.step, "epoch": tr.epoch, "adam_t": tr.opt.t, "steps_per_epoch": tr.steps_per_epoch}
    else:
        model = trainer_or_model
        arrays = dict(model.params)
        state = {"step": 0, "epoch": 0, "adam_t": 0}
    header = {
        "model": model.cfg.to_dict(),
        "train": train_cfg.to_dict() if train_cfg is not None else None,
        "state": state,
        "budget": model.budget.state() | {"mode": model.budget.mode},
        "seeds": {"model": model.cfg.seed},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a GNWC checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode())
    off = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated at array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw[off:off + 8 * n], dtype="<f8").reshape(shape).copy()
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def load_model(path) -> tuple[GeoNeW, dict, dict]:
    header, arrays = read_checkpoint(path)
    mcfg = ModelConfig.from_dict(header["model"])
    model = GeoNeW(mcfg)
    missing = [k for k in model.params if k not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing parameter {missing[0]!r}")
    model.params.update_values({k: arrays[k] for k in model.params})
    b = header.get("budget", {})
    model.budget.mode = b.get("mode", model.budget.mode)
    model.budget.zeta = b.get("zeta")
    model.budget.n_updates = b.get("n_updates", 0)
    return model, header, arrays


def load_trainer(path) -> Trainer:
    model, header, arrays = load_model(path)
    cfg = TrainConfig.from_dict(header["train"])
    st = header["state"]
    tr = Trainer(cfg, model, st.get("steps_per_epoch", 1))
    b = header["budget"]
    tr.model.budget.zeta = b.get("zeta")
    tr.model.budget.n_updates = b.get("n_updates", 0)
    tr.step, tr.epoch, tr.opt.t = st["step"], st["epoch"], st["adam_t"]
    for k in model.params:
        tr.opt.m[k] = arrays.get(f"adam.m/{k}", tr.opt.m[k])
        tr.opt.v[k] = arrays.get(f"adam.v/{k}", tr.opt.v[k])
    return tr
