"""Command-line entry point.

    geonew generate --config run.json --out data/
    geonew train    --config run.json --out runs/a
    geonew eval     --checkpoint runs/a/model.gnwc --dataset data/manifest.json --split test_ood
    geonew solve    --checkpoint runs/a/model.gnwc --n-sides 5 --out solve/
    geonew features --n-sides 4 --rotate 30
    geonew verify   --checkpoint runs/a/model.gnwc --n-sides 6

A run config is one JSON object with optional sections ``data`` (dataset
generation), ``train`` (training), and keys ``dataset`` (manifest path,
relative to the config file) and ``eval_every`` (epochs).  Unknown keys are
rejected.  Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dt
from . import train as tr
from .feec import assemble
from .geofeat import compute_features
from .linalg import LinAlgError
from .mesh import GeometrySpec, generate_annulus_polygon, load_mesh, save_mesh
from .model import GeoNeW, Problem
from .reduced import build_boundary_rows
from .solver import SolverError

log = logging.getLogger("geonew")

CONFIG_KEYS = {"data", "train", "dataset", "eval_every"}
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def load_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config key {unknown[0]!r}")
    return cfg, path.parent


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))


def _geometry(args) -> tuple:
    """Mesh from ``--mesh`` or from the annulus flags."""
    if getattr(args, "mesh", None):
        return load_mesh(args.mesh), None
    spec = GeometrySpec(n_sides=args.n_sides, poly_radius=args.poly_radius,
                        rotation=math.radians(args.rotation), radial_layers=args.radial_layers,
                        angular_resolution=args.angular_resolution)
    return generate_annulus_polygon(spec), spec


def _dirichlet(mesh, inner: float, outer: float) -> dict:
    out = {}
    for name, val in (("inner", inner), ("outer", outer)):
        if name not in mesh.sidesets:
            raise ConfigError(f"mesh has no {name!r} sideset")
        out[name] = np.full(len(mesh.sidesets[name].nodes), val)
    return out


def _resolve_dataset(args, cfg: dict, base: Path) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    if "dataset" in cfg:
        p = Path(cfg["dataset"])
        return p if p.is_absolute() else base / p
    raise ConfigError("no dataset given (use --dataset or the config key 'dataset')")


def _train_config(cfg: dict, seed) -> tr.TrainConfig:
    tc = tr.TrainConfig.from_dict(cfg.get("train", {}))
    return replace(tc, seed=seed) if seed is not None else tc


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg, _ = load_config(args.config)
    dc = dt.DataConfig.from_dict(cfg.get("data", {}))
    if args.seed is not None:
        dc = replace(dc, seed=args.seed)
    out = Path(args.out or "dataset")
    path = dt.generate_dataset(dc, out, workers=args.workers)
    _write_json(out / "run_config.json", {"data": dc.to_dict()})
    manifest = json.loads(path.read_text())
    counts = {sp: len(ix) for sp, ix in manifest["splits"].items()}
    _print({"manifest": str(path), "counts": counts})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, base = load_config(args.config)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    manifest = _resolve_dataset(args, cfg, base)
    train_s = dt.load_dataset(manifest, "train")
    id_s = dt.load_dataset(manifest, "test_id")
    if not train_s:
        raise ConfigError("dataset has no training samples")
    problems = [tr.to_problem(s) for s in train_s]
    id_problems = [tr.to_problem(s) for s in id_s]
    if args.resume:
        trainer = tr.load_trainer(args.resume)
        tcfg = trainer.cfg
    else:
        tcfg = _train_config(cfg, args.seed)
        trainer = tr.Trainer.create(tcfg, problems)
    provenance = {"train": tcfg.to_dict(), "dataset": str(manifest), "eval_every": cfg.get("eval_every", 0),
                  "resumed_from": args.resume}
    _write_json(out / "run_config.json", provenance)
    writer = tr.MetricsWriter(out / "metrics.csv")
    eval_every = int(cfg.get("eval_every", 0))
    while trainer.epoch < tcfg.epochs:
        # one stream per epoch, so a resumed run replays the uninterrupted one
        rng = np.random.default_rng([tcfg.seed, trainer.epoch])
        row = trainer.train_epoch(problems, rng)
        writer.write(row)
        log.info("epoch %d loss %.4e conv %.2f", row["epoch"], row["loss"], row["conv_frac"])
        last = trainer.epoch == tcfg.epochs
        if id_problems and (last or (eval_every and trainer.epoch % eval_every == 0)):
            writer.write(trainer.evaluate(id_problems, id_s, "test_id").row)
        if tcfg.checkpoint_every and trainer.epoch % tcfg.checkpoint_every == 0:
            tr.save_checkpoint(out / f"ckpt_{trainer.epoch:05d}.gnwc", trainer)
    tr.save_checkpoint(out / "model.gnwc", trainer)
    _print({"checkpoint": str(out / "model.gnwc"), "epochs": trainer.epoch, "steps": trainer.step,
            "skipped_batches": trainer.skipped_batches})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, base = load_config(args.config)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model, header, _ = tr.load_model(args.checkpoint)
    manifest = _resolve_dataset(args, cfg, base)
    split = args.split or "test_id"
    samples = dt.load_dataset(manifest, split)
    problems = [tr.to_problem(s) for s in samples]
    res = tr.evaluate(model, problems, samples, split, header["state"].get("epoch", 0))
    out = Path(args.out or "eval")
    fields = out / "fields"
    fields.mkdir(parents=True, exist_ok=True)
    for s, pred, rec in zip(samples, res.predictions, res.per_sample):
        stem = Path(s.file).stem
        dt.write_gnwd(fields / f"{stem}.pred.gnwd", [("u_pred", pred.u_fine), ("u_true", s.sample.u),
                                                     ("u_reduced", pred.u_reduced)],
                      {"sample": s.file, "split": split, "converged": rec["converged"]})
    tr.MetricsWriter(out / "metrics.csv").write(res.row)
    _write_json(out / f"eval_{split}.json", {"row": res.row, "samples": res.per_sample})
    _print(res.row)
    if res.row["conv_frac"] < 1.0:
        log.warning("%d solves did not converge", sum(not r["converged"] for r in res.per_sample))
    return EXIT_OK


def _model_for(args, prob_features_dim: int, n_fixed: int) -> GeoNeW:
    if args.checkpoint:
        model, _, _ = tr.load_model(args.checkpoint)
        return model
    tcfg = tr.TrainConfig() if args.seed is None else tr.TrainConfig(seed=args.seed)
    return GeoNeW(tr.model_config(tcfg, prob_features_dim, n_fixed))


def cmd_solve(args) -> int:
    mesh, spec = _geometry(args)
    ops = assemble(mesh)
    feats = compute_features(mesh, ops)
    bc = _dirichlet(mesh, args.inner, args.outer)
    bnd = build_boundary_rows(mesh, bc)
    model = _model_for(args, feats.d_in, bnd.n_fixed)
    ref = dt.reference_poisson_solve(mesh, None, bc, ops)[:, None]
    prob = Problem(ops, feats.matrix, bnd, ref, anchor_seed=args.seed or 0, name="solve")
    pred = model.predict(prob)
    out = Path(args.out or "solve")
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out / "mesh.json")
    dt.write_gnwd(out / "solution.gnwd", [("u_pred", pred.u_fine), ("u_reference", ref)],
                  {"mesh": "mesh.json", "spec": spec.to_dict() if spec else None})
    summary = {"converged": pred.solve.converged, "iterations": pred.solve.iterations,
               "residual": pred.solve.residual_norm, "eps_l2": tr.normalized_l2(pred.u_fine, ref),
               "boundary_err": tr.boundary_error(pred.u_fine, bc, mesh), "zeta": pred.zeta,
               "solution": str(out / "solution.gnwd")}
    _print(summary)
    if not pred.solve.converged:
        raise NumericalFailure("Newton solve did not converge")
    return EXIT_OK


def cmd_features(args) -> int:
    mesh, _ = _geometry(args)
    ops = assemble(mesh)
    feats = compute_features(mesh, ops)
    report = {
        "n_nodes": mesh.n_nodes,
        "d_in": feats.d_in,
        "columns": {"hks": feats.hks.shape[1], "hks_grad": feats.hks_grad.shape[1],
                    "harmonic": feats.harmonic.shape[1], "sdf": 1, "labels": feats.labels.shape[1]},
        "times": feats.times,
        "boundary_sdf_max": float(np.abs(feats.sdf[mesh.boundary_nodes()]).max()),
    }
    if args.rotate is not None:
        moved = mesh.transformed(math.radians(args.rotate), (0.37, -1.21))
        other = compute_features(moved, assemble(moved))
        dh = float(np.abs(other.hks - feats.hks).max())
        dc = float(np.abs(other.harmonic - feats.harmonic).max())
        report["rotate_deg"] = args.rotate
        report["hks_max_diff"] = dh
        report["harmonic_max_diff"] = dc
        report["invariant"] = bool(max(dh, dc) <= 1e-9)
    out = Path(args.out or "features")
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "features.npz", matrix=feats.matrix, hks=feats.hks, hks_grad=feats.hks_grad,
             harmonic=feats.harmonic, sdf=feats.sdf, labels=feats.labels, times=feats.times)
    _write_json(out / "features.json", report)
    _print(report)
    if args.rotate is not None and not report["invariant"]:
        raise NumericalFailure("features changed under the rigid transform")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import verify_model

    mesh, _ = _geometry(args)
    ops = assemble(mesh)
    feats = compute_features(mesh, ops)
    bc = _dirichlet(mesh, args.inner, args.outer)
    bnd = build_boundary_rows(mesh, bc)
    model = _model_for(args, feats.d_in, bnd.n_fixed)
    prob = Problem(ops, feats.matrix, bnd, None, anchor_seed=args.seed or 0, name="verify")
    report = verify_model(model, prob, mesh, bc, corrupt_partition=args.inject_fault == "partition")
    if args.out:
        _write_json(Path(args.out) / "verify.json", report)
    _print(report)
    if not report["passed"]:
        log.error("failed checks: %s", ", ".join(report["failed"]))
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _add_geometry(p) -> None:
    p.add_argument("--mesh", help="mesh JSON file (default: generated annulus)")
    p.add_argument("--n-sides", type=int, default=4)
    p.add_argument("--poly-radius", type=float, default=0.5)
    p.add_argument("--rotation", type=float, default=0.0, help="polygon rotation in degrees")
    p.add_argument("--radial-layers", type=int, default=3)
    p.add_argument("--angular-resolution", type=int, default=24)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geonew", description="Geometry-conditioned learned Whitney-form solvers")
    sub = ap.add_subparsers(dest="command", required=True)
    cmds = {}
    for name, help_ in (("generate", "generate a Poly-Poisson dataset"), ("train", "train a model"),
                        ("eval", "evaluate a checkpoint on a split"), ("solve", "solve one geometry"),
                        ("features", "dump geometry features"), ("verify", "run structural checks")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        cmds[name] = p
    for name in ("train", "eval"):
        cmds[name].add_argument("--dataset", help="manifest.json (overrides the config)")
    cmds["train"].add_argument("--resume", help="checkpoint to continue from")
    cmds["eval"].add_argument("--checkpoint")
    cmds["eval"].add_argument("--split", choices=dt.SPLITS, default="test_id")
    for name in ("solve", "verify", "features"):
        _add_geometry(cmds[name])
    for name in ("solve", "verify"):
        cmds[name].add_argument("--checkpoint", help="trained model (default: fresh initialization)")
        cmds[name].add_argument("--inner", type=float, default=1.0, help="Dirichlet value on the cutout")
        cmds[name].add_argument("--outer", type=float, default=0.0, help="Dirichlet value on the circle")
    cmds["features"].add_argument("--rotate", type=float, help="also check invariance under this rotation (deg)")
    cmds["verify"].add_argument("--inject-fault", choices=("none", "partition"), default="none")
    return ap


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "solve": cmd_solve,
            "features": cmd_features, "verify": cmd_verify}


def _setup_logging() -> None:
    level = os.environ.get("GEONEW_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (NumericalFailure, LinAlgError, SolverError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
