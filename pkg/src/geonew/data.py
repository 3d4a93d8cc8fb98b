"""Poly-Poisson dataset: annuli with polygonal cutouts, P1 reference solves.

On disk a dataset is a directory holding ``manifest.json``, one mesh JSON and
one ``GNWD`` sample file per sample, and a ``cache/`` of geometry features.

GNWD layout (little endian)::

    b"GNWD" | u32 version | u32 header_len | header JSON (utf-8) | f64 arrays

The header lists the arrays (name, shape) in storage order.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .feec import FineOperators, assemble
from .geofeat import GeoFeatures, compute_features
from .mesh import GeometrySpec, Mesh, generate_annulus_polygon, load_mesh, mesh_to_json

log = logging.getLogger(__name__)

MAGIC = b"GNWD"
FORMAT_VERSION = 1
SPLITS = ("train", "test_id", "test_ood")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- reference


def reference_poisson_solve(mesh: Mesh, f=None, dirichlet: dict | None = None, ops: FineOperators | None = None,
                            rtol: float = 1e-10) -> np.ndarray:
    """P1 Galerkin solution of ``-lap u = f`` with Dirichlet data on every boundary node.

    ``f`` holds nodal values (interpolated forcing) or is ``None`` for zero.
    ``dirichlet`` maps sideset name to nodal values; together the sidesets
    must cover the boundary.
    """
    ops = assemble(mesh) if ops is None else ops
    n = mesh.n_nodes
    fixed = np.zeros(n, dtype=bool)
    u = np.zeros(n)
    for name, vals in (dirichlet or {}).items():
        if name not in mesh.sidesets:
            raise DataError(f"unknown sideset {name!r}")
        nodes = mesh.sidesets[name].nodes
        u[nodes] = np.broadcast_to(np.asarray(vals, dtype=np.float64), nodes.shape)
        fixed[nodes] = True
    missing = np.setdiff1d(mesh.boundary_nodes(), np.flatnonzero(fixed))
    if missing.size:
        raise DataError(f"{missing.size} boundary nodes have no Dirichlet data (first: {missing[0]})")
    free = np.flatnonzero(~fixed)
    if free.size == 0:
        raise DataError("mesh has no interior nodes to solve for")
    fv = np.zeros(n) if f is None else np.broadcast_to(np.asarray(f, dtype=np.float64), (n,))
    rhs_full = ops.m0 @ fv - ops.k @ u
    k_ff = ops.k[free][:, free].tocsc()
    u[free] = spla.spsolve(k_ff, rhs_full[free])
    res = ops.k @ u - ops.m0 @ fv
    scale = max(1.0, float(np.abs(rhs_full[free]).max()), float(np.abs(u).max()))
    r = float(np.abs(res[free]).max())
    if not np.isfinite(r) or r > rtol * scale:
        raise DataError(f"reference solve residual {r:.3e} exceeds tolerance")
    return u


def reference_residual(mesh: Mesh, u: np.ndarray, f=None, ops: FineOperators | None = None) -> float:
    """Max interior residual of ``K u - M f`` for a stored solution."""
    ops = assemble(mesh) if ops is None else ops
    fv = np.zeros(mesh.n_nodes) if f is None else np.asarray(f, dtype=np.float64)
    res = ops.k @ np.asarray(u, dtype=np.float64) - ops.m0 @ fv
    mask = np.ones(mesh.n_nodes, dtype=bool)
    mask[mesh.boundary_nodes()] = False
    return float(np.abs(res[mask]).max()) if mask.any() else 0.0


def l2_error(mesh: Mesh, u_h: np.ndarray, u_exact: np.ndarray, ops: FineOperators | None = None) -> float:
    """Mass-weighted discrete L2 norm of ``u_h - u_exact`` (nodal values)."""
    ops = assemble(mesh) if ops is None else ops
    e = np.asarray(u_h) - np.asarray(u_exact)
    return math.sqrt(float(e @ (ops.m0 @ e)))


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_test_id: int = 50
    n_test_ood: int = 50
    train_sides: tuple = (3, 4)
    ood_sides: tuple = (6, 8)
    poly_radius: tuple = (0.4, 0.6)
    outer_radius: float = 1.0
    angular_resolution: int = 24
    radial_layers: int = 3
    inner_value: float = 1.0
    outer_value: float = 0.0
    random_amplitude: bool = False
    amplitude_range: tuple = (0.5, 2.0)
    forcing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_test_id", "n_test_ood"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if any(n >= 5 for n in self.train_sides):
            raise DataError(f"training polygons must have fewer than 5 sides, got {list(self.train_sides)}")
        if any(n <= 5 for n in self.ood_sides):
            raise DataError(f"OOD polygons must have more than 5 sides, got {list(self.ood_sides)}")
        if any(n < 3 for n in self.train_sides):
            raise DataError("polygons need at least 3 sides")
        lo, hi = self.poly_radius
        if not 0 < lo <= hi < self.outer_radius:
            raise DataError(f"poly_radius range {self.poly_radius} must satisfy 0 < lo <= hi < outer_radius")
        a, b = self.amplitude_range
        if not 0 < a <= b:
            raise DataError(f"amplitude_range {self.amplitude_range} must be positive and ordered")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown data config key {unknown[0]!r}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class Sample:
    spec: GeometrySpec
    mesh: Mesh
    dirichlet: dict  # sideset -> nodal values
    u: np.ndarray  # N x F
    f: np.ndarray  # N
    split: str = ""
    mu: np.ndarray | None = None


# ---------------------------------------------------------------- generation


def _sample_plan(cfg: DataConfig) -> list[tuple[str, int, int]]:
    """(split, index within split, global index) in manifest order."""
    plan = []
    g = 0
    for split, count in zip(SPLITS, (cfg.n_train, cfg.n_test_id, cfg.n_test_ood)):
        for i in range(count):
            plan.append((split, i, g))
            g += 1
    return plan


def make_sample(cfg: DataConfig, split: str, index: int) -> Sample:
    """Deterministic sample from ``(seed, split, index)``."""
    rng = np.random.default_rng([cfg.seed, SPLITS.index(split), index])
    sides = cfg.ood_sides if split == "test_ood" else cfg.train_sides
    n_sides = int(rng.choice(sides))
    spec = GeometrySpec(
        n_sides=n_sides,
        poly_radius=float(rng.uniform(*cfg.poly_radius)),
        outer_radius=cfg.outer_radius,
        rotation=float(rng.uniform(0.0, 2 * math.pi / n_sides)),
        radial_layers=cfg.radial_layers,
        angular_resolution=cfg.angular_resolution,
        seed=int(rng.integers(2**31)),
    )
    mesh = generate_annulus_polygon(spec)
    amp = float(rng.uniform(*cfg.amplitude_range)) if cfg.random_amplitude else 1.0
    dirichlet = {
        "inner": np.full(len(mesh.sidesets["inner"].nodes), amp * cfg.inner_value),
        "outer": np.full(len(mesh.sidesets["outer"].nodes), amp * cfg.outer_value),
    }
    f = np.full(mesh.n_nodes, cfg.forcing)
    u = reference_poisson_solve(mesh, f, dirichlet)
    return Sample(spec, mesh, dirichlet, u[:, None], f, split)


def _make_sample_job(args):
    cfg_dict, split, index = args
    return make_sample(DataConfig.from_dict(cfg_dict), split, index)


def write_gnwd(path, arrays: list[tuple[str, np.ndarray]], meta: dict) -> None:
    """Write named float64 arrays with a JSON header holding ``meta``."""
    header = dict(meta)
    header["arrays"] = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays]
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def write_sample(path, sample: Sample, mesh_file: str) -> None:
    arrays = [("u", sample.u), ("f", sample.f)]
    for name in sorted(sample.dirichlet):
        arrays.append((f"dirichlet/{name}", np.asarray(sample.dirichlet[name])))
    if sample.mu is not None:
        arrays.append(("mu", np.atleast_1d(sample.mu)))
    meta = {"fields": ["u"], "mesh": mesh_file, "spec": sample.spec.to_dict(), "split": sample.split}
    write_gnwd(path, arrays, meta)


def read_sample_file(path) -> tuple[dict, dict]:
    """Header and arrays of a GNWD file."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a GNWD file (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from exc
    off = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def generate_dataset(cfg: DataConfig, out_dir, workers: int = 1) -> Path:
    """Write all samples and the manifest; returns the manifest path.

    Output bytes depend only on ``cfg`` (not on ``workers``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = _sample_plan(cfg)
    jobs = [(cfg.to_dict(), split, i) for split, i, _ in plan]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            samples = list(ex.map(_make_sample_job, jobs, chunksize=4))
    else:
        samples = [_make_sample_job(j) for j in jobs]
    entries = []
    for (split, i, g), s in zip(plan, samples):
        stem = f"{split}_{i:04d}"
        mesh_file = f"{stem}.mesh.json"
        sample_file = f"{stem}.gnwd"
        (out / mesh_file).write_text(mesh_to_json(s.mesh))
        write_sample(out / sample_file, s, mesh_file)
        entries.append({
            "file": sample_file,
            "mesh": mesh_file,
            "split": split,
            "n_sides": s.spec.n_sides,
            "sha256": hashlib.sha256((out / sample_file).read_bytes()).hexdigest(),
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "samples": entries,
        "splits": {sp: [k for k, e in enumerate(entries) if e["split"] == sp] for sp in SPLITS},
    }
    validate_manifest(manifest)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def validate_manifest(manifest: dict) -> None:
    for key in ("format_version", "samples", "splits"):
        if key not in manifest:
            raise DataError(f"manifest lacks {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported manifest version {manifest['format_version']}")
    seen = set()
    for sp, idx in manifest["splits"].items():
        if sp not in SPLITS:
            raise DataError(f"unknown split {sp!r}")
        overlap = seen.intersection(idx)
        if overlap:
            raise DataError(f"split {sp!r} overlaps another split at sample {min(overlap)}")
        seen.update(idx)
    for e in manifest["samples"]:
        if e["split"] == "train" and e["n_sides"] >= 5:
            raise DataError(f"training sample {e['file']} has {e['n_sides']} sides (must be < 5)")
        if e["split"] == "test_ood" and e["n_sides"] <= 5:
            raise DataError(f"OOD sample {e['file']} has {e['n_sides']} sides (must be > 5)")


# ---------------------------------------------------------------- loading


@dataclass
class LoadedSample:
    sample: Sample
    ops: FineOperators
    features: GeoFeatures
    index: int
    file: str


def feature_key(mesh: Mesh, settings: dict) -> str:
    h = hashlib.sha256(mesh_to_json(mesh).encode())
    h.update(json.dumps(settings, sort_keys=True).encode())
    return h.hexdigest()


_FEATURE_FIELDS = ("hks", "hks_grad", "harmonic", "sdf", "labels", "times", "matrix")


def _payload_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for k in _FEATURE_FIELDS:
        a = np.ascontiguousarray(arrays[k], dtype="<f8")
        h.update(k.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def cached_features(mesh: Mesh, ops: FineOperators, cache_dir, settings: dict | None = None) -> GeoFeatures:
    """Features from ``cache_dir`` keyed by mesh content; recomputed on a miss or a corrupt entry."""
    settings = settings or {}
    key = feature_key(mesh, settings)
    path = None if cache_dir is None else Path(cache_dir) / f"{key}.npz"
    if path is not None and path.exists():
        try:
            with np.load(path, allow_pickle=False) as z:
                arrays = {k: z[k] for k in _FEATURE_FIELDS}
                stored = str(z["digest"])
            if stored == _payload_digest(arrays):
                return GeoFeatures(**arrays)
            log.warning("feature cache %s failed its hash check; recomputing", path.name)
        except (OSError, KeyError, ValueError) as exc:
            log.warning("feature cache %s unreadable (%s); recomputing", path.name, exc)
    feats = compute_features(mesh, ops, **settings)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {k: getattr(feats, k) for k in _FEATURE_FIELDS}
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, digest=np.array(_payload_digest(arrays)), **arrays)
        os.replace(tmp, path)
    return feats


def load_sample(root: Path, entry: dict) -> Sample:
    header, arrays = read_sample_file(root / entry["file"])
    mesh = load_mesh(root / header["mesh"])
    spec = GeometrySpec(**header["spec"])
    dirichlet = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("dirichlet/")}
    return Sample(spec, mesh, dirichlet, arrays["u"], arrays["f"], header["split"], arrays.get("mu"))


def load_dataset(manifest_path, split: str | None = None, cache_dir=None, verify: bool = True,
                 feature_settings: dict | None = None, check_hash: bool = True) -> list[LoadedSample]:
    """Samples in manifest order with fine operators and cached features."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    validate_manifest(manifest)
    if split is not None and split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")
    root = manifest_path.parent
    cache_dir = root / "cache" if cache_dir is None else cache_dir
    out = []
    for k, entry in enumerate(manifest["samples"]):
        if split is not None and entry["split"] != split:
            continue
        if check_hash:
            digest = hashlib.sha256((root / entry["file"]).read_bytes()).hexdigest()
            if digest != entry["sha256"]:
                raise DataError(f"{entry['file']}: content hash does not match the manifest")
        s = load_sample(root, entry)
        ops = assemble(s.mesh)
        if verify:
            r = reference_residual(s.mesh, s.u[:, 0], s.f, ops)
            if r > 1e-8:
                raise DataError(f"{entry['file']}: stored solution residual {r:.3e} exceeds 1e-8")
        feats = cached_features(s.mesh, ops, cache_dir, feature_settings)
        out.append(LoadedSample(s, ops, feats, k, entry["file"]))
    return out
