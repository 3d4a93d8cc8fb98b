"""Simplicial 2D meshes with labeled boundary sidesets.

Two structured generators are provided: the annulus between a regular polygon
and a circle (the Poly-Poisson geometry family) and an axis-aligned rectangle
used for verification problems.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# One-hot vocabulary for boundary types; the index is the one-hot position.
LABELS = ("inner", "outer", "wall", "inlet", "outlet")
N_LABELS = len(LABELS)


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Sideset:
    label: int
    nodes: np.ndarray


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    sidesets: dict[str, Sideset] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        nodes.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        ss = {}
        for name, s in self.sidesets.items():
            arr = np.asarray(s.nodes, dtype=np.int64)
            arr.setflags(write=False)
            ss[name] = Sideset(int(s.label), arr)
        object.__setattr__(self, "sidesets", ss)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def boundary_nodes(self) -> np.ndarray:
        e = boundary_edges(self)[0]
        return np.unique(e.ravel())

    def labels_onehot(self) -> np.ndarray:
        out = np.zeros((self.n_nodes, N_LABELS))
        for s in self.sidesets.values():
            out[s.nodes, s.label] = 1.0
        return out

    def transformed(self, angle: float = 0.0, shift=(0.0, 0.0)) -> "Mesh":
        """Rigidly rotated (radians, about the origin) and translated copy."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        return Mesh(self.nodes @ rot.T + np.asarray(shift, dtype=float), self.triangles, self.sidesets)

    def validate(self) -> None:
        n = self.n_nodes
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError(f"nodes must have shape (N, 2), got {self.nodes.shape}")
        if not np.all(np.isfinite(self.nodes)):
            raise MeshError("node coordinates must be finite")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError(f"triangles must have shape (T, 3), got {self.triangles.shape}")
        bad = np.argwhere((self.triangles < 0) | (self.triangles >= n))
        if bad.size:
            t = int(bad[0, 0])
            raise MeshError(f"triangle {t} references node {int(self.triangles[t, bad[0, 1]])} but there are {n} nodes")
        areas = self.signed_areas()
        if np.any(areas <= 0):
            t = int(np.argmin(areas))
            raise MeshError(f"triangle {t} has non-positive signed area {areas[t]:.3e}")
        bnodes = set(self.boundary_nodes().tolist())
        seen: dict[int, str] = {}
        for name, s in self.sidesets.items():
            if not 0 <= s.label < N_LABELS:
                raise MeshError(f"sideset {name!r} has label {s.label} outside [0, {N_LABELS})")
            for v in s.nodes.tolist():
                if v in seen:
                    raise MeshError(f"sidesets {seen[v]!r} and {name!r} overlap at node {v}")
                if v not in bnodes:
                    raise MeshError(f"sideset {name!r} contains non-boundary node {v}")
                seen[v] = name
        missing = bnodes - set(seen)
        if self.sidesets and missing:
            raise MeshError(f"boundary nodes not covered by any sideset: {sorted(missing)[:10]}")


def edges_of(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges ``(a, b)`` with ``a < b`` and the per-edge triangle count."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def boundary_edges(mesh: Mesh) -> tuple[np.ndarray, list[str | None]]:
    """Boundary edges oriented with the domain on their left.

    Outer loops run counterclockwise and holes clockwise.  Each edge is
    labeled by the sideset of its start node (``None`` when unlabeled).
    """
    uniq, counts = edges_of(mesh.triangles)
    if np.any(counts > 2):
        a, b = uniq[np.argmax(counts)]
        raise MeshError(f"non-manifold edge ({a}, {b}) shared by {counts.max()} triangles")
    single = {tuple(e) for e in uniq[counts == 1].tolist()}
    out = []
    for tri in mesh.triangles.tolist():
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            if (min(a, b), max(a, b)) in single:
                out.append((a, b))
    out.sort()
    owner = {}
    for name, s in mesh.sidesets.items():
        for v in s.nodes.tolist():
            owner[v] = name
    edges = np.array(out, dtype=np.int64).reshape(-1, 2)
    return edges, [owner.get(a) for a, _ in out]


def boundary_loops(mesh: Mesh) -> list[list[int]]:
    """Closed node loops traced along the oriented boundary edges."""
    edges, _ = boundary_edges(mesh)
    nxt = {}
    for a, b in edges.tolist():
        if a in nxt:
            raise MeshError(f"boundary node {a} has two outgoing boundary edges")
        nxt[a] = b
    loops = []
    remaining = set(nxt)
    while remaining:
        start = min(remaining)
        loop = [start]
        remaining.discard(start)
        v = nxt[start]
        while v != start:
            if v not in remaining:
                raise MeshError(f"boundary loop starting at {start} does not close")
            loop.append(v)
            remaining.discard(v)
            v = nxt[v]
        loops.append(loop)
    return loops


def min_angle_deg(mesh: Mesh) -> float:
    p = mesh.nodes[mesh.triangles]
    worst = 180.0
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        worst = min(worst, float(np.degrees(np.arccos(np.clip(cosang, -1, 1))).min()))
    return worst


@dataclass(frozen=True)
class GeometrySpec:
    n_sides: int
    poly_radius: float = 0.5
    outer_radius: float = 1.0
    rotation: float = 0.0
    radial_layers: int = 3
    angular_resolution: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.n_sides < 3:
            raise MeshError(f"n_sides must be >= 3, got {self.n_sides}")
        if not 0 < self.poly_radius < self.outer_radius:
            raise MeshError(f"need 0 < poly_radius < outer_radius, got {self.poly_radius}, {self.outer_radius}")
        if self.radial_layers < 1:
            raise MeshError(f"radial_layers must be >= 1, got {self.radial_layers}")
        if self.angular_resolution < 3:
            raise MeshError(f"angular_resolution must be >= 3, got {self.angular_resolution}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def polygon_radius(theta, n_sides: int, radius: float, rotation: float = 0.0):
    """Distance from the center to a regular n-gon with a vertex at ``rotation``."""
    sector = 2 * math.pi / n_sides
    phi = np.mod(np.asarray(theta) - rotation, sector)
    return radius * math.cos(math.pi / n_sides) / np.cos(phi - math.pi / n_sides)


def _tri_min_angle(p0, p1, p2) -> float:
    pts = (p0, p1, p2)
    worst = math.pi
    for k in range(3):
        u = pts[(k + 1) % 3] - pts[k]
        v = pts[(k + 2) % 3] - pts[k]
        c = float(u @ v) / (float(np.hypot(*u)) * float(np.hypot(*v)))
        worst = min(worst, math.acos(max(-1.0, min(1.0, c))))
    return worst


def _orient(nodes, tri):
    a, b, c = tri
    e1 = nodes[b] - nodes[a]
    e2 = nodes[c] - nodes[a]
    return (a, b, c) if e1[0] * e2[1] - e1[1] * e2[0] > 0 else (a, c, b)


def generate_annulus_polygon(spec: GeometrySpec) -> Mesh:
    """Layered mesh between a regular polygon and the enclosing circle.

    Node ``l * res + j`` sits at angle ``rotation + 2 pi j / res`` on layer
    ``l``, interpolated radially between the polygon (``l = 0``) and the circle
    (``l = radial_layers``).  Each quad is split along the diagonal giving the
    larger minimum angle.
    """
    res, layers = spec.angular_resolution, spec.radial_layers
    theta = spec.rotation + 2 * math.pi * np.arange(res) / res
    r_in = polygon_radius(theta, spec.n_sides, spec.poly_radius, spec.rotation)
    nodes = np.empty(((layers + 1) * res, 2))
    for l in range(layers + 1):
        s = l / layers
        r = (1 - s) * r_in + s * spec.outer_radius
        nodes[l * res:(l + 1) * res, 0] = r * np.cos(theta)
        nodes[l * res:(l + 1) * res, 1] = r * np.sin(theta)
    tris = []
    for l in range(layers):
        for j in range(res):
            a = l * res + j
            b = l * res + (j + 1) % res
            c = (l + 1) * res + (j + 1) % res
            d = (l + 1) * res + j
            split1 = min(_tri_min_angle(nodes[a], nodes[b], nodes[c]), _tri_min_angle(nodes[a], nodes[c], nodes[d]))
            split2 = min(_tri_min_angle(nodes[a], nodes[b], nodes[d]), _tri_min_angle(nodes[b], nodes[c], nodes[d]))
            if split1 >= split2 - 1e-12:
                tris += [_orient(nodes, (a, b, c)), _orient(nodes, (a, c, d))]
            else:
                tris += [_orient(nodes, (a, b, d)), _orient(nodes, (b, c, d))]
    sidesets = {
        "inner": Sideset(LABELS.index("inner"), np.arange(res)),
        "outer": Sideset(LABELS.index("outer"), np.arange(layers * res, (layers + 1) * res)),
    }
    mesh = Mesh(nodes, np.array(tris), sidesets)
    areas = mesh.signed_areas()
    bbox = np.ptp(nodes, axis=0).prod()
    if np.any(areas <= 1e-14 * bbox):
        raise MeshError(f"degenerate triangles for spec {spec} (min area {areas.min():.3e})")
    mesh.validate()
    return mesh


def generate_rectangle(nx: int, ny: int, width: float = 1.0, height: float = 1.0, origin=(0.0, 0.0)) -> Mesh:
    """Structured rectangle, each cell split along its lower-left/upper-right diagonal.

    Sidesets: ``inlet`` (x = x0, corners included), ``outlet`` (x = x0 + width,
    corners included) and ``wall`` (remaining top and bottom nodes).
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"need nx, ny >= 1, got {nx}, {ny}")
    xs = origin[0] + width * np.arange(nx + 1) / nx
    ys = origin[1] + height * np.arange(ny + 1) / ny
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def idx(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            tris += [(a, b, c), (a, c, d)]
    left = [idx(0, j) for j in range(ny + 1)]
    right = [idx(nx, j) for j in range(ny + 1)]
    wall = [idx(i, 0) for i in range(1, nx)] + [idx(i, ny) for i in range(1, nx)]
    sidesets = {
        "inlet": Sideset(LABELS.index("inlet"), np.array(left)),
        "outlet": Sideset(LABELS.index("outlet"), np.array(right)),
    }
    if wall:
        sidesets["wall"] = Sideset(LABELS.index("wall"), np.array(sorted(wall)))
    mesh = Mesh(nodes, np.array(tris), sidesets)
    mesh.validate()
    return mesh


def mesh_to_json(mesh: Mesh) -> str:
    nodes = ",".join(f"[{x:.17g},{y:.17g}]" for x, y in mesh.nodes.tolist())
    tris = ",".join(f"[{a},{b},{c}]" for a, b, c in mesh.triangles.tolist())
    ss = ",".join(
        f'{json.dumps(name)}:{{"label":{s.label},"nodes":[{",".join(map(str, s.nodes.tolist()))}]}}'
        for name, s in sorted(mesh.sidesets.items())
    )
    return f'{{"nodes":[{nodes}],"triangles":[{tris}],"sidesets":{{{ss}}}}}\n'


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(mesh_to_json(mesh))


def mesh_from_dict(data: dict) -> Mesh:
    for key in ("nodes", "triangles", "sidesets"):
        if key not in data:
            raise MeshError(f"mesh file is missing field {key!r}")
    try:
        nodes = np.array(data["nodes"], dtype=np.float64).reshape(-1, 2)
    except (ValueError, TypeError) as exc:
        raise MeshError(f"field 'nodes': expected list of [x, y] pairs ({exc})") from None
    try:
        tris = np.array(data["triangles"], dtype=np.int64).reshape(-1, 3)
    except (ValueError, TypeError) as exc:
        raise MeshError(f"field 'triangles': expected list of [i, j, k] triples ({exc})") from None
    sidesets = {}
    for name, s in data["sidesets"].items():
        if not isinstance(s, dict) or "label" not in s or "nodes" not in s:
            raise MeshError(f"sideset {name!r}: expected object with 'label' and 'nodes'")
        sidesets[name] = Sideset(int(s["label"]), np.array(s["nodes"], dtype=np.int64))
    mesh = Mesh(nodes, tris, sidesets)
    mesh.validate()
    return mesh


def load_mesh(path) -> Mesh:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return mesh_from_dict(data)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None
