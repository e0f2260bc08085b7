"""Structured triangulations of the unit square with an arclength boundary loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """2-D triangulation with an ordered, arclength-parametrized boundary.

    Attributes
    ----------
    nodes : (N, 2) float array
    triangles : (T, 3) int array, counter-clockwise
    boundary_edges : (B, 2) int array, a single closed loop traversed
        counter-clockwise, ``boundary_edges[k, 1] == boundary_edges[k + 1, 0]``
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name, dtype in (("nodes", float), ("triangles", np.int64), ("boundary_edges", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate(self)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Boundary node indices in loop order."""
        return self.boundary_edges[:, 0]

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = signed_areas(self.nodes, self.triangles)
        return self._cache["areas"]

    @property
    def edge_lengths(self) -> np.ndarray:
        a, b = self.boundary_edges.T
        return np.linalg.norm(self.nodes[b] - self.nodes[a], axis=1)

    @property
    def arclength(self) -> np.ndarray:
        """Arclength coordinate of each boundary node (loop order), starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.edge_lengths)[:-1]])

    @property
    def perimeter(self) -> float:
        return float(np.sum(self.edge_lengths))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.nodes, self.triangles, self.boundary_edges):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def signed_areas(nodes, triangles):
    p0, p1, p2 = (nodes[triangles[:, k]] for k in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def validate(mesh: TriMesh) -> None:
    nodes, tris, bedges = mesh.nodes, mesh.triangles, mesh.boundary_edges
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must have shape (N, 2)")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshError("triangles must have shape (T, 3)")
    if tris.min() < 0 or tris.max() >= len(nodes):
        raise MeshError("triangle index out of range")
    areas = signed_areas(nodes, tris)
    if np.any(areas <= 0):
        bad = np.flatnonzero(areas <= 0)
        raise MeshError(f"non-positive signed area in triangles {bad[:5].tolist()}")
    if len(bedges) < 3:
        raise MeshError("boundary loop needs at least 3 edges")
    if np.any(bedges[:, 1] != np.roll(bedges[:, 0], -1)):
        raise MeshError("boundary edges do not form a single closed loop")
    if len(np.unique(bedges[:, 0])) != len(bedges):
        raise MeshError("boundary loop visits a node twice")
    lengths = np.linalg.norm(nodes[bedges[:, 1]] - nodes[bedges[:, 0]], axis=1)
    if np.any(lengths <= 0):
        raise MeshError("zero-length boundary edge")


def build_structured_mesh(n: int) -> TriMesh:
    """Uniform ``n x n`` grid on [0, 1]^2, each cell cut along its lower-left
    to upper-right diagonal."""
    if int(n) != n or n < 1:
        raise MeshError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def idx(i, j):  # column i (x), row j (y)
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))

    loop = (
        [idx(i, 0) for i in range(n)]
        + [idx(n, j) for j in range(n)]
        + [idx(i, n) for i in range(n, 0, -1)]
        + [idx(0, j) for j in range(n, 0, -1)]
    )
    bedges = np.column_stack([loop, np.roll(loop, -1)])
    return TriMesh(nodes, np.asarray(tris, dtype=np.int64), bedges.astype(np.int64))


def boundary_trace_indices(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Boundary node indices (counter-clockwise, loop start first) and their
    arclength coordinates."""
    return mesh.boundary_nodes.copy(), mesh.arclength


def write_mesh(mesh: TriMesh, path) -> None:
    """Text format: ``nodes T triangles B`` header, then node, triangle and
    boundary-loop lines."""
    lines = [f"{mesh.n_nodes} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines += [" ".join(map(str, t)) for t in mesh.triangles.tolist()]
    lines += [f"{a} {b}" for a, b in mesh.boundary_edges.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    tokens = Path(path).read_text().split()
    try:
        nn, nt, nb = (int(tok) for tok in tokens[:3])
    except ValueError as exc:
        raise MeshError(f"bad mesh header in {path}") from exc
    pos = 3
    expected = 3 + 2 * nn + 3 * nt + 2 * nb
    if len(tokens) != expected:
        raise MeshError(f"{path}: expected {expected} tokens, found {len(tokens)}")
    nodes = np.array(tokens[pos:pos + 2 * nn], dtype=float).reshape(nn, 2)
    pos += 2 * nn
    tris = np.array(tokens[pos:pos + 3 * nt], dtype=np.int64).reshape(nt, 3)
    pos += 3 * nt
    bedges = np.array(tokens[pos:pos + 2 * nb], dtype=np.int64).reshape(nb, 2)
    return TriMesh(nodes, tris, bedges)
