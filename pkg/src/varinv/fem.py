"""P1/P0 finite element operators on a :class:`~varinv.mesh.TriMesh`.

Fields are nodal P1 vectors; conductivities are per-triangle P0 vectors.
Every volume integrand used by the functionals is piecewise constant, so
element sums below are exact integrals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .mesh import MeshError, TriMesh


@dataclass(frozen=True)
class ElementGradients:
    """Constant hat-function gradients per triangle.

    ``grads[t, k]`` is the gradient of the hat function of local vertex ``k``
    of triangle ``t``.
    """

    grads: np.ndarray  # (T, 3, 2)
    areas: np.ndarray  # (T,)
    triangles: np.ndarray  # (T, 3)

    def of(self, u: np.ndarray) -> np.ndarray:
        """Element gradients (T, 2) of the nodal field ``u``."""
        return np.einsum("tk,tkd->td", u[self.triangles], self.grads)

    def rot_of(self, u: np.ndarray) -> np.ndarray:
        """Rotated gradients ``(-d2 u, d1 u)`` per element."""
        return rot(self.of(u))

    def scatter(self, elem_vec: np.ndarray, n_nodes: int) -> np.ndarray:
        """Adjoint of :meth:`of`: maps per-element 2-vectors ``w`` to the nodal
        vector ``a -> sum_T w_T . grad h_a``."""
        contrib = np.einsum("td,tkd->tk", elem_vec, self.grads)
        return np.bincount(self.triangles.ravel(), contrib.ravel(), minlength=n_nodes)

    def rot_scatter(self, elem_vec: np.ndarray, n_nodes: int) -> np.ndarray:
        """Adjoint of :meth:`rot_of`."""
        # rot(g) . w == g . rot^T(w) with rot^T(w) = (w2, -w1)
        return self.scatter(np.column_stack([elem_vec[:, 1], -elem_vec[:, 0]]), n_nodes)


def rot(g: np.ndarray) -> np.ndarray:
    """2-d rotation ``(g1, g2) -> (-g2, g1)`` on the last axis."""
    out = np.empty_like(g)
    out[..., 0] = -g[..., 1]
    out[..., 1] = g[..., 0]
    return out


def p1_gradients(mesh: TriMesh) -> ElementGradients:
    if "grads" in mesh._cache:
        return mesh._cache["grads"]
    tri = mesh.triangles
    p = mesh.nodes[tri]  # (T, 3, 2)
    area = mesh.areas
    if np.any(area <= 0):
        raise MeshError("degenerate triangle")
    # grad of hat k is rot90 of the opposite edge / (2 |T|)
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    edges = np.stack([e0, e1, e2], axis=1)
    grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    out = ElementGradients(grads, area, tri)
    mesh._cache["grads"] = out
    return out


def _assemble(mesh, local):  # local: (T, 3, 3)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def weighted_stiffness(mesh: TriMesh, sigma) -> sp.csr_matrix:
    """``K[a, b] = sum_T sigma_T |T| grad h_a . grad h_b``."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (mesh.n_triangles,))
    if np.any(~(sigma > 0)):
        raise ValueError("stiffness weights must be strictly positive")
    eg = p1_gradients(mesh)
    local = np.einsum("t,tkd,tld->tkl", sigma * eg.areas, eg.grads, eg.grads)
    return _assemble(mesh, local)


def mass_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix."""
    if "mass" not in mesh._cache:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = mesh.areas[:, None, None] * ref[None]
        mesh._cache["mass"] = _assemble(mesh, local)
    return mesh._cache["mass"]


def cross_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """``B[a, b] = sum_T |T| grad h_a . rot grad h_b`` so that
    ``phi @ B @ psi == int grad(phi) . rot grad(psi)``."""
    if "cross" not in mesh._cache:
        eg = p1_gradients(mesh)
        local = np.einsum("t,tkd,tld->tkl", eg.areas, eg.grads, rot(eg.grads))
        mesh._cache["cross"] = _assemble(mesh, local)
    return mesh._cache["cross"]


def boundary_weights(mesh: TriMesh) -> np.ndarray:
    """Trapezoid weights of the boundary nodes (loop order)."""
    h = mesh.edge_lengths
    return 0.5 * (h + np.roll(h, 1))


def boundary_integral(mesh: TriMesh, f) -> float:
    """Trapezoid rule along the boundary loop; ``f`` is given on boundary
    nodes in loop order. Exact for edgewise-linear integrands."""
    f = np.asarray(f, dtype=float)
    if f.shape != (len(mesh.boundary_edges),):
        raise ValueError("boundary vector has wrong length")
    return float(boundary_weights(mesh) @ f)


def p0_to_p1(mesh: TriMesh) -> sp.csr_matrix:
    """Area-weighted averaging of per-triangle values onto nodes."""
    if "p0p1" not in mesh._cache:
        tri = mesh.triangles
        rows = tri.ravel()
        cols = np.repeat(np.arange(mesh.n_triangles), 3)
        vals = np.repeat(mesh.areas, 3)
        S = sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_triangles))
        w = np.asarray(S.sum(axis=1)).ravel()
        mesh._cache["p0p1"] = sp.diags(1.0 / w) @ S
    return mesh._cache["p0p1"]


@dataclass(frozen=True)
class FractionalNormOperator:
    """Spectral ``H^s`` norm: ``sum_k (1 + lam_k)^s <u, v_k>_M^2`` over the
    generalized eigenpairs of the P1 stiffness/mass pencil."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # M-orthonormal columns
    s: float
    gram: np.ndarray  # dense weighting matrix G with norm^2 = u G u

    @property
    def size(self) -> int:
        return self.gram.shape[0]

    def norm_sq(self, u) -> float:
        return fractional_norm(self, u)

    def gradient(self, u) -> np.ndarray:
        u = self._check(u)
        return 2.0 * (self.gram @ u)

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise ValueError(f"expected nodal vector of length {self.size}, got {u.shape}")
        return u


def _eigenpairs(mesh: TriMesh):
    if "eig" not in mesh._cache:
        K = weighted_stiffness(mesh, 1.0).toarray()
        M = mass_matrix(mesh).toarray()
        lam, V = scipy.linalg.eigh(K, M)
        mesh._cache["eig"] = (np.clip(lam, 0.0, None), V, M)
    return mesh._cache["eig"]


def fractional_operator(mesh: TriMesh, s: float) -> FractionalNormOperator:
    key = ("frac", float(s))
    if key not in mesh._cache:
        lam, V, M = _eigenpairs(mesh)
        MV = M @ V
        G = (MV * (1.0 + lam) ** s) @ MV.T
        G = 0.5 * (G + G.T)
        mesh._cache[key] = FractionalNormOperator(lam, V, float(s), G)
    return mesh._cache[key]


def fractional_norm(op: FractionalNormOperator, u) -> float:
    u = op._check(u)
    return float(max(u @ op.gram @ u, 0.0))
