"""Two-dimensional EIT in potential/stream-function form.

Unknowns are a P0 conductivity ``sigma`` and, for each of ``I`` experiments,
P1 fields ``phi_i`` (electric potential) and ``psi_i`` (stream function of the
current density). The model residual on each triangle is

    A_{T,i} = sqrt(sigma_T) grad(phi_i) - rot grad(psi_i) / sqrt(sigma_T)

and data are boundary traces ``(upsilon_i, gamma_i)`` where ``gamma_i`` is the
integrated boundary current, ``gamma_i(s) = -int_0^s j_i``.

Sign conventions: the boundary loop runs counter-clockwise, the current is
``j = sigma d(phi)/d(nu)`` and ``psi = gamma`` on the boundary. With these,
``rot grad(psi) . nu = j`` and integration by parts reads
``sum_T |T| grad(phi) . rot grad(psi) = +int j * upsilon ds``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .mesh import TriMesh


class IncompatibleCurrentError(ValueError):
    pass


@dataclass(frozen=True)
class ConductivityField:
    values: np.ndarray
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower > 0:
            raise ValueError(f"lower bound must be positive, got {self.lower}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def center(self) -> float:
        return 0.5 * (self.upper + self.lower)

    @property
    def radius(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def ivanov_value(self) -> float:
        """``||sigma - (upper + lower)/2||_inf``; admissible iff ``<= radius``."""
        return float(np.max(np.abs(self.values - self.center)))

    def clip(self) -> "ConductivityField":
        return replace(self, values=np.clip(self.values, self.lower, self.upper))


@dataclass
class StateEnsemble:
    """Nodal fields, ``phi`` and ``psi`` of shape (I, N)."""

    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        if self.phi.shape != self.psi.shape:
            raise ValueError("phi and psi must have equal shapes")

    @property
    def n_experiments(self) -> int:
        return self.phi.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.phi.ravel(), self.psi.ravel()])

    @classmethod
    def from_flat(cls, u, n_experiments) -> "StateEnsemble":
        u = np.asarray(u, dtype=float)
        half = u.size // 2
        return cls(u[:half].reshape(n_experiments, -1), u[half:].reshape(n_experiments, -1))

    def copy(self) -> "StateEnsemble":
        return StateEnsemble(self.phi.copy(), self.psi.copy())


@dataclass
class BoundaryRecord:
    """Boundary data in loop order; each array has shape (I, B)."""

    upsilon: np.ndarray
    gamma: np.ndarray
    current: np.ndarray
    delta: float = 0.0
    tau: float = 1.5
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("upsilon", "gamma", "current"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.delta < 0:
            raise ValueError("noise level must be nonnegative")

    @property
    def n_experiments(self) -> int:
        return self.upsilon.shape[0]

    def to_json(self) -> str:
        payload = {
            "upsilon": self.upsilon.tolist(),
            "gamma": self.gamma.tolist(),
            "current": self.current.tolist(),
            "delta": self.delta,
            "tau": self.tau,
            "seed": self.seed,
        }
        if self.meta:
            payload["meta"] = self.meta
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BoundaryRecord":
        d = json.loads(text)
        return cls(
            np.array(d["upsilon"], dtype=float),
            np.array(d["gamma"], dtype=float),
            np.array(d["current"], dtype=float),
            float(d["delta"]),
            float(d["tau"]),
            d.get("seed"),
            d.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "BoundaryRecord":
        return cls.from_json(Path(path).read_text())


def _sigma_values(sigma) -> np.ndarray:
    vals = sigma.values if isinstance(sigma, ConductivityField) else np.asarray(sigma, dtype=float)
    if np.any(~(vals > 0)):
        raise ValueError("conductivity must be strictly positive")
    return vals


def _fields(mesh, state):
    eg = fem.p1_gradients(mesh)
    g = np.stack([eg.of(p) for p in state.phi])  # (I, T, 2)
    h = np.stack([eg.rot_of(p) for p in state.psi])
    return eg, g, h


def residual_A(mesh: TriMesh, sigma, state: StateEnsemble) -> np.ndarray:
    """Per-experiment, per-triangle residual vectors, shape (I, T, 2)."""
    s = _sigma_values(sigma)
    _, g, h = _fields(mesh, state)
    r = np.sqrt(s)[None, :, None]
    return r * g - h / r


def eval_QA(mesh: TriMesh, sigma, state: StateEnsemble, grad: bool = False):
    """Least-squares model misfit ``0.5 sum_i ||A_i||_{L2}^2``.

    With ``grad=True`` returns ``(value, d_sigma, d_phi, d_psi)``.
    """
    s = _sigma_values(sigma)
    eg, g, h = _fields(mesh, state)
    r = np.sqrt(s)[None, :, None]
    A = r * g - h / r
    w = eg.areas
    val = 0.5 * float(np.einsum("t,itd,itd->", w, A, A))
    if not grad:
        return val
    dA_ds = g / (2 * r) + h / (2 * r ** 3)
    d_sigma = w * np.einsum("itd,itd->t", A, dA_ds)
    n = mesh.n_nodes
    d_phi = np.stack([eg.scatter(w[:, None] * r[0] * A[i], n) for i in range(len(A))])
    d_psi = np.stack([eg.rot_scatter(-w[:, None] * A[i] / r[0], n) for i in range(len(A))])
    return val, d_sigma, d_phi, d_psi


def eval_JKV(mesh: TriMesh, sigma, state: StateEnsemble, grad: bool = False):
    """Kohn-Vogelius functional ``0.5 sum_i int sigma|grad phi_i|^2 + |rot grad psi_i|^2 / sigma``."""
    s = _sigma_values(sigma)
    eg, g, h = _fields(mesh, state)
    w = eg.areas
    gg = np.einsum("itd,itd->t", g, g)
    hh = np.einsum("itd,itd->t", h, h)
    val = 0.5 * float(w @ (s * gg + hh / s))
    if not grad:
        return val
    d_sigma = 0.5 * w * (gg - hh / s ** 2)
    n = mesh.n_nodes
    d_phi = np.stack([eg.scatter((w * s)[:, None] * g[i], n) for i in range(len(g))])
    d_psi = np.stack([eg.rot_scatter((w / s)[:, None] * h[i], n) for i in range(len(h))])
    return val, d_sigma, d_phi, d_psi


def cross_term(mesh: TriMesh, state: StateEnsemble) -> float:
    """``sum_i int grad(phi_i) . rot grad(psi_i)``."""
    _, g, h = _fields(mesh, state)
    return float(np.einsum("t,itd,itd->", fem.p1_gradients(mesh).areas, g, h))


def edge_current(mesh: TriMesh, gamma_trace) -> np.ndarray:
    """Edgewise-constant current ``j = -d(gamma)/ds`` from a boundary trace."""
    gamma_trace = np.asarray(gamma_trace, dtype=float)
    return -(np.roll(gamma_trace, -1, axis=-1) - gamma_trace) / mesh.edge_lengths


def boundary_form(mesh: TriMesh, state: StateEnsemble) -> float:
    """``sum_i int j_i upsilon_i ds`` with the current taken from the discrete
    stream-function trace (edgewise constant) and the voltage edgewise linear."""
    b = mesh.boundary_nodes
    ups = state.phi[:, b]
    j = edge_current(mesh, state.psi[:, b])
    mid = 0.5 * (ups + np.roll(ups, -1, axis=-1))
    return float(np.sum(j * mid * mesh.edge_lengths))


def kv_identity_gap(mesh: TriMesh, sigma, state: StateEnsemble) -> float:
    """``J_KV - Q_A - cross_term``; zero up to round-off for every input."""
    return eval_JKV(mesh, sigma, state) - eval_QA(mesh, sigma, state) - cross_term(mesh, state)


def gamma_from_current(mesh: TriMesh, j, tol: float = 1e-8) -> np.ndarray:
    """Stream-function trace ``gamma(s_k) = -int_0^{s_k} j`` (trapezoid), ``gamma(0) = 0``."""
    j = np.asarray(j, dtype=float)
    if j.ndim == 2:
        return np.stack([gamma_from_current(mesh, jj, tol) for jj in j])
    h = mesh.edge_lengths
    incr = 0.5 * h * (j + np.roll(j, -1))
    closure = float(np.sum(incr))
    scale = max(1.0, float(np.sum(h * np.abs(j))))
    if abs(closure) > tol * scale:
        raise IncompatibleCurrentError(
            f"boundary current has nonzero net flux {closure:.3e} (closure residual)"
        )
    return -np.concatenate([[0.0], np.cumsum(incr)[:-1]])


def nodal_current(mesh: TriMesh, gamma_trace) -> np.ndarray:
    """Nodal current for storage: average of the two adjacent edge currents."""
    je = edge_current(mesh, gamma_trace)
    return 0.5 * (je + np.roll(je, 1, axis=-1))


def forward_solve(mesh: TriMesh, sigma, dirichlet=None, neumann=None, inverse_weight=False):
    """P1 Galerkin solve of ``-div(w grad u) = 0``, ``w = sigma`` or ``1/sigma``.

    Exactly one of ``dirichlet`` (boundary values in loop order) and
    ``neumann`` (boundary flux ``w du/dnu`` in loop order) is given. The Neumann
    solution is grounded at the first loop node. Only used to manufacture data.
    """
    if (dirichlet is None) == (neumann is None):
        raise ValueError("give exactly one of dirichlet / neumann data")
    s = _sigma_values(sigma)
    weight = 1.0 / s if inverse_weight else s
    K = fem.weighted_stiffness(mesh, weight).tocsr()
    n = mesh.n_nodes
    b = mesh.boundary_nodes
    u = np.zeros(n)
    if dirichlet is not None:
        free = np.setdiff1d(np.arange(n), b)
        u[b] = dirichlet
        rhs = -K[free][:, b] @ u[b]
    else:
        j = np.asarray(neumann, dtype=float)
        load = np.zeros(n)
        load[b] = fem.boundary_weights(mesh) * j
        net = load.sum()
        if abs(net) > 1e-8 * max(1.0, np.abs(load).sum()):
            raise IncompatibleCurrentError(f"Neumann data has net flux {net:.3e}")
        ground = b[0]
        free = np.setdiff1d(np.arange(n), [ground])
        rhs = load[free]
    u[free] = spla.spsolve(K[free][:, free].tocsc(), rhs)
    return u


def add_noise(record: BoundaryRecord, delta: float, seed: int | None) -> BoundaryRecord:
    """Uniform bounded noise in ``[-delta, delta]`` on every trace value of
    ``upsilon`` and ``gamma``; the sup-norm bound holds by construction."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return replace(record, upsilon=record.upsilon.copy(), gamma=record.gamma.copy(),
                       current=record.current.copy(), delta=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    du = rng.uniform(-delta, delta, size=record.upsilon.shape)
    dg = rng.uniform(-delta, delta, size=record.gamma.shape)
    return replace(record, upsilon=record.upsilon + du, gamma=record.gamma + dg,
                   current=record.current.copy(), delta=float(delta), seed=seed)


def record_from_state(mesh: TriMesh, state: StateEnsemble, tau: float = 1.5) -> BoundaryRecord:
    """Exact traces of a state."""
    b = mesh.boundary_nodes
    gamma = state.psi[:, b]
    return BoundaryRecord(state.phi[:, b].copy(), gamma.copy(), nodal_current(mesh, gamma), 0.0, tau)


# --- phantoms and manufactured truths -------------------------------------

def centroids(mesh: TriMesh) -> np.ndarray:
    return mesh.nodes[mesh.triangles].mean(axis=1)


def side_normal_current(mesh: TriMesh, component: int) -> np.ndarray:
    """Nodal samples of ``nu_component`` on the square boundary, corners
    averaged between the two sides."""
    p = mesh.nodes[mesh.boundary_edges]
    t = p[:, 1] - p[:, 0]
    t /= np.linalg.norm(t, axis=1)[:, None]
    nu_edge = np.column_stack([t[:, 1], -t[:, 0]])[:, component]
    return 0.5 * (nu_edge + np.roll(nu_edge, 1))


@dataclass
class Truth:
    sigma: np.ndarray
    state: StateEnsemble
    record: BoundaryRecord


def manufacture_affine(mesh: TriMesh, value: float = 1.0, n_experiments: int = 2, tau: float = 1.5) -> Truth:
    """Constant conductivity with ``phi_i = x_i`` and matching stream
    functions; the residual vanishes exactly."""
    if not 1 <= n_experiments <= 2:
        raise ValueError("affine phantom supports one or two experiments")
    x, y = mesh.nodes.T
    state = StateEnsemble(np.stack([x, y][:n_experiments]),
                          np.stack([-value * y, value * x][:n_experiments]))
    sigma = np.full(mesh.n_triangles, float(value))
    return Truth(sigma, state, record_from_state(mesh, state, tau))


def layered_solution(x1, sigma_left, sigma_right, interface=0.5):
    """1-D two-layer potential with ``phi(0) = 0``, ``phi(1) = 1`` and
    continuous flux; returns ``(phi, flux)``."""
    flux = 1.0 / (interface / sigma_left + (1.0 - interface) / sigma_right)
    phi = np.where(x1 <= interface, flux * x1 / sigma_left,
                   flux * interface / sigma_left + flux * (x1 - interface) / sigma_right)
    return phi, flux


def manufacture_layered(mesh: TriMesh, sigma_left=2.0, sigma_right=1.0, n_experiments=2, tau=1.5) -> Truth:
    """Vertical two-layer medium split at ``x1 = 1/2``; exact in P1/P0 when the
    interface is a grid line."""
    x, y = mesh.nodes.T
    c = centroids(mesh)
    sigma = np.where(c[:, 0] < 0.5, sigma_left, sigma_right).astype(float)
    phi1, flux = layered_solution(x, sigma_left, sigma_right)
    psi1 = -flux * y
    phi2 = y.copy()
    psi2 = np.where(x <= 0.5, sigma_left * x, sigma_left * 0.5 + sigma_right * (x - 0.5))
    state = StateEnsemble(np.stack([phi1, phi2][:n_experiments]), np.stack([psi1, psi2][:n_experiments]))
    return Truth(sigma, state, record_from_state(mesh, state, tau))


def inclusion_sigma(mesh: TriMesh, background=1.0, value=2.0, center=(0.5, 0.5), radius=0.25):
    c = centroids(mesh)
    inside = np.hypot(c[:, 0] - center[0], c[:, 1] - center[1]) < radius
    return np.where(inside, value, background).astype(float)


def manufacture_from_currents(mesh: TriMesh, sigma, currents, tau=1.5) -> Truth:
    """Neumann solves for ``phi_i``, integrated currents for ``gamma_i`` and
    Dirichlet solves with weight ``1/sigma`` for ``psi_i``."""
    currents = np.atleast_2d(currents)
    phis, psis, gammas = [], [], []
    b = mesh.boundary_nodes
    for j in currents:
        phi = forward_solve(mesh, sigma, neumann=j)
        gamma = gamma_from_current(mesh, j)
        psi = forward_solve(mesh, sigma, dirichlet=gamma, inverse_weight=True)
        phis.append(phi)
        psis.append(psi)
        gammas.append(gamma)
    state = StateEnsemble(np.stack(phis), np.stack(psis))
    rec = BoundaryRecord(state.phi[:, b].copy(), np.stack(gammas), currents.copy(), 0.0, tau)
    return Truth(np.asarray(sigma, dtype=float), state, rec)


def manufacture_inclusion(mesh: TriMesh, background=1.0, value=2.0, center=(0.5, 0.5),
                          radius=0.25, n_experiments=2, tau=1.5) -> Truth:
    sigma = inclusion_sigma(mesh, background, value, center, radius)
    nu1, nu2 = side_normal_current(mesh, 0), side_normal_current(mesh, 1)
    patterns = [nu1, nu2, nu1 + nu2, nu1 - nu2]
    currents = np.stack([patterns[k % 4] for k in range(n_experiments)])
    return manufacture_from_currents(mesh, sigma, currents, tau)
