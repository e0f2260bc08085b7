"""Regularization functionals, Ivanov/Morozov boxes and the parameter schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import fem
from .eit import BoundaryRecord, ConductivityField, StateEnsemble
from .mesh import TriMesh


class InfeasibleError(ValueError):
    """Raised when an admissible set is empty."""


@dataclass(frozen=True)
class RegConfig:
    alpha_c: tuple = (1.0,)
    alpha_p: tuple = (1.0,)
    alpha_min: float = 1e-8
    eps: float = 0.25
    eps_tilde: float = 0.1
    tau: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "alpha_c", tuple(float(c) for c in np.atleast_1d(self.alpha_c)))
        object.__setattr__(self, "alpha_p", tuple(float(p) for p in np.atleast_1d(self.alpha_p)))
        if len(self.alpha_c) != len(self.alpha_p) or len(self.alpha_c) not in (1, 2):
            raise ValueError("alpha_c and alpha_p must both have length 1 or 2")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 1/2)")
        if not 0 < self.eps_tilde < 0.5:
            raise ValueError("eps_tilde must lie in (0, 1/2)")
        if self.alpha_min <= 0:
            raise ValueError("alpha_min must be positive")

    @property
    def m(self) -> int:
        """Number of regularization terms (1: state only, 2: state and sigma)."""
        return len(self.alpha_c)

    @property
    def s_state(self) -> float:
        return 1.5 - self.eps

    @property
    def s_sigma(self) -> float:
        return 1.0 - self.eps_tilde

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_c"] = list(self.alpha_c)
        d["alpha_p"] = list(self.alpha_p)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegConfig":
        return cls(**{k: d[k] for k in ("alpha_c", "alpha_p", "alpha_min", "eps", "eps_tilde", "tau") if k in d})


def alpha_schedule(config: RegConfig, delta: float):
    """``alpha_j = max(c_j delta^p_j, alpha_min)``.

    Returns the weight vector and the ratio ``delta / min_j alpha_j`` whose
    boundedness as ``delta -> 0`` is the a priori admissibility condition.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    c = np.array(config.alpha_c)
    p = np.array(config.alpha_p)
    raw = c * float(delta) ** p if delta > 0 else np.zeros_like(c)
    alpha = np.maximum(raw, config.alpha_min)
    return alpha, float(delta / alpha.min())


def eval_R(mesh: TriMesh, config: RegConfig, sigma, state: StateEnsemble, grad: bool = False):
    """Regularization components.

    ``R[0] = 0.5 sum_i (|phi_i|_s^2 + |psi_i|_s^2)`` with ``s = 3/2 - eps``;
    when ``config.m == 2`` also ``R[1] = |P sigma|_{s'}^2``, ``s' = 1 - eps_tilde``,
    with ``P`` the nodal averaging of the P0 conductivity.

    With ``grad=True`` returns ``(R, dR_dsigma, dR_dphi, dR_dpsi)`` where the
    gradient arrays carry a leading axis over components.
    """
    op = fem.fractional_operator(mesh, config.s_state)
    if state.phi.shape[1] != op.size:
        raise ValueError("state does not match mesh")
    G = op.gram
    Gphi = state.phi @ G
    Gpsi = state.psi @ G
    r0 = 0.5 * (np.einsum("in,in->", state.phi, Gphi) + np.einsum("in,in->", state.psi, Gpsi))
    vals = [max(float(r0), 0.0)]
    s = sigma.values if isinstance(sigma, ConductivityField) else np.asarray(sigma, dtype=float)
    if config.m == 2:
        P = fem.p0_to_p1(mesh)
        ops = fem.fractional_operator(mesh, config.s_sigma)
        ps = P @ s
        vals.append(fem.fractional_norm(ops, ps))
    vals = np.array(vals)
    if not grad:
        return vals
    m = config.m
    d_sigma = np.zeros((m, s.size))
    d_phi = np.zeros((m,) + state.phi.shape)
    d_psi = np.zeros((m,) + state.psi.shape)
    d_phi[0] = Gphi
    d_psi[0] = Gpsi
    if m == 2:
        d_sigma[1] = P.T @ ops.gradient(ps)
    return vals, d_sigma, d_phi, d_psi


def check_sigma_box(lower: float, upper: float) -> None:
    if not lower > 0:
        raise InfeasibleError(f"lower conductivity bound must be positive, got {lower}")
    if upper < lower:
        raise InfeasibleError(f"empty conductivity box [{lower}, {upper}]")


def trace_box(record: BoundaryRecord):
    """Morozov boxes ``y_delta -+ tau*delta`` for the traces, each (I, B)."""
    width = record.tau * record.delta
    return (record.upsilon - width, record.upsilon + width,
            record.gamma - width, record.gamma + width)


def project_admissible(mesh: TriMesh, sigma: ConductivityField, state: StateEnsemble,
                       record: BoundaryRecord, box_psi: bool = True):
    """Componentwise projection onto the admissible set: conductivity clamped
    to its box, boundary traces clamped to the Morozov boxes, interior nodes
    untouched. ``box_psi=False`` leaves the psi traces free (KV mode, where
    they are constrained in ``W^{1,1}`` instead)."""
    check_sigma_box(sigma.lower, sigma.upper)
    b = mesh.boundary_nodes
    ulo, uhi, glo, ghi = trace_box(record)
    phi = state.phi.copy()
    psi = state.psi.copy()
    phi[:, b] = np.clip(phi[:, b], ulo, uhi)
    if box_psi:
        psi[:, b] = np.clip(psi[:, b], glo, ghi)
    return sigma.clip(), StateEnsemble(phi, psi)


def state_bounds(mesh: TriMesh, record: BoundaryRecord, box_psi: bool = True):
    """Lower/upper bound vectors for the flattened state ``(phi..., psi...)``;
    interior entries are infinite."""
    n_exp, n = record.n_experiments, mesh.n_nodes
    lo = np.full((2, n_exp, n), -np.inf)
    hi = np.full((2, n_exp, n), np.inf)
    b = mesh.boundary_nodes
    ulo, uhi, glo, ghi = trace_box(record)
    lo[0][:, b], hi[0][:, b] = ulo, uhi
    if box_psi:
        lo[1][:, b], hi[1][:, b] = glo, ghi
    return lo.ravel(), hi.ravel()


def w11_matrix(mesh: TriMesh) -> np.ndarray:
    """Stacked operator ``D`` with ``||g||_{W11} = ||D g||_1`` for boundary
    vectors: trapezoid weights on top, edge differences below."""
    nb = len(mesh.boundary_edges)
    w = fem.boundary_weights(mesh)
    diff = -np.eye(nb) + np.roll(np.eye(nb), 1, axis=1)
    return np.vstack([np.diag(w), diff])


def w11_boundary_norm(mesh: TriMesh, g) -> float:
    """Discrete ``W^{1,1}`` norm on the boundary loop: trapezoid of ``|g|``
    plus the total variation along the loop (corner jumps included)."""
    g = np.asarray(g, dtype=float)
    return float(fem.boundary_weights(mesh) @ np.abs(g) + np.sum(np.abs(np.roll(g, -1) - g)))


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{z : ||z||_1 <= radius}`` (sort-based)."""
    if radius <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)
