"""Second-order diagnostics: finite-difference Hessians, projected
eigenvalues, nonlinearity ratios and the convexity-enforcing fixed point.

All second derivatives are central differences of analytic first
derivatives (gradients or directional derivatives).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fem
from .eit import StateEnsemble, residual_A
from .mesh import TriMesh
from .regularization import RegConfig, eval_R

FD_STEP = 1e-4


# --- Hessians and eigenvalues --------------------------------------------

def hessian_lagrangian(grad, point, free=None, step=FD_STEP) -> np.ndarray:
    """Central finite-difference Hessian of a function given by its gradient.

    Only the coordinates in ``free`` (default: all) are perturbed and
    returned; active bound constraints are linear and do not contribute.
    The result is symmetrized.
    """
    x = np.asarray(point, dtype=float)
    if free is None:
        idx = np.arange(x.size)
    elif np.asarray(free).dtype == bool:
        idx = np.flatnonzero(free)
    else:
        idx = np.unique(np.asarray(free, dtype=int))
    H = np.empty((idx.size, idx.size))
    for col, j in enumerate(idx):
        e = np.zeros_like(x)
        e[j] = step
        H[:, col] = (np.asarray(grad(x + e))[idx] - np.asarray(grad(x - e))[idx]) / (2 * step)
    return 0.5 * (H + H.T)


def projected_min_eigenvalue(H, active=()) -> float:
    """Smallest eigenvalue of ``H`` on the coordinates not in ``active``;
    ``+inf`` if every coordinate is active."""
    H = np.asarray(H, dtype=float)
    mask = np.ones(H.shape[0], dtype=bool)
    mask[np.asarray(list(active), dtype=int)] = False
    if not mask.any():
        return float("inf")
    return float(np.linalg.eigvalsh(H[np.ix_(mask, mask)])[0])


def active_coordinates(x, lo, hi, tol=1e-12):
    x = np.asarray(x)
    return np.flatnonzero((x <= np.asarray(lo) + tol) | (x >= np.asarray(hi) - tol))


# --- nonlinearity ratios --------------------------------------------------

def fd_second_directional(jvp, x, h, step=FD_STEP) -> np.ndarray:
    """``F''(x)(h, h)`` from the directional derivative ``jvp(x, h) = F'(x) h``."""
    return (np.asarray(jvp(x + step * h, h)) - np.asarray(jvp(x - step * h, h))) / (2 * step)


@dataclass
class RatioEstimate:
    ratio: float
    samples: int
    kernel_directions: int


def nonlinearity_ratio(jvp, x, dim=None, L=None, samples=200, seed=0, floor=1e-14,
                       sampler=None) -> RatioEstimate:
    """Monte-Carlo estimate of ``sup_h |F''(x)(h,h)| / (|F'(x)h| |L h|)``.

    Directions with ``|F'(x) h| <= floor`` lie (numerically) in the kernel
    of the derivative; they are counted in ``kernel_directions`` and left
    out of the supremum. ``sampler(rng)`` may supply directions; the default
    draws standard normal vectors of length ``dim``.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    dim = x.size if dim is None else dim
    L = (lambda h: h) if L is None else L
    best, kernel = 0.0, 0
    for _ in range(samples):
        h = sampler(rng) if sampler is not None else rng.standard_normal(dim)
        h = h / np.linalg.norm(h)
        d1 = np.linalg.norm(jvp(x, h))
        d2 = np.linalg.norm(fd_second_directional(jvp, x, h))
        if d1 <= floor:
            kernel += 1
            continue
        best = max(best, d2 / (d1 * np.linalg.norm(L(h))))
    return RatioEstimate(float(best), samples, kernel)


def cbar_estimate(jvp, x, L, dim=None, samples=200, seed=0, sampler=None) -> float:
    """Monte-Carlo estimate of ``sup_h |F''(x)(h,h)| / |L h|^2``."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    dim = x.size if dim is None else dim
    best = 0.0
    for _ in range(samples):
        h = sampler(rng) if sampler is not None else rng.standard_normal(dim)
        d2 = np.linalg.norm(fd_second_directional(jvp, x, h))
        best = max(best, d2 / float(np.linalg.norm(L(h))) ** 2)
    return float(best)


# --- the EIT residual as a map on flat vectors ----------------------------

@dataclass(frozen=True)
class EITPacking:
    """Flat layout ``(sigma, phi_1..phi_I, psi_1..psi_I)``."""

    n_triangles: int
    n_nodes: int
    n_experiments: int

    @property
    def size(self) -> int:
        return self.n_triangles + 2 * self.n_experiments * self.n_nodes

    def pack(self, sigma, state: StateEnsemble) -> np.ndarray:
        return np.concatenate([np.asarray(sigma, dtype=float), state.phi.ravel(), state.psi.ravel()])

    def unpack(self, z):
        T, N, I = self.n_triangles, self.n_nodes, self.n_experiments
        sigma = z[:T]
        phi = z[T:T + I * N].reshape(I, N)
        psi = z[T + I * N:].reshape(I, N)
        return sigma, StateEnsemble(phi, psi)

    @classmethod
    def for_state(cls, mesh: TriMesh, state: StateEnsemble) -> "EITPacking":
        return cls(mesh.n_triangles, mesh.n_nodes, state.n_experiments)


def eit_residual_jvp(mesh: TriMesh, packing: EITPacking):
    """``(z, h) -> A'(z) h`` scaled by ``sqrt|T|`` so that Euclidean norms are
    the ``W = L^2`` norms of the residual."""
    eg = fem.p1_gradients(mesh)
    w = np.sqrt(mesh.areas)[None, :, None]

    def grads(state):
        g = np.stack([eg.of(p) for p in state.phi])
        h = np.stack([eg.rot_of(p) for p in state.psi])
        return g, h

    def jvp(z, dz):
        s, st = packing.unpack(z)
        ds, dst = packing.unpack(dz)
        g, h = grads(st)
        dg, dh = grads(dst)
        r = np.sqrt(s)[None, :, None]
        a = ds[None, :, None]
        out = a / (2 * r) * g + r * dg + a / (2 * r ** 3) * h - dh / r
        return (w * out).ravel()

    return jvp


def eit_residual_vector(mesh: TriMesh, packing: EITPacking, z) -> np.ndarray:
    s, st = packing.unpack(z)
    return (np.sqrt(mesh.areas)[None, :, None] * residual_A(mesh, s, st)).ravel()


def eit_L_norm(mesh: TriMesh, config: RegConfig, packing: EITPacking):
    """``h -> |L h|`` with ``|L h|^2 = |h_sigma|^2_{s'} + sum_i |h_phi_i|^2_s + |h_psi_i|^2_s``."""
    cfg = RegConfig(alpha_c=(1.0, 1.0), alpha_p=(1.0, 1.0), alpha_min=config.alpha_min,
                    eps=config.eps, eps_tilde=config.eps_tilde, tau=config.tau)

    def Lnorm(h):
        s, st = packing.unpack(h)
        R = eval_R(mesh, cfg, s, st)
        return np.array([np.sqrt(max(2.0 * R[0] + R[1], 0.0))])

    return Lnorm


# --- Kohn-Vogelius second variation ---------------------------------------

def _kv_parts(mesh, sigma, state, direction: tuple):
    eg = fem.p1_gradients(mesh)
    hs, hphi, hpsi = direction
    s = np.asarray(sigma, dtype=float)
    out = []
    for i in range(state.n_experiments):
        g = eg.of(state.phi[i])
        h = eg.rot_of(state.psi[i])
        b = eg.of(hphi[i])
        c = eg.rot_of(hpsi[i])
        out.append((g, h, b, c))
    return s, np.asarray(hs, dtype=float), out


def kv_second_variation(mesh: TriMesh, sigma, state: StateEnsemble, direction) -> float:
    """Exact ``D^2 J_KV (h, h)`` at any point, ``direction = (h_sigma, h_Phi, h_Psi)``."""
    s, a, parts = _kv_parts(mesh, sigma, state, direction)
    w = mesh.areas
    total = 0.0
    for g, h, b, c in parts:
        dens = (2 * a * np.einsum("td,td->t", g, b) + s * np.einsum("td,td->t", b, b)
                + a ** 2 * np.einsum("td,td->t", h, h) / s ** 3
                - 2 * a * np.einsum("td,td->t", h, c) / s ** 2 + np.einsum("td,td->t", c, c) / s)
        total += float(w @ dens)
    return total


def kv_completed_square(mesh: TriMesh, sigma, state: StateEnsemble, direction):
    """Completed-square form of ``D^2 J_KV`` at a zero of the residual
    (``rot grad psi_i = sigma grad phi_i``).

    Returns ``(square, cross)`` with
    ``square = sum |T| |h_s grad phi + s grad h_phi - rot grad h_psi|^2 / s``
    (nonnegative) and ``cross = 2 sum |T| grad h_phi . rot grad h_psi``,
    which depends only on boundary traces and vanishes when the trace
    directions are zero. ``square + cross`` equals the second variation.
    """
    s, a, parts = _kv_parts(mesh, sigma, state, direction)
    w = mesh.areas
    square = cross = 0.0
    for g, _, b, c in parts:
        v = a[:, None] * g + s[:, None] * b - c
        square += float(w @ (np.einsum("td,td->t", v, v) / s))
        cross += 2.0 * float(w @ np.einsum("td,td->t", b, c))
    return square, cross


def kv_hessian_display(mesh: TriMesh, sigma, state: StateEnsemble, direction) -> float:
    """A four-square expression for the second variation that
    carries the mixed terms ``h_s grad phi . grad h_phi`` and
    ``-h_s/s^2 rot grad psi . rot grad h_psi`` with weight 1 instead of 2.
    Kept for comparison; see :func:`kv_display_defect`."""
    s, a, parts = _kv_parts(mesh, sigma, state, direction)
    w = mesh.areas
    total = 0.0
    for _, h, b, c in parts:
        v1 = (a / s)[:, None] * h + s[:, None] * b
        v2 = (a / s)[:, None] * h - c
        dens = (np.einsum("td,td->t", v1, v1) / (2 * s) + np.einsum("td,td->t", v2, v2) / (2 * s)
                + 0.5 * s * np.einsum("td,td->t", b, b) + 0.5 * np.einsum("td,td->t", c, c) / s)
        total += float(w @ dens)
    return total


def kv_display_defect(mesh: TriMesh, sigma, state: StateEnsemble, direction) -> float:
    """The missing half of the mixed terms: ``second variation - display``."""
    s, a, parts = _kv_parts(mesh, sigma, state, direction)
    w = mesh.areas
    total = 0.0
    for g, h, b, c in parts:
        total += float(w @ (a * np.einsum("td,td->t", g, b) - a * np.einsum("td,td->t", h, c) / s ** 2))
    return total


# --- reduced-formulation checks ------------------------------------------

def minimality_red_chain(F, x_alpha, x_true, y_delta, y, alpha, c, x0=None):
    """Terms of the minimality chain for linear reduced Tikhonov:
    ``lhs <= middle <= rhs`` with
    ``lhs = 0.5|F x_a - y_d|^2 + a/2 |x_a - x0|^2``,
    ``middle = 0.5|F x_true - y_d|^2 + a/2 |x_true - x0|^2``,
    ``rhs = (c + 0.5 |x_true - x0|^2) a``."""
    x0 = np.zeros_like(x_true) if x0 is None else x0
    lhs = 0.5 * np.sum((F @ x_alpha - y_delta) ** 2) + 0.5 * alpha * np.sum((x_alpha - x0) ** 2)
    mid = 0.5 * np.sum((F @ x_true - y_delta) ** 2) + 0.5 * alpha * np.sum((x_true - x0) ** 2)
    rhs = (c + 0.5 * np.sum((x_true - x0) ** 2)) * alpha
    return float(lhs), float(mid), float(rhs)


def source_condition_holds(F, x_true, y, cbar, points, x0=None, tol=1e-12) -> bool:
    """Variational source condition
    ``-(x_true - x0, x - x_true) <= |F x - y| / (2 cbar)`` on sample points."""
    x0 = np.zeros_like(x_true) if x0 is None else x0
    for x in np.atleast_2d(points):
        lhs = -float((x_true - x0) @ (x - x_true))
        if lhs > np.linalg.norm(F @ x - y) / (2 * cbar) + tol:
            return False
    return True


# --- alpha fixed point ----------------------------------------------------

@dataclass
class FixpointResult:
    alphas: list
    residuals: list
    converged: bool

    def csv(self) -> str:
        lines = ["k,alpha,residual_norm"]
        for k, a in enumerate(self.alphas):
            r = self.residuals[k] if k < len(self.residuals) else float("nan")
            lines.append(f"{k},{a!r},{r!r}")
        return "\n".join(lines) + "\n"


def alpha_convexity_fixpoint(residual_at, cbar, alpha0, max_iter=20, rtol=1e-6,
                             alpha_floor=0.0) -> FixpointResult:
    """Iterate ``alpha <- max(cbar |A(x_alpha, u_alpha)|_W, alpha_floor)``.

    ``residual_at(alpha)`` solves the regularized problem and returns the
    residual norm. Stops when the relative change is at most ``rtol``;
    running out of iterations is reported, not raised.
    """
    if cbar <= 0 or alpha0 <= 0:
        raise ValueError("cbar and alpha0 must be positive")
    alphas, res = [float(alpha0)], []
    converged = False
    for _ in range(max_iter):
        r = float(residual_at(alphas[-1]))
        res.append(r)
        nxt = max(cbar * r, alpha_floor)
        alphas.append(nxt)
        if abs(nxt - alphas[-2]) <= rtol * alphas[-2]:
            converged = True
            break
    return FixpointResult(alphas, res, converged)


# --- report ---------------------------------------------------------------

@dataclass
class ConvexityReport:
    min_eigenvalue_projected: float
    nonlinearity_ratio: float
    cbar: float
    kernel_directions: int = 0
    alpha_fixpoint_history: list = field(default_factory=list)
    predicates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=1, sort_keys=True)


def _jsonable(v):
    """Plain-Python copy of ``v``; non-finite floats become strings."""
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    return v


def toy_convexity_report(problem, alpha, delta=0.0, tau=1.5, seed=0, samples=200,
                         c=1.0) -> ConvexityReport:
    """Report for the linear toy: Hessians of all three formulations at their
    minimizers, and the (trivially zero) nonlinearity ratio."""
    from .toy import (aao_system, aao_tikhonov_solve, morozov_aao_solve, morozov_intervals,
                      morozov_system, reduced_tikhonov_solve, toy_noise)
    y_d = toy_noise(problem, delta, seed)
    F = problem.F
    nx = problem.K.shape[1]
    eigs = {}
    x = reduced_tikhonov_solve(problem, y_d, alpha)
    eigs["reduced"] = projected_min_eigenvalue(
        hessian_lagrangian(lambda z: F.T @ (F @ z - y_d) + alpha * z, x))
    H, rhs = aao_system(problem, y_d, alpha)
    xa, ua = aao_tikhonov_solve(problem, y_d, alpha)
    eigs["aao"] = projected_min_eigenvalue(hessian_lagrangian(lambda z: H @ z - rhs, np.r_[xa, ua]))
    Hm = morozov_system(problem, alpha)
    xm, um = morozov_aao_solve(problem, y_d, delta, tau, alpha)
    lo, hi = morozov_intervals(problem, y_d, delta, tau)
    zm = np.r_[xm, um]
    act = nx + active_coordinates(um, lo, hi)
    free = np.setdiff1d(np.arange(zm.size), act)
    eigs["maao"] = projected_min_eigenvalue(hessian_lagrangian(lambda z: Hm @ z, zm, free))
    ratio = nonlinearity_ratio(lambda z, h: F @ h, x, samples=samples, seed=seed)
    lhs, mid, rhs = minimality_red_chain(F, x, problem.x_true, y_d, problem.y_exact, alpha, c)
    bound = 2.0 / np.sqrt(2 * c + float(problem.x_true @ problem.x_true))
    preds = {
        "nonlincond_reduced": ratio.ratio <= bound,
        "minimality_chain": lhs <= mid + 1e-12 and (delta > c * alpha or mid <= rhs + 1e-12),
        "hessian_psd": min(eigs.values()) >= -1e-8,
    }
    return ConvexityReport(min(eigs.values()), ratio.ratio, 0.0, ratio.kernel_directions,
                           predicates=preds, meta={"eigenvalues": eigs, "alpha": alpha, "delta": delta})


def eit_convexity_report(mesh: TriMesh, sigma, state: StateEnsemble, record, config: RegConfig,
                         alpha=None, mode="maao-ls", lower=0.5, upper=4.0, samples=200, seed=7,
                         reference=None, c=1.0) -> ConvexityReport:
    """Report at an EIT point (a converged solve or the manufactured truth).

    The Hessian of the objective is formed on the free coordinates:
    conductivities strictly inside their box and interior state nodes plus
    boundary nodes strictly inside their trace boxes.
    """
    from .optimizer import EITProblem
    prob = EITProblem(mesh, record, config, mode, lower, upper, alpha)
    pk = EITPacking.for_state(mesh, state)
    s = np.asarray(sigma, dtype=float)
    z = pk.pack(s, state)

    def grad(zz):
        ss, st = pk.unpack(zz)
        ev = prob.evaluate(ss, st, grad=True)
        return np.concatenate([ev["d_sigma"], ev["d_phi"].ravel(), ev["d_psi"].ravel()])

    lo = np.concatenate([np.full(s.size, lower)] + [prob.state_bounds(i)[0][:pk.n_nodes]
                                                   for i in range(pk.n_experiments)]
                        + [prob.state_bounds(i)[0][pk.n_nodes:] for i in range(pk.n_experiments)])
    hi = np.concatenate([np.full(s.size, upper)] + [prob.state_bounds(i)[1][:pk.n_nodes]
                                                   for i in range(pk.n_experiments)]
                        + [prob.state_bounds(i)[1][pk.n_nodes:] for i in range(pk.n_experiments)])
    active = set(active_coordinates(z, lo, hi, tol=1e-10).tolist())
    if prob.uses_kv:  # psi traces live in the W11 ball; treat them as pinned
        T, N, I = pk.n_triangles, pk.n_nodes, pk.n_experiments
        for i in range(I):
            active.update((T + I * N + i * N + mesh.boundary_nodes).tolist())
    free = np.setdiff1d(np.arange(z.size), sorted(active))
    H = hessian_lagrangian(grad, z, free)
    min_eig = projected_min_eigenvalue(H)

    jvp = eit_residual_jvp(mesh, pk)
    Lnorm = eit_L_norm(mesh, config, pk)
    ratio = nonlinearity_ratio(jvp, z, L=Lnorm, samples=samples, seed=seed)
    cbar = cbar_estimate(jvp, z, Lnorm, samples=samples, seed=seed)
    A = eit_residual_vector(mesh, pk, z)
    preds = {"convexLagr_projected_hessian": min_eig >= -1e-8}
    if reference is not None:
        ref_z = pk.pack(np.asarray(reference[0], dtype=float), reference[1])
        Lref = float(Lnorm(ref_z)[0])
        if Lref > 0:
            preds["nonlincond_aaoM"] = bool(ratio.kernel_directions == 0 and ratio.ratio <= 2.0 / Lref)
            preds["nonlincond_aao"] = bool(ratio.kernel_directions == 0
                                           and ratio.ratio ** 2 <= 4.0 / (Lref ** 2 + 2 * c))
    preds["alpha_enforces_convexity"] = bool(prob.alpha[0] >= cbar * float(np.linalg.norm(A)))
    return ConvexityReport(min_eig, ratio.ratio, cbar, ratio.kernel_directions, predicates=preds,
                           meta={"free_coordinates": int(free.size), "residual_norm": float(np.linalg.norm(A)),
                                 "alpha": prob.alpha.tolist()})


def eit_residual_solver(mesh: TriMesh, record, config: RegConfig, mode="maao-ls", lower=0.5,
                        upper=4.0, **solve_kwargs):
    """``alpha -> |A|_W`` at the solution of the regularized EIT problem."""
    from .optimizer import solve_instance

    def residual_at(alpha):
        sigma, state, rep = solve_instance(mesh, record, config, mode, lower=lower, upper=upper,
                                           alpha=alpha, **solve_kwargs)
        return float(np.sqrt(2.0 * rep.final_QA))

    return residual_at
