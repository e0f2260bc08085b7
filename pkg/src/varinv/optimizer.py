"""Solvers for the regularized EIT minimization problems.

The main entry point is :func:`solve_instance`. It alternates an exact
per-triangle conductivity update with an exact minimization of the state
subproblem, which for fixed conductivity is a convex quadratic over a box
(or, in the Kohn-Vogelius mode, over a box and a ``W^{1,1}`` ball).
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import fem
from .eit import (BoundaryRecord, ConductivityField, StateEnsemble, eval_JKV, eval_QA,
                  forward_solve)
from .mesh import TriMesh
from .regularization import (InfeasibleError, RegConfig, alpha_schedule, check_sigma_box,
                             eval_R, project_l1_ball, trace_box, w11_boundary_norm, w11_matrix)

log = logging.getLogger(__name__)

MODES = ("aao-ls", "maao-ls", "maao-kv")


class SolverError(RuntimeError):
    pass


# --- generic building blocks ----------------------------------------------

def sigma_closed_form(g, h, lo: float, hi: float) -> float:
    """Minimizer over ``[lo, hi]`` of ``0.5 (s |g|^2 + |h|^2 / s)``."""
    if not lo > 0:
        raise ValueError("lower bound must be positive")
    gg = float(np.sum(np.square(g)))
    hh = float(np.sum(np.square(h)))
    return float(sigma_update(np.array([gg]), np.array([hh]), lo, hi)[0])


def sigma_update(gg, hh, lo, hi):
    """Vectorized :func:`sigma_closed_form` from squared norms."""
    gg = np.asarray(gg, dtype=float)
    hh = np.asarray(hh, dtype=float)
    out = np.full(gg.shape, 0.5 * (lo + hi))
    pos = gg > 0
    out[pos] = np.sqrt(hh[pos] / gg[pos])
    out[~pos & (hh > 0)] = hi
    return np.clip(out, lo, hi)


@dataclass
class PGStep:
    x: np.ndarray
    f: float
    g: np.ndarray
    step: float
    stationary: bool


def projected_gradient_step(x, fg, project, step=1.0, f=None, g=None,
                            armijo=1e-4, max_halvings=50) -> PGStep:
    """One projected-gradient step with Armijo backtracking along the
    projection arc. ``fg(x)`` returns ``(value, gradient)``; ``step`` is the
    trial (e.g. Barzilai-Borwein) step length."""
    if f is None or g is None:
        f, g = fg(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise SolverError("non-finite objective or gradient")
    t = step
    for _ in range(max_halvings):
        xn = project(x - t * g)
        d = xn - x
        if not np.any(d):
            return PGStep(x, f, g, t, True)
        fn, gn = fg(xn)
        if fn <= f + armijo * float(g @ d):
            return PGStep(xn, fn, gn, t, False)
        t *= 0.5
    return PGStep(x, f, g, t, True)


def projected_gradient(x0, fg, project, max_iter=1000, tol=1e-10, step0=1.0):
    """Barzilai-Borwein projected gradient; returns ``(x, f, history)``."""
    x = project(np.asarray(x0, dtype=float))
    f, g = fg(x)
    hist = [f]
    step = step0
    for _ in range(max_iter):
        pg = x - project(x - g)
        if np.linalg.norm(pg, np.inf) <= tol:
            break
        res = projected_gradient_step(x, fg, project, step, f, g)
        if res.stationary:
            break
        s = res.x - x
        y = res.g - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else 1.0
        step = min(max(step, 1e-12), 1e12)
        x, f, g = res.x, res.f, res.g
        hist.append(f)
    return x, f, hist


def box_qp(H, c, lo, hi, x0, tol=1e-12, max_iter=200):
    """Minimize ``0.5 x'Hx - c'x`` over ``lo <= x <= hi`` for symmetric
    positive definite ``H``: primal-dual active set iterations, finished by
    safeguarded projected Newton steps if the KKT residual is not yet small.

    Returns ``(x, info)``. Coordinates with ``lo == hi`` are eliminated.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    fixed = lo == hi
    x[fixed] = lo[fixed]
    var = np.flatnonzero(~fixed)
    if var.size == 0:
        return x, {"iterations": 0, "pgnorm": 0.0}
    Hv = H[np.ix_(var, var)]
    cv = c[var] - H[np.ix_(var, np.flatnonzero(fixed))] @ x[fixed]
    lv, hv = lo[var], hi[var]
    y = x[var]
    if np.all(np.isinf(lv)) and np.all(np.isinf(hv)):
        y = _spd_solve(Hv, cv)
        x[var] = y
        return x, {"iterations": 1, "pgnorm": float(np.linalg.norm(Hv @ y - cv, np.inf))}

    y, pgn, it = _pdas(Hv, cv, lv, hv, y)
    scale = max(1.0, float(np.linalg.norm(cv, np.inf)))
    if pgn > tol * scale:
        y, pgn, it2 = _projected_newton(Hv, cv, lv, hv, y, tol * scale, max_iter)
        it += it2
    x[var] = y
    return x, {"iterations": it, "pgnorm": pgn}


def _spd_solve(H, rhs):
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(H, check_finite=False), rhs, check_finite=False)


def _kkt_residual(H, c, lo, hi, y):
    g = H @ y - c
    return float(np.linalg.norm(y - np.clip(y - g, lo, hi), np.inf))


def _rounding_slack(H, c, z):
    """Bound on the rounding error of ``0.5 z'Hz - c'z`` (twice the standard
    dot-product bound, covering a comparison of two such values)."""
    a = np.abs(z)
    return 2 * z.size * np.finfo(float).eps * (a @ (np.abs(H) @ a) + np.abs(c) @ a)


def _pdas(H, c, lo, hi, y, max_iter=60):
    """Primal-dual active set iteration for the box QP; the returned point is
    the best (lowest objective) feasible iterate seen, where objective ties
    at rounding level go to the later iterate."""
    def f_of(z):
        return 0.5 * z @ (H @ z) - c @ z

    cst = float(np.mean(np.diag(H)))
    best_y, best_f = y.copy(), f_of(y)
    prev = None
    it = 0
    for it in range(1, max_iter + 1):
        mu = H @ y - c
        trial = y - mu / cst
        at_lo = trial < lo
        at_hi = trial > hi
        key = (at_lo.tobytes(), at_hi.tobytes())
        if key == prev:
            break
        prev = key
        act = at_lo | at_hi
        x = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
        F = np.flatnonzero(~act)
        if F.size:
            A = np.flatnonzero(act)
            x[F] = _spd_solve(H[np.ix_(F, F)], c[F] - H[np.ix_(F, A)] @ x[A])
        y = np.clip(x, lo, hi)
        fy = f_of(y)
        if fy <= best_f + _rounding_slack(H, c, y):
            best_y, best_f = y.copy(), fy
    return best_y, _kkt_residual(H, c, lo, hi, best_y), it


def _projected_newton(H, c, lo, hi, y, tol, max_iter):
    def f_of(z):
        return 0.5 * z @ (H @ z) - c @ z

    f = f_of(y)
    dh = np.diag(H)
    pgn = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = H @ y - c
        pgn = float(np.linalg.norm(y - np.clip(y - g, lo, hi), np.inf))
        if pgn <= tol:
            break
        eps = min(1e-8, pgn)
        bind = ((y <= lo + eps) & (g > 0)) | ((y >= hi - eps) & (g < 0))
        d = np.zeros_like(y)
        d[bind] = -g[bind] / dh[bind]
        F = np.flatnonzero(~bind)
        if F.size:
            d[F] = scipy.linalg.solve(H[np.ix_(F, F)], -(g[F] + H[np.ix_(F, np.flatnonzero(bind))] @ d[bind]),
                                      assume_a="pos")
        t = 1.0
        for _ in range(60):
            yn = np.clip(y + t * d, lo, hi)
            fn = f_of(yn)
            if fn <= f + 1e-4 * float(g @ (yn - y)) + _rounding_slack(H, c, yn):
                break
            t *= 0.5
        else:
            res = projected_gradient_step(y, lambda z: (f_of(z), H @ z - c),
                                          lambda z: np.clip(z, lo, hi), 1.0 / max(np.max(dh), 1e-300), f, g)
            if res.stationary:
                break
            yn, fn = res.x, res.f
        if fn > f:
            break
        y, f = yn, fn
    return y, pgn, it


# --- the EIT problem ------------------------------------------------------

@dataclass
class SolveReport:
    mode: str
    objective_history: list = field(default_factory=list)
    qa_history: list = field(default_factory=list)
    r_history: list = field(default_factory=list)
    box_history: list = field(default_factory=list)
    final_objective: float = float("nan")
    final_QA: float = float("nan")
    final_JKV: float = float("nan")
    final_R: list = field(default_factory=list)
    final_S: float = 0.0
    alpha: list = field(default_factory=list)
    constraint_residuals: dict = field(default_factory=dict)
    reference_objective: float | None = None
    minimality_gap: float | None = None
    iterations: int = 0
    wall_time: float = 0.0
    stability_norm: float = float("nan")
    projected_gradient_norm: float = float("nan")
    converged: bool = False
    stop_reason: str = ""
    seed: int | None = None
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def history_csv(self) -> str:
        lines = ["iter,objective,qa,r,box_violation"]
        for k, (t, q, r, b) in enumerate(zip(self.objective_history, self.qa_history,
                                              self.r_history, self.box_history)):
            lines.append(f"{k},{t!r},{q!r},{r!r},{b!r}")
        return "\n".join(lines) + "\n"


class EITProblem:
    """Discrete regularized problem in one of three modes.

    ``aao-ls``:  S + Q_A + alpha.R, conductivity box only, S = 0.5||tr u - y||^2_{L2(bdry)}
    ``maao-ls``: Q_A + alpha.R, conductivity box and sup-norm trace boxes
    ``maao-kv``: J_KV + alpha.R, conductivity box, voltage boxes and
                 ``||tr psi_i - gamma_i||_{W11} <= tau*delta``
    """

    def __init__(self, mesh: TriMesh, record: BoundaryRecord, config: RegConfig,
                 mode: str = "maao-ls", lower: float = 0.5, upper: float = 4.0, alpha=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        check_sigma_box(lower, upper)
        self.mesh = mesh
        self.record = record
        self.config = config
        self.mode = mode
        self.lower = float(lower)
        self.upper = float(upper)
        if alpha is None:
            alpha, _ = alpha_schedule(config, record.delta)
        self.alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (config.m,)).copy()
        if np.any(self.alpha <= 0):
            raise ValueError("regularization weights must be positive")
        self.n_exp = record.n_experiments
        self.n = mesh.n_nodes
        self.b = mesh.boundary_nodes
        self.B = fem.cross_matrix(mesh).toarray()
        self.G = fem.fractional_operator(mesh, config.s_state).gram
        self.bw = fem.boundary_weights(mesh)
        ulo, uhi, glo, ghi = trace_box(record)
        self._tbox = (ulo, uhi, glo, ghi)

    # objective ------------------------------------------------------------
    @property
    def uses_kv(self) -> bool:
        return self.mode == "maao-kv"

    def data_misfit(self, state: StateEnsemble, grad=False):
        if self.mode != "aao-ls":
            return (0.0, np.zeros_like(state.phi), np.zeros_like(state.psi)) if grad else 0.0
        r1 = state.phi[:, self.b] - self.record.upsilon
        r2 = state.psi[:, self.b] - self.record.gamma
        val = 0.5 * float(np.sum(self.bw * (r1 ** 2 + r2 ** 2)))
        if not grad:
            return val
        d_phi = np.zeros_like(state.phi)
        d_psi = np.zeros_like(state.psi)
        d_phi[:, self.b] = self.bw * r1
        d_psi[:, self.b] = self.bw * r2
        return val, d_phi, d_psi

    def evaluate(self, sigma, state: StateEnsemble, grad=False) -> dict:
        """All objective parts; ``T`` is the regularized objective."""
        s = np.asarray(sigma, dtype=float)
        out = {}
        qa = eval_QA(self.mesh, s, state, grad)
        kv = eval_JKV(self.mesh, s, state, grad)
        R = eval_R(self.mesh, self.config, s, state, grad)
        S = self.data_misfit(state, grad)
        if grad:
            qa, *dqa = qa
            kv, *dkv = kv
            R, *dR = R
            S, *dS = S
            dJ = dkv if self.uses_kv else dqa
            out["d_sigma"] = dJ[0] + np.tensordot(self.alpha, dR[0], 1)
            out["d_phi"] = dJ[1] + np.tensordot(self.alpha, dR[1], 1) + dS[0]
            out["d_psi"] = dJ[2] + np.tensordot(self.alpha, dR[2], 1) + dS[1]
        J = kv if self.uses_kv else qa
        out.update(QA=qa, JKV=kv, J=J, R=R, S=S, T=J + float(self.alpha @ R) + S)
        return out

    def objective(self, sigma, state) -> float:
        return self.evaluate(sigma, state)["T"]

    # feasibility ----------------------------------------------------------
    def residuals(self, sigma, state: StateEnsemble) -> dict:
        s = np.asarray(sigma)
        box = max(0.0, float(np.max(self.lower - s)), float(np.max(s - self.upper)))
        ulo, uhi, glo, ghi = self._tbox
        tphi = state.phi[:, self.b]
        tpsi = state.psi[:, self.b]
        width = self.record.tau * self.record.delta
        out = {"sigma_box": box, "morozov_slack": 0.0, "w11_slack": 0.0}
        if self.mode == "aao-ls":
            out["max_box_violation"] = box
            return out
        vphi = max(0.0, float(np.max(ulo - tphi)), float(np.max(tphi - uhi)))
        if self.uses_kv:
            w11 = max(w11_boundary_norm(self.mesh, tpsi[i] - self.record.gamma[i]) for i in range(self.n_exp))
            out["w11_slack"] = max(0.0, w11 - width)
            out["morozov_slack"] = vphi
        else:
            vpsi = max(0.0, float(np.max(glo - tpsi)), float(np.max(tpsi - ghi)))
            out["morozov_slack"] = max(vphi, vpsi)
        out["max_box_violation"] = max(box, out["morozov_slack"])
        return out

    def is_admissible(self, sigma, state, tol=1e-10) -> bool:
        r = self.residuals(sigma, state)
        return r["max_box_violation"] <= tol and r["w11_slack"] <= tol

    def project(self, sigma, state: StateEnsemble):
        s = np.clip(np.asarray(sigma, dtype=float), self.lower, self.upper)
        if self.mode == "aao-ls":
            return s, state.copy()
        ulo, uhi, glo, ghi = self._tbox
        phi = state.phi.copy()
        psi = state.psi.copy()
        phi[:, self.b] = np.clip(phi[:, self.b], ulo, uhi)
        if self.uses_kv:
            for i in range(self.n_exp):
                psi[i, self.b] = self._shrink_w11(psi[i, self.b], i)
        else:
            psi[:, self.b] = np.clip(psi[:, self.b], glo, ghi)
        return s, StateEnsemble(phi, psi)

    def _shrink_w11(self, trace, i):
        """Radial pull of a trace towards ``gamma_i`` into the W11 ball."""
        gam = self.record.gamma[i]
        radius = self.record.tau * self.record.delta
        nrm = w11_boundary_norm(self.mesh, trace - gam)
        if nrm <= radius:
            return trace.copy()
        if radius == 0:
            return gam.copy()
        return gam + (trace - gam) * (radius / nrm) * (1 - 1e-14)

    def stability_norm(self, sigma, state) -> float:
        R0 = eval_R(self.mesh, self.config, sigma, state)[0]
        traces = np.concatenate([state.phi[:, self.b].ravel(), state.psi[:, self.b].ravel()])
        return float(np.max(np.abs(sigma)) + 2.0 * R0 + np.max(np.abs(traces)))

    # state subproblem -----------------------------------------------------
    def state_system(self, sigma, i, H=None):
        """Hessian and linear term of the state objective of experiment ``i``
        for fixed conductivity, in the variable ``(phi_i, psi_i)``. The Hessian
        is the same for every experiment and may be passed in."""
        n = self.n
        if H is None:
            H = self.state_hessian(sigma)
        c = np.zeros(2 * n)
        if self.mode == "aao-ls":
            c[self.b] = self.bw * self.record.upsilon[i]
            c[n + self.b] = self.bw * self.record.gamma[i]
        return H, c

    def state_hessian(self, sigma):
        s = np.asarray(sigma, dtype=float)
        Ks = fem.weighted_stiffness(self.mesh, s).toarray()
        Ki = fem.weighted_stiffness(self.mesh, 1.0 / s).toarray()
        a = self.alpha[0]
        n = self.n
        H = np.zeros((2 * n, 2 * n))
        H[:n, :n] = Ks + a * self.G
        H[n:, n:] = Ki + a * self.G
        if not self.uses_kv:
            H[:n, n:] = -self.B
            H[n:, :n] = -self.B.T
        if self.mode == "aao-ls":
            H[self.b, self.b] += self.bw
            H[n + self.b, n + self.b] += self.bw
        return 0.5 * (H + H.T)

    def state_bounds(self, i):
        n = self.n
        lo = np.full(2 * n, -np.inf)
        hi = np.full(2 * n, np.inf)
        if self.mode != "aao-ls":
            ulo, uhi, glo, ghi = self._tbox
            lo[self.b], hi[self.b] = ulo[i], uhi[i]
            if not self.uses_kv:
                lo[n + self.b], hi[n + self.b] = glo[i], ghi[i]
        return lo, hi

    def solve_states(self, sigma, state: StateEnsemble, tol=1e-12) -> StateEnsemble:
        """Exact minimization of the state subproblem for fixed conductivity.
        Returns a state that is never worse than the input."""
        phi = state.phi.copy()
        psi = state.psi.copy()
        n = self.n
        Hs = self.state_hessian(sigma)
        for i in range(self.n_exp):
            H, c = self.state_system(sigma, i, Hs)
            lo, hi = self.state_bounds(i)
            x0 = np.concatenate([phi[i], psi[i]])
            q0 = 0.5 * x0 @ H @ x0 - c @ x0
            if self.uses_kv:
                x = self._kv_state(H, c, lo, hi, x0, i, tol)
            else:
                x, _ = box_qp(H, c, lo, hi, x0, tol)
            q1 = 0.5 * x @ H @ x - c @ x
            if q1 <= q0:
                phi[i], psi[i] = x[:n], x[n:]
        return StateEnsemble(phi, psi)

    def _kv_state(self, H, c, lo, hi, x0, i, tol):
        """phi block: box QP. psi block: augmented Lagrangian on
        ``D (tr psi - gamma) = z`` with the slack ``z`` in an l1 ball."""
        n = self.n
        xphi, _ = box_qp(H[:n, :n], c[:n], lo[:n], hi[:n], x0[:n], tol)
        Hpsi = H[n:, n:]
        gam = self.record.gamma[i]
        radius = self.record.tau * self.record.delta
        psi = x0[n:].copy()
        if radius == 0:
            lo2 = np.full(n, -np.inf)
            hi2 = np.full(n, np.inf)
            lo2[self.b] = hi2[self.b] = gam
            psi, _ = box_qp(Hpsi, c[n:], lo2, hi2, psi, tol)
        else:
            psi = self._kv_psi_auglag(Hpsi, c[n:], i, psi)
        return np.concatenate([xphi, psi])

    def _kv_psi_auglag(self, Hpsi, cpsi, i, psi0, mu=10.0, slack_tol=1e-8, max_outer=12):
        n = self.n
        gam = self.record.gamma[i]
        radius = self.record.tau * self.record.delta
        D = w11_matrix(self.mesh)
        E = np.zeros((len(self.b), n))
        E[np.arange(len(self.b)), self.b] = 1.0
        DE = D @ E
        Dg = D @ gam
        lam = np.zeros(D.shape[0])
        psi = psi0.copy()
        z = project_l1_ball(DE @ psi - Dg, radius)
        for _ in range(max_outer):
            M = Hpsi + mu * DE.T @ DE
            cho = scipy.linalg.cho_factor(M)
            for _ in range(500):
                rhs = cpsi - DE.T @ lam + mu * DE.T @ (Dg + z)
                psi = scipy.linalg.cho_solve(cho, rhs)
                z_new = project_l1_ball(DE @ psi - Dg + lam / mu, radius)
                if np.linalg.norm(z_new - z, np.inf) <= 1e-13 * max(1.0, radius):
                    z = z_new
                    break
                z = z_new
            r = DE @ psi - Dg - z
            if np.linalg.norm(r, np.inf) <= slack_tol:
                break
            lam = lam + mu * r
            mu *= 10.0
        psi[self.b] = self._shrink_w11(psi[self.b], i)
        return psi

    # conductivity subproblem ---------------------------------------------
    def solve_sigma(self, sigma, state: StateEnsemble):
        eg = fem.p1_gradients(self.mesh)
        gg = np.zeros(self.mesh.n_triangles)
        hh = np.zeros(self.mesh.n_triangles)
        for i in range(self.n_exp):
            g = eg.of(state.phi[i])
            h = eg.rot_of(state.psi[i])
            gg += np.einsum("td,td->t", g, g)
            hh += np.einsum("td,td->t", h, h)
        if self.config.m == 1:
            return sigma_update(gg, hh, self.lower, self.upper)

        # sigma is regularized too: convex, non-separable; projected gradient
        def fg(s):
            ev = self.evaluate(s, state, grad=True)
            return ev["T"], ev["d_sigma"]

        s, _, _ = projected_gradient(sigma, fg, lambda v: np.clip(v, self.lower, self.upper),
                                     max_iter=200, tol=1e-12)
        return s

    # initial guess --------------------------------------------------------
    def harmonic_lift(self, sigma0=None) -> StateEnsemble:
        s0 = np.full(self.mesh.n_triangles, 0.5 * (self.lower + self.upper)) if sigma0 is None else sigma0
        phi = np.stack([forward_solve(self.mesh, s0, dirichlet=u) for u in self.record.upsilon])
        psi = np.stack([forward_solve(self.mesh, s0, dirichlet=g, inverse_weight=True)
                        for g in self.record.gamma])
        return StateEnsemble(phi, psi)

    def projected_gradient_norm(self, sigma, state) -> float:
        ev = self.evaluate(sigma, state, grad=True)
        s = np.asarray(sigma)
        ps = s - np.clip(s - ev["d_sigma"], self.lower, self.upper)
        lo = np.stack([self.state_bounds(i)[0] for i in range(self.n_exp)])
        hi = np.stack([self.state_bounds(i)[1] for i in range(self.n_exp)])
        u = np.concatenate([state.phi, state.psi], axis=1)
        g = np.concatenate([ev["d_phi"], ev["d_psi"]], axis=1)
        pu = u - np.clip(u - g, lo, hi)
        if self.uses_kv:
            pu[:, self.n + self.b] = 0.0  # W11-constrained block: not a box
        return float(max(np.linalg.norm(ps, np.inf), np.linalg.norm(pu, np.inf)))


def config_hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def solve_instance(mesh: TriMesh, record: BoundaryRecord, config: RegConfig, mode: str = "maao-ls",
                   start="center", lower: float = 0.5, upper: float = 4.0, alpha=None,
                   reference=None, max_iter: int = 5000, rel_tol: float = 1e-10,
                   pg_tol: float = 1e-9, history_path=None):
    """Alternating minimization of the regularized problem.

    Parameters
    ----------
    start : "center", "truth" or a ``(sigma, StateEnsemble)`` pair. The center
        start is the box midpoint with the harmonic lift of the data.
    reference : optional ``(sigma, StateEnsemble)``, typically the
        manufactured truth, for the minimality check.

    Returns
    -------
    (ConductivityField, StateEnsemble, SolveReport)
    """
    t0 = time.perf_counter()
    prob = EITProblem(mesh, record, config, mode, lower, upper, alpha)
    if isinstance(start, str):
        if start == "center":
            sigma = np.full(mesh.n_triangles, 0.5 * (lower + upper))
            state = prob.harmonic_lift(sigma)
        elif start == "truth":
            if reference is None:
                raise ValueError("start='truth' needs a reference")
            sigma, state = np.asarray(reference[0], dtype=float).copy(), reference[1].copy()
        else:
            raise ValueError(f"unknown start {start!r}")
    else:
        sigma, state = np.asarray(start[0], dtype=float).copy(), start[1].copy()
    sigma, state = prob.project(sigma, state)

    report = SolveReport(mode=mode, alpha=prob.alpha.tolist(), seed=record.seed,
                         config_hash=config_hash(config.to_dict(), mode, lower, upper))

    def log_point(ev, s, st):
        report.objective_history.append(ev["T"])
        report.qa_history.append(ev["QA"])
        report.r_history.append(float(np.sum(ev["R"])))
        report.box_history.append(prob.residuals(s, st)["max_box_violation"])

    ev = prob.evaluate(sigma, state)
    log_point(ev, sigma, state)
    T_old = ev["T"]
    report.stop_reason = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        sigma = prob.solve_sigma(sigma, state)
        state = prob.solve_states(sigma, state)
        ev = prob.evaluate(sigma, state)
        T = ev["T"]
        if not np.isfinite(T):
            raise SolverError(f"non-finite objective at iteration {it}")
        if T > T_old + 1e-12 * (1.0 + abs(T_old)):
            raise SolverError(f"objective increased at iteration {it}: {T_old!r} -> {T!r}")
        log_point(ev, sigma, state)
        decrease = T_old - T
        T_old = T
        # scale by the Q_A form of the objective: J_KV exceeds Q_A by a
        # boundary-only term, which must not change when the solve stops
        scale = T - ev["J"] + ev["QA"]
        if decrease <= rel_tol * max(abs(scale), 1e-300):
            report.stop_reason = "relative_decrease"
            report.converged = True
            break
        if it % 10 == 0 and prob.projected_gradient_norm(sigma, state) < pg_tol:
            report.stop_reason = "projected_gradient"
            report.converged = True
            break

    report.iterations = it
    report.final_objective = ev["T"]
    report.final_QA = ev["QA"]
    report.final_JKV = ev["JKV"]
    report.final_R = [float(r) for r in ev["R"]]
    report.final_S = float(ev["S"])
    report.constraint_residuals = prob.residuals(sigma, state)
    report.stability_norm = prob.stability_norm(sigma, state)
    report.projected_gradient_norm = prob.projected_gradient_norm(sigma, state)
    if reference is not None:
        ref_sigma = np.asarray(reference[0], dtype=float)
        if prob.is_admissible(ref_sigma, reference[1]):
            report.reference_objective = prob.objective(ref_sigma, reference[1])
            report.minimality_gap = report.final_objective - report.reference_objective
    report.wall_time = time.perf_counter() - t0
    if history_path is not None:
        from pathlib import Path
        Path(history_path).write_text(report.history_csv())
    log.info("solve %s: %d iterations, T=%.6e, QA=%.3e (%s)", mode, it, report.final_objective,
             report.final_QA, report.stop_reason)
    return ConductivityField(sigma, lower, upper), state, report


def state_qp_polish(mesh: TriMesh, sigma, record: BoundaryRecord, config: RegConfig,
                    mode="maao-ls", lower=None, upper=None, alpha=None, state=None,
                    probes=8, seed=0):
    """Minimize the state subproblem for fixed conductivity to high accuracy.

    The Hessian is checked positive semidefinite on random probes before the
    solve; returns ``(StateEnsemble, info)``.
    """
    s = sigma.values if isinstance(sigma, ConductivityField) else np.asarray(sigma, dtype=float)
    lo_ = float(np.min(s)) if lower is None else lower
    hi_ = float(np.max(s)) if upper is None else upper
    prob = EITProblem(mesh, record, config, mode, lo_, hi_, alpha)
    rng = np.random.default_rng(seed)
    min_curv = np.inf
    for i in range(prob.n_exp):
        H, _ = prob.state_system(s, i)
        for _ in range(probes):
            v = rng.standard_normal(H.shape[0])
            min_curv = min(min_curv, float(v @ H @ v) / float(v @ v))
    if min_curv < -1e-12:
        raise SolverError(f"state Hessian not positive semidefinite (curvature {min_curv:.3e})")
    if state is None:
        state = prob.harmonic_lift(s)
    _, state = prob.project(s, state)
    out = prob.solve_states(s, state, tol=1e-13)
    return out, {"min_probe_curvature": min_curv, "objective": prob.objective(s, out)}
