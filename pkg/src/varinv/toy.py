"""Reduced, all-at-once and Morozov-type all-at-once regularization on small
linear problems, and the ``delta -> 0`` sweep harness.

A toy problem has a parameter ``x``, a state ``u = K x`` and observations
``y = C u``. All solves are dense and exact (or certified to high accuracy)
so that they can serve as oracles for the EIT machinery.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .optimizer import box_qp, projected_gradient

MAX_TOY_DIM = 10
TOY_METHODS = ("reduced", "aao", "maao")


class SweepError(RuntimeError):
    """A solve inside a sweep failed; ``delta`` identifies the row."""

    def __init__(self, delta, cause):
        super().__init__(f"solve failed at delta={delta!r}: {cause}")
        self.delta = delta
        self.cause = cause


class TrendError(AssertionError):
    pass


@dataclass(frozen=True)
class ToyLinearProblem:
    """``u = K x``, ``y = C u``; ``F = C K`` is the reduced forward map."""

    K: np.ndarray
    C: np.ndarray
    x_true: np.ndarray

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        x = np.asarray(self.x_true, dtype=float).ravel()
        if K.shape[1] != x.size or C.shape[1] != K.shape[0]:
            raise ValueError(f"incompatible shapes K{K.shape}, C{C.shape}, x({x.size})")
        if max(K.shape + C.shape) > MAX_TOY_DIM:
            raise ValueError(f"toy dimensions are capped at {MAX_TOY_DIM}")
        for name, arr in (("K", K), ("C", C), ("x_true", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def F(self) -> np.ndarray:
        return self.C @ self.K

    @property
    def u_true(self) -> np.ndarray:
        return self.K @ self.x_true

    @property
    def y_exact(self) -> np.ndarray:
        return self.C @ self.u_true

    @property
    def dims(self):
        return self.K.shape[1], self.K.shape[0], self.C.shape[0]


def diagonal_toy(singular_values=(1.0, 0.1, 0.01), x_true=None, c_diag=None) -> ToyLinearProblem:
    """Ill-conditioned diagonal toy: ``K = diag(s)``, ``C = diag(c_diag)``
    (identity by default)."""
    s = np.asarray(singular_values, dtype=float)
    x = np.ones_like(s) if x_true is None else np.asarray(x_true, dtype=float)
    c = np.ones_like(s) if c_diag is None else np.asarray(c_diag, dtype=float)
    return ToyLinearProblem(np.diag(s), np.diag(c), x)


def random_toy(seed, n=None, decay=0.3) -> ToyLinearProblem:
    """Random square toy with geometrically decaying singular values of ``K``
    and a positive diagonal observation map."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7)) if n is None else int(n)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = decay ** np.arange(n) * rng.uniform(0.5, 1.5, n)
    K = (U * s) @ V.T
    C = np.diag(rng.uniform(0.5, 1.5, n))
    return ToyLinearProblem(K, C, rng.standard_normal(n))


def toy_noise(problem: ToyLinearProblem, delta: float, seed) -> np.ndarray:
    """Noisy data ``y + e`` with ``e`` uniform in ``[-delta, delta]``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    y = problem.y_exact
    if delta == 0:
        return y.copy()
    rng = np.random.default_rng(seed)
    return y + rng.uniform(-delta, delta, y.shape)


def _alpha_pair(alpha):
    a = np.broadcast_to(np.asarray(alpha, dtype=float), (2,))
    return float(a[0]), float(a[1])


# --- solvers --------------------------------------------------------------

def reduced_tikhonov_solve(problem: ToyLinearProblem, y_delta, alpha) -> np.ndarray:
    """Minimize ``0.5 |F x - y|^2 + 0.5 alpha |x|^2`` via the normal
    equations. ``alpha = 0`` is accepted when ``F`` has full column rank."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    F = problem.F
    A = F.T @ F + alpha * np.eye(F.shape[1])
    return scipy.linalg.solve(A, F.T @ np.asarray(y_delta, dtype=float), assume_a="pos")


def aao_system(problem: ToyLinearProblem, y_delta, alpha):
    """Stacked normal equations of the all-at-once functional
    ``0.5|C u - y|^2 + 0.5|u - K x|^2 + 0.5 a_x |x|^2 + 0.5 a_u |u|^2``."""
    ax, au = _alpha_pair(alpha)
    K, C = problem.K, problem.C
    nx, nu = K.shape[1], K.shape[0]
    H = np.block([[K.T @ K + ax * np.eye(nx), -K.T],
                  [-K, C.T @ C + (1.0 + au) * np.eye(nu)]])
    rhs = np.concatenate([np.zeros(nx), C.T @ np.asarray(y_delta, dtype=float)])
    return H, rhs


def aao_tikhonov_solve(problem: ToyLinearProblem, y_delta, alpha):
    """All-at-once Tikhonov minimizer ``(x, u)``; ``alpha`` is a scalar or an
    ``(alpha_x, alpha_u)`` pair, both positive."""
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("alpha must be componentwise positive")
    H, rhs = aao_system(problem, y_delta, alpha)
    z = scipy.linalg.solve(H, rhs, assume_a="pos")
    nx = problem.K.shape[1]
    return z[:nx], z[nx:]


def morozov_intervals(problem: ToyLinearProblem, y_delta, delta, tau):
    """Bounds on ``u`` equivalent to ``|C u - y|_inf <= tau delta`` for
    diagonal ``C``."""
    C = problem.C
    if C.shape[0] != C.shape[1] or np.any(C != np.diag(np.diag(C))):
        raise ValueError("the Morozov toy solver needs a square diagonal observation map")
    c = np.diag(C)
    if np.any(c == 0):
        raise ValueError("observation map has a zero diagonal entry")
    w = tau * delta
    y = np.asarray(y_delta, dtype=float)
    a, b = (y - w) / c, (y + w) / c
    return np.minimum(a, b), np.maximum(a, b)


def morozov_system(problem: ToyLinearProblem, alpha):
    """Hessian of ``0.5|u - K x|^2 + 0.5 a_x|x|^2 + 0.5 a_u|u|^2``."""
    ax, au = _alpha_pair(alpha)
    K = problem.K
    nx, nu = K.shape[1], K.shape[0]
    return np.block([[K.T @ K + ax * np.eye(nx), -K.T],
                     [-K, (1.0 + au) * np.eye(nu)]])


def morozov_aao_solve(problem: ToyLinearProblem, y_delta, delta, tau, alpha, tol=1e-13,
                      max_iter=2000):
    """Minimize the model misfit plus Tikhonov term subject to the sup-norm
    discrepancy bound, by Barzilai-Borwein projected gradient on ``(x, u)``.

    The projected-gradient iterate is finished by an active-set solve of the
    same strictly convex box QP, which makes the result exact up to rounding.
    """
    if tau < 1:
        raise ValueError("tau must be at least 1")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("alpha must be componentwise positive")
    ulo, uhi = morozov_intervals(problem, y_delta, delta, tau)
    H = morozov_system(problem, alpha)
    nx = problem.K.shape[1]
    lo = np.concatenate([np.full(nx, -np.inf), ulo])
    hi = np.concatenate([np.full(nx, np.inf), uhi])

    def fg(z):
        Hz = H @ z
        return 0.5 * float(z @ Hz), Hz

    def project(z):
        return np.clip(z, lo, hi)

    z0 = np.concatenate([np.zeros(nx), 0.5 * (ulo + uhi)])
    step0 = 1.0 / float(np.max(np.abs(np.linalg.eigvalsh(H))))
    z, _, _ = projected_gradient(z0, fg, project, max_iter=max_iter, tol=tol, step0=step0)
    z, _ = box_qp(H, np.zeros_like(z), lo, hi, z, tol=1e-14)
    return z[:nx], z[nx:]


# --- objectives used by the sweep ----------------------------------------

def toy_objective(problem: ToyLinearProblem, method: str, x, u, y_delta, alpha) -> float:
    ax, au = _alpha_pair(alpha)
    y = np.asarray(y_delta, dtype=float)
    if method == "reduced":
        r = problem.F @ x - y
        return 0.5 * float(r @ r) + 0.5 * ax * float(x @ x)
    model = 0.5 * float(np.sum((u - problem.K @ x) ** 2))
    reg = 0.5 * ax * float(x @ x) + 0.5 * au * float(u @ u)
    if method == "aao":
        return model + reg + 0.5 * float(np.sum((problem.C @ u - y) ** 2))
    return model + reg


def toy_stability_norm(problem: ToyLinearProblem, x, u) -> float:
    """``|x|_inf + |u|^2 + |C u|_inf``, the toy analogue of the EIT stability norm."""
    return float(np.max(np.abs(x)) + u @ u + np.max(np.abs(problem.C @ u)))


# --- delta sweep ----------------------------------------------------------

@dataclass
class SweepRow:
    delta: float
    alpha: float
    recon_error: float
    stability_norm: float
    minimality_gap: float
    qa: float
    feasible: bool

    def csv(self) -> str:
        return (f"{self.delta!r},{self.alpha!r},{self.recon_error!r},{self.stability_norm!r},"
                f"{self.minimality_gap!r},{self.qa!r},{int(self.feasible)}")


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)

    HEADER = "delta,alpha,recon_error,stability_norm,minimality_gap,qa,feasible"

    def to_csv(self) -> str:
        return "\n".join([self.HEADER] + [r.csv() for r in self.rows]) + "\n"

    @property
    def trend_ok(self) -> bool | None:
        if len(self.rows) < 2:
            return None
        return self.rows[-1].recon_error <= self.rows[0].recon_error

    @property
    def stability_ok(self) -> bool | None:
        if len(self.rows) < 2:
            return None
        bound = 2.0 * self.rows[0].stability_norm
        return all(r.stability_norm <= bound for r in self.rows)

    @property
    def all_feasible(self) -> bool:
        return all(r.feasible for r in self.rows)

    @property
    def verdict(self) -> str:
        if len(self.rows) < 2:
            return "N/A"
        return "PASS" if (self.trend_ok and self.stability_ok and self.all_feasible) else "FAIL"


def validate_deltas(deltas) -> list:
    d = [float(v) for v in deltas]
    if not d:
        raise ValueError("empty delta list")
    if any(v < 0 for v in d):
        raise ValueError("noise levels must be nonnegative")
    for a, b in zip(d, d[1:]):
        if b > a or (b == a and a > 0):
            raise ValueError(f"delta list must be strictly decreasing, got {d}")
    return d


def make_schedule(schedule):
    """Turn a schedule description into ``delta -> alpha``: a callable, a
    :class:`~varinv.regularization.RegConfig`, or ``None`` for ``alpha = delta``
    with a ``1e-8`` floor."""
    if callable(schedule):
        return schedule
    if schedule is None:
        return lambda d: max(d, 1e-8)
    from .regularization import alpha_schedule
    return lambda d: float(alpha_schedule(schedule, d)[0][0])


def _threads(n_rows):
    cap = int(os.environ.get("VARINV_THREADS", "1") or 1)
    return max(1, min(cap, n_rows))


def _toy_row(problem, method, tau, delta, alpha, seed):
    y_delta = toy_noise(problem, delta, seed)
    if method == "reduced":
        x = reduced_tikhonov_solve(problem, y_delta, alpha)
        u = problem.K @ x
    elif method == "aao":
        x, u = aao_tikhonov_solve(problem, y_delta, alpha)
    else:
        x, u = morozov_aao_solve(problem, y_delta, delta, tau, alpha)
    T = toy_objective(problem, method, x, u, y_delta, alpha)
    T_ref = toy_objective(problem, method, problem.x_true, problem.u_true, y_delta, alpha)
    feasible = True
    if method == "maao":
        feasible = bool(np.max(np.abs(problem.C @ u - y_delta)) <= tau * delta + 1e-10)
    return SweepRow(delta, alpha, float(np.linalg.norm(x - problem.x_true)),
                    toy_stability_norm(problem, x, u), T - T_ref,
                    0.5 * float(np.sum((u - problem.K @ x) ** 2)), feasible)


@dataclass
class EITInstance:
    """An EIT phantom packaged for :func:`delta_sweep`."""

    mesh: object
    truth: object
    config: object
    mode: str = "maao-ls"
    lower: float = 0.5
    upper: float = 4.0
    start: str = "center"
    solve_kwargs: dict = field(default_factory=dict)


def relative_sigma_error(mesh, sigma, sigma_true) -> float:
    """Relative area-weighted ``L^2`` error of a P0 conductivity."""
    w = mesh.areas
    d = np.asarray(sigma) - np.asarray(sigma_true)
    return float(np.sqrt(w @ d ** 2 / (w @ np.asarray(sigma_true) ** 2)))


def _eit_row(inst: EITInstance, delta, alpha, seed):
    from .eit import add_noise
    from .optimizer import solve_instance
    record = add_noise(inst.truth.record, delta, seed)
    ref = (inst.truth.sigma, inst.truth.state)
    sigma, state, rep = solve_instance(inst.mesh, record, inst.config, inst.mode, inst.start,
                                       inst.lower, inst.upper, alpha=alpha, reference=ref,
                                       **inst.solve_kwargs)
    feasible = max(rep.box_history) <= 1e-10 and rep.constraint_residuals["w11_slack"] <= 1e-10
    gap = float("nan") if rep.minimality_gap is None else rep.minimality_gap
    return SweepRow(delta, alpha, relative_sigma_error(inst.mesh, sigma.values, inst.truth.sigma),
                    rep.stability_norm, gap, rep.final_QA, bool(feasible))


def delta_sweep(instance, deltas, schedule=None, seed=0, method="maao", tau=1.5,
                check=True) -> ConvergenceTable:
    """Solve for each noise level and tabulate error, stability and minimality.

    Parameters
    ----------
    instance : ToyLinearProblem or EITInstance
    deltas : non-increasing noise levels (strictly decreasing unless all zero)
    schedule : ``delta -> alpha`` callable, RegConfig, or None (``alpha = delta``)
    seed : base seed; row ``k`` draws noise with seed ``seed + k``
    method : toy formulation, one of ``reduced``, ``aao``, ``maao``
    check : raise :class:`TrendError` if the last error exceeds the first or
        the stability norm leaves ``[0, 2 * first]``

    Rows run concurrently up to ``VARINV_THREADS`` and are returned in the
    order of ``deltas``.
    """
    deltas = validate_deltas(deltas)
    alpha_of = make_schedule(schedule)
    if isinstance(instance, ToyLinearProblem):
        if method not in TOY_METHODS:
            raise ValueError(f"unknown toy method {method!r}")

        def run(k):
            d = deltas[k]
            return _toy_row(instance, method, tau, d, alpha_of(d), seed + k)
    elif isinstance(instance, EITInstance):
        def run(k):
            d = deltas[k]
            return _eit_row(instance, d, alpha_of(d), seed + k)
    else:
        raise TypeError(f"unsupported instance type {type(instance).__name__}")

    def guarded(k):
        try:
            return run(k)
        except Exception as exc:  # report the failing noise level
            raise SweepError(deltas[k], exc) from exc

    workers = _threads(len(deltas))
    if workers == 1:
        rows = [guarded(k) for k in range(len(deltas))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(guarded, range(len(deltas))))
    table = ConvergenceTable(rows)
    if check and len(rows) > 1:
        if not table.trend_ok:
            raise TrendError(f"error grew from {rows[0].recon_error:.3e} to {rows[-1].recon_error:.3e}")
        if not table.stability_ok:
            raise TrendError("stability norm exceeded twice its first value")
    return table
