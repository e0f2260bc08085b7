"""Acceptance criteria of the package, one test per criterion.

Each test prints a ``[PASS]`` or ``[FAIL]`` line (visible without ``-s``)
before asserting. Run directly with ``python3 tests/test_acceptance.py``.
"""
import json
import sys
import time

import numpy as np
import pytest
from scipy.optimize import lsq_linear

from varinv import eit
from varinv.cli import main as cli_main
from varinv.convexity import (kv_completed_square, minimality_red_chain, nonlinearity_ratio,
                              toy_convexity_report)
from varinv.eit import StateEnsemble, boundary_form, cross_term, eval_JKV, eval_QA, kv_identity_gap
from varinv.mesh import build_structured_mesh
from varinv.optimizer import solve_instance
from varinv.regularization import RegConfig, eval_R
from varinv.toy import (EITInstance, aao_tikhonov_solve, delta_sweep, diagonal_toy,
                        morozov_aao_solve, morozov_intervals, random_toy, reduced_tikhonov_solve,
                        toy_noise)

DELTAS = [4e-2, 2e-2, 1e-2, 5e-3]
CFG = RegConfig()


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail
    return emit


def random_point(mesh, rng, n_exp=2):
    sigma = rng.uniform(0.5, 3.0, mesh.n_triangles)
    return sigma, StateEnsemble(rng.standard_normal((n_exp, mesh.n_nodes)),
                                rng.standard_normal((n_exp, mesh.n_nodes)))


def minimality_ok(rep):
    ref = rep.reference_objective
    return ref is None or rep.final_objective <= ref + 1e-8 * (1 + abs(ref))


def test_criterion_1_green_identity(verdict):
    t0 = time.perf_counter()
    mesh = build_structured_mesh(8)
    rng = np.random.default_rng(2024)
    worst_gap = worst_bdry = 0.0
    for _ in range(100):
        s, st = random_point(mesh, rng)
        J = eval_JKV(mesh, s, st)
        worst_gap = max(worst_gap, abs(kv_identity_gap(mesh, s, st)) / (1 + J))
        c = cross_term(mesh, st)
        worst_bdry = max(worst_bdry, abs(boundary_form(mesh, st) - c) / max(abs(c), 1e-300))
    dt = time.perf_counter() - t0
    ok = worst_gap <= 1e-12 and worst_bdry <= 1e-12 and dt < 5
    verdict(1, ok, f"identity gap {worst_gap:.1e}, boundary form rel. diff {worst_bdry:.1e}, {dt:.2f} s")


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    mesh = build_structured_mesh(6)
    cfg2 = RegConfig(alpha_c=(1.0, 1.0), alpha_p=(1.0, 1.0))
    rng = np.random.default_rng(77)
    worst = 0.0
    h = 1e-5
    for _ in range(50):
        s, st = random_point(mesh, rng)
        ds = rng.standard_normal(s.size)
        dp = rng.standard_normal(st.phi.shape)
        dq = rng.standard_normal(st.psi.shape)
        shift = lambda t: (s + t * ds, StateEnsemble(st.phi + t * dp, st.psi + t * dq))
        for func in (eval_QA, eval_JKV):
            _, gs, gp, gq = func(mesh, s, st, grad=True)
            fd = (func(mesh, *shift(h)) - func(mesh, *shift(-h))) / (2 * h)
            exact = gs @ ds + np.sum(gp * dp) + np.sum(gq * dq)
            worst = max(worst, abs(fd - exact) / abs(exact))
        _, gs, gp, gq = eval_R(mesh, cfg2, s, st, grad=True)
        fd = (eval_R(mesh, cfg2, *shift(h)) - eval_R(mesh, cfg2, *shift(-h))) / (2 * h)
        for j in range(2):
            exact = gs[j] @ ds + np.sum(gp[j] * dp) + np.sum(gq[j] * dq)
            worst = max(worst, abs(fd[j] - exact) / abs(exact))
    dt = time.perf_counter() - t0
    verdict(2, worst <= 1e-6 and dt < 30, f"worst relative FD error {worst:.1e} over 50 instances, {dt:.2f} s")


def test_criterion_3_oracles(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        p = random_toy(seed, n=2 + seed % 9)
        delta, a = 0.05, 1e-2
        y = toy_noise(p, delta, seed)
        F, K, C = p.F, p.K, p.C
        nx, nu = K.shape[1], K.shape[0]
        # reduced: stacked least squares
        x = reduced_tikhonov_solve(p, y, a)
        o = np.linalg.lstsq(np.vstack([F, np.sqrt(a) * np.eye(nx)]), np.r_[y, np.zeros(nx)], rcond=None)[0]
        worst = max(worst, np.abs(x - o).max())
        # all-at-once: stacked least squares in (x, u)
        xa, ua = aao_tikhonov_solve(p, y, a)
        M = np.block([[np.zeros((nu, nx)), C], [-K, np.eye(nu)], [np.sqrt(a) * np.eye(nx), np.zeros((nx, nu))],
                      [np.zeros((nu, nx)), np.sqrt(a) * np.eye(nu)]])
        rhs = np.r_[y, np.zeros(nu + nx + nu)]
        o = np.linalg.lstsq(M, rhs, rcond=None)[0]
        worst = max(worst, np.abs(np.r_[xa, ua] - o).max())
        # Morozov: bounded-variable least squares (exact active set method)
        xm, um = morozov_aao_solve(p, y, delta, 1.5, a)
        lo, hi = morozov_intervals(p, y, delta, 1.5)
        Mm = M[nu:]
        o = lsq_linear(Mm, np.zeros(Mm.shape[0]), bounds=(np.r_[np.full(nx, -np.inf), lo],
                                                         np.r_[np.full(nx, np.inf), hi]),
                       method="bvls", tol=1e-15).x
        worst = max(worst, np.abs(np.r_[xm, um] - o).max())
    dt = time.perf_counter() - t0
    verdict(3, worst <= 1e-8 and dt < 5, f"worst componentwise deviation {worst:.1e} on 20 toys, {dt:.2f} s")


SOLVES = []


def test_criterion_4_exact_data_fixed_point(verdict):
    t0 = time.perf_counter()
    mesh = build_structured_mesh(8)
    tr = eit.manufacture_affine(mesh, 1.0)
    sig, _, rep = solve_instance(mesh, tr.record, CFG, "maao-ls", start="center", alpha=1e-8,
                                 reference=(tr.sigma, tr.state))
    SOLVES.append(rep)
    dt = time.perf_counter() - t0
    err = float(np.max(np.abs(sig.values - 1.0)))
    ok = rep.final_QA <= 1e-10 and err <= 1e-4 and dt < 60
    verdict(4, ok, f"Q_A {rep.final_QA:.1e}, sigma sup error {err:.1e}, {rep.iterations} iterations, {dt:.2f} s")


def test_criterion_5_minimality(verdict):
    mesh = build_structured_mesh(4)
    inc = eit.manufacture_inclusion(mesh)
    aff = eit.manufacture_affine(mesh, 1.5)
    lay = eit.manufacture_layered(mesh)
    count = 0
    bad = []
    for tr in (inc, aff, lay):
        for mode in ("maao-ls", "maao-kv", "aao-ls"):
            for delta, seed in ((0.0, 0), (1e-2, 11)):
                rec = eit.add_noise(tr.record, delta, seed)
                for start in ("center", "truth"):
                    _, _, rep = solve_instance(mesh, rec, CFG, mode, start=start, alpha=max(delta, 1e-6),
                                               reference=(tr.sigma, tr.state))
                    count += 1
                    if not minimality_ok(rep):
                        bad.append((mode, delta, start, rep.final_objective, rep.reference_objective))
    for rep in SOLVES:
        count += 1
        if not minimality_ok(rep):
            bad.append(rep.mode)
    toy_gaps = []
    for method in ("reduced", "aao", "maao"):
        toy_gaps += [r.minimality_gap for r in delta_sweep(random_toy(1), DELTAS, method=method).rows]
    count += len(toy_gaps)
    bad += [g for g in toy_gaps if g > 1e-8]
    verdict(5, not bad, f"{count} solves checked against the truth, {len(bad)} violations")


def test_criterion_6_regularization_sweep(verdict):
    t0 = time.perf_counter()
    toy = {m: delta_sweep(diagonal_toy(), DELTAS, method=m, seed=1, check=False)
           for m in ("reduced", "aao", "maao")}
    toy_ok = all(t.verdict == "PASS" for t in toy.values())
    mesh = build_structured_mesh(16)
    inst = EITInstance(mesh, eit.manufacture_inclusion(mesh), CFG)
    table = delta_sweep(inst, DELTAS, seed=42, check=False)
    ratio = table.rows[-1].recon_error / table.rows[0].recon_error
    dt = time.perf_counter() - t0
    ok = toy_ok and ratio <= 1 and table.all_feasible and dt < 600
    verdict(6, ok, f"toy sweeps {[t.verdict for t in toy.values()]}, EIT n=16 error ratio {ratio:.3f}, "
                   f"feasible {table.all_feasible}, stability {table.stability_ok}, {dt:.1f} s")


def test_criterion_7_kv_ls_agreement(verdict):
    t0 = time.perf_counter()
    mesh = build_structured_mesh(8)
    tr = eit.manufacture_inclusion(mesh)
    out = {}
    for mode in ("maao-ls", "maao-kv"):
        sig, _, rep = solve_instance(mesh, tr.record, CFG, mode, alpha=1e-8, reference=(tr.sigma, tr.state))
        SOLVES.append(rep)
        out[mode] = sig.values
    diff = float(np.max(np.abs(out["maao-ls"] - out["maao-kv"])))
    dt = time.perf_counter() - t0
    verdict(7, diff <= 1e-6 and dt < 120, f"sup sigma difference {diff:.1e} with pinned exact traces, {dt:.1f} s")


def test_criterion_8_convexity(verdict):
    t0 = time.perf_counter()
    min_eig = np.inf
    lin_ratio = 0.0
    for seed in range(10):
        p = random_toy(seed)
        rep = toy_convexity_report(p, 1e-2, delta=0.02, seed=seed, samples=50)
        min_eig = min(min_eig, rep.min_eigenvalue_projected)
        lin_ratio = max(lin_ratio, rep.nonlinearity_ratio)
    A = np.random.default_rng(0).standard_normal((5, 4))
    lin_ratio = max(lin_ratio, nonlinearity_ratio(lambda x, h: A @ h, np.zeros(4), samples=100).ratio)

    mesh = build_structured_mesh(4)
    rng = np.random.default_rng(3)
    worst_sq = 0.0
    for tr in (eit.manufacture_affine(mesh, 1.5), eit.manufacture_layered(mesh)):
        for _ in range(3):
            hs = rng.standard_normal(mesh.n_triangles)
            hp = rng.standard_normal(tr.state.phi.shape)
            hq = rng.standard_normal(tr.state.psi.shape)
            f = lambda t: eval_JKV(mesh, tr.sigma + t * hs, StateEnsemble(tr.state.phi + t * hp, tr.state.psi + t * hq))
            fd = (f(1e-4) - 2 * f(0) + f(-1e-4)) / 1e-8
            sq, cross = kv_completed_square(mesh, tr.sigma, tr.state, (hs, hp, hq))
            worst_sq = max(worst_sq, abs(sq + cross - fd) / max(1.0, abs(fd)))

    chain_ok = True
    for seed in range(10):
        p = random_toy(seed)
        a, c = 0.05, 1.0
        delta = c * a
        e = np.random.default_rng(seed).uniform(-1, 1, p.dims[2])
        y_d = p.y_exact + delta * e / np.linalg.norm(e)
        x = reduced_tikhonov_solve(p, y_d, a)
        lhs, mid, rhs = minimality_red_chain(p.F, x, p.x_true, y_d, p.y_exact, a, c)
        chain_ok &= lhs <= mid + 1e-14 and mid <= rhs
    dt = time.perf_counter() - t0
    ok = min_eig >= -1e-8 and lin_ratio <= 1e-6 and worst_sq <= 1e-5 and chain_ok and dt < 120
    verdict(8, ok, f"min projected eigenvalue {min_eig:.2e}, linear ratio {lin_ratio:.1e}, "
                   f"completed square vs FD {worst_sq:.1e}, minimality chain {chain_ok}, {dt:.1f} s")


def test_criterion_9_determinism(verdict, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mesh_n": 8, "noise": {"delta": 1e-3, "seed": 5}, "alpha": 1e-3}))
    snaps = []
    codes = []
    for run in ("a", "b"):
        out = tmp_path / run
        codes.append(cli_main(["--config", str(cfg), "--out", str(out), "generate"]))
        codes.append(cli_main(["--config", str(cfg), "--out", str(out), "solve"]))
        snaps.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = snaps[0] == snaps[1]
    verdict(9, same and codes == [0, 0, 0, 0],
            f"{len(snaps[0])} files byte-identical across two runs: {same}, exit codes {codes}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
