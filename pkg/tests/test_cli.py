import json

import numpy as np
import pytest

from varinv import eit
from varinv.cli import load_data, main, sigma_from_csv, sigma_to_csv, state_from_json, state_to_json
from varinv.mesh import read_mesh

SMALL = {"mesh_n": 4, "noise": {"delta": 1e-3, "seed": 3}, "alpha": 1e-3,
         "solver": {"max_iter": 400}}


def run(tmp_path, *args, config=SMALL, name="cfg.json"):
    cfg = tmp_path / name
    cfg.write_text(json.dumps(config))
    return main(["--config", str(cfg), "--out", str(tmp_path / "out"), *args])


def snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_generate_and_solve_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for d in (a, b):
        assert run(d, "generate") == 0
        assert run(d, "solve") == 0
    snap = snapshot(a / "out")
    assert set(snap) == {"mesh.txt", "record_exact.json", "record_noisy.json", "truth_sigma.csv",
                         "truth_state.json", "sigma.csv", "state.json", "report.json", "history.csv"}
    assert snap == snapshot(b / "out")
    rep = json.loads(snap["report.json"])
    assert rep["minimality_gap"] <= 1e-8 * (1 + abs(rep["reference_objective"]))
    h = np.array(rep["objective_history"])
    assert np.all(np.diff(h) <= 1e-12 * (1 + np.abs(h[:-1])))
    for key in ("final_QA", "final_JKV", "stability_norm", "constraint_residuals", "config_hash"):
        assert rep[key] not in (None, "", {})


def test_generated_files_reload(tmp_path):
    assert run(tmp_path, "generate") == 0
    out = tmp_path / "out"
    mesh, record, (sigma, state) = load_data(out)
    assert read_mesh(out / "mesh.txt").fingerprint() == mesh.fingerprint()
    assert sigma_to_csv(sigma) == (out / "truth_sigma.csv").read_text()
    assert state_to_json(state) == (out / "truth_state.json").read_text()
    assert record.to_json() == (out / "record_noisy.json").read_text()
    np.testing.assert_array_equal(sigma_from_csv(sigma_to_csv(sigma)), sigma)
    back = state_from_json(state_to_json(state))
    np.testing.assert_array_equal(back.phi, state.phi)
    np.testing.assert_array_equal(back.psi, state.psi)


def test_affine_exact_generate(tmp_path):
    cfg = {"mesh_n": 4, "phantom": {"kind": "affine", "background": 1.0}}
    assert run(tmp_path, "generate", config=cfg) == 0
    out = tmp_path / "out"
    mesh, record, (sigma, state) = load_data(out)
    np.testing.assert_allclose(eit.residual_A(mesh, sigma, state), 0.0, atol=1e-13)
    exact = eit.BoundaryRecord.load(out / "record_exact.json")
    for name in ("upsilon", "gamma", "current"):
        np.testing.assert_array_equal(getattr(record, name), getattr(exact, name))


def test_truth_start_exact_data(tmp_path):
    cfg = {"mesh_n": 4, "phantom": {"kind": "layered", "background": 1.0, "value": 2.0},
           "alpha": 1e-8, "solver": {"start": "truth"}}
    assert run(tmp_path, "generate", config=cfg) == 0
    assert run(tmp_path, "solve", config=cfg) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["minimality_gap"] <= 1e-8 * (1 + rep["reference_objective"])


def test_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "generate") == 0
    empty_box = dict(SMALL, bounds={"lower": 3.0, "upper": 1.0})
    assert run(tmp_path, "solve", config=empty_box) == 3
    # no partial outputs
    assert not (tmp_path / "out" / "sigma.csv").exists()
    capped = dict(SMALL, solver={"max_iter": 1, "rel_tol": 1e-300, "pg_tol": 1e-300})
    assert run(tmp_path, "solve", config=capped) == 2
    assert not (tmp_path / "out" / "report.json").exists()
    assert run(tmp_path, "solve", config={"mesh_n": "eight"}) == 1
    assert run(tmp_path, "solve", config={"unknown_key": 1}) == 1
    phantom_outside = {"mesh_n": 4, "bounds": {"lower": 0.5, "upper": 1.5}}
    assert run(tmp_path, "generate", config=phantom_outside) == 3
    assert main(["--out", str(tmp_path / "nothing"), "solve"]) == 1


def test_sweep_toy(tmp_path, capsys):
    assert run(tmp_path, "sweep", config={}) == 0
    assert "trend verdict: PASS" in capsys.readouterr().out
    lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 5
    assert run(tmp_path, "sweep", "--deltas", "0.01", config={}) == 0
    assert "trend verdict: N/A" in capsys.readouterr().out
    assert run(tmp_path, "sweep", "--deltas", "0.01", "0.02", config={}) == 1


def test_toy(tmp_path):
    assert run(tmp_path, "toy", config={"toy": {"alpha": 0.01, "singular_values": [1.0, 0.1],
                                                "x_true": [1.0, 1.0]}}) == 0
    res = json.loads((tmp_path / "out" / "toy.json").read_text())
    np.testing.assert_allclose(res["reduced"]["x"], [100 / 101, 0.5])


def test_convexity_toy_and_fixpoint(tmp_path):
    assert run(tmp_path, "convexity", "--fixpoint", "--max-iter", "0", config={}) == 0
    out = tmp_path / "out"
    rep = json.loads((out / "convexity.json").read_text())
    assert rep["nonlinearity_ratio"] <= 1e-6
    assert rep["min_eigenvalue_projected"] >= -1e-8
    assert rep["alpha_fixpoint_history"] == [1e-2]
    assert len((out / "fixpoint.csv").read_text().splitlines()) == 2


def test_convexity_eit_at_truth(tmp_path):
    cfg = {"mesh_n": 3, "convexity": {"target": "eit", "samples": 20}, "alpha": 1e-2}
    assert run(tmp_path, "generate", config=cfg) == 0
    assert run(tmp_path, "convexity", config=cfg) == 0
    rep = json.loads((tmp_path / "out" / "convexity.json").read_text())
    assert isinstance(rep["cbar"], float) and rep["cbar"] > 0
