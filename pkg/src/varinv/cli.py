"""Command-line interface: ``varinv {generate,solve,sweep,toy,convexity}``.

Exit codes: 0 success, 1 invalid configuration or missing data, 2 solver
non-convergence (or a failed sweep verdict), 3 infeasible constraints.
Every output file is written to a temporary name and renamed into place
once the whole command has succeeded.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import eit
from .mesh import build_structured_mesh, read_mesh, write_mesh
from .optimizer import MODES, SolverError, solve_instance
from .regularization import InfeasibleError, RegConfig, check_sigma_box

log = logging.getLogger("varinv")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_INFEASIBLE = 0, 1, 2, 3

DEFAULTS = {
    "mesh_n": 8,
    "experiments": 2,
    "phantom": {"kind": "inclusion", "background": 1.0, "value": 2.0, "center": [0.5, 0.5], "radius": 0.25},
    "bounds": {"lower": 0.5, "upper": 4.0},
    "noise": {"delta": 0.0, "seed": 0},
    "regularization": RegConfig().to_dict(),
    "alpha": None,
    "mode": "maao-ls",
    "solver": {"max_iter": 5000, "rel_tol": 1e-10, "pg_tol": 1e-9, "start": "center"},
    "sweep": {"target": "toy", "deltas": [4e-2, 2e-2, 1e-2, 5e-3], "method": "maao"},
    "toy": {"singular_values": [1.0, 0.1, 0.01], "x_true": None, "alpha": 1e-2, "delta": 0.0, "tau": 1.5},
    "convexity": {"target": "toy", "samples": 200, "seed": 7, "fixpoint": False, "fixpoint_max_iter": 0,
                  "alpha0": 1e-2, "cbar": None},
    "output_dir": "varinv_out",
}


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    text = resources.files("varinv").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(raw: dict) -> dict:
    """Schema-validate a user config and fill in defaults."""
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    return _merge(DEFAULTS, raw)


def check_phantom_in_box(cfg: dict) -> None:
    """Conductivity box nonempty and containing the phantom values."""
    lo, hi = cfg["bounds"]["lower"], cfg["bounds"]["upper"]
    check_sigma_box(lo, hi)
    ph = cfg["phantom"]
    values = {"inclusion": [ph["background"], ph["value"]], "affine": [ph["background"]],
              "layered": [ph["background"], ph["value"]]}[ph["kind"]]
    for v in values:
        if not lo <= v <= hi:
            raise InfeasibleError(f"phantom value {v} outside the box [{lo}, {hi}]")


# --- persistence ------------------------------------------------------------

def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def commit(outputs: dict) -> None:
    """Write every ``{path: text}`` atomically; called only after success."""
    for path, text in outputs.items():
        write_atomic(path, text)


def mesh_text(mesh) -> str:
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "mesh.txt"
        write_mesh(mesh, p)
        return p.read_text()


def state_to_json(state: eit.StateEnsemble) -> str:
    return json.dumps({"phi": state.phi.tolist(), "psi": state.psi.tolist()}, indent=1)


def state_from_json(text: str) -> eit.StateEnsemble:
    d = json.loads(text)
    return eit.StateEnsemble(np.array(d["phi"], dtype=float), np.array(d["psi"], dtype=float))


def sigma_to_csv(sigma) -> str:
    lines = ["triangle,sigma"] + [f"{k},{v!r}" for k, v in enumerate(np.asarray(sigma).tolist())]
    return "\n".join(lines) + "\n"


def sigma_from_csv(text: str) -> np.ndarray:
    rows = text.strip().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


# --- commands ---------------------------------------------------------------

def make_truth(cfg: dict, mesh):
    ph = cfg["phantom"]
    I = cfg["experiments"]
    tau = cfg["regularization"]["tau"]
    if ph["kind"] == "affine":
        return eit.manufacture_affine(mesh, ph["background"], I, tau)
    if ph["kind"] == "layered":
        return eit.manufacture_layered(mesh, ph["value"], ph["background"], I, tau)
    return eit.manufacture_inclusion(mesh, ph["background"], ph["value"], tuple(ph["center"]),
                                     ph["radius"], I, tau)


def cmd_generate(cfg: dict, out: Path) -> int:
    check_phantom_in_box(cfg)
    mesh = build_structured_mesh(cfg["mesh_n"])
    truth = make_truth(cfg, mesh)
    noisy = eit.add_noise(truth.record, cfg["noise"]["delta"], cfg["noise"]["seed"])
    commit({
        out / "mesh.txt": mesh_text(mesh),
        out / "record_exact.json": truth.record.to_json(),
        out / "record_noisy.json": noisy.to_json(),
        out / "truth_sigma.csv": sigma_to_csv(truth.sigma),
        out / "truth_state.json": state_to_json(truth.state),
    })
    log.info("generated %s phantom on n=%d into %s", cfg["phantom"]["kind"], cfg["mesh_n"], out)
    return EXIT_OK


def load_data(out: Path):
    needed = ["mesh.txt", "record_noisy.json", "truth_sigma.csv", "truth_state.json"]
    missing = [n for n in needed if not (out / n).exists()]
    if missing:
        raise ConfigError(f"missing data files in {out}: {missing}; run 'generate' first")
    mesh = read_mesh(out / "mesh.txt")
    record = eit.BoundaryRecord.load(out / "record_noisy.json")
    sigma = sigma_from_csv((out / "truth_sigma.csv").read_text())
    state = state_from_json((out / "truth_state.json").read_text())
    if sigma.size != mesh.n_triangles or state.phi.shape[1] != mesh.n_nodes:
        raise ConfigError("data files do not match the mesh")
    if record.upsilon.shape[1] != len(mesh.boundary_edges):
        raise ConfigError("boundary record does not match the mesh")
    return mesh, record, (sigma, state)


def report_json(report) -> str:
    d = report.to_dict()
    d.pop("wall_time")  # the only non-reproducible field; logged instead
    return json.dumps(d, indent=1)


def cmd_solve(cfg: dict, out: Path) -> int:
    check_sigma_box(cfg["bounds"]["lower"], cfg["bounds"]["upper"])
    mesh, record, truth = load_data(out)
    reg = RegConfig.from_dict(cfg["regularization"])
    record = eit.BoundaryRecord(record.upsilon, record.gamma, record.current, record.delta,
                                reg.tau, record.seed, record.meta)
    s = cfg["solver"]
    sigma, state, report = solve_instance(
        mesh, record, reg, cfg["mode"], s["start"], cfg["bounds"]["lower"], cfg["bounds"]["upper"],
        alpha=cfg["alpha"], reference=truth, max_iter=s["max_iter"], rel_tol=s["rel_tol"],
        pg_tol=s["pg_tol"])
    log.info("solve finished in %.2f s (%d iterations, %s)", report.wall_time, report.iterations,
             report.stop_reason)
    if not report.converged:
        log.error("solver did not converge: %s", report.stop_reason)
        return EXIT_NONCONVERGED
    commit({
        out / "sigma.csv": sigma_to_csv(sigma.values),
        out / "state.json": state_to_json(state),
        out / "report.json": report_json(report),
        out / "history.csv": report.history_csv(),
    })
    return EXIT_OK


def _toy_from_cfg(cfg):
    from .toy import diagonal_toy
    t = cfg["toy"]
    return diagonal_toy(t["singular_values"], t["x_true"])


def cmd_sweep(cfg: dict, out: Path, deltas=None) -> int:
    from .toy import EITInstance, delta_sweep, validate_deltas
    sw = cfg["sweep"]
    deltas = validate_deltas(sw["deltas"] if deltas is None else deltas)
    schedule = (lambda d: cfg["alpha"]) if cfg["alpha"] else None
    if sw["target"] == "toy":
        table = delta_sweep(_toy_from_cfg(cfg), deltas, schedule, seed=cfg["noise"]["seed"],
                            method=sw["method"], tau=cfg["toy"]["tau"], check=False)
    else:
        check_phantom_in_box(cfg)
        mesh = build_structured_mesh(cfg["mesh_n"])
        inst = EITInstance(mesh, make_truth(cfg, mesh), RegConfig.from_dict(cfg["regularization"]),
                           cfg["mode"], cfg["bounds"]["lower"], cfg["bounds"]["upper"],
                           cfg["solver"]["start"],
                           {k: cfg["solver"][k] for k in ("max_iter", "rel_tol", "pg_tol")})
        table = delta_sweep(inst, deltas, schedule, seed=cfg["noise"]["seed"], check=False)
    commit({out / "sweep.csv": table.to_csv()})
    print(f"trend verdict: {table.verdict}")
    return EXIT_NONCONVERGED if table.verdict == "FAIL" else EXIT_OK


def cmd_toy(cfg: dict, out: Path) -> int:
    from .toy import aao_tikhonov_solve, morozov_aao_solve, reduced_tikhonov_solve, toy_noise
    t = cfg["toy"]
    prob = _toy_from_cfg(cfg)
    y = toy_noise(prob, t["delta"], cfg["noise"]["seed"])
    x_red = reduced_tikhonov_solve(prob, y, t["alpha"])
    x_aao, u_aao = aao_tikhonov_solve(prob, y, t["alpha"])
    x_m, u_m = morozov_aao_solve(prob, y, t["delta"], t["tau"], t["alpha"])
    result = {
        "x_true": prob.x_true.tolist(), "y_delta": y.tolist(), "alpha": t["alpha"], "delta": t["delta"],
        "reduced": {"x": x_red.tolist()},
        "aao": {"x": x_aao.tolist(), "u": u_aao.tolist()},
        "maao": {"x": x_m.tolist(), "u": u_m.tolist()},
    }
    commit({out / "toy.json": json.dumps(result, indent=1)})
    return EXIT_OK


def cmd_convexity(cfg: dict, out: Path) -> int:
    from .convexity import (alpha_convexity_fixpoint, eit_convexity_report, eit_residual_solver,
                            toy_convexity_report)
    c = cfg["convexity"]
    outputs = {}
    if c["target"] == "toy":
        t = cfg["toy"]
        report = toy_convexity_report(_toy_from_cfg(cfg), t["alpha"], t["delta"], t["tau"],
                                      cfg["noise"]["seed"], c["samples"])
        residual_at = None
    else:
        mesh, record, truth = load_data(out)
        reg = RegConfig.from_dict(cfg["regularization"])
        lo, hi = cfg["bounds"]["lower"], cfg["bounds"]["upper"]
        at = truth
        if (out / "sigma.csv").exists() and (out / "state.json").exists():
            at = (sigma_from_csv((out / "sigma.csv").read_text()),
                  state_from_json((out / "state.json").read_text()))
        report = eit_convexity_report(mesh, at[0], at[1], record, reg, cfg["alpha"], cfg["mode"], lo, hi,
                                      c["samples"], c["seed"], reference=truth)
        residual_at = eit_residual_solver(mesh, record, reg, cfg["mode"], lo, hi,
                                          max_iter=cfg["solver"]["max_iter"])
    if c["fixpoint"]:
        cbar = c["cbar"] or report.cbar
        if residual_at is None:
            residual_at = lambda a: 0.0  # linear toy: the model residual of the truth vanishes
        if cbar <= 0:
            cbar = 1.0
        fp = alpha_convexity_fixpoint(residual_at, cbar, c["alpha0"], c["fixpoint_max_iter"],
                                      alpha_floor=cfg["regularization"]["alpha_min"])
        report.alpha_fixpoint_history = fp.alphas
        outputs[out / "fixpoint.csv"] = fp.csv()
    outputs[out / "convexity.json"] = report.to_json()
    commit(outputs)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "sweep": cmd_sweep, "toy": cmd_toy,
            "convexity": cmd_convexity}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varinv", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="noise seed (overrides noise.seed)")
    p.add_argument("--mode", choices=MODES, help="EIT formulation (overrides mode)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "solve", "toy", "convexity"):
        sub.add_parser(name)
    sw = sub.add_parser("sweep")
    sw.add_argument("--deltas", type=float, nargs="+", help="decreasing noise levels")
    cv = sub._name_parser_map["convexity"]
    cv.add_argument("--fixpoint", action="store_true", help="run the alpha fixed-point iteration")
    cv.add_argument("--max-iter", type=int, help="fixed-point iteration cap")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        raw = json.loads(args.config.read_text()) if args.config else {}
        if args.seed is not None:
            raw.setdefault("noise", {})["seed"] = args.seed
        if args.mode is not None:
            raw["mode"] = args.mode
        if args.command == "convexity":
            if args.fixpoint:
                raw.setdefault("convexity", {})["fixpoint"] = True
            if args.max_iter is not None:
                raw.setdefault("convexity", {})["fixpoint_max_iter"] = args.max_iter
        cfg = validate_config(raw)
        out = args.out if args.out is not None else Path(cfg["output_dir"])
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.deltas)
        return COMMANDS[args.command](cfg, out)
    except InfeasibleError as exc:
        log.error("infeasible: %s", exc)
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
