"""Command-line interface: ``mflq validate|solve|simulate|evaluate|reproduce``.

Exit codes: 0 success, 1 numerical or check failure, 2 input error.
A model argument of ``@benchmark`` selects the built-in four-regime instance.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .evaluate import (
    calibrate_bias,
    compare_value,
    decay_check,
    estimate_cost,
    stationarity_residual,
    suboptimality_probe,
)
from .lyapunov import LyapunovError
from .model import MfLqModel, ModelError, check_assumptions, dump_model, load_model, paper_example
from .riccati import AreSolution, RiccatiError, dump_solution, load_solution, solve_model, value_function
from .simulate import SimConfig, SimulationError, simulate_closed_loop, trajectories_to_csv

log = logging.getLogger("mflq")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
BUILTIN = "@benchmark"

# printed values of the four-regime benchmark, regimes 1..4
PRINTED_VALUES = {
    "P": (0.361, 0.259, 0.171, 0.117),
    "Ptilde": (0.687, 0.617, 0.448, 0.307),
    "Theta": (-0.776, -0.786, -0.714, -0.603),
    "ThetaHat": (-1.322, -1.494, -1.498, -1.125),
}


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0
    version: str = __version__


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(path: Path, manifest: RunManifest) -> None:
    atomic_write(path, json.dumps(asdict(manifest), indent=2, default=str))


def read_model(spec: str) -> MfLqModel:
    if spec == BUILTIN:
        return paper_example()
    try:
        text = Path(spec).read_text()
    except OSError as exc:
        raise InputError(f"cannot read model file {spec}: {exc}") from None
    try:
        return load_model(text)
    except ModelError as exc:
        raise InputError(str(exc)) from None


def read_solution(path: str, model: MfLqModel) -> AreSolution:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read solution file {path}: {exc}") from None
    try:
        return load_solution(text, model)
    except ModelError as exc:
        raise InputError(str(exc)) from None


def _fmt_row(label: str, values) -> str:
    return f"{label:<12}" + "".join(f"{v:>12.6f}" for v in values)


def _flat(fam) -> list[float]:
    return [float(v) for v in np.asarray(fam).reshape(-1)]


def _regime_table(sol: AreSolution) -> list[str]:
    g = sol.gains
    M = len(sol.P)
    lines = [f"{'':<12}" + "".join(f"{'i=' + str(i + 1):>12}" for i in range(M))]
    for name, fam in (("P", sol.P), ("Ptilde", sol.Ptilde), ("Theta", g.Theta), ("ThetaHat", g.ThetaHat)):
        arr = np.asarray(fam)
        if arr.shape[1:] == (1, 1):
            lines.append(_fmt_row(name, arr.reshape(-1)))
        else:
            for i in range(M):
                lines.append(f"{name}({i + 1}) = {np.array2string(arr[i], precision=6)}")
    lines.append("residual1   " + "".join(f"{v:>12.3e}" for v in sol.residual1))
    lines.append("residual3   " + "".join(f"{v:>12.3e}" for v in sol.residual3))
    return lines


# --- validate ---------------------------------------------------------------

def run_validate(args) -> int:
    model = read_model(args.model)
    rep = check_assumptions(model)
    print(f"model: n={model.n} k={model.k} M={model.M} r={model.r:g}")
    print(f"{'regime':>6} {'margin1':>12} {'margin2':>12} {'eig Q':>10} {'eig Qhat':>10} {'eig R':>10}")
    for i in range(model.M):
        print(f"{i + 1:>6} {rep.margin1[i]:>12.6g} {rep.margin2[i]:>12.6g} "
              f"{rep.min_eig_Q[i]:>10.4g} {rep.min_eig_Qhat[i]:>10.4g} {rep.min_eig_R[i]:>10.4g}")
    print(f"(H1) {'pass' if rep.pass_H1 else 'FAIL'}   (H2) {'pass' if rep.pass_H2 else 'FAIL'}")
    for msg in rep.messages:
        print(msg)
    return EXIT_OK if rep.passed else EXIT_FAIL


# --- solve ------------------------------------------------------------------

def run_solve(args, manifest: RunManifest) -> int:
    model = read_model(args.model)
    rep = check_assumptions(model)
    if not rep.passed:
        for msg in rep.messages:
            print(msg, file=sys.stderr)
        return EXIT_FAIL
    try:
        sol = solve_model(model, tol=args.tol, max_iter=args.max_iter, variant=args.variant)
    except RiccatiError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        if exc.trace is not None:
            print("iteration  max residual  step norm  min eig(P_k - P_k+1)", file=sys.stderr)
            for step in exc.trace.steps:
                print(f"{step.index:>9}  {np.max(step.residuals):>12.3e}  {step.step_norm:>9.3e}  "
                      f"{step.min_eig_decrement:>+.3e}", file=sys.stderr)
        return EXIT_FAIL
    for line in _regime_table(sol):
        print(line)
    print(f"iterations: ARE-1 {sol.iterations1}, ARE-3 {sol.iterations3} ({sol.variant})")
    if args.out:
        atomic_write(args.out, dump_solution(sol))
        manifest.outputs.append(str(args.out))
    return EXIT_OK


# --- simulate ---------------------------------------------------------------

def _parse_x0(text: str, n: int) -> np.ndarray:
    try:
        x = np.array([float(v) for v in str(text).split(",")])
    except ValueError:
        raise InputError(f"cannot parse x0 {text!r}") from None
    if x.shape != (n,):
        raise InputError(f"x0 must have {n} components, got {x.size}")
    return x


def _regime_arg(i0: int, model: MfLqModel) -> int:
    if not 1 <= i0 <= model.M:
        raise InputError(f"--i0 must be in 1..{model.M}")
    return i0 - 1


def run_simulate(args, manifest: RunManifest) -> int:
    model = read_model(args.model)
    sol = read_solution(args.solution, model)
    x0 = _parse_x0(args.x0, model.n)
    cfg = _sim_config(args)
    traj = simulate_closed_loop(model, sol.gains, x0, _regime_arg(args.i0, model), cfg, threads=args.threads)
    text = trajectories_to_csv(traj)
    if args.out:
        atomic_write(args.out, text)
        manifest.outputs.append(str(args.out))
        print(f"wrote {sum(p.t.size for p in traj)} rows for {len(traj)} path(s) to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _sim_config(args) -> SimConfig:
    try:
        return SimConfig(T=args.T, h=args.h, seed=args.seed, paths=args.paths)
    except ValueError as exc:
        raise InputError(str(exc)) from None


# --- evaluate ---------------------------------------------------------------

def evaluation_report(
    model: MfLqModel,
    sol: AreSolution,
    x0: np.ndarray,
    i0: int,
    cfg: SimConfig,
    delta: float,
    threads: int = 1,
    stationarity_paths: int = 20,
) -> dict[str, Any]:
    """Run every Monte Carlo check and return a JSON-ready report with pass flags."""
    g = sol.gains
    x2 = float(x0 @ x0)
    checkpoints = [cfg.T * j / 5 for j in range(1, 6)]

    est = estimate_cost(model, g.Theta, g.ThetaHat, x0, i0, cfg, threads=threads)
    bias = calibrate_bias(model, g.Theta, g.ThetaHat, x0, i0, cfg, fine=est, threads=threads)
    analytic = value_function(sol.Ptilde, x0, i0)
    cmp = compare_value(est, analytic, bias.budget)

    decay = decay_check(model, g.Theta, g.ThetaHat, x0, i0, cfg, checkpoints, threads=threads)
    decay_ok = decay.passes(x2)

    st_cfg = SimConfig(T=cfg.T, h=cfg.h, seed=cfg.seed, paths=min(stationarity_paths, cfg.paths))
    traj = simulate_closed_loop(model, g, x0, i0, st_cfg, threads=threads)
    stat = stationarity_residual(model, sol, traj)

    probe = suboptimality_probe(model, sol, delta, x0, i0, cfg, optimal=est, threads=threads)

    return {
        "mean": est.mean,
        "standard_error": est.standard_error,
        "paths": est.paths,
        "T": est.T,
        "h": est.h,
        "tail_bound": est.tail_bound,
        "bias_budget": bias.budget,
        "analytic_value": analytic,
        "z_score": cmp.z,
        "pass": cmp.passed,
        "decay": {
            "checkpoints": list(decay.checkpoints),
            "means": decay.means.tolist(),
            "standard_errors": decay.standard_errors.tolist(),
            "pass": decay_ok,
        },
        "stationarity": {
            "paths": len(traj),
            "max_norm": stat.max_norm,
            "mean_norm": stat.mean_norm,
            "max_state": stat.max_state,
            "pass": stat.passes(),
        },
        "probe": {
            "delta": delta,
            "J_optimal": probe.optimal.mean,
            "J_perturbed": probe.perturbed.mean,
            "gap": probe.gap,
            "combined_se": probe.combined_se,
            "pass": probe.passed,
        },
        "all_pass": bool(cmp.passed and decay_ok and stat.passes() and probe.passed),
    }


def _print_report(rep: dict[str, Any]) -> None:
    ok = lambda b: "pass" if b else "FAIL"  # noqa: E731
    print(f"cost: mean={rep['mean']:.6f} se={rep['standard_error']:.2e} "
          f"analytic={rep['analytic_value']:.6f} z={rep['z_score']:.2f} "
          f"tail={rep['tail_bound']:.2e} bias={rep['bias_budget']:.2e}  [{ok(rep['pass'])}]")
    d = rep["decay"]
    print("decay: e^{-rT} E|X(T)|^2")
    for c, m, s in zip(d["checkpoints"], d["means"], d["standard_errors"]):
        print(f"  T={c:<6g} {m:.6e} +- {s:.2e}")
    print(f"  [{ok(d['pass'])}]")
    s = rep["stationarity"]
    print(f"stationarity: max={s['max_norm']:.3e} mean={s['mean_norm']:.3e} "
          f"max|X|={s['max_state']:.3g}  [{ok(s['pass'])}]")
    p = rep["probe"]
    print(f"probe: delta={p['delta']:g} J*={p['J_optimal']:.6f} J_pert={p['J_perturbed']:.6f} "
          f"gap={p['gap']:.3e} se={p['combined_se']:.2e}  [{ok(p['pass'])}]")


def run_evaluate(args, manifest: RunManifest) -> int:
    model = read_model(args.model)
    sol = read_solution(args.solution, model)
    x0 = _parse_x0(args.x0, model.n)
    cfg = _sim_config(args)
    rep = evaluation_report(model, sol, x0, _regime_arg(args.i0, model), cfg, args.probe_delta, args.threads)
    _print_report(rep)
    if args.out:
        atomic_write(args.out, json.dumps(rep, indent=2))
        manifest.outputs.append(str(args.out))
    return EXIT_OK if rep["all_pass"] else EXIT_FAIL


# --- reproduce --------------------------------------------------------------

def summary_table(sol: AreSolution) -> str:
    """CSV comparing computed per-regime values with the printed benchmark values."""
    computed = {
        "P": _flat(sol.P),
        "Ptilde": _flat(sol.Ptilde),
        "Theta": _flat(sol.gains.Theta),
        "ThetaHat": _flat(sol.gains.ThetaHat),
    }
    notes = {
        "P": "",
        "Ptilde": "",
        "Theta": "",
        "ThetaHat": "printed values not reproducible from printed P and Ptilde via -Rtilde^-1 Shat",
    }
    lines = ["quantity,regime,computed,printed,delta,note"]
    for name, printed in PRINTED_VALUES.items():
        for i, (c, p) in enumerate(zip(computed[name], printed)):
            lines.append(f"{name},{i + 1},{c:.6f},{p:.3f},{c - p:+.6f},{notes[name]}")
    lines.append(f"residual1,max,{max(sol.residual1):.3e},1e-10,,")
    lines.append(f"residual3,max,{max(sol.residual3):.3e},1e-10,,")
    return "\n".join(lines) + "\n"


def run_reproduce(args, manifest: RunManifest) -> int:
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"output directory {out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    model = paper_example()

    def write(name: str, text: str) -> None:
        atomic_write(out / name, text)
        manifest.outputs.append(str(out / name))

    write("model.json", dump_model(model))
    rep = check_assumptions(model)
    print(f"[validate] (H1) {rep.pass_H1}  (H2) {rep.pass_H2}")
    if not rep.passed:
        return EXIT_FAIL

    sol = solve_model(model, variant="exact")
    write("solution_exact.json", dump_solution(sol))
    print(f"[solve] exact: {sol.iterations1} + {sol.iterations3} Lyapunov solves, "
          f"max residuals {max(sol.residual1):.2e} / {max(sol.residual3):.2e}")
    lit = solve_model(model, variant="paper_literal")
    write("solution_paper_literal.json", dump_solution(lit))
    print(f"[solve] paper_literal: Ptilde = {np.round(_flat(lit.Ptilde), 6).tolist()}, "
          f"ARE-3 residual {max(lit.residual3):.2e}")

    table = summary_table(sol)
    write("summary.csv", table)
    print(table, end="")

    x0 = np.array([args.x0] * model.n)
    cfg = SimConfig(T=args.T, h=args.h, seed=args.seed, paths=1)
    traj = simulate_closed_loop(model, sol.gains, x0, 0, cfg, threads=args.threads)
    write("trajectory.csv", trajectories_to_csv(traj))
    print(f"[simulate] {traj.paths[0].t.size} grid points, {traj.paths[0].chain.jump_times.size} jumps")

    ecfg = SimConfig(T=args.T, h=args.h, seed=args.seed, paths=args.paths)
    report = evaluation_report(model, sol, x0, 0, ecfg, args.probe_delta, args.threads)
    write("evaluation.json", json.dumps(report, indent=2))
    _print_report(report)

    deltas = [c - p for c, p in zip(_flat(sol.P), PRINTED_VALUES["P"])]
    deltas += [c - p for c, p in zip(_flat(sol.gains.Theta), PRINTED_VALUES["Theta"])]
    deltas_ok = max(abs(d) for d in deltas) <= 2e-3
    residual_ok = max(sol.residual1) <= 1e-10 and max(sol.residual3) <= 1e-10
    ok = report["all_pass"] and deltas_ok and residual_ok
    print(f"[reproduce] {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mflq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_arg(p):
        p.add_argument("model", help=f"model JSON file, or {BUILTIN} for the built-in instance")

    def sim_args(p, paths, T=5.0):
        p.add_argument("--x0", default="1", help="initial state, comma separated")
        p.add_argument("--i0", type=int, default=1, help="initial regime (1-based)")
        p.add_argument("--T", type=float, default=T)
        p.add_argument("--h", type=float, default=1e-3)
        p.add_argument("--paths", type=int, default=paths)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("validate", help="check assumptions (H1)/(H2)")
    model_arg(p)
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("solve", help="solve both Riccati equations")
    model_arg(p)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--variant", choices=("exact", "paper_literal"), default="exact")
    p.add_argument("--out", type=Path)
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("simulate", help="simulate the optimal closed loop to CSV")
    model_arg(p)
    p.add_argument("solution")
    sim_args(p, paths=1)
    p.add_argument("--out", type=Path)
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("evaluate", help="Monte Carlo verification of a solution")
    model_arg(p)
    p.add_argument("solution")
    sim_args(p, paths=10_000)
    p.add_argument("--probe-delta", type=float, default=0.2)
    p.add_argument("--out", type=Path)
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("reproduce", help="run the full benchmark pipeline")
    p.add_argument("--out-dir", type=Path, default=Path("reproduction"))
    p.add_argument("--force", action="store_true")
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--T", type=float, default=5.0)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--probe-delta", type=float, default=0.2)
    return ap


def _manifest_path(args) -> Path | None:
    if getattr(args, "manifest", None):
        return args.manifest
    if args.command == "reproduce":
        return Path(args.out_dir) / "manifest.json"
    out = getattr(args, "out", None)
    return Path(f"{out}.manifest.json") if out else None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "manifest"}
    manifest = RunManifest(command=args.command, config=config)
    handlers = {
        "validate": lambda: run_validate(args),
        "solve": lambda: run_solve(args, manifest),
        "simulate": lambda: run_simulate(args, manifest),
        "evaluate": lambda: run_evaluate(args, manifest),
        "reproduce": lambda: run_reproduce(args, manifest),
    }
    start = time.perf_counter()
    try:
        code = handlers[args.command]()
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RiccatiError, LyapunovError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    manifest.duration_s = round(time.perf_counter() - start, 3)
    path = _manifest_path(args)
    if path is not None:
        _write_manifest(path, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
