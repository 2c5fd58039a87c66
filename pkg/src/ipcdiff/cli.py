"""Command-line entry point: forward, grad-check, optimize, export."""
import argparse
import json
import os
import sys
import time

import numpy as np

from . import io
from .adjoint import accumulate_gradient, static_adjoint, static_gradient, transient_adjoint
from .bdf import BdfScheme
from .errors import SchemaError, SolverError
from .fdcheck import format_table, grad_check
from .forward import Physics, Trajectory, _stats, simulate, static_solve
from .optimize import minimize

EXIT_SCHEMA, EXIT_SOLVER, EXIT_GRADCHECK = 2, 3, 4


def _run_dir(args, sf, suffix):
    return args.out or os.path.join("runs", f"{sf.scene.name}{suffix}")


def _forward_states(sf):
    scene = sf.scene
    if sf.static:
        u = static_solve(scene)
        traj = Trajectory([u], [np.zeros_like(u)], scene.dt, scene.bdf_order)
        traj.stats.append(_stats(Physics(scene), u, 0))
        traj.active.append(np.zeros(0, dtype=int))
        return traj
    return simulate(scene)


def cmd_forward(args):
    sf = io.parse_scene(args.scene)
    scene, obj = sf.scene, sf.objective
    out = _run_dir(args, sf, "")
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    traj = _forward_states(sf)
    t_fwd = time.perf_counter() - t0
    phys = Physics(scene)
    per_step = None
    report = {"scene": scene.name, "static": sf.static, "n_steps": traj.n_steps,
              "timings": {"forward": t_fwd}}
    if obj.terms:
        if sf.static:
            per_step = [obj.evaluate_step(phys, traj.u[0], None, 0.0)[0]]
        else:
            per_step = [obj.evaluate_step(phys, u, i, i * scene.dt)[0] for i, u in enumerate(traj.u)]
        report["objective"] = float(sum(per_step))
        if not args.no_gradient:
            t1 = time.perf_counter()
            if sf.static:
                p = static_adjoint(traj.u[0], scene, obj)
                J, grad = static_gradient(traj.u[0], p, scene, obj)
            else:
                scheme = BdfScheme(scene.bdf_order)
                state = transient_adjoint(traj, scene, scheme, obj)
                grad = accumulate_gradient(traj, state, scene, scheme, obj)
                J = state.objective
            t_adj = time.perf_counter() - t1
            report["timings"]["adjoint"] = t_adj
            report["timings"]["ratio"] = t_adj / t_fwd if t_fwd > 0 else None
            io.write_json(os.path.join(out, "gradient.json"), io.gradient_to_dict(grad, J))
    report["steps"] = io.step_summaries(traj, per_step)
    io.write_trajectory(os.path.join(out, "trajectory.ipct"), traj, {"scene": scene.name})
    io.write_json(os.path.join(out, "report.json"), report)
    io.write_scene(os.path.join(out, "scene.json"), sf)
    dists = [s["min_distance"] for s in traj.stats]
    dets = [s["min_det"] for s in traj.stats]
    print(f"forward: {traj.n_steps} steps in {t_fwd:.3f} s, min distance {min(dists):.6g}, "
          f"min det F {min(dets):.6g}")
    if "objective" in report:
        print(f"objective: {report['objective']!r}")
    if "adjoint" in report["timings"]:
        print(f"adjoint: {report['timings']['adjoint']:.3f} s (ratio {report['timings']['ratio']:.2f})")
    print(f"run written to {out}")
    return 0


def cmd_grad_check(args):
    sf = io.parse_scene(args.scene)
    if not sf.objective.terms:
        raise SchemaError("grad-check needs a non-empty objective", "/objective")
    results = grad_check(sf.scene, sf.objective, blocks=args.block or None, n_dirs=args.dirs,
                         seed=args.seed, eps=args.eps, static=sf.static, workers=args.workers)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} directions pass")
    return EXIT_GRADCHECK if failed else 0


def cmd_optimize(args):
    sf = io.parse_scene(args.scene)
    if not sf.objective.terms:
        raise SchemaError("optimize needs a non-empty objective", "/objective")
    out = _run_dir(args, sf, ".opt")
    os.makedirs(out, exist_ok=True)
    overrides = {"trace_path": os.path.join(out, "trace.csv"),
                 "checkpoint_path": os.path.join(out, "checkpoint.json")}
    if args.iterations is not None:
        overrides["max_iter"] = args.iterations
    params, trace = minimize(sf.problem(**overrides))
    io.write_scene(os.path.join(out, "scene.json"), sf, params)
    first, last = trace.records[0], trace.records[-1]
    print(f"optimize: {len(trace.records) - 1} iterations ({trace.message}), "
          f"objective {first.objective!r} -> {last.objective!r}")
    print(f"results written to {out}")
    return 0


def cmd_export(args):
    path = os.path.join(args.run, "report.json")
    if not os.path.isfile(path):
        raise SchemaError(f"no run found at {args.run!r} (missing report.json)")
    with open(path) as fh:
        report = json.load(fh)
    if args.format == "csv":
        text = io.summaries_csv(report["steps"])
    else:
        data = dict(report)
        gpath = os.path.join(args.run, "gradient.json")
        if os.path.isfile(gpath):
            with open(gpath) as fh:
                data["gradient"] = json.load(fh)
        text = json.dumps(data, indent=1) + "\n"
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="ipcdiff", description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="seed for random finite-difference directions")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="simulate a scene and write a run directory")
    p.add_argument("scene")
    p.add_argument("--out", help="run directory (default runs/<scene name>)")
    p.add_argument("--no-gradient", action="store_true", help="skip the adjoint pass")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("grad-check", help="compare adjoint gradients with finite differences")
    p.add_argument("scene")
    p.add_argument("--block", action="append", choices=["shape", "lam", "mu", "gamma", "damping", "u0", "v0"])
    p.add_argument("--eps", type=float, help="fixed relative step (default: per-block sweep)")
    p.add_argument("--dirs", type=int, default=5, help="random directions per block")
    p.add_argument("--workers", type=int, help="worker processes (default $IPCDIFF_WORKERS or 1)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("optimize", help="run L-BFGS on the scene's optimization block")
    p.add_argument("scene")
    p.add_argument("--out", help="output directory (default runs/<scene name>.opt)")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("export", help="export a run's summaries")
    p.add_argument("run")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--output", help="file to write (default stdout)")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    np.random.seed(args.seed)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
