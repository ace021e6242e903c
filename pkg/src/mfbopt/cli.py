"""Command-line front end.

Subcommands: ``run`` executes repeated optimization trials and writes
machine-readable records, ``list`` prints the problem registry against the
checked-in manifest, ``rrmse`` prints low-fidelity accuracy numbers, and
``validate`` runs a problem's invariant checks.

Records are newline-delimited JSON (one meta line, then one object per
iteration) plus a CSV summary with mean/median rows appended.  All numeric
fields are written at full precision so files round-trip exactly.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import pathlib
import sys

import numpy as np

from . import benchmarks, driver, gp, stopping

__all__ = ["main", "write_records", "build_config"]

OUT_ENV_VAR = "MFBOPT_OUT"


def build_config(args) -> driver.RunConfig:
    stop = stopping.StopConfig(window=args.v, threshold=args.eps)
    train = gp.TrainConfig(restarts=args.restarts, is_weight=args.is_weight,
                           interval_level=args.nu)
    return driver.RunConfig(noise=args.noise, stop=stop, train=train,
                            max_iterations=args.max_iters, max_cost=args.max_cost)


def _resolve_problem(name: str, method: str) -> benchmarks.Problem:
    problem = benchmarks.get_problem(name)
    if method == "csfbo":
        problem = benchmarks.single_fidelity_variant(problem)
    return problem


def _run_one(name: str, method: str, cfg_fields: dict, seed: int) -> driver.RunResult:
    problem = _resolve_problem(name, method)
    config = driver.RunConfig(
        noise=cfg_fields["noise"],
        stop=stopping.StopConfig(**cfg_fields["stop"]),
        train=gp.TrainConfig(**cfg_fields["train"]),
        max_iterations=cfg_fields["max_iterations"],
        max_cost=cfg_fields["max_cost"],
    )
    return driver.run(problem, config, seed=seed)


def _config_fields(config: driver.RunConfig) -> dict:
    return {
        "noise": config.noise,
        "stop": dataclasses.asdict(config.stop),
        "train": dataclasses.asdict(config.train),
        "max_iterations": config.max_iterations,
        "max_cost": config.max_cost,
    }


def record_lines(result: driver.RunResult, method: str, noise: str,
                 window: int) -> list[str]:
    """Meta line plus one JSON object per iteration."""
    meta = {
        "meta": True,
        "problem": result.problem,
        "method": method,
        "noise": noise,
        "seed": result.seed,
        "window": window,
        "incumbent_value": float(result.incumbent_value),
        "final_optimum": float(result.final_value),
        "final_x": [float(v) for v in result.final_x],
        "final_feasible": bool(result.final_feasible),
        "final_origin": result.final_origin,
        "stop_reason": result.stop_reason,
        "total_cost": float(result.total_cost),
        "counts": [int(c) for c in result.counts],
        "iterations": result.iterations,
    }
    return [json.dumps(meta)] + [json.dumps(r.to_dict()) for r in result.records]


def write_records(results: list[driver.RunResult], out_dir, method: str = "cmfbo",
                  noise: str = "small", window: int = 10) -> dict:
    """Write per-run NDJSON record files and one CSV summary; return the summary."""
    if not results:
        raise ValueError("write_records needs at least one result")
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_sources = results[0].counts.size
    hf = results[0].hf
    lf_ids = [j for j in range(n_sources) if j != hf]

    for rep, result in enumerate(results):
        path = out / f"run_{rep:03d}.ndjson"
        path.write_text("\n".join(record_lines(result, method, noise, window)) + "\n")

    header = ["rep", "final_optimum", "total_cost", "hf_count"]
    header += [f"lf{i + 1}_count" for i in range(len(lf_ids))]
    header += ["iterations", "stop_reason"]
    rows = []
    for rep, r in enumerate(results):
        row = [str(rep), repr(float(r.final_value)), repr(float(r.total_cost)),
               str(int(r.counts[hf]))]
        row += [str(int(r.counts[j])) for j in lf_ids]
        row += [str(r.iterations), r.stop_reason]
        rows.append(row)
    finals = np.array([r.final_value for r in results], dtype=float)
    blank = [""] * (len(header) - 2)
    rows.append(["mean", repr(float(np.mean(finals)))] + blank)
    rows.append(["median", repr(float(np.median(finals)))] + blank)
    csv_path = out / "summary.csv"
    csv_path.write_text(
        ",".join(header) + "\n" + "\n".join(",".join(r) for r in rows) + "\n")

    summary = {
        "files": [f"run_{rep:03d}.ndjson" for rep in range(len(results))],
        "summary_csv": str(csv_path),
        "mean_final": float(np.mean(finals)),
        "median_final": float(np.median(finals)),
        "median_cost": float(np.median([r.total_cost for r in results])),
    }
    return summary


def _cmd_run(args) -> int:
    problem = benchmarks.get_problem(args.problem)  # validate early
    if args.eps is None:
        args.eps = 0.5 if problem.dx >= 20 else 0.01
    config = build_config(args)
    out_dir = args.out or os.environ.get(OUT_ENV_VAR) or "results"
    seeds = [args.seed + rep for rep in range(args.reps)]
    fields = _config_fields(config)

    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_run_one, args.problem, args.method, fields, s)
                       for s in seeds]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(args.problem, args.method, fields, s) for s in seeds]

    summary = write_records(results, out_dir, method=args.method, noise=args.noise,
                            window=args.v)
    for rep, r in enumerate(results):
        print(f"rep {rep}: final {r.final_value:.6f} cost {r.total_cost:.1f} "
              f"iters {r.iterations} stop {r.stop_reason}")
    print(f"median final {summary['median_final']:.6f} "
          f"median cost {summary['median_cost']:.1f} -> {out_dir}")
    return 0


def _cmd_list(args) -> int:
    manifest = benchmarks.load_manifest()["problems"]
    for name in benchmarks.problem_names():
        p = benchmarks.get_problem(name)
        entry = manifest.get(name, {})
        opt = entry.get("optimum", {})
        print(f"{name}: dx={p.dx} sources={list(p.source_names)} K={p.n_constraints} "
              f"costs={list(p.costs)} init={list(p.init_counts)} "
              f"noise={p.noise.small}/{p.noise.large} "
              f"optimum={opt.get('value')}")
    return 0


def _cmd_rrmse(args) -> int:
    names = [args.problem] if args.problem else benchmarks.problem_names()
    print("problem,source,rrmse,table_reference")
    for name in names:
        p = benchmarks.get_problem(name)
        refs = list(p.table_rrmse)
        k = 0
        for j in range(p.n_sources):
            if j == p.hf:
                continue
            val = benchmarks.rrmse(p, j, n_probe=args.n_probe, seed=args.seed)
            ref = refs[k] if k < len(refs) else ""
            print(f"{name},{p.source_names[j]},{val:.4f},{ref}")
            k += 1
    return 0


def _cmd_validate(args) -> int:
    checks = benchmarks.validate_problem(args.problem, seed=args.seed)
    failed = 0
    for check, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"[{status}] {args.problem}: {check}{suffix}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfbopt",
                                 description="Constrained cost-aware multi-fidelity "
                                             "Bayesian optimization")
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute repeated optimization trials")
    run_p.add_argument("--problem", required=True)
    run_p.add_argument("--noise", choices=["small", "large"], default="small")
    run_p.add_argument("--method", choices=["cmfbo", "csfbo"], default="cmfbo")
    run_p.add_argument("--reps", type=int, default=10)
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--jobs", type=int, default=1)
    run_p.add_argument("--v", type=int, default=10, help="stopping window")
    run_p.add_argument("--eps", type=float, default=None,
                       help="stopping variance threshold (default 0.01; 0.5 for >=20-D)")
    run_p.add_argument("--max-iters", type=int, default=200)
    run_p.add_argument("--max-cost", type=float, default=1e6)
    run_p.add_argument("--restarts", type=int, default=8)
    run_p.add_argument("--is-weight", type=float, default=0.08)
    run_p.add_argument("--nu", type=float, default=0.05)
    run_p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUT_ENV_VAR} or ./results)")
    run_p.set_defaults(func=_cmd_run)

    list_p = sub.add_parser("list", help="print the problem registry and manifest")
    list_p.set_defaults(func=_cmd_list)

    rr_p = sub.add_parser("rrmse", help="print LF-vs-HF relative RMSE")
    rr_p.add_argument("--problem", default=None)
    rr_p.add_argument("--n-probe", type=int, default=10000)
    rr_p.add_argument("--seed", type=int, default=0)
    rr_p.set_defaults(func=_cmd_rrmse)

    val_p = sub.add_parser("validate", help="run invariant checks on a problem")
    val_p.add_argument("--problem", required=True)
    val_p.add_argument("--seed", type=int, default=0)
    val_p.set_defaults(func=_cmd_validate)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure -> exit 1 with diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
