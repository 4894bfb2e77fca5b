"""Command-line interface: merge, inspect, gamma, verify, report.

Exit codes: 0 success, 1 validation failure, 2 I/O or malformed input,
3 numerical failure after all fallbacks, 4 verification suite failure.
Flags mirror the merge configuration one-to-one; a JSON config file can
supply values that individual flags override.  ``ACE_THREADS`` sets the
default worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .container import ContainerFormatError, read_container, shape_diff, write_container
from .covariance import (
    CovarianceEstimate,
    DegenerateCovarianceError,
    DegenerateExpertError,
    UndefinedGammaError,
    empirical_covariance,
    heterogeneity,
    task_vector,
)
from .linalg import AsymmetricMatrixError, NotPositiveDefiniteError
from .merge import (
    BRANCHES,
    METHODS,
    MergeConfig,
    merge_model,
    merging_loss,
    preliminary_solution,
)
from .report import render_report_figures, write_layers_csv

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY_FAILED = 4

_NUMERICAL_ERRORS = (
    NotPositiveDefiniteError,
    AsymmetricMatrixError,
    DegenerateCovarianceError,
    UndefinedGammaError,
    FloatingPointError,
    np.linalg.LinAlgError,
)

VERIFY_SUITES = ("covariance", "optimality", "limiting", "stats")


class CliError(ValueError):
    """Bad or missing command-line inputs (exit code 1)."""


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ContainerFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _NUMERICAL_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    raise SystemExit(main())


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ace",
        description="Data-free model merging with adaptive covariance estimation.",
    )
    sub = parser.add_subparsers(dest="subcommand")

    merge = sub.add_parser("merge", help="merge expert checkpoints into one")
    merge.add_argument("--base", help="path to the pretrained base checkpoint")
    merge.add_argument("--experts", nargs="+", default=None, help="paths to expert checkpoints")
    merge.add_argument("--out", help="output path for the merged checkpoint")
    merge.add_argument("--report", help="optional path for the JSON merge report")
    merge.add_argument("--config", help="JSON config file; flags override its values")
    _add_config_flags(merge)
    merge.add_argument("--threads", type=int, default=None, help="worker threads (default ACE_THREADS or 1)")
    merge.set_defaults(func=cmd_merge)

    inspect = sub.add_parser("inspect", help="list tensors in a container")
    inspect.add_argument("path", help="container file to inspect")
    inspect.set_defaults(func=cmd_inspect)

    gamma = sub.add_parser("gamma", help="per-layer heterogeneity table")
    gamma.add_argument("--base", help="path to the pretrained base checkpoint")
    gamma.add_argument("--experts", nargs="+", default=None, help="paths to expert checkpoints")
    gamma.add_argument("--tau", type=float, default=None, help="branch threshold (default 0.3)")
    gamma.add_argument("--json", dest="json_path", help="optional path for the JSON table")
    gamma.set_defaults(func=cmd_gamma)

    verify = sub.add_parser("verify", help="run the synthetic verification suites")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--suite", default="all", help="all or one of: " + ", ".join(VERIFY_SUITES))
    verify.add_argument("--json", dest="json_path", help="optional path for the JSON table")
    verify.set_defaults(func=cmd_verify)

    report = sub.add_parser("report", help="render a merge report to CSV and figures")
    report.add_argument("--in", dest="input", help="merge report JSON file")
    report.add_argument("--out-dir", dest="out_dir", help="directory for CSV and figures")
    report.set_defaults(func=cmd_report)

    return parser


def _add_config_flags(parser) -> None:
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--k-frac", dest="k_frac", type=float, default=None)
    parser.add_argument("--method", default=None, help="one of: " + ", ".join(METHODS))
    parser.add_argument("--task-arith-lambda", dest="task_arith_lambda", type=float, default=None)
    parser.add_argument(
        "--layer-include",
        dest="layer_include",
        action="append",
        default=None,
        help="glob pattern for layers to merge (repeatable; default all rank-2)",
    )
    parser.add_argument(
        "--force-branch",
        dest="force_branch",
        default=None,
        help="override the heterogeneity gate: " + " or ".join(BRANCHES),
    )


def _build_merge_config(args) -> MergeConfig:
    values: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"invalid config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config file {args.config} must hold a JSON object")
        unknown = set(loaded) - set(MergeConfig().to_json())
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for key in ("eps", "tau", "k_frac", "method", "task_arith_lambda", "layer_include", "force_branch"):
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    if "layer_include" in values and values["layer_include"] is not None:
        values["layer_include"] = tuple(values["layer_include"])
    try:
        return MergeConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def _thread_count(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("ACE_THREADS", "").strip()
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"ACE_THREADS must be an integer, got {env!r}") from exc
    return 1


def _load_checkpoints(base_path, expert_paths):
    base = read_container(base_path)
    experts = [read_container(path) for path in expert_paths]
    for path, expert in zip(expert_paths, experts):
        diffs = shape_diff(base, expert)
        if diffs:
            raise CliError(f"architecture mismatch with {path}: {diffs}")
    return base, experts


def cmd_merge(args) -> int:
    if not args.base or not args.experts or not args.out:
        raise CliError("merge requires --base, --experts and --out")
    cfg = _build_merge_config(args)
    threads = _thread_count(args)
    base, experts = _load_checkpoints(args.base, args.experts)
    merged, report = merge_model(base, experts, cfg, threads=threads)
    write_container(merged, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(
        f"merged {len(report['layers'])} matrix layers"
        f" ({len(report['averaged'])} tensors averaged) -> {args.out}"
    )
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = read_container(args.path)
    print(f"{args.path}: {len(ckpt)} tensors")
    for name, arr in ckpt.items():
        shape = "x".join(str(e) for e in arr.shape) if arr.ndim else "scalar"
        tag = {"float32": "f32", "float64": "f64"}[arr.dtype.name]
        print(f"  {name}  {shape}  {tag}")
    if ckpt.metadata:
        print("metadata:")
        for key in sorted(ckpt.metadata):
            print(f"  {key} = {ckpt.metadata[key]}")
    return EXIT_OK


def cmd_gamma(args) -> int:
    if not args.base or not args.experts:
        raise CliError("gamma requires --base and --experts")
    tau = args.tau if args.tau is not None else MergeConfig().tau
    base, experts = _load_checkpoints(args.base, args.experts)
    table: dict[str, dict] = {}
    for name, arr in base.items():
        if arr.ndim != 2 or min(arr.shape) < 1:
            continue
        base_mat = arr.astype(np.float64)
        expert_mats = [e[name].astype(np.float64) for e in experts]
        try:
            tvs = [task_vector(base_mat, w, task_id=str(i)) for i, w in enumerate(expert_mats)]
            sigmas = [empirical_covariance(tv) for tv in tvs]
            stats = heterogeneity(tvs, sigmas)
        except DegenerateExpertError:
            table[name] = {"gamma": None, "branch": "degenerate"}
            continue
        branch = "heterogeneous" if stats.gamma > tau else "homogeneous"
        table[name] = {"gamma": stats.gamma, "branch": branch}

    width = max([len(n) for n in table] + [5])
    print(f"{'layer':<{width}}  {'gamma':>12}  branch")
    for name in sorted(table):
        entry = table[name]
        gamma_text = "-" if entry["gamma"] is None else f"{entry['gamma']:.6g}"
        print(f"{name:<{width}}  {gamma_text:>12}  {entry['branch']}")
    if args.json_path:
        with open(args.json_path, "w") as fh:
            json.dump({"tau": tau, "layers": table}, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.suite != "all" and args.suite not in VERIFY_SUITES:
        raise CliError(f"unknown suite {args.suite!r}; choose all or one of {VERIFY_SUITES}")
    suites = VERIFY_SUITES if args.suite == "all" else (args.suite,)
    rows: list[dict] = []
    for suite in suites:
        rows.extend(_RUNNERS[suite](args.seed))
    for row in rows:
        status = "PASS" if row["passed"] else "FAIL"
        print(
            f"[{status}] {row['suite']}/{row['check']}"
            f"  value={row['value']:.6e}  ({row['op']} {row['threshold']:g})"
        )
    all_passed = all(row["passed"] for row in rows)
    print(f"{sum(row['passed'] for row in rows)}/{len(rows)} checks passed")
    if args.json_path:
        with open(args.json_path, "w") as fh:
            json.dump(
                {"seed": args.seed, "checks": rows, "all_passed": all_passed},
                fh,
                sort_keys=True,
                indent=2,
            )
            fh.write("\n")
    return EXIT_OK if all_passed else EXIT_VERIFY_FAILED


def _check(suite, name, value, threshold, op) -> dict:
    passed = value <= threshold if op == "<=" else value >= threshold
    return {
        "suite": suite,
        "check": name,
        "value": float(value),
        "threshold": float(threshold),
        "op": op,
        "passed": bool(passed),
    }


def _suite_covariance(seed: int) -> list[dict]:
    d = 8
    spec = harness.SyntheticTaskSpec(
        d_in=d,
        d_out=d,
        sigma_true=np.diag([9.0] + [1.0] * (d - 1)),
        teacher=np.random.default_rng(seed).standard_normal((d, d)),
        n_samples=10_000,
        lr=1e-3,
        noise_std=0.1,
        seed=seed,
    )
    result = harness.verify_covariance_tracking(spec, repetitions=64)
    return [
        _check("covariance", "leading-eigenvector-alignment", result.alignment, 0.95, ">="),
        _check("covariance", "normalized-frobenius-distance", result.normalized_distance, 0.15, "<="),
    ]


def _random_spd(rng, d, lo=1e-2, hi=1e2):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigvals = np.exp(rng.uniform(np.log(lo), np.log(hi), d))
    return (q * eigvals) @ q.T


def _suite_optimality(seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    worst_grad = 0.0
    worst_perturb = -np.inf
    worst_gd = 0.0
    for num_tasks, d_in, d_out in ((2, 3, 8), (3, 8, 3), (5, 16, 8), (3, 16, 16), (2, 8, 16)):
        sigmas = [_random_spd(rng, d_in) for _ in range(num_tasks)]
        experts = [rng.standard_normal((d_out, d_in)) for _ in range(num_tasks)]
        wrapped = [CovarianceEstimate(sigma=s, trace_raw=float(np.trace(s))) for s in sigmas]
        w_bar = preliminary_solution(experts, wrapped, np.zeros((d_in, d_in)))
        target = sum(w @ s for w, s in zip(experts, sigmas))
        gradient = 2.0 * sum((w_bar - w) @ s for w, s in zip(experts, sigmas))
        worst_grad = max(
            worst_grad, float(np.linalg.norm(gradient)) / (1.0 + float(np.linalg.norm(target)))
        )
        base_loss = merging_loss(w_bar, experts, sigmas)
        for _ in range(100):
            noise = rng.standard_normal(w_bar.shape)
            noise *= 1e-3 / np.linalg.norm(noise)
            worst_perturb = max(worst_perturb, base_loss - merging_loss(w_bar + noise, experts, sigmas))
        gd = harness.brute_force_merge(experts, sigmas)
        worst_gd = max(
            worst_gd, float(np.linalg.norm(gd - w_bar)) / (1.0 + float(np.linalg.norm(w_bar)))
        )
    return [
        _check("optimality", "gradient-norm-relative", worst_grad, 1e-8, "<="),
        _check("optimality", "loss-increase-under-perturbation", worst_perturb, 0.0, "<="),
        _check("optimality", "gradient-descent-agreement", worst_gd, 1e-6, "<="),
    ]


def _suite_limiting(seed: int) -> list[dict]:
    rows = []
    for entry in harness.limiting_case_suite(seed=seed):
        rows.append(
            _check(
                "limiting",
                entry["case"],
                entry["relative_error"],
                entry["tolerance"] if entry["tolerance"] > 0 else 0.0,
                "<=",
            )
        )
    return rows


def _suite_stats(seed: int) -> list[dict]:
    d = 64
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((d, d))
    spec = harness.SyntheticTaskSpec(
        d_in=d,
        d_out=d,
        sigma_true=np.eye(d),
        teacher=teacher,
        n_samples=20_000,
        lr=1e-4,
        noise_std=0.1,
        seed=seed,
    )
    dataset = harness.generate_task(spec)
    tv = harness.simulate_finetune(teacher, dataset, spec.lr)
    stats = harness.delta_w_statistics(tv)
    ratio = abs(stats["mean"]) / stats["std"] if stats["std"] > 0 else 0.0
    return [_check("stats", "near-converged-mean-to-std", ratio, 0.05, "<=")]


_RUNNERS = {
    "covariance": _suite_covariance,
    "optimality": _suite_optimality,
    "limiting": _suite_limiting,
    "stats": _suite_stats,
}


def cmd_report(args) -> int:
    if not args.input or not args.out_dir:
        raise CliError("report requires --in and --out-dir")
    with open(args.input) as fh:
        try:
            report = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContainerFormatError(f"invalid report JSON: {exc}") from exc
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "layers.csv")
    write_layers_csv(report, csv_path)
    written = [csv_path] + render_report_figures(report, args.out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    entrypoint()
