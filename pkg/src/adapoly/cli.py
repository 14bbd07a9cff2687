"""Command-line front end.

Subcommands: ``solve``, ``inspect-filter``, ``bench-spmm`` and
``estimate-count``.  Data goes to stdout (or ``--output``), diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
import time

import numpy as np

from . import __version__
from .cheb_filter import (
    ConfigurationError,
    SpectrumBounds,
    SpmvCounter,
    build_filter,
    damped_bound,
    eval_filter_scalar,
    initial_degree,
    step_function,
)
from .eigensolver import (
    SolverConfig,
    estimate_eigcount,
    estimate_spectrum_bounds,
    make_rng,
    solve,
)
from .sparse_core import (
    DEFAULT_TILE_COLS,
    DEFAULT_TILE_ROWS,
    MatrixMarketError,
    csr_to_tiled,
    from_row_segments,
    maspmm,
    naive_spmm,
    read_matrix_market,
    set_num_threads,
    to_row_segments,
)

log = logging.getLogger("adapoly")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

# flag name -> SolverConfig field
SOLVER_FLAGS = {
    "tau_c": "tau_c", "tau_a": "tau_a", "m": "m", "C": "C", "k_mult": "k_multiplier",
    "mu": "mu", "max_iter": "max_iter", "seed": "rng_seed", "ti": "tile_ti", "tk": "tile_tk",
    "probes": "trace_probes", "lanczos_steps": "lanczos_steps", "p": "p_override",
}


class InputError(Exception):
    pass


def parse_interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        a, b = float(lo), float(hi)
    except ValueError:
        raise InputError(f"interval must look like a:b, got {text!r}") from None
    if not a < b:
        raise InputError(f"interval needs a < b, got {text!r}")
    return a, b


def parse_int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise InputError(f"comma-separated integers expected, got {text!r}") from None
    if not out or min(out) < 1:
        raise InputError(f"positive integers expected, got {text!r}")
    return out


def read_config_file(path: str) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(SolverConfig)}
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "interval":
                out["interval_a"], out["interval_b"] = parse_interval(value)
                continue
            key = SOLVER_FLAGS.get(key, key)
            if key not in fields:
                raise InputError(f"{path}:{lineno}: unknown setting {key!r}")
            try:
                out[key] = _coerce(fields[key].type, value)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def _coerce(type_name, value: str):
    t = str(type_name)
    if value.lower() in ("none", ""):
        return None
    if "int" in t:
        return int(value)
    return float(value)


def load_matrix(path: str):
    try:
        return read_matrix_market(path)
    except OSError as exc:
        raise InputError(f"cannot read matrix {path}: {exc.strerror}") from None
    except MatrixMarketError as exc:
        raise InputError(f"{path}: {exc}") from None


def _open_output(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _emit(text: str, path) -> None:
    fh, close = _open_output(path)
    try:
        fh.write(text)
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def build_report(args_path: str, A, cfg: SolverConfig, result, threads: int) -> dict:
    bounds = result.bounds
    return {
        "version": __version__,
        "config": {**cfg.to_dict(), "threads": threads},
        "matrix": {"path": args_path, "n": A.n_rows, "nnz": A.nnz},
        "result": {
            "converged": bool(result.converged),
            "n_eigenvalues": int(len(result.eigenvalues)),
            "eigenvalues": [float(x) for x in result.eigenvalues],
            "residuals": [float(x) for x in result.residuals],
            "iterations": int(result.iterations),
            "spmv_total": int(result.spmv_total),
            "spmv_by_stage": {k: int(v) for k, v in sorted(result.spmv_by_stage.items())},
            "avg_degree": float(result.avg_degree),
            "max_residual": float(result.max_residual),
            "degree_history": [int(d) for d in result.degree_history],
            "k_max": int(result.k_max),
            "k_initial": int(result.k_initial),
            "p": int(result.p),
            "e_tilde": None if result.e_tilde is None else float(result.e_tilde),
            "spectrum_bounds": None if bounds is None else [bounds.lambda_min, bounds.lambda_max],
            "note": result.note,
        },
        "iterations": [
            {"iteration": h.iteration, "degree": h.degree, "e_i": h.e_i, "n_lock": h.n_lock,
             "max_residual": h.max_residual}
            for h in result.history
        ],
        "timings": {k: float(v) for k, v in result.timings.items()},
    }


def solver_config_from_args(args) -> SolverConfig:
    values = read_config_file(args.config) if args.config else {}
    if args.interval is not None:
        values["interval_a"], values["interval_b"] = parse_interval(args.interval)
    for flag, key in SOLVER_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if "interval_a" not in values:
        raise InputError("an interval is required (--interval a:b or config file)")
    try:
        return SolverConfig(**values)
    except ConfigurationError as exc:
        raise InputError(str(exc)) from None


def cmd_solve(args) -> int:
    cfg = solver_config_from_args(args)
    threads = set_num_threads(args.threads)
    A = load_matrix(args.matrix)
    if A.n_rows != A.n_cols or not A.is_symmetric(1e-12):
        raise InputError(f"{args.matrix}: matrix is not symmetric")
    try:
        result = solve(A, cfg)
    except ConfigurationError as exc:
        raise InputError(str(exc)) from None
    report = build_report(args.matrix, A, cfg, result, threads)
    _emit(json.dumps(report, indent=2) + "\n", args.output)
    if args.eigenvectors:
        np.savetxt(args.eigenvectors, result.eigenvectors, fmt="%.17g")
    log.info("%d eigenvalues, %d iterations, %d SpMVs, converged=%s",
             len(result.eigenvalues), result.iterations, result.spmv_total, result.converged)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# inspect-filter
# ---------------------------------------------------------------------------

def cmd_inspect_filter(args) -> int:
    a, b = parse_interval(args.interval)
    lo, hi = parse_interval(args.bounds)
    x_lo, x_hi = parse_interval(args.x_range) if args.x_range else (lo, hi)
    try:
        bounds = SpectrumBounds(lo, hi)
        f = build_filter(a, b, bounds, args.k, args.m)
    except (ConfigurationError, ValueError) as exc:
        raise InputError(str(exc)) from None
    degree = args.degree or args.k
    if not 1 <= degree <= args.k:
        raise InputError(f"degree must lie in [1, {args.k}]")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "rho", "error", "bound"])
    if args.samples > 0:
        xs = np.linspace(x_lo, x_hi, args.samples) if args.samples > 1 else np.array([x_lo])
        rho = eval_filter_scalar(f, xs, degree)
        err = np.abs(step_function(xs, a, b) - rho)
        theta = np.arccos(np.clip(bounds.map(xs), -1.0, 1.0))
        bnd = damped_bound(theta, degree, args.k, args.m, f.alpha, f.beta)
        for row in zip(xs, rho, err, np.broadcast_to(bnd, xs.shape)):
            w.writerow([repr(float(v)) for v in row])
    _emit(buf.getvalue(), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-spmm
# ---------------------------------------------------------------------------

def _rel_err(X, ref) -> float:
    nrm = np.linalg.norm(ref)
    diff = np.linalg.norm(X - ref)
    return float(diff / nrm) if nrm > 0 else float(diff)


def cmd_bench_spmm(args) -> int:
    set_num_threads(args.threads)
    A = load_matrix(args.matrix)
    Ks = parse_int_list(args.K)
    tis = parse_int_list(args.ti) if args.ti else [DEFAULT_TILE_ROWS]
    tks = parse_int_list(args.tk) if args.tk else [DEFAULT_TILE_COLS]
    reps = max(1, args.repetitions)
    rng = make_rng(args.seed, 4)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kernel", "T_i", "T_k", "K", "gflops", "max_rel_err_vs_naive"])
    for K in Ks:
        B = rng.standard_normal((A.n_cols, K))
        ref = naive_spmm(A, B)
        flops = 2.0 * A.nnz * K
        best = math.inf
        for _ in range(reps):
            t0 = time.perf_counter()
            naive_spmm(A, B)
            best = min(best, time.perf_counter() - t0)
        w.writerow(["naive", "", "", K, f"{flops / max(best, 1e-12) / 1e9:.4f}", repr(0.0)])
        for ti in tis:
            for tk in tks:
                T = csr_to_tiled(A, ti, tk)
                Bs = to_row_segments(B, tk)
                best, err = math.inf, 0.0
                for _ in range(reps):
                    Cs = np.zeros((Bs.shape[0], A.n_rows, tk))
                    t0 = time.perf_counter()
                    maspmm(T, Bs, Cs, K)
                    best = min(best, time.perf_counter() - t0)
                    err = max(err, _rel_err(from_row_segments(Cs, K), ref))
                w.writerow(["maspmm", ti, tk, K, f"{flops / max(best, 1e-12) / 1e9:.4f}", repr(err)])
    _emit(buf.getvalue(), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate-count
# ---------------------------------------------------------------------------

def cmd_estimate_count(args) -> int:
    set_num_threads(args.threads)
    a, b = parse_interval(args.interval)
    A = load_matrix(args.matrix)
    if A.n_rows != A.n_cols:
        raise InputError(f"{args.matrix}: matrix is not square")
    bounds = estimate_spectrum_bounds(A, args.lanczos_steps, args.seed)
    fa, fb = max(a, bounds.lambda_min), min(b, bounds.lambda_max)
    if not fa < fb:
        raise InputError(f"interval [{a}, {b}] lies outside the estimated spectrum")
    probe = build_filter(fa, fb, bounds, 1, args.m)
    if args.k:
        k = args.k
    else:
        width = probe.alpha - probe.beta
        k1 = initial_degree(probe.alpha, probe.beta, args.C) if args.C > width else 1
        k = math.ceil(args.k_mult * k1)
    f = build_filter(fa, fb, bounds, k, args.m)
    counter = SpmvCounter()
    e = estimate_eigcount(csr_to_tiled(A), f, args.probes, args.seed, counter)
    out = {"e_tilde": e, "ceil": math.ceil(e), "probes": args.probes, "spmv_cost": counter.total,
           "k": k, "spectrum_bounds": [bounds.lambda_min, bounds.lambda_max]}
    _emit(json.dumps(out, indent=2) + "\n", args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $ADAPOLY_THREADS or all cores)")
    p.add_argument("--output", "-o", default=None, help="write data here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapoly", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="eigenpairs of a symmetric matrix inside an interval")
    p.add_argument("--matrix", required=True)
    p.add_argument("--interval", default=None, help="a:b")
    p.add_argument("--config", default=None, help="file of key = value solver settings")
    p.add_argument("--tau-c", dest="tau_c", type=float)
    p.add_argument("--tau-a", dest="tau_a", type=float)
    p.add_argument("--m", type=float)
    p.add_argument("--C", type=float)
    p.add_argument("--k-mult", dest="k_mult", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ti", type=int)
    p.add_argument("--tk", type=int)
    p.add_argument("--probes", type=int)
    p.add_argument("--lanczos-steps", dest="lanczos_steps", type=int)
    p.add_argument("--p", type=int, help="fixed subspace size")
    p.add_argument("--eigenvectors", default=None, help="write eigenvectors as a text table")
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("inspect-filter", help="sample a filter and its error bound as CSV")
    p.add_argument("--interval", required=True)
    p.add_argument("--bounds", default="-1:1")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--m", type=float, default=0.5)
    p.add_argument("--degree", type=int, default=None)
    p.add_argument("--samples", type=int, default=201)
    p.add_argument("--x-range", dest="x_range", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_inspect_filter)

    p = sub.add_parser("bench-spmm", help="time naive CSR SpMM against MaSpMM")
    p.add_argument("--matrix", required=True)
    p.add_argument("--K", default="8,32,128")
    p.add_argument("--ti", default=None, help="row-block heights, comma separated")
    p.add_argument("--tk", default=None, help="column-block widths, comma separated")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_bench_spmm)

    p = sub.add_parser("estimate-count", help="trace estimate of the eigenvalue count")
    p.add_argument("--matrix", required=True)
    p.add_argument("--interval", required=True)
    p.add_argument("--probes", type=int, default=30)
    p.add_argument("--k", type=int, default=None, help="filter degree (default from --C)")
    p.add_argument("--m", type=float, default=0.5)
    p.add_argument("--C", type=float, default=1.4)
    p.add_argument("--k-mult", dest="k_mult", type=float, default=2.5)
    p.add_argument("--lanczos-steps", dest="lanczos_steps", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_estimate_count)
    return parser


def _join_negative_values(argv: list[str]) -> list[str]:
    # "--interval -0.6:-0.1" would otherwise be read as an option
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--interval", "--bounds", "--x-range") and i + 1 < len(argv) \
                and argv[i + 1].startswith("-") and ":" in argv[i + 1]:
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(_join_negative_values(argv))
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
