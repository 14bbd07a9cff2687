"""Acceptance checks.

Each criterion is a plain function returning ``(passed, detail)``.  Under
pytest every criterion is one test; the verdict lines are also collected and
echoed in the terminal summary.  Running this file directly prints the same
lines without pytest::

    python3 tests/test_acceptance.py
"""

from __future__ import annotations

import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adapoly.cheb_filter import (  # noqa: E402
    SpectrumBounds,
    build_filter,
    clenshaw_apply,
    damped_bound,
    eval_filter_scalar,
    step_function,
    undamped_bound,
)
from adapoly.cli import main as cli_main  # noqa: E402
from adapoly.eigensolver import SolverConfig, estimate_eigcount, estimate_spectrum_bounds, solve  # noqa: E402
from adapoly.sparse_core import (  # noqa: E402
    CsrMatrix,
    csr_to_tiled,
    from_row_segments,
    maspmm,
    naive_spmm,
    read_matrix_market,
    to_row_segments,
    write_matrix_market,
)
from oracles import (  # noqa: E402
    damped_partial_sum,
    dense_eigenvalues,
    forward_recurrence_apply,
    permuted_diagonal,
    random_csr,
    step_in_angle,
)

FIXTURES = Path(__file__).parent / "fixtures"
GE87H76_ENV = "ADAPOLY_GE87H76"

RESULTS: list[str] = []


def report(number: int, title: str, passed: bool | None, detail: str) -> str:
    verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"[{verdict}] criterion {number}: {title} -- {detail}"
    RESULTS.append(line)
    print(line)
    return line


def rel_fro(X, Y):
    nrm = np.linalg.norm(Y)
    return np.linalg.norm(X - Y) / nrm if nrm else np.linalg.norm(X - Y)


# ---------------------------------------------------------------------------
# 1. dense-oracle equivalence
# ---------------------------------------------------------------------------

def dense_oracle_trial(seed: int):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(200, 401))
    density = rng.uniform(0.02, 0.10)
    M = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    M = np.triu(M)
    A = CsrMatrix.from_dense(M + M.T)
    lam = dense_eigenvalues(A)
    e = int(rng.integers(5, 31))
    i0 = int(rng.integers(1, n - e - 1))
    a = rng.uniform(lam[i0 - 1], lam[i0])
    b = rng.uniform(lam[i0 + e - 1], lam[i0 + e])
    res = solve(A, SolverConfig(a, b, rng_seed=seed))
    norm = np.abs(lam).max()
    truth = lam[(lam >= a) & (lam <= b)]
    exact = (len(res.eigenvalues) == len(truth)
             and np.all(np.abs(res.eigenvalues - truth) <= 1e-8 * norm))
    # every returned value must sit within its residual of some true eigenvalue
    gaps = np.array([np.min(np.abs(lam - x)) for x in res.eigenvalues])
    clean = bool(np.all(gaps <= np.maximum(res.residuals, 1e-8 * norm)))
    return bool(exact), clean


def criterion_1():
    t0 = time.perf_counter()
    outcomes = [dense_oracle_trial(s) for s in range(40)]
    elapsed = time.perf_counter() - t0
    n_exact = sum(o[0] for o in outcomes)
    n_clean = sum(o[1] for o in outcomes)
    passed = n_exact >= 38 and n_clean == 40 and elapsed <= 120
    return passed, f"exact {n_exact}/40 (need 38), no spurious {n_clean}/40, {elapsed:.1f}s (limit 120s)"


# ---------------------------------------------------------------------------
# 2. undamped pointwise bound
# ---------------------------------------------------------------------------

UNDAMPED_INTERVALS = [(0.1, 0.6), (-0.9, -0.2), (-0.05, 0.05)]


def sample_angles(rng, alpha, beta, count=10_000):
    theta = np.empty(0)
    while theta.size < count:
        t = rng.uniform(0, math.pi, count)
        t = t[(np.abs(t - alpha) >= 1e-3) & (np.abs(t - beta) >= 1e-3)]
        theta = np.concatenate([theta, t])
    return theta[:count]


def criterion_2():
    rng = np.random.default_rng(2)
    violations, checked, worst = 0, 0, 0.0
    for a, b in UNDAMPED_INTERVALS:
        alpha, beta = math.acos(a), math.acos(b)
        theta = sample_angles(rng, alpha, beta)
        g = step_in_angle(theta, alpha, beta)
        for k in (5, 20, 100):
            err = np.abs(g - damped_partial_sum(theta, alpha, beta, k, k, 0.0))
            bound = undamped_bound(theta, k, alpha, beta)
            violations += int(np.sum(err > bound))
            checked += theta.size
            worst = max(worst, float(np.max(err / bound)))
    return violations == 0, f"{violations} violations in {checked} samples, max error/bound {worst:.3f}"


# ---------------------------------------------------------------------------
# 3. damped bound sweep with a = 0.1, b = 0.6
# ---------------------------------------------------------------------------

def criterion_3():
    a, b, m = 0.1, 0.6, 0.5
    unit = SpectrumBounds(-1.0, 1.0)
    x = np.linspace(-0.1, 0.3, 10_001)
    x = x[np.abs(x - 0.1) > 1e-3]
    theta = np.arccos(x)
    violations, worst, oracle_gap = 0, 0.0, 0.0
    bounds_by_ki = {}
    for k_i in (10, 20, 40, 80):
        k = math.ceil(2.5 * k_i)
        f = build_filter(a, b, unit, k, m)
        rho = eval_filter_scalar(f, x, k_i)
        oracle_gap = max(oracle_gap, float(np.max(np.abs(
            rho - damped_partial_sum(theta, f.alpha, f.beta, k_i, k, m)))))
        err = np.abs(step_function(x, a, b) - rho)
        bound = damped_bound(theta, k_i, k, m, f.alpha, f.beta)
        violations += int(np.sum(err > bound))
        worst = max(worst, float(np.max(err / bound)))
        bounds_by_ki[k_i] = bound
    ratio = float(np.max(bounds_by_ki[80] / bounds_by_ki[10]))
    passed = violations == 0 and ratio <= 0.25 and oracle_gap <= 1e-12
    return passed, (f"{violations} violations over {4 * x.size} samples, max error/bound {worst:.3f}, "
                    f"bound ratio k_i=80/10 max {ratio:.4f} (limit 0.25)")


# ---------------------------------------------------------------------------
# 4. tiled kernel equivalence
# ---------------------------------------------------------------------------

TILES = [(1, 1), (7, 8), (64, 64), (256, 64)]
WIDTHS = [1, 8, 32, 128]


def kernel_matrices():
    rng = np.random.default_rng(4)
    mats = []
    for i in range(20):
        n_rows = int(rng.integers(30, 400))
        n_cols = n_rows if i % 2 == 0 else int(rng.integers(30, 400))
        mats.append(random_csr(rng, n_rows, n_cols, density=rng.uniform(0.005, 0.15), symmetric=(i % 4 == 0)))
    for name in ("lap2d_12.mtx", "graph_int.mtx", "unsym_general.mtx"):
        mats.append(read_matrix_market(FIXTURES / name))
    return mats


def criterion_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(44)
    worst, cases = 0.0, 0
    for A in kernel_matrices():
        for K in WIDTHS:
            B = rng.standard_normal((A.n_cols, K))
            ref = naive_spmm(A, B)
            for ti, tk in TILES:
                T = csr_to_tiled(A, ti, tk)
                Bs = to_row_segments(B, tk)
                Cs = np.zeros((Bs.shape[0], A.n_rows, tk))
                maspmm(T, Bs, Cs, K)
                worst = max(worst, rel_fro(from_row_segments(Cs, K), ref))
                cases += 1
    elapsed = time.perf_counter() - t0
    passed = worst <= 1e-13 and elapsed <= 60
    return passed, f"{cases} cases, max relative Frobenius error {worst:.2e} (limit 1e-13), {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 5. Clenshaw against the forward recurrence
# ---------------------------------------------------------------------------

def criterion_5():
    rng = np.random.default_rng(5)
    worst_forward, worst_diag = 0.0, 0.0
    for trial in range(12):
        n = int(rng.integers(20, 201))
        A = random_csr(rng, n, density=rng.uniform(0.03, 0.2), symmetric=True)
        lam = dense_eigenvalues(A)
        pad = 1e-3 * (lam[-1] - lam[0])
        bounds = SpectrumBounds(lam[0] - pad, lam[-1] + pad)
        a, b = np.sort(rng.uniform(lam[0], lam[-1], 2))
        k = int(rng.integers(2, 61))
        f = build_filter(a, b, bounds, k, float(rng.choice([0.0, 0.5, 1.0, 2.0])))
        X = rng.standard_normal((n, int(rng.integers(1, 9))))
        T = csr_to_tiled(A, int(rng.choice([1, 7, 64])), int(rng.choice([1, 3, 8])))
        for degree in sorted({0, 1, 2, k // 2, k}):
            out = clenshaw_apply(f, T, X, degree)
            ref = forward_recurrence_apply(f.coeffs, f.l1, f.l2, A.to_dense(), X, degree)
            worst_forward = max(worst_forward, rel_fro(out, ref))
        d = rng.uniform(-2, 3, n)
        fd = build_filter(-0.5, 1.0, SpectrumBounds(-2, 3), k, 0.5)
        out = clenshaw_apply(fd, csr_to_tiled(CsrMatrix.diag(d), 16, 4), X)
        worst_diag = max(worst_diag, rel_fro(out, eval_filter_scalar(fd, d)[:, None] * X))
    passed = worst_forward <= 1e-11 and worst_diag <= 1e-12
    return passed, (f"forward-recurrence error {worst_forward:.2e} (limit 1e-11), "
                    f"diagonal factorization error {worst_diag:.2e} (limit 1e-12)")


# ---------------------------------------------------------------------------
# 6. spurious Ritz detection
# ---------------------------------------------------------------------------

def spurious_matrix():
    rng = np.random.default_rng(0)
    inside = np.linspace(-0.06, 0.06, 10)
    clusters = np.concatenate([np.full(20, -0.2), np.full(20, 0.2)])
    rest = np.concatenate([rng.uniform(-1, -0.5, 130), rng.uniform(0.5, 1, 130)])
    rest[0], rest[-1] = -1.0, 1.0
    return permuted_diagonal(np.concatenate([inside, clusters, rest]), rng)


def criterion_6():
    A = spurious_matrix()
    cfg = SolverConfig(-0.1, 0.1, p_override=12, rng_seed=1, max_iter=100)
    with_detection = solve(A, cfg)
    without = solve(A, cfg, spurious_detection=False)
    found = np.allclose(with_detection.eigenvalues, np.linspace(-0.06, 0.06, 10), atol=1e-9)
    stalls = without.iterations > 3 * with_detection.iterations and not without.converged
    passed = with_detection.converged and found and stalls
    return passed, (f"with detection: converged={with_detection.converged} in {with_detection.iterations} "
                    f"iterations, {len(with_detection.eigenvalues)} eigenvalues; without: "
                    f"converged={without.converged} after {without.iterations} iterations")


# ---------------------------------------------------------------------------
# 7. trace-estimate accuracy
# ---------------------------------------------------------------------------

def count_trial(count: int, seed: int, n: int = 1000):
    rng = np.random.default_rng(7000 + 31 * count + seed)
    h = 2.0 / (n - 1)
    d = np.linspace(-1, 1, n)
    d[1:-1] += rng.uniform(-0.25, 0.25, n - 2) * h
    i0 = int(rng.integers(1, n - count - 1))
    a = 0.5 * (d[i0 - 1] + d[i0])
    b = 0.5 * (d[i0 + count - 1] + d[i0 + count])
    A = permuted_diagonal(d, rng)
    bounds = estimate_spectrum_bounds(A, 40, seed)
    f = build_filter(a, b, bounds, 400, 0.5)
    e = estimate_eigcount(A, f, 40, seed)
    return abs(math.ceil(e) - count) <= 0.2 * count


def criterion_7():
    t0 = time.perf_counter()
    hits = {c: sum(count_trial(c, s) for s in range(20)) for c in (5, 50, 200)}
    elapsed = time.perf_counter() - t0
    passed = all(h >= 18 for h in hits.values()) and elapsed <= 60
    detail = ", ".join(f"count {c}: {h}/20" for c, h in hits.items())
    return passed, f"{detail} within 20% (need 18/20 each), {elapsed:.1f}s (limit 60s)"


# ---------------------------------------------------------------------------
# 8. large regression problem (optional)
# ---------------------------------------------------------------------------

def criterion_8():
    path = os.environ.get(GE87H76_ENV)
    if not path or not Path(path).is_file():
        return None, f"skipped: set {GE87H76_ENV} to the Ge87H76 Matrix Market file to run"
    A = read_matrix_market(path)
    res = solve(A, SolverConfig(-0.64, -0.0053))
    norm = res.bounds.norm
    passed = (len(res.eigenvalues) == 212 and res.max_residual <= 1e-10 * norm
              and res.iterations <= 20 and res.spmv_total <= 2 * 178_783)
    return passed, (f"{len(res.eigenvalues)} eigenpairs (need 212), max residual "
                    f"{res.max_residual / norm:.2e}*||A||, {res.iterations} iterations, "
                    f"{res.spmv_total} SpMVs")


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------

def criterion_9():
    A = random_csr(np.random.default_rng(9), 300, density=0.04, symmetric=True)
    lam = dense_eigenvalues(A)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "a.mtx"
        write_matrix_market(A, path, symmetric=True)
        reports = []
        for run in range(2):
            out = Path(tmp) / f"run{run}.json"
            code = cli_main(["solve", "--matrix", str(path), "--interval",
                             f"{lam[100] - 1e-6}:{lam[115] + 1e-6}", "--seed", "17", "--threads", "1",
                             "--output", str(out)])
            report = json.loads(out.read_text())
            report.pop("timings")
            reports.append((code, report))
    same = reports[0] == reports[1]
    return same and reports[0][0] == 0, f"identical reports excluding timings: {same}, exit code {reports[0][0]}"


CRITERIA = [
    (1, "dense-oracle equivalence", criterion_1),
    (2, "undamped pointwise bound", criterion_2),
    (3, "damped pointwise bound sweep", criterion_3),
    (4, "tiled SpMM equivalence", criterion_4),
    (5, "Clenshaw equivalence", criterion_5),
    (6, "spurious Ritz detection", criterion_6),
    (7, "trace-estimate accuracy", criterion_7),
    (8, "large regression problem", criterion_8),
    (9, "CLI determinism", criterion_9),
]


@pytest.mark.parametrize("number, title, check", CRITERIA, ids=[f"criterion_{c[0]}" for c in CRITERIA])
def test_criterion(number, title, check):
    passed, detail = check()
    report(number, title, passed, detail)
    if passed is None:
        pytest.skip(detail)
    assert passed, detail


if __name__ == "__main__":
    failed = 0
    for number, title, check in CRITERIA:
        passed, detail = check()
        report(number, title, passed, detail)
        failed += passed is False
    sys.exit(1 if failed else 0)
