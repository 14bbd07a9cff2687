"""Filtered subspace iteration with adaptive Chebyshev filtering.

Random numbers (Lanczos start vectors, trace probes, initial basis) come
from numpy's counter-based ``Philox`` bit generator seeded with the
configured seed, so results are reproducible across platforms.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .cheb_filter import (
    ChebFilter,
    ConfigurationError,
    SpectrumBounds,
    SpmvCounter,
    adaptive_degree,
    build_filter,
    clenshaw_apply,
    initial_degree,
)
from .dense_kernels import cholesky_qr, rayleigh_ritz, sym_eig
from .sparse_core import (
    DEFAULT_TILE_COLS,
    DEFAULT_TILE_ROWS,
    CsrMatrix,
    TiledMatrix,
    csr_spmv,
    csr_to_tiled,
    naive_spmm,
)

log = logging.getLogger(__name__)

STAGES = ("setup", "filter", "orth", "rayleigh_ritz", "residuals", "other")
EMPTY_STALL_LIMIT = 10
EMPTY_STALL_AFTER = 3
COUNT_SHORT_CIRCUIT = 0.1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator; ``stream`` separates the independent uses of one seed."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), stream]))


@dataclass
class SolverConfig:
    interval_a: float
    interval_b: float
    tau_c: float = 1e-10
    tau_a: float = 1e-3
    m: float = 0.5
    C: float = 1.4
    k_multiplier: float = 2.5
    mu: float = 1.8
    max_iter: int = 100
    lanczos_steps: int = 40
    trace_probes: int = 30
    rng_seed: int = 0
    p_override: int | None = None
    tile_ti: int | None = None
    tile_tk: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.interval_a) and math.isfinite(self.interval_b)):
            raise ConfigurationError("interval endpoints must be finite")
        if not self.interval_a < self.interval_b:
            raise ConfigurationError("interval_a must be < interval_b")
        if not (0 < self.tau_c < 1 and 0 < self.tau_a < 1):
            raise ConfigurationError("tau_c and tau_a must lie in (0, 1)")
        if self.mu < 1:
            raise ConfigurationError("mu must be >= 1")
        if self.m < 0:
            raise ConfigurationError("m must be >= 0")
        if not self.C > 0:
            raise ConfigurationError("C must be > 0")
        if self.k_multiplier < 1:
            raise ConfigurationError("k_multiplier must be >= 1")
        if self.max_iter < 1 or self.lanczos_steps < 2 or self.trace_probes < 1:
            raise ConfigurationError("max_iter >= 1, lanczos_steps >= 2 and trace_probes >= 1 required")
        if self.p_override is not None and self.p_override < 1:
            raise ConfigurationError("p_override must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolverState:
    """Evolving iteration state; handed to the optional per-iteration callback."""

    locked_values: np.ndarray
    locked_vectors: np.ndarray
    active_basis: np.ndarray
    iteration: int = 0
    degree_history: list = field(default_factory=list)
    spmv_count: int = 0
    n_check_prev: int = 0
    ritz_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ritz_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_lock(self) -> int:
        return len(self.locked_values)


@dataclass
class IterationRecord:
    iteration: int
    degree: int
    e_i: int
    n_lock: int
    max_residual: float
    tau_s: float | None = None
    n_check: int = 0


@dataclass
class SolveResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    iterations: int
    spmv_total: int
    avg_degree: float
    max_residual: float
    converged: bool
    degree_history: list = field(default_factory=list)
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history: list = field(default_factory=list)
    bounds: SpectrumBounds | None = None
    k_max: int = 0
    k_initial: int = 0
    p: int = 0
    e_tilde: float | None = None
    spmv_by_stage: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    note: str = ""


class _Timer:
    def __init__(self):
        self.totals = {s: 0.0 for s in STAGES}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[name] += time.perf_counter() - self.t0

        return _Ctx()


# ---------------------------------------------------------------------------
# Setup estimates
# ---------------------------------------------------------------------------

def estimate_spectrum_bounds(A: CsrMatrix, steps: int = 40, seed: int = 0,
                             counter: SpmvCounter | None = None) -> SpectrumBounds:
    """Enclosing interval for the spectrum from a short Lanczos run.

    Full reorthogonalization is used.  The extreme Ritz values of the
    tridiagonal matrix are widened by their residual bounds
    ``|beta_last * u_last|``.  On breakdown the recurrence restarts from a
    fresh random vector orthogonal to the current basis (at most 3 times).
    """
    n = A.n_rows
    if A.n_cols != n:
        raise ValueError("square matrix required")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if n == 0:
        raise ValueError("empty matrix")
    steps = min(steps, n)
    rng = make_rng(seed, 1)
    Q = np.zeros((n, steps))
    alphas = np.zeros(steps)
    betas = np.zeros(steps)
    restarts = 0
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    j = 0
    scale = 0.0
    beta = 0.0
    while j < steps:
        Q[:, j] = q
        w = csr_spmv(A, q)
        if counter is not None:
            counter.add(1, "setup")
        alphas[j] = q @ w
        w -= alphas[j] * q
        if j > 0:
            w -= beta * Q[:, j - 1]
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        beta = np.linalg.norm(w)
        scale = max(scale, abs(alphas[j]), beta)
        betas[j] = beta
        j += 1
        if j == steps:
            break
        if beta <= 1e-12 * max(scale, 1e-300):
            betas[j - 1] = 0.0
            beta = 0.0
            if restarts >= 3:
                break
            restarts += 1
            v = rng.standard_normal(n)
            for _ in range(2):
                v -= Q[:, :j] @ (Q[:, :j].T @ v)
            nv = np.linalg.norm(v)
            if nv <= 1e-12:
                break
            q = v / nv
        else:
            q = w / beta
    T = np.diag(alphas[:j]) + np.diag(betas[: j - 1], 1) + np.diag(betas[: j - 1], -1)
    theta, U = np.linalg.eigh(T)
    resid = np.abs(betas[j - 1] * U[-1, :])
    lo = theta[0] - resid[0]
    hi = theta[-1] + resid[-1]
    span = hi - lo
    if span <= 1e-12 * max(abs(hi), abs(lo)) or span == 0:
        pad = max(1e-8, np.finfo(float).eps * n * max(abs(hi), abs(lo)))
        lo, hi = lo - pad, hi + pad
    return SpectrumBounds(float(lo), float(hi))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def estimate_eigcount(A: CsrMatrix | TiledMatrix, f: ChebFilter, probes: int = 30, seed: int = 0,
                      counter: SpmvCounter | None = None, stage: str = "setup") -> float:
    """Hutchinson estimate of ``trace(rho(A))`` with Rademacher probes.

    The filter is applied at its full degree ``k_max`` to all probes as one
    block.  Returns the raw (real) estimate.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if isinstance(A, CsrMatrix):
        A = csr_to_tiled(A)
    rng = make_rng(seed, 2)
    V = rademacher(rng, (A.n_rows, probes))
    local = SpmvCounter()
    Y = clenshaw_apply(f, A, V, f.k_max, counter=local)
    if counter is not None:
        counter.add(local.total, stage)
    return float(np.mean(np.einsum("ij,ij->j", V, Y)))


def spurious_threshold(ritz_in_interval, a: float, b: float) -> float:
    """Smallest distance of an in-interval Ritz value to the interval ends."""
    r = np.asarray(ritz_in_interval, dtype=np.float64)
    if r.size == 0:
        raise ValueError("at least one Ritz value inside the interval is required")
    return float(np.min(np.minimum(np.abs(r - a), np.abs(r - b))))


def compute_residuals(A: CsrMatrix, vectors, values, counter: SpmvCounter | None = None,
                      stage: str = "residuals") -> np.ndarray:
    """Euclidean norms of ``A v_j - lambda_j v_j``."""
    vectors = np.asarray(vectors, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != len(values):
        raise ValueError("vectors and values are not paired")
    if vectors.shape[1] == 0:
        return np.zeros(0)
    R = naive_spmm(A, vectors) - vectors * values
    if counter is not None:
        counter.add(vectors.shape[1], stage)
    return np.linalg.norm(R, axis=0)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def subspace_size(e_tilde: float, mu: float, n: int) -> int:
    e = max(0, math.ceil(e_tilde))
    return min(n, max(math.ceil(mu * e), e + 5, 10))


def _dense_solve(A: CsrMatrix, cfg: SolverConfig, bounds, counter, timer, note) -> SolveResult:
    with timer.stage("other"):
        w, U = sym_eig(A.to_dense())
        sel = (w >= cfg.interval_a) & (w <= cfg.interval_b)
        vals, vecs = w[sel], U[:, sel]
    with timer.stage("residuals"):
        res = compute_residuals(A, vecs, vals, counter)
    return SolveResult(vals, vecs, 0, counter.total, 0.0, float(res.max(initial=0.0)), True,
                       residuals=res, bounds=bounds, spmv_by_stage=dict(counter.by_stage),
                       timings=timer.totals, note=note)


def solve(A: CsrMatrix, config: SolverConfig, *, spurious_detection: bool = True,
          callback: Callable[[SolverState, IterationRecord], None] | None = None) -> SolveResult:
    """Eigenpairs of the symmetric matrix ``A`` with eigenvalues in the configured interval."""
    cfg = config
    n = A.n_rows
    if A.n_cols != n:
        raise ConfigurationError("square matrix required")
    timer = _Timer()
    counter = SpmvCounter()
    a, b = cfg.interval_a, cfg.interval_b

    with timer.stage("setup"):
        bounds = estimate_spectrum_bounds(A, cfg.lanczos_steps, cfg.rng_seed, counter)
        norm_a = bounds.norm
        if b < bounds.lambda_min or a > bounds.lambda_max:
            raise ConfigurationError(
                f"interval [{a}, {b}] lies outside the estimated spectrum "
                f"[{bounds.lambda_min}, {bounds.lambda_max}]")
        fa, fb = max(a, bounds.lambda_min), min(b, bounds.lambda_max)
        if (fa, fb) != (a, b):
            log.warning("interval clipped to the estimated spectrum: [%g, %g]", fa, fb)
        if not fa < fb:
            raise ConfigurationError("interval has no overlap with the estimated spectrum")
        probe = build_filter(fa, fb, bounds, 1, cfg.m)
        # a very wide interval needs no more than the linear filter to start
        width = probe.alpha - probe.beta
        k1 = initial_degree(probe.alpha, probe.beta, cfg.C) if cfg.C > width else 1
        k_max = max(k1, math.ceil(cfg.k_multiplier * k1))
        filt = build_filter(fa, fb, bounds, k_max, cfg.m)
        tiled = csr_to_tiled(A, cfg.tile_ti or DEFAULT_TILE_ROWS, cfg.tile_tk or DEFAULT_TILE_COLS)
        e_tilde = None
        if cfg.p_override is not None:
            p = min(n, cfg.p_override)
        else:
            e_tilde = estimate_eigcount(tiled, filt, cfg.trace_probes, cfg.rng_seed, counter)
            p = subspace_size(e_tilde, cfg.mu, n)

    common = dict(bounds=bounds, k_max=k_max, k_initial=k1, e_tilde=e_tilde)
    if e_tilde is not None and e_tilde < COUNT_SHORT_CIRCUIT:
        log.info("estimated count %.3g: interval treated as empty", e_tilde)
        return SolveResult(np.zeros(0), np.zeros((n, 0)), 0, counter.total, 0.0, 0.0, True,
                           p=0, spmv_by_stage=dict(counter.by_stage), timings=timer.totals,
                           note="empty interval (trace estimate)", **common)
    if p >= n:
        warnings.warn("subspace size reaches the matrix dimension; using the dense eigensolver",
                      RuntimeWarning, stacklevel=2)
        res = _dense_solve(A, cfg, bounds, counter, timer, "dense fallback")
        res.k_max, res.k_initial, res.e_tilde, res.p = k_max, k1, e_tilde, n
        return res

    rng = make_rng(cfg.rng_seed, 3)
    with timer.stage("orth"):
        basis = cholesky_qr(rng.standard_normal((n, p)))
        basis = _refill(basis, p, rng)
    state = SolverState(np.zeros(0), np.zeros((n, 0)), basis)
    history: list[IterationRecord] = []
    degree = k1
    converged = False
    empty_run = 0
    note = ""
    tau_lock = cfg.tau_c * norm_a

    for it in range(1, cfg.max_iter + 1):
        state.iteration = it
        n_lock = state.n_lock
        V_lock = state.locked_vectors
        with timer.stage("filter"):
            X = clenshaw_apply(filt, tiled, state.active_basis, degree, counter)
        state.degree_history.append(degree)
        with timer.stage("orth"):
            Qh = cholesky_qr(np.hstack([V_lock, X]))
            Qh = _refill(Qh, p, rng)
            Q = Qh[:, n_lock:]
        with timer.stage("rayleigh_ritz"):
            ritz_vecs, ritz_vals = rayleigh_ritz(A, Q)
            counter.add(Q.shape[1], "rayleigh_ritz")
        with timer.stage("other"):
            inside = np.flatnonzero((ritz_vals >= a) & (ritz_vals <= b))
            e_i = len(inside)
        state.ritz_values = ritz_vals
        if e_i == 0:
            state.active_basis = ritz_vecs
            state.ritz_residuals = np.zeros(0)
            rec = IterationRecord(it, degree, 0, n_lock, 0.0)
            history.append(rec)
            state.spmv_count = counter.total
            if callback:
                callback(state, rec)
            if it > EMPTY_STALL_AFTER:
                empty_run += 1
            if empty_run >= EMPTY_STALL_LIMIT:
                converged = True
                note = "no Ritz values left in the interval"
                break
            continue
        empty_run = 0
        with timer.stage("other"):
            next_degree = adaptive_degree(filt, ritz_vals, e_i, cfg.tau_a)
        with timer.stage("residuals"):
            r = compute_residuals(A, ritz_vecs[:, inside], ritz_vals[inside], counter)
        with timer.stage("other"):
            tau_s = spurious_threshold(ritz_vals[inside], a, b)
            checked = r < tau_s
            n_check = int(checked.sum()) + n_lock
            active = inside
            active_r = r
            if (spurious_detection and tau_s > 0 and n_check > 0
                    and n_check == state.n_check_prev):
                active, active_r = inside[checked], r[checked]
            state.n_check_prev = n_check
            lock_mask = active_r < tau_lock
            lock = active[lock_mask]
            state.locked_values = np.concatenate([state.locked_values, ritz_vals[lock]])
            state.locked_vectors = np.hstack([V_lock, ritz_vecs[:, lock]])
            keep = np.ones(len(ritz_vals), dtype=bool)
            keep[lock] = False
            state.active_basis = ritz_vecs[:, keep]
            state.ritz_residuals = r
        rec = IterationRecord(it, degree, e_i, state.n_lock, float(r.max()), tau_s, n_check)
        history.append(rec)
        state.spmv_count = counter.total
        if callback:
            callback(state, rec)
        log.debug("iter %d degree %d e_i %d locked %d max_res %.3e", it, degree, e_i,
                  state.n_lock, rec.max_residual)
        if len(active) == len(lock):
            converged = True
            break
        degree = next_degree
        if state.active_basis.shape[1] == 0:
            break

    with timer.stage("residuals"):
        order = np.argsort(state.locked_values, kind="stable")
        vals = state.locked_values[order]
        vecs = state.locked_vectors[:, order]
        final_r = compute_residuals(A, vecs, vals, counter)
    degrees = state.degree_history
    return SolveResult(
        eigenvalues=vals, eigenvectors=vecs, iterations=len(degrees), spmv_total=counter.total,
        avg_degree=float(np.mean(degrees)) if degrees else 0.0,
        max_residual=float(final_r.max(initial=0.0)), converged=converged,
        degree_history=list(degrees), residuals=final_r, history=history, p=p,
        spmv_by_stage=dict(counter.by_stage), timings=timer.totals,
        note=note or ("" if converged else "maximum iterations reached"), **common)


def _refill(Q: np.ndarray, width: int, rng: np.random.Generator) -> np.ndarray:
    """Pad a rank-deficient orthonormal basis back to ``width`` columns with random directions."""
    while Q.shape[1] < width:
        extra = rng.standard_normal((Q.shape[0], width - Q.shape[1]))
        extra -= Q @ (Q.T @ extra)
        Q = cholesky_qr(np.hstack([Q, extra]))
    return Q
