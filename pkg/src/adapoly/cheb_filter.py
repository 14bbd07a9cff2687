"""Damped Chebyshev step-function filters.

A filter approximates the indicator of ``[a, b]`` on the spectral range
``[lambda_min, lambda_max]``.  The range is mapped to ``[-1, 1]`` by
``l(x) = l1 * x + l2`` and, with ``alpha = arccos(l(a))`` and
``beta = arccos(l(b))``, the filter is

    rho(x) = sum_{j <= degree} c_j d_j T_j(l(x))

where ``c_j`` are the Fourier coefficients of the step in ``theta`` and
``d_j`` the exponent-m Lanczos damping factors computed for the maximal
degree ``k_max``.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .sparse_core import TiledMatrix, from_row_segments, maspmm, to_row_segments


class ConfigurationError(ValueError):
    pass


class SpmvCounter:
    """Running count of column products with the operator, split by stage."""

    def __init__(self):
        self.by_stage: dict[str, int] = {}

    def add(self, n: int, stage: str = "other") -> None:
        self.by_stage[stage] = self.by_stage.get(stage, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())


@dataclass(frozen=True)
class SpectrumBounds:
    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        if not (math.isfinite(self.lambda_min) and math.isfinite(self.lambda_max)):
            raise ValueError("spectrum bounds must be finite")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be < lambda_max")

    @property
    def l1(self) -> float:
        return 2.0 / (self.lambda_max - self.lambda_min)

    @property
    def l2(self) -> float:
        return -(self.lambda_max + self.lambda_min) / (self.lambda_max - self.lambda_min)

    @property
    def norm(self) -> float:
        return max(abs(self.lambda_min), abs(self.lambda_max))

    def map(self, x):
        """Affine map of the spectral range onto ``[-1, 1]`` (exact at the ends)."""
        lo, hi = self.lambda_min, self.lambda_max
        x = np.asarray(x, dtype=np.float64)
        return ((x - lo) - (hi - x)) / (hi - lo)


@dataclass(frozen=True, eq=False)
class ChebFilter:
    interval_a: float
    interval_b: float
    bounds: SpectrumBounds
    alpha: float
    beta: float
    k_max: int
    m: float
    coeffs: np.ndarray
    step_coeffs: np.ndarray
    damping: np.ndarray
    active_degree: int

    @property
    def l1(self) -> float:
        return self.bounds.l1

    @property
    def l2(self) -> float:
        return self.bounds.l2

    def with_degree(self, degree: int) -> "ChebFilter":
        if not 1 <= degree <= self.k_max:
            raise ValueError(f"degree must lie in [1, {self.k_max}]")
        return replace(self, active_degree=int(degree))


_PI_LO = 1.2246467991473532e-16  # pi - math.pi


def _two_sum(a: float, b: float) -> tuple[float, float]:
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _multiples(j: np.ndarray, hi: float, lo: float = 0.0):
    """``sin`` and ``cos`` of ``j * (hi + lo)`` without rounding the product.

    ``hi`` is split so that ``j * head`` is exact; the small remainder is
    applied through the addition formulas.
    """
    head = float(np.float32(hi))
    x = j * head
    y = j * (hi - head) + j * lo
    sx, cx, sy, cy = np.sin(x), np.cos(x), np.sin(y), np.cos(y)
    return sx * cy + cx * sy, cx * cy - sx * sy


def _sin_difference(j: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """``sin(j alpha) - sin(j beta)``, accurate even when the angles are close."""
    ends = (0.0, math.pi)
    if alpha in ends or beta in ends:
        # one term vanishes identically; no cancellation to guard against
        sa = np.zeros(len(j)) if alpha in ends else _multiples(j, alpha)[0]
        sb = np.zeros(len(j)) if beta in ends else _multiples(j, beta)[0]
        return sa - sb
    # 2 cos(j (alpha + beta) / 2) sin(j (alpha - beta) / 2), halving is exact
    s_hi, s_lo = _two_sum(alpha, beta)
    d_hi, d_lo = _two_sum(alpha, -beta)
    cos_sum = _multiples(j, 0.5 * s_hi, 0.5 * s_lo)[1]
    sin_diff = _multiples(j, 0.5 * d_hi, 0.5 * d_lo)[0]
    return 2.0 * cos_sum * sin_diff


def chebyshev_step_coeffs(alpha: float, beta: float, k: int) -> np.ndarray:
    """Chebyshev coefficients ``c_0..c_k`` of the step on ``[cos(alpha), cos(beta)]``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    c = np.empty(k + 1)
    # alpha == math.pi stands for pi itself (as in the sine terms)
    width = (alpha - beta) + (_PI_LO if alpha == math.pi else 0.0)
    c[0] = width / math.pi
    j = np.arange(1, k + 1, dtype=np.float64)
    c[1:] = (2.0 / math.pi) * _sin_difference(j, alpha, beta) / j
    return c


def lanczos_damping(k: int, m: float) -> np.ndarray:
    """Exponent-m Lanczos sigma factors ``d_0..d_k`` (``d_0 = 1``)."""
    if m < 0:
        raise ValueError("damping exponent m must be >= 0")
    if k < 0:
        raise ValueError("k must be >= 0")
    if m == 0:
        return np.ones(k + 1)
    # np.sinc(x) = sin(pi x) / (pi x) and np.sinc(0) = 1
    return np.sinc(np.arange(k + 1) / (k + 1)) ** m


def jackson_damping(k: int) -> np.ndarray:
    """Jackson damping factors ``d_0..d_k``; not used by the solver defaults."""
    j = np.arange(k + 1, dtype=np.float64)
    t = math.pi / (k + 2)
    return ((k + 2 - j) * math.sin(t) * np.cos(j * t) + math.cos(t) * np.sin(j * t)) / ((k + 2) * math.sin(t))


def build_filter(a: float, b: float, bounds: SpectrumBounds, k: int, m: float,
                 damping: str = "lanczos") -> ChebFilter:
    if not bounds.lambda_min <= a < b <= bounds.lambda_max:
        raise ConfigurationError(
            f"interval [{a}, {b}] must satisfy "
            f"{bounds.lambda_min} <= a < b <= {bounds.lambda_max}")
    if k < 1:
        raise ConfigurationError("filter degree must be >= 1")
    if m < 0:
        raise ConfigurationError("damping exponent m must be >= 0")
    la, lb = np.clip(bounds.map([a, b]), -1.0, 1.0)
    alpha, beta = math.acos(la), math.acos(lb)
    c = chebyshev_step_coeffs(alpha, beta, k)
    if damping == "lanczos":
        d = lanczos_damping(k, m)
    elif damping == "jackson":
        d = jackson_damping(k)
    else:
        raise ConfigurationError(f"unknown damping family {damping!r}")
    return ChebFilter(float(a), float(b), bounds, alpha, beta, int(k), float(m),
                      c * d, c, d, int(k))


def _check_degree(f: ChebFilter, degree: int | None) -> int:
    degree = f.active_degree if degree is None else int(degree)
    if not 0 <= degree <= f.k_max:
        raise ValueError(f"degree must lie in [0, {f.k_max}], got {degree}")
    return degree


def mapped_points(f: ChebFilter, x) -> np.ndarray:
    """``l(x)`` clamped to ``[-1, 1]``; warns when clamping was needed."""
    t = np.atleast_1d(f.bounds.map(x))
    out = np.clip(t, -1.0, 1.0)
    if np.any(np.abs(t - out) > 1e-12):
        warnings.warn("points outside the estimated spectrum were clamped", RuntimeWarning, stacklevel=3)
    return out


def eval_filter_scalar(f: ChebFilter, x, degree: int | None = None) -> np.ndarray:
    """Filter values at scalar points via the forward three-term recurrence."""
    degree = _check_degree(f, degree)
    t = mapped_points(f, x)
    a = f.coeffs
    h0 = np.ones_like(t)
    out = a[0] * h0
    if degree == 0:
        return out
    h1 = t.copy()
    for j in range(1, degree + 1):
        out = out + a[j] * h1
        h0, h1 = h1, 2.0 * t * h1 - h0
    return out


def clenshaw_apply(f: ChebFilter, A: TiledMatrix, X, degree: int | None = None,
                   counter: SpmvCounter | None = None) -> np.ndarray:
    """``rho(A) @ X`` by the backward Clenshaw recurrence.

    Every product with ``A`` goes through ``maspmm``; the block is converted
    to row-segment layout once and all recurrence updates are performed in
    that layout.  Uses exactly ``degree`` block products.
    """
    degree = _check_degree(f, degree)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != A.n_cols or A.n_rows != A.n_cols:
        raise ValueError("square operator and matching n x q block required")
    a = f.coeffs
    # trailing zero coefficient would divide by zero below
    while degree > 0 and a[degree] == 0.0:
        degree -= 1
    n, q = X.shape
    l1, l2 = f.l1, f.l2
    if degree == 0:
        return a[0] * X
    tk = A.tile_cols
    Y = to_row_segments(X, tk)

    def matvec(W):
        out = np.zeros_like(W)
        maspmm(A, W, out, q)
        return out

    if degree == 1:
        out = a[0] * Y + a[1] * (l1 * matvec(Y) + l2 * Y)
    else:
        W = a[degree] * Y
        V = 2.0 * l1 * matvec(W) + (2.0 * l2 + a[degree - 1] / a[degree]) * W
        V, W = W, V
        for j in range(degree - 2, 0, -1):
            V = 2.0 * l1 * matvec(W) + 2.0 * l2 * W - V + a[j] * Y
            V, W = W, V
        out = l1 * matvec(W) + l2 * W - V + a[0] * Y
    if counter is not None:
        counter.add(degree * q, "filter")
    return from_row_segments(out, q)


def initial_degree(alpha: float, beta: float, C: float) -> int:
    """``ceil(C / (alpha - beta)) - 1``, at least 1."""
    width = alpha - beta
    if not width > 0:
        raise ConfigurationError("alpha must exceed beta")
    if not C > width:
        raise ConfigurationError(f"C={C} must exceed alpha - beta = {width}")
    return max(1, math.ceil(C / width) - 1)


MIN_ADAPTIVE_DEGREE = 3


def adaptive_degree(f: ChebFilter, ritz, e_i: int, tau_a: float) -> int:
    """Smallest degree at which the filter separates the targeted Ritz values.

    Partial sums of the filter are accumulated at every Ritz value; after
    adding term ``j`` the magnitudes are sorted descending and ``j`` is
    accepted once ``|gamma_p / gamma_{e_i}| < tau_a``.  Returns ``k_max`` if
    no degree qualifies.  The result is never below 3 (or ``k_max`` if
    smaller).
    """
    ritz = np.atleast_1d(np.asarray(ritz, dtype=np.float64))
    p = len(ritz)
    if not 1 <= e_i <= p:
        raise ValueError(f"e_i must lie in [1, {p}], got {e_i}")
    floor = min(MIN_ADAPTIVE_DEGREE, f.k_max)
    if e_i == p:
        return f.k_max
    t = mapped_points(f, ritz)
    a = f.coeffs
    h0 = np.ones(p)
    h1 = t.copy()
    gamma = a[0] * h0
    for j in range(1, f.k_max + 1):
        gamma = gamma + a[j] * h1
        mags = np.sort(np.abs(gamma))[::-1]
        if mags[e_i - 1] > 0 and mags[p - 1] / mags[e_i - 1] < tau_a:
            return max(j, floor)
        h0, h1 = h1, 2.0 * t * h1 - h0
    return f.k_max


# ---------------------------------------------------------------------------
# Pointwise error bounds
# ---------------------------------------------------------------------------

def step_in_theta(theta, alpha: float, beta: float) -> np.ndarray:
    """The step in angle space: 1 on (beta, alpha), 1/2 at the ends, else 0."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.where((theta > beta) & (theta < alpha), 1.0, 0.0)
    return np.where((theta == alpha) | (theta == beta), 0.5, g)


def step_function(x, a: float, b: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s = np.where((x > a) & (x < b), 1.0, 0.0)
    return np.where((x == a) | (x == b), 0.5, s)


def _inv_abs_sin(x):
    s = np.abs(np.sin(x))
    with np.errstate(divide="ignore"):
        return np.where(s == 0, np.inf, 1.0 / np.where(s == 0, 1.0, s))


def j_theta(theta, alpha: float, beta: float):
    """Reciprocal-sine sum controlling the pointwise filter error at ``theta``."""
    scalar = np.ndim(theta) == 0
    th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    generic = (_inv_abs_sin((th + alpha) / 2) + _inv_abs_sin((th - alpha) / 2)
               + _inv_abs_sin((th + beta) / 2) + _inv_abs_sin((th - beta) / 2))
    shared = _inv_abs_sin((alpha + beta) / 2) + _inv_abs_sin((alpha - beta) / 2)
    out = np.where(th == alpha, _inv_abs_sin(alpha) + shared, generic)
    out = np.where(th == beta, _inv_abs_sin(beta) + shared, out)
    return float(out[0]) if scalar else out


def _cm_integrand(u: float, m: float) -> float:
    if u < 1e-2:
        u2 = u * u
        core = 1.0 / 3 - u2 / 30 + u2 * u2 / 840 - u2 * u2 * u2 / 45360
    else:
        core = (math.sin(u) - u * math.cos(u)) / u ** 3
    sinc = math.sin(u) / u if u > 0 else 1.0
    return sinc ** (m - 1) * core


def _cm_integrand_near_pi(w: float, m: float) -> float:
    # u = pi - s, s = w ** (1/m): removes the (pi - u)^(m-1) endpoint singularity
    s = w ** (1.0 / m)
    sinc = math.sin(s) / s if s > 0 else 1.0
    u = math.pi - s
    return sinc ** (m - 1) * (math.sin(s) + u * math.cos(s)) / u ** (m + 2) / m


def adaptive_simpson(fn, lo: float, hi: float, tol: float = 1e-10, max_depth: int = 60) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""
    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    fa, fb, fm = fn(lo), fn(hi), fn(0.5 * (lo + hi))
    total = 0.0
    stack = [(lo, hi, fa, fm, fb, simpson(fa, fm, fb, hi - lo), tol, 0)]
    while stack:
        x0, x1, f0, fmid, f1, whole, eps, depth = stack.pop()
        mid = 0.5 * (x0 + x1)
        fl, fr = fn(0.5 * (x0 + mid)), fn(0.5 * (mid + x1))
        left = simpson(f0, fl, fmid, mid - x0)
        right = simpson(fmid, fr, f1, x1 - mid)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((x0, mid, f0, fl, fmid, left, eps / 2, depth + 1))
            stack.append((mid, x1, fmid, fr, f1, right, eps / 2, depth + 1))
    return total


@functools.lru_cache(maxsize=64)
def c_m_constant(m: float, tol: float = 1e-10) -> float:
    """``int_0^pi (sin u)^(m-1) (sin u - u cos u) / u^(m+2) du``."""
    if not m > 0:
        raise ValueError("m must be > 0")
    if m >= 1:
        return adaptive_simpson(lambda u: _cm_integrand(u, m), 0.0, math.pi, tol)
    half = math.pi / 2
    left = adaptive_simpson(lambda u: _cm_integrand(u, m), 0.0, half, tol / 2)
    right = adaptive_simpson(lambda w: _cm_integrand_near_pi(w, m), 0.0, half ** m, tol / 2)
    return left + right


def undamped_bound(theta, k: int, alpha: float, beta: float):
    """Bound on ``|g(theta) - g_k(theta)|`` for the undamped partial sum."""
    return j_theta(theta, alpha, beta) / (math.pi * (k + 1))


def damped_bound(theta, k_i: int, k: int, m: float, alpha: float, beta: float):
    """Bound on the error of the damped partial sum of degree ``k_i`` (damping for ``k``)."""
    if not 1 <= k_i <= k:
        raise ValueError("need 1 <= k_i <= k")
    J = j_theta(theta, alpha, beta)
    first = lanczos_damping(k, m)[k_i] * J / (math.pi * (k_i + 1))
    if m == 0:
        return first
    theta = np.asarray(theta, dtype=np.float64)
    tail = m * c_m_constant(float(m)) * J / (k + 1) + m * math.pi * (math.pi - theta) / (3 * (k + 1) ** 2)
    out = first + tail
    return float(out) if np.ndim(out) == 0 else out


def projector_bound(f: ChebFilter, eigen_thetas, k_i: int) -> float:
    """Bound on ``||P - rho(A)||_2`` given the angles of the eigenvalues of ``A``."""
    th = np.atleast_1d(np.asarray(eigen_thetas, dtype=np.float64))
    if th.size == 0:
        raise ValueError("at least one eigenvalue angle is required")
    if not 1 <= k_i <= f.k_max:
        raise ValueError("need 1 <= k_i <= k_max")
    k, m = f.k_max, f.m
    J = float(np.max(j_theta(th, f.alpha, f.beta)))
    out = lanczos_damping(k, m)[k_i] * J / (math.pi * (k_i + 1))
    if m > 0:
        out += m * c_m_constant(float(m)) * J / (k + 1) + m * math.pi ** 2 / (3 * (k + 1) ** 2)
    return out

