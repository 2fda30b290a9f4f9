"""Moment estimation, optimal control-variate coefficients and sample allocation.

Conventions
-----------
Levels run ``l = 0..L``.  Difference level ``l >= 1`` holds coupled pairs
``(q_l, q_{l-1})`` evaluated on the same random input; difference level 0
holds plain ``q_0`` samples.  ``work[l]`` is the cost of one sample of
difference level ``l`` (for ``l >= 1`` the cost of the pair).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import BudgetError, EstimatorError, IndicatorError

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


class CoefficientFallbackWarning(RuntimeWarning):
    """Coefficient system unsolvable; unit coefficients (plain MLMC) used."""


class NegativeVarianceWarning(RuntimeWarning):
    pass


def split_level(level: int, data):
    """Return ``(fine, coarse)`` arrays for one difference level.

    ``data`` is either a ``(fine, coarse)`` tuple (``coarse`` may be ``None``
    on level 0) or an array whose first axis indexes samples; for ``l >= 1``
    a 2-D array of shape ``(n, 2)`` is read as columns ``fine, coarse``.
    """
    if isinstance(data, tuple):
        fine, coarse = data
        fine = np.asarray(fine, dtype=float)
        coarse = None if coarse is None else np.asarray(coarse, dtype=float)
    else:
        arr = np.asarray(data, dtype=float)
        if level == 0:
            fine, coarse = arr, None
        else:
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"level {level}: expected (n, 2) array of (fine, coarse) pairs")
            fine, coarse = arr[:, 0], arr[:, 1]
    if level == 0:
        coarse = None
    elif coarse is None or coarse.shape != fine.shape:
        raise ValueError(f"level {level}: fine and coarse samples must pair up")
    return fine, coarse


@dataclass
class LevelIndicators:
    """Empirical per-level statistics steering the algorithm.

    ``variance[l]`` is ``V[q_l]``; ``covariance[l]`` is ``Cov[q_l, q_{l-1}]``
    (entry 0 unused).  ``coarse_variance[l]`` optionally carries ``V[q_{l-1}]``
    as estimated inside difference level ``l``; when absent ``variance[l-1]``
    is used.  ``inferred[l]`` marks levels whose difference statistics could
    not be measured (a single sample) and must be inferred.
    """

    variance: np.ndarray
    covariance: np.ndarray
    work: np.ndarray
    counts: np.ndarray | None = None
    coarse_variance: np.ndarray | None = None
    diff_variance: np.ndarray | None = None
    kurtosis: np.ndarray | None = None
    stderr: dict = field(default_factory=dict)
    inferred: np.ndarray | None = None

    def __post_init__(self):
        self.variance = np.asarray(self.variance, dtype=float)
        n = self.variance.size
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.size == n - 1:
            self.covariance = np.concatenate([[np.nan], self.covariance])
        self.work = np.asarray(self.work, dtype=float)
        if self.covariance.size != n or self.work.size != n:
            raise ValueError("variance, covariance and work must cover the same levels")
        if self.counts is None:
            self.counts = np.zeros(n, dtype=int)
        self.counts = np.asarray(self.counts, dtype=int)
        for name in ("coarse_variance", "diff_variance", "kurtosis"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.asarray(value, dtype=float))
        if self.inferred is None:
            self.inferred = np.zeros(n, dtype=bool)
        self.inferred = np.asarray(self.inferred, dtype=bool)

    @property
    def num_levels(self) -> int:
        return self.variance.size

    def coarse_var(self, level: int) -> float:
        if self.coarse_variance is not None and np.isfinite(self.coarse_variance[level]):
            return float(self.coarse_variance[level])
        return float(self.variance[level - 1])

    def copy(self) -> "LevelIndicators":
        def _c(a):
            return None if a is None else np.array(a, copy=True)

        return LevelIndicators(
            variance=_c(self.variance),
            covariance=_c(self.covariance),
            work=_c(self.work),
            counts=_c(self.counts),
            coarse_variance=_c(self.coarse_variance),
            diff_variance=_c(self.diff_variance),
            kurtosis=_c(self.kurtosis),
            stderr={k: _c(v) for k, v in self.stderr.items()},
            inferred=_c(self.inferred),
        )

    def to_dict(self) -> dict:
        def _l(a):
            return None if a is None else [None if not np.isfinite(x) else float(x) for x in np.ravel(a)]

        return {
            "variance": _l(self.variance),
            "covariance": _l(self.covariance),
            "coarse_variance": _l(self.coarse_variance),
            "diff_variance": _l(self.diff_variance),
            "kurtosis": _l(self.kurtosis),
            "work": _l(self.work),
            "counts": [int(c) for c in self.counts],
            "stderr": {k: _l(v) for k, v in self.stderr.items()},
            "inferred": [bool(b) for b in self.inferred],
        }


def _variance_stderr(x: np.ndarray, s2: float) -> float:
    n = x.size
    if n < 2:
        return np.nan
    if n >= 4:
        m4 = np.mean((x - x.mean()) ** 4)
        return math.sqrt(max(m4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n)
    return s2 * math.sqrt(2.0 / (n - 1))


def estimate_indicators(samples: Sequence, work: Sequence[float]) -> LevelIndicators:
    """Unbiased level statistics from per-difference-level sample collections.

    A difference level with one sample yields NaN statistics flagged as
    inferred; a level with none raises :class:`IndicatorError`.
    """
    num = len(samples)
    if len(work) != num:
        raise ValueError("one work entry per difference level is required")
    variance = np.full(num, np.nan)
    coarse_variance = np.full(num, np.nan)
    covariance = np.full(num, np.nan)
    diff_variance = np.full(num, np.nan)
    kurtosis = np.full(num, np.nan)
    se = {k: np.full(num, np.nan) for k in ("variance", "covariance", "diff_variance")}
    counts = np.zeros(num, dtype=int)
    inferred = np.zeros(num, dtype=bool)

    for level, data in enumerate(samples):
        fine, coarse = split_level(level, data)
        n = fine.shape[0]
        counts[level] = n
        if n == 0:
            raise IndicatorError(level)
        if n == 1:
            inferred[level] = True
            continue
        diff = fine if coarse is None else fine - coarse
        variance[level] = np.var(fine, ddof=1)
        se["variance"][level] = _variance_stderr(fine, variance[level])
        diff_variance[level] = np.var(diff, ddof=1)
        se["diff_variance"][level] = _variance_stderr(diff, diff_variance[level])
        kurtosis[level] = np.mean((diff - diff.mean()) ** 4)
        if coarse is not None:
            coarse_variance[level] = np.var(coarse, ddof=1)
            cov = np.sum((fine - fine.mean()) * (coarse - coarse.mean())) / (n - 1)
            covariance[level] = cov
            se["covariance"][level] = math.sqrt(
                (variance[level] * coarse_variance[level] + cov * cov) / (n - 1)
            )

    return LevelIndicators(
        variance=variance,
        covariance=covariance,
        work=np.asarray(work, dtype=float),
        counts=counts,
        coarse_variance=coarse_variance,
        diff_variance=diff_variance,
        kurtosis=kurtosis,
        stderr=se,
        inferred=inferred,
    )


def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm for a tridiagonal system.

    ``lower[i]`` multiplies ``x[i]`` in row ``i+1``, ``upper[i]`` multiplies
    ``x[i+1]`` in row ``i``.  Returns ``(x, pivots)``; for a symmetric matrix
    all pivots are positive exactly when it is positive definite.
    """
    diag = np.asarray(diag, dtype=float)
    n = diag.size
    c = np.zeros(n)
    d = np.zeros(n)
    pivots = np.zeros(n)
    pivots[0] = diag[0]
    if pivots[0] == 0:
        raise ZeroDivisionError("zero pivot in tridiagonal solve")
    c[0] = upper[0] / pivots[0] if n > 1 else 0.0
    d[0] = rhs[0] / pivots[0]
    for i in range(1, n):
        pivots[i] = diag[i] - lower[i - 1] * c[i - 1]
        if pivots[i] == 0:
            raise ZeroDivisionError("zero pivot in tridiagonal solve")
        if i < n - 1:
            c[i] = upper[i] / pivots[i]
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / pivots[i]
    x = np.zeros(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x, pivots


def coefficient_system(ind: LevelIndicators):
    """Tridiagonal normal equations of the work-weighted variance cost.

    Returns ``(off, diag, rhs)`` for unknowns ``alpha_0..alpha_{L-1}``; the
    matrix is symmetric with ``off`` on both off-diagonals.
    """
    top = ind.num_levels - 1
    w = ind.work
    diag = np.array([ind.variance[k] * w[k] + ind.coarse_var(k + 1) * w[k + 1] for k in range(top)])
    off = np.array([-ind.covariance[k + 1] * w[k + 1] for k in range(top - 1)])
    rhs = np.zeros(top)
    rhs[-1] = ind.covariance[top] * w[top]
    return off, diag, rhs


def dense_matrix(off, diag) -> np.ndarray:
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def _fallback(num_levels: int, reason: str) -> np.ndarray:
    msg = f"optimal coefficients unavailable ({reason}); using unit coefficients"
    log.warning(msg)
    warnings.warn(msg, CoefficientFallbackWarning, stacklevel=3)
    return np.ones(num_levels)


def optimal_coefficients(ind: LevelIndicators) -> np.ndarray:
    """Control-variate coefficients ``alpha_0..alpha_L`` minimizing the cost functional.

    ``alpha_L`` is fixed to one.  Ill-conditioned or indefinite systems fall
    back to unit coefficients with a :class:`CoefficientFallbackWarning`.
    """
    num = ind.num_levels
    if num == 1:
        return np.ones(1)
    off, diag, rhs = coefficient_system(ind)
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(off)) and np.all(np.isfinite(rhs))):
        return _fallback(num, "non-finite indicators")
    if np.any(ind.variance[:-1] <= 0):
        return _fallback(num, "non-positive level variance")
    cond = np.linalg.cond(dense_matrix(off, diag))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        return _fallback(num, f"condition number {cond:.3g}")
    try:
        alpha, pivots = solve_tridiagonal(off, diag, off, rhs)
    except ZeroDivisionError:
        return _fallback(num, "singular system")
    if np.any(pivots <= 0):
        return _fallback(num, "system not positive definite")
    return np.append(alpha, 1.0)


def cost_functional(ind: LevelIndicators, alpha) -> float:
    """Work-weighted variance ``sum_l V[alpha_l q_l - alpha_{l-1} q_{l-1}] W_l``."""
    return float(np.dot(_weighted(ind, np.asarray(alpha, dtype=float)), ind.work))


def _weighted(ind: LevelIndicators, alpha: np.ndarray) -> np.ndarray:
    out = np.empty(ind.num_levels)
    out[0] = alpha[0] ** 2 * ind.variance[0]
    for l in range(1, ind.num_levels):
        out[l] = (
            alpha[l] ** 2 * ind.variance[l]
            + alpha[l - 1] ** 2 * ind.coarse_var(l)
            - 2.0 * alpha[l] * alpha[l - 1] * ind.covariance[l]
        )
    return out


def weighted_variances(ind: LevelIndicators, alpha) -> np.ndarray:
    """Variances of the alpha-weighted level differences, clamped at zero."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != ind.num_levels:
        raise ValueError("coefficient vector does not match the number of levels")
    out = _weighted(ind, alpha)
    negative = out < 0
    if np.any(negative):
        msg = f"negative weighted variance on levels {np.flatnonzero(negative).tolist()} clamped to 0"
        log.warning(msg)
        warnings.warn(msg, NegativeVarianceWarning, stacklevel=2)
        out[negative] = 0.0
    return out


def estimator_error(weighted_var, counts) -> float:
    """Root mean square error ``sqrt(sum_l sigma~_l^2 / M_l)``."""
    weighted_var = np.asarray(weighted_var, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 1):
        raise ValueError("every level needs at least one sample")
    return math.sqrt(float(np.sum(weighted_var / counts)))


def _ceil(x: float) -> int:
    # trims float noise such as 200.00000000000003 before rounding up
    return max(1, math.ceil(x * (1.0 - 1e-12)))


def allocate_for_tolerance(weighted_var, work, tol: float) -> np.ndarray:
    """Cheapest sample counts whose error does not exceed ``tol``."""
    if tol <= 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    s = np.asarray(weighted_var, dtype=float)
    w = np.asarray(work, dtype=float)
    if np.any(w <= 0):
        raise ValueError("work must be positive")
    total = float(np.sum(np.sqrt(s * w)))
    return np.array([_ceil(math.sqrt(si / wi) * total / tol**2) for si, wi in zip(s, w)], dtype=int)


def allocate_for_budget(weighted_var, work, budget: float) -> np.ndarray:
    """Sample counts minimizing the error for a total budget (ceil slack above)."""
    s = np.asarray(weighted_var, dtype=float)
    w = np.asarray(work, dtype=float)
    minimum = float(np.sum(w))
    if budget < minimum:
        raise BudgetError(budget, minimum)
    total = float(np.sum(np.sqrt(s * w)))
    if total == 0:
        return np.ones(s.size, dtype=int)
    return np.array([_ceil(budget * math.sqrt(si / wi) / total) for si, wi in zip(s, w)], dtype=int)


def reoptimize_with_floor(target, done, weighted_var, work, tol=None, budget=None) -> np.ndarray:
    """Re-optimize an allocation so that no level drops below its computed samples.

    Levels whose target falls short of the samples already computed are pinned
    to those counts; their error contribution (or cost) is removed from the
    tolerance (or budget) and the remaining levels are re-solved, repeatedly,
    until every level satisfies ``target >= done``.
    """
    if (tol is None) == (budget is None):
        raise ValueError("exactly one of tol or budget is required")
    target = np.asarray(target, dtype=int).copy()
    done = np.asarray(done, dtype=int)
    s = np.asarray(weighted_var, dtype=float)
    w = np.asarray(work, dtype=float)
    fixed = target < done
    if not np.any(fixed):
        return target

    while True:
        free = ~fixed
        if not np.any(free):
            return done.copy()
        if tol is not None:
            residual = tol**2 - float(np.sum(s[fixed] / done[fixed]))
            if residual <= 0:
                return done.copy()
            total = float(np.sum(np.sqrt(s[free] * w[free])))
            solved = [_ceil(math.sqrt(si / wi) * total / residual) for si, wi in zip(s[free], w[free])]
        else:
            residual = budget - float(np.sum(done[fixed] * w[fixed]))
            if residual <= 0:
                return done.copy()
            total = float(np.sum(np.sqrt(s[free] * w[free])))
            if total == 0:
                solved = [1] * int(np.sum(free))
            else:
                solved = [_ceil(residual * math.sqrt(si / wi) / total) for si, wi in zip(s[free], w[free])]
        new = done.copy()
        new[free] = solved
        violated = free & (new < done)
        if not np.any(violated):
            return np.maximum(new, done)
        fixed = fixed | violated


def of_mlmc_expectation(samples: Sequence, alpha) -> np.ndarray | float:
    """Optimal-fidelity telescoping estimate of ``E[q_L]``.

    Works for scalar samples and for vector-valued ones (e.g. time series,
    one row per sample).  Unit coefficients give the classic MLMC estimate.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != len(samples):
        raise ValueError("coefficient vector does not match the number of levels")
    if alpha[-1] != 1.0:
        raise ValueError("finest-level coefficient must equal 1")
    total = 0.0
    for level, data in enumerate(samples):
        fine, coarse = split_level(level, data)
        if fine.shape[0] == 0:
            raise EstimatorError(f"difference level {level} has no valid samples")
        if coarse is None:
            total = total + alpha[0] * fine.mean(axis=0)
        else:
            total = total + (alpha[level] * fine - alpha[level - 1] * coarse).mean(axis=0)
    return float(total) if np.ndim(total) == 0 else total


def mlmc_error_correlation(variance: float, correlation, counts) -> float:
    """Classic MLMC error from level correlations, assuming ``V[q_l] ~ V[q]``."""
    counts = np.asarray(counts, dtype=float)
    correlation = np.asarray(correlation, dtype=float)
    eps2 = variance * (1.0 / counts[0] + 2.0 * np.sum((1.0 - correlation) / counts[1:]))
    return math.sqrt(eps2)


class MCCost(NamedTuple):
    samples: int
    work: float
    samples_variance_law: int
    work_variance_law: float


def mc_cost_estimate(sigma_finest: float, eps: float, work_finest: float) -> MCCost:
    """Plain Monte Carlo sample count and cost for error ``eps`` on the finest level.

    ``samples`` follows the as-published ``ceil(sigma / eps)``;
    ``samples_variance_law`` is the error-law-consistent ``ceil(sigma^2 / eps^2)``.
    Both are floored at one sample.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    published = max(1, math.ceil(sigma_finest / eps * (1.0 - 1e-12)))
    consistent = max(1, math.ceil((sigma_finest / eps) ** 2 * (1.0 - 1e-12)))
    return MCCost(published, published * work_finest, consistent, consistent * work_finest)
