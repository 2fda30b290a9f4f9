"""Adaptive OF-MLMC campaign driver.

One iteration: run the planned samples, estimate indicators on the steering
QoI, complete them (decay fit, inferred finest level), solve for the
coefficients, estimate the error, then either finish or plan the next
allocation.  All controller state that matters for the next step lives in
the sample ledger plus a small ``state`` dict, so an interrupted campaign
resumes to the same result as an uninterrupted one.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimator import (
    LevelIndicators,
    allocate_for_budget,
    allocate_for_tolerance,
    estimate_indicators,
    estimator_error,
    mc_cost_estimate,
    of_mlmc_expectation,
    optimal_coefficients,
    reoptimize_with_floor,
    weighted_variances,
)
from .exceptions import BudgetError, CampaignAbort, ConfigError
from .levels import LevelHierarchy, warmup_allocation
from .models import build_model
from .scheduler import BatchPlan, execute_plan
from .store import DONE, CampaignStore, SampleLedger
from .streams import SampleKey

log = logging.getLogger(__name__)

COEFFICIENT_MODES = ("optimal", "unit")
WORK_SOURCES = ("nominal", "model", "wallclock")
# draws per level before a level without any valid sample aborts the campaign
EMPTY_LEVEL_ATTEMPTS = 8


class DecayFitWarning(RuntimeWarning):
    pass


@dataclass
class CampaignConfig:
    hierarchy: LevelHierarchy
    campaign_seed: int
    tolerance: float | None = None
    budget: float | None = None
    model: str = "synthetic"
    model_params: dict = field(default_factory=dict)
    failure_rate: float = 0.0
    max_iterations: int = 10
    kurtosis_inflation: float = 0.0
    decay_fit: bool = True
    coefficients: str = "optimal"
    qoi: str | None = None
    work_source: str = "nominal"
    batch_size: int = 16
    name: str = "campaign"

    def __post_init__(self):
        if isinstance(self.hierarchy, dict):
            self.hierarchy = LevelHierarchy(
                work=tuple(self.hierarchy["work"]),
                work_rate=self.hierarchy.get("work_rate", 4.0),
                resolution=tuple(self.hierarchy.get("resolution", ())),
            )
        if (self.tolerance is None) == (self.budget is None):
            raise ConfigError("mode", "exactly one of tolerance or budget must be set")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ConfigError("mode.tolerance", "must be positive")
        if self.budget is not None and not self.budget > 0:
            raise ConfigError("mode.budget", "must be positive")
        if not isinstance(self.campaign_seed, int) or not 0 <= self.campaign_seed < 2**64:
            raise ConfigError("campaign.campaign_seed", "must be an integer in [0, 2**64)")
        if self.max_iterations < 1:
            raise ConfigError("campaign.max_iterations", "must be >= 1")
        if self.kurtosis_inflation < 0:
            raise ConfigError("statistics.kurtosis_inflation", "must be >= 0")
        if self.coefficients not in COEFFICIENT_MODES:
            raise ConfigError("campaign.coefficients", f"must be one of {COEFFICIENT_MODES}")
        if self.work_source not in WORK_SOURCES:
            raise ConfigError("hierarchy.work_source", f"must be one of {WORK_SOURCES}")
        if self.batch_size < 1:
            raise ConfigError("campaign.batch_size", "must be >= 1")

    @property
    def mode(self) -> str:
        return "tolerance" if self.tolerance is not None else "budget"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hierarchy"] = {
            "work": list(self.hierarchy.work),
            "work_rate": self.hierarchy.work_rate,
            "resolution": list(self.hierarchy.resolution),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        return cls(**d)


@dataclass
class IterationState:
    iteration: int
    counts: list
    computed: list
    indicators: dict
    alpha: list
    weighted_variance: list
    error: float
    error_inflated: float
    cost: float
    target: list
    status: str = "running"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CampaignReport:
    config: dict
    iterations: list
    qoi: str
    estimate: float
    alpha: list
    counts: list
    error: float
    cost: float
    status: str
    estimates: dict = field(default_factory=dict)
    comparison: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignReport":
        return cls(**d)


# ---------------------------------------------------------------- decay fit


def fit_decay(values, stderr=None) -> np.ndarray:
    """Log-linear fit of per-level values against the level index.

    ``values[k]`` belongs to level ``k + 1``; NaN marks a missing measurement.
    Weighted least squares on ``ln(value)`` with weights ``(value/stderr)**2``
    (unit weights without standard errors).  Missing levels receive the fitted
    line; measured ones an inverse-variance blend of measurement and line in
    log space.  Fewer than two usable measurements return the input unchanged.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    ok = np.isfinite(values) & (values > 0)
    if np.sum(ok) < 2:
        msg = "decay fit needs at least two positive measurements; values passed through"
        log.warning(msg)
        warnings.warn(msg, DecayFitWarning, stacklevel=2)
        return values.copy()
    x = np.arange(1, n + 1, dtype=float)
    y = np.log(values[ok])
    if stderr is None:
        var_m = np.ones(n)
    else:
        rel = np.asarray(stderr, dtype=float) / np.where(values > 0, values, np.nan)
        var_m = np.where(np.isfinite(rel), np.maximum(rel, 1e-12) ** 2, np.nan)
        if not np.all(np.isfinite(var_m[ok])):
            var_m = np.ones(n)
    wts = 1.0 / var_m[ok]
    X = np.column_stack([np.ones(n), x])
    A = X[ok].T @ (wts[:, None] * X[ok])
    cov = np.linalg.inv(A)
    beta = cov @ (X[ok].T @ (wts * y))
    pred = X @ beta
    pred_var = np.einsum("ij,jk,ik->i", X, cov, X)
    logs = pred.copy()
    wm = 1.0 / var_m[ok]
    wp = 1.0 / np.maximum(pred_var[ok], 1e-300)
    logs[ok] = (wm * y + wp * pred[ok]) / (wm + wp)
    out = np.exp(logs)
    bad = np.isfinite(values) & ~ok
    out[bad] = values[bad]
    return out


def complete_indicators(ind: LevelIndicators, decay_fit: bool = True):
    """Fill in statistics that could not be measured.

    A difference level with a single sample takes the fine variance of the
    level below; its difference variance comes from the decay fit.  When
    decay fitting is enabled, measured difference variances are blended with
    the fitted line.  Difference variances are clamped to the range a valid
    covariance allows, ``(sqrt(vf) -+ sqrt(vc))**2``, and covariances are
    re-derived from them.  Returns the completed indicators and the
    levels that still need more samples.
    """
    out = ind.copy()
    L = out.num_levels
    if out.coarse_variance is None:
        out.coarse_variance = np.full(L, np.nan)
    if out.diff_variance is None:
        out.diff_variance = np.full(L, np.nan)
    need = []
    if out.inferred[0] or not np.isfinite(out.variance[0]):
        need.append(0)
    for l in range(1, L):
        if out.inferred[l]:
            out.variance[l] = out.variance[l - 1]
            out.coarse_variance[l] = out.variance[l - 1]
    measured = out.diff_variance[1:]
    if decay_fit and np.sum(np.isfinite(measured) & (measured > 0)) >= 2:
        se = out.stderr.get("diff_variance")
        out.diff_variance[1:] = fit_decay(measured, None if se is None else se[1:])
    for l in range(1, L):
        vf, vc, vd = out.variance[l], out.coarse_var(l), out.diff_variance[l]
        if not (np.isfinite(vf) and np.isfinite(vc) and np.isfinite(vd)):
            need.append(l)
            continue
        # keep |cov| <= sqrt(vf * vc) so the level pair stays a valid covariance
        lo, hi = (math.sqrt(vf) - math.sqrt(vc)) ** 2, (math.sqrt(vf) + math.sqrt(vc)) ** 2
        vd = min(max(vd, lo), hi)
        out.diff_variance[l] = vd
        out.covariance[l] = 0.5 * (vf + vc - vd)
    return out, sorted(set(need))


# ---------------------------------------------------------------- allocation


def weighted_fourth_spread(samples, alpha) -> np.ndarray:
    """``sqrt(m4 - sigma^4)`` of the weighted differences per level (0 if n < 2)."""
    out = np.zeros(len(samples))
    for l, data in enumerate(samples):
        data = np.asarray(data, dtype=float)
        if data.shape[0] < 2:
            continue
        d = alpha[0] * data if l == 0 else alpha[l] * data[:, 0] - alpha[l - 1] * data[:, 1]
        c = d - d.mean()
        m2 = np.mean(c * c)
        out[l] = math.sqrt(max(np.mean(c**4) - m2 * m2, 0.0))
    return out


def inflate_for_confidence(counts, kappa, s, weighted_var, work, tol, max_iter: int = 100, floor=None) -> np.ndarray:
    """Grow an allocation until the error bound holds with inflated variances.

    Each ``sigma~_l^2`` is replaced by ``sigma~_l^2 + s * kappa_l / sqrt(M_l)``
    (``s`` standard deviations of the variance estimator) and the allocation
    is recomputed until it stops growing.  With ``floor`` (samples already
    computed) each step re-optimises around the floor using the inflated
    variances.  ``s = 0`` returns ``counts``.
    """
    if s < 0:
        raise ValueError("s must be >= 0")
    counts = np.asarray(counts, dtype=int)
    kappa = np.asarray(kappa, dtype=float)
    if s == 0 or not np.any(kappa > 0):
        return counts.copy()
    m = counts.copy()
    wv = np.asarray(weighted_var, dtype=float)
    for _ in range(max_iter):
        inflated = wv + s * kappa / np.sqrt(m)
        new = allocate_for_tolerance(inflated, work, tol)
        if floor is not None:
            new = reoptimize_with_floor(new, floor, inflated, work, tol=tol)
        new = np.maximum(new, m)
        if np.array_equal(new, m):
            break
        m = new
    return m


def fit_to_budget(counts, done, work, budget) -> np.ndarray:
    """Trim ceil overshoot so that ``sum(counts * work) <= budget``.

    Samples are removed from the most expensive level still above ``done``.
    """
    counts = np.asarray(counts, dtype=int).copy()
    done = np.asarray(done, dtype=int)
    work = np.asarray(work, dtype=float)
    while float(np.dot(counts, work)) > budget * (1 + 1e-12):
        room = np.flatnonzero(counts > np.maximum(done, 1))
        if room.size == 0:
            break
        l = room[np.argmax(work[room])]
        excess = float(np.dot(counts, work)) - budget
        counts[l] -= max(1, min(counts[l] - max(done[l], 1), int(excess // work[l])))
    return counts


def budget_warmup(hierarchy: LevelHierarchy, budget: float) -> np.ndarray:
    """Warm-up counts, scaled down when the warm-up alone exceeds ``budget``."""
    pair = hierarchy.pair_costs()
    minimum = float(np.sum(pair))
    if budget < minimum:
        raise BudgetError(budget, minimum)
    warm = np.array(warmup_allocation(hierarchy), dtype=int)
    cost = float(np.dot(warm, pair))
    if cost <= budget:
        return warm
    scaled = np.maximum(1, np.floor(warm * budget / cost)).astype(int)
    return fit_to_budget(scaled, np.ones_like(scaled), pair, budget)


# ---------------------------------------------------------------- campaign


def _ranges(start, stop):
    return [[int(a), int(b)] for a, b in zip(start, stop)]


def _missing_keys(plan, seed, ledger: SampleLedger):
    keys = []
    for level, (a, b) in enumerate(plan):
        for i in range(a, b):
            k = SampleKey(seed, level, i)
            if k not in ledger:
                keys.append(k)
    return keys


def _level_samples(ledger: SampleLedger, L: int, qoi: str):
    samples = [ledger.valid_samples(l, qoi) for l in range(L)]
    for l, s in enumerate(samples):
        if s.shape[0] == 0:
            raise CampaignAbort(l)
    return samples


def _refill_empty_levels(config: CampaignConfig, ledger: SampleLedger, pair, qoi: str):
    """Plan one replacement draw for each level that has no valid sample yet.

    Returns ``None`` when nothing needs replacing, or when every empty level has
    used up its attempts (the caller then aborts).
    """
    L = pair.size
    start = np.array([ledger.next_index(l) for l in range(L)], dtype=int)
    add = np.zeros(L, dtype=int)
    for l in range(L):
        if ledger.valid_samples(l, qoi).shape[0] == 0 and ledger.computed(l) < EMPTY_LEVEL_ATTEMPTS:
            add[l] = 1
    if not add.any():
        return None
    if config.budget is not None and _spent(ledger, pair) + float(np.dot(add, pair)) > config.budget * (1 + 1e-12):
        return None
    return _ranges(start, start + add)


def _draws_for(missing, counts, computed) -> np.ndarray:
    """Draws expected to yield ``missing`` valid samples at the pooled failure rate."""
    total = int(np.sum(computed))
    rate = 0.0 if total == 0 else min(0.5, 1.0 - float(np.sum(counts)) / total)
    if rate == 0.0:
        return missing.astype(int)
    return np.array([math.ceil(m / (1.0 - rate)) if m else 0 for m in missing], dtype=int)


def _work_vector(config: CampaignConfig, ledger: SampleLedger) -> np.ndarray:
    pair = config.hierarchy.pair_costs()
    if config.work_source == "nominal":
        return pair
    out = pair.copy()
    for l in range(pair.size):
        done = [e for e in ledger.level_entries(l) if e.status == DONE]
        if done:
            vals = [e.work if config.work_source == "model" else e.wall_time for e in done]
            mean = float(np.mean(vals))
            if mean > 0:
                out[l] = mean
    return out


def _spent(ledger: SampleLedger, pair) -> float:
    return float(sum(ledger.computed(l) * pair[l] for l in range(pair.size)))


def analyse(samples, work, config: CampaignConfig):
    """Indicators, coefficients and weighted variances for one QoI."""
    ind = estimate_indicators(samples, work)
    full, need = complete_indicators(ind, config.decay_fit)
    L = len(samples)
    if need:
        alpha = np.ones(L)
        wv = np.full(L, np.nan)
        return ind, full, alpha, wv, need
    if config.coefficients == "optimal":
        alpha = optimal_coefficients(full)
    else:
        alpha = np.ones(L)
    wv = weighted_variances(full, alpha)
    return ind, full, alpha, wv, need


def _steering_qoi(config: CampaignConfig, model) -> str:
    if config.qoi:
        if config.qoi not in model.qoi_names:
            raise ConfigError("campaign.qoi", f"unknown QoI {config.qoi!r}; available: {list(model.qoi_names)}")
        return config.qoi
    return model.qoi_names[0]


def _initial_state(config: CampaignConfig) -> dict:
    h = config.hierarchy
    if config.budget is not None:
        warm = budget_warmup(h, config.budget)
    else:
        warm = np.array(warmup_allocation(h), dtype=int)
    return {
        "iteration": 0,
        "plan": _ranges(np.zeros(h.num_levels, dtype=int), warm),
        "history": [],
        "finished": False,
        "status": "running",
    }


def run_campaign(
    config: CampaignConfig,
    model=None,
    workers: int = 1,
    store: CampaignStore | None = None,
    progress=None,
    ledger: SampleLedger | None = None,
    budget_override: float | None = None,
) -> CampaignReport:
    """Run (or resume, when ``store`` holds a campaign) an adaptive campaign.

    ``progress`` receives one text line per iteration.  ``budget_override``
    raises the budget of a resumed budget-mode campaign.
    """
    if model is None:
        model = build_model(config.model, config.model_params, config.failure_rate)
    h = config.hierarchy
    L = h.num_levels
    pair = h.pair_costs()
    qoi = _steering_qoi(config, model)

    state = None
    if store is not None and store.exists():
        ledger = store.load_ledger()
        state = store.load_state()
    if ledger is None:
        ledger = SampleLedger()
    if budget_override is not None:
        if config.budget is None:
            raise ConfigError("mode.budget", "budget override needs a budget-mode campaign")
        if budget_override > config.budget and state is not None and state["finished"]:
            state["finished"] = False
            state["status"] = "running"
        config.budget = budget_override
        if store is not None and store.exists():
            store.save_config(config.to_dict())
    if state is None:
        state = _initial_state(config)
        if store is not None:
            store.save_config(config.to_dict())
            store.save_state(state)
    elif state["finished"]:
        return build_report(config, ledger, state, qoi)

    while True:
        keys = _missing_keys(state["plan"], config.campaign_seed, ledger)
        if keys:
            execute_plan(BatchPlan.from_keys(keys, config.batch_size), model, workers, store, ledger)
        refill = _refill_empty_levels(config, ledger, pair, qoi)
        if refill is not None:
            state["plan"] = refill
            if store is not None:
                store.save_state(state)
            continue
        try:
            samples = _level_samples(ledger, L, qoi)
        except CampaignAbort:
            state["finished"] = True
            state["status"] = "aborted"
            if store is not None:
                store.save_state(state)
            raise
        work = _work_vector(config, ledger)
        ind, full, alpha, wv, need = analyse(samples, work, config)
        counts = np.array([s.shape[0] for s in samples], dtype=int)
        computed = np.array([ledger.computed(l) for l in range(L)], dtype=int)
        cost = _spent(ledger, pair)
        status = "running"
        err_infl = err = math.inf
        s = config.kurtosis_inflation

        if need:
            target = counts.copy()
            for l in need:
                target[l] = max(target[l], 2)
        else:
            err = estimator_error(wv, counts)
            kappa = weighted_fourth_spread(samples, alpha) if s > 0 else np.zeros(L)
            err_infl = estimator_error(wv + s * kappa / np.sqrt(counts), counts) if s > 0 else err
            if config.tolerance is not None:
                if err_infl <= config.tolerance:
                    status = "converged"
                    target = counts.copy()
                else:
                    target = allocate_for_tolerance(wv, work, config.tolerance)
                    target = reoptimize_with_floor(target, counts, wv, work, tol=config.tolerance)
                    if s > 0:
                        target = inflate_for_confidence(
                            target, kappa, s, wv, work, config.tolerance, floor=counts
                        )
            else:
                failed_cost = float(np.dot(computed - counts, work))
                avail = config.budget - failed_cost
                try:
                    target = allocate_for_budget(wv, work, avail)
                    target = reoptimize_with_floor(target, counts, wv, work, budget=avail)
                    target = fit_to_budget(target, counts, work, avail)
                except BudgetError:
                    target = counts.copy()
                target = np.maximum(target, counts)

        extra = _draws_for(np.maximum(target - counts, 0), counts, computed)
        if config.budget is not None:
            # never plan past the budget, top-ups included
            while extra.sum() and cost + float(np.dot(extra, pair)) > config.budget * (1 + 1e-12):
                l = int(np.flatnonzero(extra)[np.argmax(pair[extra > 0])])
                extra[l] -= 1
            target = counts + extra
            if status == "running" and not extra.any():
                status = "budget_spent"
        elif status == "running" and np.all(target <= counts):
            status = "stalled"
        if status == "running" and state["iteration"] + 1 >= config.max_iterations:
            status = "max_iterations"

        it = IterationState(
            iteration=int(state["iteration"]),
            counts=counts.tolist(),
            computed=computed.tolist(),
            indicators=full.to_dict(),
            alpha=[float(a) for a in alpha],
            weighted_variance=[None if not np.isfinite(v) else float(v) for v in wv],
            error=float(err),
            error_inflated=float(err_infl),
            cost=cost,
            target=[int(t) for t in target],
            status=status,
        )
        state["history"].append(it.to_dict())
        if progress is not None:
            _report_progress(progress, it)
        if status != "running":
            state["finished"] = True
            state["status"] = status
            if store is not None:
                store.save_state(state)
            break
        add = extra
        start = np.array([ledger.next_index(l) for l in range(L)], dtype=int)
        state["plan"] = _ranges(start, start + add)
        state["iteration"] += 1
        if store is not None:
            store.save_state(state)

    return build_report(config, ledger, state, qoi)


def _report_progress(progress, it: IterationState) -> None:
    progress(
        f"iteration {it.iteration}: M={it.counts} error={it.error:.4g} cost={it.cost:.6g} "
        f"status={it.status}"
    )


def build_report(config: CampaignConfig, ledger: SampleLedger, state: dict, qoi: str) -> CampaignReport:
    """Final estimates for every QoI, computed from the ledger alone."""
    L = config.hierarchy.num_levels
    work = _work_vector(config, ledger)
    estimates = {}
    names = ledger.qoi_names()
    for name in names:
        samples = [ledger.valid_samples(l, name) for l in range(L)]
        if any(s.shape[0] == 0 for s in samples):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ind, full, alpha, wv, need = analyse(samples, work, config)
        counts = [int(s.shape[0]) for s in samples]
        err = math.inf if need else estimator_error(wv, counts)
        estimates[name] = {
            "estimate": float(of_mlmc_expectation(samples, alpha)),
            "alpha": [float(a) for a in alpha],
            "error": float(err),
            "counts": counts,
        }
    last = state["history"][-1] if state["history"] else None
    steer = estimates.get(qoi)
    comparison = {}
    if last is not None and steer is not None and np.isfinite(steer["error"]):
        samples = [ledger.valid_samples(l, qoi) for l in range(L)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, full, alpha, wv, _ = analyse(samples, work, config)
        comparison = comparison_table(full, alpha, steer["counts"], config.hierarchy, work, steer["error"])
    return CampaignReport(
        config=config.to_dict(),
        iterations=list(state["history"]),
        qoi=qoi,
        estimate=float("nan") if steer is None else steer["estimate"],
        alpha=[] if steer is None else steer["alpha"],
        counts=[] if steer is None else steer["counts"],
        error=float("nan") if steer is None else steer["error"],
        cost=_spent(ledger, config.hierarchy.pair_costs()),
        status=state.get("status", "running"),
        estimates=estimates,
        comparison=comparison,
    )


def comparison_table(ind: LevelIndicators, alpha, counts, hierarchy: LevelHierarchy, work, error) -> dict:
    """OF-MLMC versus unit-coefficient MLMC versus plain MC at the same error.

    MLMC and MC costs are predicted from the measured indicators; the MC row
    lists the as-published ``ceil(sigma/eps)`` sample count next to the
    error-law ``ceil(sigma^2/eps^2)`` one.  Speedups are relative to MC with
    the error-law count.
    """
    work = np.asarray(work, dtype=float)
    counts = np.asarray(counts, dtype=int)
    of_cost = float(np.dot(counts, work))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wv_unit = weighted_variances(ind, np.ones(ind.num_levels))
    m_unit = allocate_for_tolerance(wv_unit, work, error)
    unit_cost = float(np.dot(m_unit, work))
    sigma = math.sqrt(max(float(ind.variance[-1]), 0.0))
    mc = mc_cost_estimate(sigma, error, float(hierarchy.work[-1]))
    rows = {
        "OF-MLMC": {"samples": counts.tolist(), "cost": of_cost, "error": float(error)},
        "MLMC": {
            "samples": m_unit.tolist(),
            "cost": unit_cost,
            "error": estimator_error(wv_unit, m_unit),
        },
        "MC": {
            "samples": [mc.samples_variance_law],
            "cost": mc.work_variance_law,
            "error": float(error),
            "samples_as_published": mc.samples,
            "cost_as_published": mc.work,
        },
    }
    for row in rows.values():
        row["speedup"] = mc.work_variance_law / row["cost"] if row["cost"] > 0 else math.inf
    rows["MC"]["speedup_as_published"] = 1.0
    rows["OF-MLMC"]["speedup_as_published"] = mc.work / of_cost if of_cost > 0 else math.inf
    rows["MLMC"]["speedup_as_published"] = mc.work / unit_cost if unit_cost > 0 else math.inf
    return rows
