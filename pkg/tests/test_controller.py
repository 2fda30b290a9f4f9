import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofmlmc.controller import (
    CampaignConfig,
    _draws_for,
    DecayFitWarning,
    complete_indicators,
    fit_decay,
    fit_to_budget,
    inflate_for_confidence,
    run_campaign,
    weighted_fourth_spread,
)
from ofmlmc.estimator import LevelIndicators, allocate_for_tolerance, estimator_error
from ofmlmc.exceptions import BudgetError, CampaignAbort, ConfigError
from ofmlmc.levels import LevelHierarchy
from ofmlmc.models import FaultyModel, SyntheticModel
from ofmlmc.store import CampaignStore
from ofmlmc.streams import SampleKey, stream_key

H4 = LevelHierarchy.geometric(4, 1.0, 4.0)


def config(**kw):
    kw.setdefault("hierarchy", H4)
    kw.setdefault("campaign_seed", 11)
    if "budget" not in kw:
        kw.setdefault("tolerance", 0.1)
    return CampaignConfig(**kw)


def strip_timing(report):
    d = report.to_dict()
    return json.loads(json.dumps(d, default=float))


# ---------------------------------------------------------------- decay fit


def test_fit_exact_geometric():
    v = 2.0 ** (-2.0 * np.arange(1, 6))
    np.testing.assert_allclose(fit_decay(v), v, rtol=1e-12)
    se = 0.1 * v
    np.testing.assert_allclose(fit_decay(v, se), v, rtol=1e-12)


def test_fit_extrapolates_missing_level():
    out = fit_decay([0.64, 0.16, 0.04, np.nan])
    assert out[3] == pytest.approx(0.01, rel=1e-12)
    np.testing.assert_allclose(out[:3], [0.64, 0.16, 0.04], rtol=1e-12)


def test_fit_single_measurement_passes_through():
    with pytest.warns(DecayFitWarning):
        out = fit_decay([0.3, np.nan])
    assert out[0] == 0.3 and np.isnan(out[1])


def test_fit_blends_noisy_measurement_towards_line():
    v = np.array([0.64, 0.16, 0.08, 0.01])
    out = fit_decay(v, 0.3 * v)
    assert 0.04 < out[2] < 0.08


def test_complete_indicators_clamps_covariance():
    ind = LevelIndicators(
        variance=np.array([1.0, 1.0, 0.0004]),
        covariance=np.array([np.nan, 0.99, 0.0]),
        work=np.array([1.0, 17.0, 272.0]),
        counts=np.array([100, 10, 2]),
        diff_variance=np.array([np.nan, 0.02, 5.0]),
        coarse_variance=np.array([np.nan, 1.0, 0.0004]),
    )
    full, need = complete_indicators(ind, decay_fit=False)
    assert need == []
    for l in (1, 2):
        vf, vc = full.variance[l], full.coarse_var(l)
        assert abs(full.covariance[l]) <= math.sqrt(vf * vc) + 1e-15


# ---------------------------------------------------------------- inflation


def test_inflate_identities():
    m = np.array([100, 10, 2])
    args = (np.array([1.0, 0.1, 0.01]), np.array([1.0, 5.0, 25.0]), 0.05)
    np.testing.assert_array_equal(inflate_for_confidence(m, [1.0, 1.0, 1.0], 0, *args), m)
    np.testing.assert_array_equal(inflate_for_confidence(m, [0.0, 0.0, 0.0], 2, *args), m)
    with pytest.raises(ValueError):
        inflate_for_confidence(m, [1.0, 1.0, 1.0], -1, *args)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(1e-3, 10.0), min_size=1, max_size=5),
    st.floats(0.01, 0.5),
    st.floats(0.1, 3.0),
)
def test_inflated_allocation_meets_inflated_bound(wv, tol, s):
    wv = np.array(wv)
    work = 4.0 ** np.arange(wv.size)
    kappa = np.sqrt(2.0) * wv
    base = allocate_for_tolerance(wv, work, tol)
    m = inflate_for_confidence(base, kappa, s, wv, work, tol)
    assert np.all(m >= base)
    assert estimator_error(wv + s * kappa / np.sqrt(m), m) <= tol * (1 + 1e-12)
    floor = base * 2
    m2 = inflate_for_confidence(base, kappa, s, wv, work, tol, floor=floor)
    assert np.all(m2 >= floor)
    assert estimator_error(wv + s * kappa / np.sqrt(m2), m2) <= tol * (1 + 1e-12)


def test_fourth_spread_of_gaussian_differences():
    rng = np.random.default_rng(0)
    fine = rng.normal(size=200_000)
    samples = [rng.normal(size=200_000), np.column_stack([fine, fine + rng.normal(size=fine.size)])]
    kappa = weighted_fourth_spread(samples, [1.0, 1.0])
    # Gaussian: m4 - sigma^4 = 2 sigma^4
    assert kappa[0] == pytest.approx(math.sqrt(2.0), rel=0.02)
    assert kappa[1] == pytest.approx(math.sqrt(2.0), rel=0.02)


def test_fit_to_budget_never_exceeds():
    work = np.array([1.0, 17.0, 272.0])
    out = fit_to_budget([500, 60, 9], [1, 1, 1], work, 4000.0)
    assert np.dot(out, work) <= 4000.0
    assert np.all(out >= 1)


@pytest.mark.slow
def test_kurtosis_inflation_coverage():
    model = SyntheticModel()
    hits = []
    for seed in range(500):
        rep = run_campaign(config(campaign_seed=seed, tolerance=0.05, kurtosis_inflation=2.0), model=model)
        true_err = math.sqrt(np.sum(model.weighted_variances(rep.alpha) / np.array(rep.counts)))
        hits.append(true_err <= 0.05)
    assert np.mean(hits) >= 0.95


# ---------------------------------------------------------------- campaigns


def test_tolerance_campaign_meets_tolerance():
    rep = run_campaign(config(tolerance=0.05, campaign_seed=3))
    assert rep.status == "converged"
    assert rep.error <= 0.05
    assert len(rep.iterations) <= 3
    model = SyntheticModel()
    analytic = math.sqrt(np.sum(model.weighted_variances(rep.alpha) / np.array(rep.counts)))
    assert analytic <= 0.05 * 1.25


def test_tolerance_campaign_iterations_typically_few():
    its = [len(run_campaign(config(tolerance=0.05, campaign_seed=s)).iterations) for s in range(30)]
    assert np.median(its) <= 3
    assert max(its) <= 10


def test_large_tolerance_stops_after_warmup():
    rep = run_campaign(config(tolerance=10.0))
    assert len(rep.iterations) == 1
    assert rep.counts == [512, 64, 8, 1]
    assert rep.status == "converged"


def test_minimum_budget_one_sample_per_level():
    budget = float(np.sum(H4.pair_costs()))
    rep = run_campaign(config(budget=budget))
    assert rep.counts == [1, 1, 1, 1]
    assert len(rep.iterations) == 1
    assert rep.cost == pytest.approx(budget)
    with pytest.raises(BudgetError):
        run_campaign(config(budget=budget - 1))


def test_budget_campaign_stays_within_budget():
    rep = run_campaign(config(budget=2e5, campaign_seed=5))
    assert rep.cost <= 2e5
    assert rep.status in ("budget_spent", "stalled", "max_iterations")
    assert np.isfinite(rep.estimate)


@pytest.mark.parametrize("seed", range(5))
def test_counts_monotone_and_cost_accounting(seed):
    rep = run_campaign(config(tolerance=0.04, campaign_seed=seed))
    hist = [np.array(it["counts"]) for it in rep.iterations]
    for a, b in zip(hist, hist[1:]):
        assert np.all(b >= a)
    assert rep.cost == pytest.approx(float(np.dot(rep.iterations[-1]["computed"], H4.pair_costs())))


def test_cost_counts_failed_samples():
    model = FaultyModel(SyntheticModel(), failure_rate=0.1)
    rep = run_campaign(config(campaign_seed=2), model=model)
    last = rep.iterations[-1]
    assert sum(last["computed"]) > sum(last["counts"])
    assert rep.cost == pytest.approx(float(np.dot(last["computed"], H4.pair_costs())))


def test_campaign_deterministic():
    a = run_campaign(config(tolerance=0.05))
    b = run_campaign(config(tolerance=0.05))
    assert strip_timing(a) == strip_timing(b)


def test_unit_coefficients():
    rep = run_campaign(config(coefficients="unit"))
    assert rep.alpha == [1.0, 1.0, 1.0, 1.0]


def test_unknown_qoi_rejected():
    with pytest.raises(ConfigError, match="unknown QoI"):
        run_campaign(config(qoi="pressure"))


@pytest.mark.parametrize(
    "kw",
    [
        {"tolerance": 0.1, "budget": 10.0},
        {"tolerance": -1.0},
        {"budget": 0.0},
        {"max_iterations": 0},
        {"kurtosis_inflation": -1.0},
        {"coefficients": "best"},
        {"work_source": "guess"},
        {"campaign_seed": -1},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        config(**kw)


def test_config_round_trip():
    c = config(model_params={"decay": 0.5}, kurtosis_inflation=1.0)
    d = json.loads(json.dumps(c.to_dict()))
    assert CampaignConfig.from_dict(d).to_dict() == c.to_dict()


def test_progress_lines():
    lines = []
    rep = run_campaign(config(), progress=lines.append)
    assert len(lines) == len(rep.iterations)
    assert lines[0].startswith("iteration 0: M=[512, 64, 8, 1]")


def test_comparison_table():
    rep = run_campaign(config(tolerance=0.05))
    rows = rep.comparison
    assert set(rows) == {"OF-MLMC", "MLMC", "MC"}
    mc = rows["MC"]
    assert mc["samples_as_published"] <= mc["samples"][0]
    assert rows["OF-MLMC"]["speedup"] == pytest.approx(mc["cost"] / rows["OF-MLMC"]["cost"])
    assert rows["MLMC"]["error"] <= 0.05 * (1 + 1e-12)


def test_abort_when_level_has_no_valid_samples(tmp_path):
    inner = SyntheticModel()
    doomed = frozenset(stream_key(SampleKey(11, 2, i)) for i in range(8))
    store = CampaignStore(tmp_path, "abort")
    with pytest.raises(CampaignAbort):
        run_campaign(config(), model=FaultyModel(inner, fail_omegas=doomed), store=store)
    assert store.load_state()["status"] == "aborted"


def test_single_coarsest_failure_is_excluded():
    bad = frozenset({stream_key(SampleKey(11, 0, 17))})
    rep = run_campaign(config(tolerance=0.05), model=FaultyModel(SyntheticModel(), fail_omegas=bad))
    assert rep.status == "converged"
    first = rep.iterations[0]
    assert first["counts"][0] == 511 and first["computed"][0] == 512


def test_top_ups_cover_expected_failures():
    missing = np.array([0, 10, 3])
    np.testing.assert_array_equal(_draws_for(missing, [5, 5, 5], [5, 5, 5]), missing)
    # pooled failure rate 0.2 turns 10 missing samples into 13 draws
    np.testing.assert_array_equal(_draws_for(missing, [8, 8, 8], [10, 10, 10]), [0, 13, 4])


def test_failed_finest_warmup_sample_is_replaced():
    bad = frozenset({stream_key(SampleKey(11, 3, 0))})
    rep = run_campaign(config(), model=FaultyModel(SyntheticModel(), fail_omegas=bad))
    assert rep.status == "converged"
    first = rep.iterations[0]
    assert first["computed"][3] == 2 and first["counts"][3] == 1


# ---------------------------------------------------------------- persistence and resume


class Interrupting:
    """Synthetic model that raises KeyboardInterrupt after ``limit`` evaluations."""

    def __init__(self, limit):
        self.inner = SyntheticModel()
        self.name = self.inner.name
        self.qoi_names = self.inner.qoi_names
        self.calls = 0
        self.limit = limit

    def params(self):
        return self.inner.params()

    def sample(self, omega, level):
        self.calls += 1
        if self.calls > self.limit:
            raise KeyboardInterrupt
        return self.inner.sample(omega, level)


class Counting(Interrupting):
    def __init__(self):
        super().__init__(limit=math.inf)


@pytest.mark.parametrize("limit", [100, 1300, 3000])
def test_kill_and_resume_matches_uninterrupted(tmp_path, limit):
    cfg = config(tolerance=0.05, campaign_seed=4, batch_size=64)
    reference = run_campaign(cfg, store=CampaignStore(tmp_path, "ref", sandboxes=False))
    store = CampaignStore(tmp_path, "kill", sandboxes=False)
    with pytest.raises(KeyboardInterrupt):
        run_campaign(cfg, model=Interrupting(limit), store=store)
    already = set(store.load_ledger().entries)
    counting = Counting()
    resumed = run_campaign(CampaignConfig.from_dict(store.load_config()), model=counting, store=store)
    assert resumed.estimates == reference.estimates
    assert resumed.counts == reference.counts
    assert resumed.cost == reference.cost
    # only keys missing from the ledger are evaluated again
    new = set(store.load_ledger().entries) - already
    assert counting.calls == sum(1 if k.level == 0 else 2 for k in new)
    lines = store.ledger_path.read_text().splitlines()[1:]
    keys = [tuple(json.loads(l)["key"]) for l in lines]
    assert len(keys) == len(set(keys))


def test_resume_completed_is_noop(tmp_path):
    store = CampaignStore(tmp_path, "c", sandboxes=False)
    first = run_campaign(config(), store=store)
    before = store.ledger_path.read_text()
    counting = Counting()
    again = run_campaign(config(), model=counting, store=store)
    assert counting.calls == 0
    assert store.ledger_path.read_text() == before
    assert again.estimates == first.estimates


def test_resume_with_raised_budget(tmp_path):
    store = CampaignStore(tmp_path, "b", sandboxes=False)
    first = run_campaign(config(budget=5e4), store=store)
    assert first.cost <= 5e4
    more = run_campaign(config(budget=5e4), store=store, budget_override=4e5)
    assert more.cost > first.cost and more.cost <= 4e5
    assert all(b >= a for a, b in zip(first.counts, more.counts))
    assert store.load_config()["budget"] == 4e5
    with pytest.raises(ConfigError):
        run_campaign(config(), store=CampaignStore(tmp_path, "t"), budget_override=10.0)


def test_report_from_ledger_only(tmp_path):
    from ofmlmc.controller import build_report

    store = CampaignStore(tmp_path, "r", sandboxes=False)
    rep = run_campaign(config(), store=store)
    cfg = CampaignConfig.from_dict(store.load_config())
    again = build_report(cfg, store.load_ledger(), store.load_state(), rep.qoi)
    assert again.estimates == rep.estimates
    assert again.comparison == rep.comparison
