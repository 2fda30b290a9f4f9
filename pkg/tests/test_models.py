import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofmlmc.exceptions import CloudGenerationError, ConfigError
from ofmlmc.models import (
    BubbleCloudSurrogate,
    CloudConfiguration,
    CloudParams,
    FaultyModel,
    InjectedFailure,
    ModelSample,
    SyntheticModel,
    build_model,
    coupled_pair,
    generate_cloud,
    pair_valid,
)
from ofmlmc.models.cloud import cloud_radius_for, gas_fraction_for
from ofmlmc.models.surrogate import integrate, rayleigh_collapse_time
from ofmlmc.streams import SampleKey, stream_from, stream_key


def omegas(n, level=0, seed=11):
    return [stream_key(SampleKey(seed, level, i)) for i in range(n)]


# ---------------------------------------------------------------- synthetic


def test_synthetic_deterministic():
    m = SyntheticModel(decay=1.0, amplitude=1.0)
    w = stream_key(SampleKey(3, 2, 7))
    assert m.sample(w, 2).qoi == m.sample(w, 2).qoi


def test_synthetic_zero_amplitude_is_level_independent():
    m = SyntheticModel(amplitude=0.0)
    for w in omegas(50):
        assert m.value(w, 0) == m.value(w, 3)


def test_synthetic_pair_difference_is_analytic():
    m = SyntheticModel(decay=1.0, amplitude=1.5)
    w = stream_key(SampleKey(5, 2, 0))
    fine, coarse = coupled_pair(w, 2, m)
    z = stream_from(w).standard_normal(4)
    expected = 1.5 * (2.0**-2 * z[3] - 2.0**-1 * z[2])
    assert fine.qoi["q"] - coarse.qoi["q"] == pytest.approx(expected, abs=1e-14)


def test_synthetic_level_zero_pair_has_no_coarse():
    fine, coarse = coupled_pair(1234, 0, SyntheticModel())
    assert coarse is None and pair_valid(fine, coarse)


def test_synthetic_moments_match_analytic():
    m = SyntheticModel(decay=1.0, amplitude=1.0)
    n = 100_000
    q = np.array([[m.value(w, 1), m.value(w, 0)] for w in omegas(n, level=1)])
    for col, level in ((0, 1), (1, 0)):
        s2 = q[:, col].var(ddof=1)
        se = m.variance(level) * math.sqrt(2.0 / (n - 1))
        assert abs(s2 - m.variance(level)) < 4 * se
    d = q[:, 0] - q[:, 1]
    s2 = d.var(ddof=1)
    se = m.difference_variance(1) * math.sqrt(2.0 / (n - 1))
    assert abs(s2 - m.difference_variance(1)) < 4 * se


@pytest.mark.slow
def test_synthetic_correlation_million_samples():
    m = SyntheticModel(decay=1.0, amplitude=1.0)
    n = 1_000_000
    q = np.array([[m.value(w, 1), m.value(w, 0)] for w in omegas(n, level=1, seed=99)])
    r = np.corrcoef(q.T)[0, 1]
    rho = m.correlation(1)
    assert rho == pytest.approx(1.0 / math.sqrt(1.25 * 2.0))
    se = (1.0 - rho**2) / math.sqrt(n - 1)
    assert abs(r - rho) < 3 * se


def test_synthetic_correlation_tends_to_one():
    m = SyntheticModel(decay=1.0, amplitude=2.0)
    cors = [m.correlation(l) for l in range(1, 8)]
    assert np.all(np.diff(cors) > 0) and cors[-1] > 0.999


def test_synthetic_work_and_series():
    m = SyntheticModel(base_work=2.0, work_rate=3.0, series_points=16)
    s = m.sample(77, 2)
    assert s.work == 2.0 * 2.0**6
    grid, values = s.series["trace"]
    assert grid.size == 16 and np.all(np.diff(grid) > 0)


def test_negative_level_rejected():
    with pytest.raises(ValueError):
        SyntheticModel().sample(1, -1)


# ---------------------------------------------------------------- samples


def test_model_sample_roundtrip():
    s = SyntheticModel(series_points=8).sample(42, 1)
    back = ModelSample.from_dict(s.to_dict())
    assert back.qoi == s.qoi and back.work == s.work
    np.testing.assert_array_equal(back.series["trace"][1], s.series["trace"][1])


def test_model_sample_rejects_bad_grid():
    with pytest.raises(ValueError):
        ModelSample(qoi={"q": 1.0}, series={"x": (np.array([0.0, 0.0]), np.array([1.0, 2.0]))})


def test_faulty_model_is_deterministic_and_rate_is_close():
    m = FaultyModel(SyntheticModel(), failure_rate=0.05)
    ws = omegas(4000)
    fails = [m.fails(w) for w in ws]
    assert fails == [m.fails(w) for w in ws]
    assert abs(np.mean(fails) - 0.05) < 4 * math.sqrt(0.05 * 0.95 / 4000)
    bad = ws[fails.index(True)]
    with pytest.raises(InjectedFailure):
        coupled_pair(bad, 1, m)


def test_faulty_model_forced_omegas():
    m = FaultyModel(SyntheticModel(), fail_omegas=frozenset({5}))
    with pytest.raises(InjectedFailure):
        m.sample(5, 0)
    assert m.sample(6, 0).valid


def test_build_model_registry():
    assert isinstance(build_model("synthetic", {"decay": 2.0}), SyntheticModel)
    assert isinstance(build_model("synthetic", {}, failure_rate=0.1), FaultyModel)
    with pytest.raises(ConfigError):
        build_model("nope")
    with pytest.raises(ConfigError):
        build_model("synthetic", {"bogus": 1})


# ---------------------------------------------------------------- cloud


def test_cloud_equal_radii_gas_fraction():
    p = CloudParams(n_bubbles=500, cloud_radius=20.0, r_min=1.0, r_max=1.0)
    cloud = generate_cloud(stream_from(1), p)
    assert cloud.metrics["gas_fraction"] == pytest.approx(500 / 8000, rel=1e-12)
    assert gas_fraction_for(500, 1.0, 20.0) == pytest.approx(0.0625)
    assert cloud_radius_for(500, 1.0, 0.0625) == pytest.approx(20.0)
    assert cloud.violations(1.0, 1.0) == []


def test_single_cavity_at_center_metrics():
    c = CloudConfiguration(np.array([[5.0, 5.0, 5.0]]), np.array([1.0]), np.array([5.0, 5.0, 5.0]), 20.0)
    m = c.metrics
    assert m["skewness_x"] == m["skewness_y"] == m["skewness_z"] == 0.0
    assert m["central_distance"] == 0.0
    assert m["beta"] == pytest.approx(m["gas_fraction"] * 400.0)


def test_default_cloud_invariants():
    p = CloudParams()
    clouds = [generate_cloud(stream_from(stream_key(SampleKey(0, 0, i))), p) for i in range(5)]
    for c in clouds:
        assert c.n_bubbles == 500
        assert c.violations(p.r_min, p.r_max) == []
        assert 0.04 <= c.metrics["gas_fraction"] <= 0.07


def test_cloud_reproducible_from_omega():
    p = CloudParams(n_bubbles=40, cloud_radius=8.0)
    a = generate_cloud(stream_from(123), p)
    b = generate_cloud(stream_from(123), p)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.radii, b.radii)


def test_cloud_mean_position_unbiased():
    p = CloudParams(n_bubbles=1, cloud_radius=10.0, r_min=0.5, r_max=1.5)
    n = 10_000
    pos = np.array([generate_cloud(stream_from(w), p).positions[0] for w in omegas(n, seed=3)])
    mean = pos.mean(axis=0)
    se = pos.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(mean - np.asarray(p.center)) < 4 * se)


def test_infeasible_packing_raises():
    with pytest.raises(CloudGenerationError):
        generate_cloud(stream_from(1), CloudParams(n_bubbles=5000, cloud_radius=10.0, r_min=1.0, r_max=1.0))


def test_retry_budget_exhaustion_raises():
    p = CloudParams(n_bubbles=300, cloud_radius=8.0, r_min=1.0, r_max=1.0, max_attempts=50)
    with pytest.raises(CloudGenerationError):
        generate_cloud(stream_from(1), p)


def test_cloud_csv_roundtrip(tmp_path):
    p = CloudParams(n_bubbles=10, cloud_radius=6.0)
    c = generate_cloud(stream_from(8), p)
    c.to_csv(tmp_path / "cloud.csv")
    back = CloudConfiguration.from_csv(tmp_path / "cloud.csv", c.center, c.cloud_radius, c.core_radius)
    np.testing.assert_array_equal(back.positions, c.positions)
    np.testing.assert_array_equal(back.radii, c.radii)
    assert back.metrics == c.metrics


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**63), st.integers(min_value=1, max_value=60))
def test_generated_clouds_satisfy_invariants(seed, n):
    p = CloudParams(n_bubbles=n, cloud_radius=6.0)
    c = generate_cloud(stream_from(seed), p)
    assert c.violations(p.r_min, p.r_max) == []


# ---------------------------------------------------------------- surrogate


def single(radius=1.0):
    return CloudConfiguration(np.zeros((1, 3)), np.array([radius]), np.zeros(3), 20.0)


def test_single_bubble_equilibrium():
    m = BubbleCloudSurrogate(p_gas0=1e6, p_inf=1e6, dt0=1e-9, t_end=1e-5)
    h = integrate(m.dynamics(single()), 1e-9, 1e-5, record_radii=True)
    assert h["steps"] == 10_000
    assert np.max(np.abs(h["radii"][:, 0] - 1e-3)) <= 1e-9 * 1e-3


@pytest.mark.parametrize("compressible", [True, False])
def test_single_bubble_collapse_time_near_rayleigh(compressible):
    m = BubbleCloudSurrogate(ramp_time=0.0, wave_delay=False, compressible=compressible, t_end=14e-6)
    h = integrate(m.dynamics(single()), 2e-9, 14e-6)
    t_collapse = h["time"][np.argmax(h["peak"])]
    oracle = rayleigh_collapse_time(1e-3, 1000.0, 10e6 - 0.5e6)
    assert abs(t_collapse - oracle) / oracle < 0.15


def test_gas_volume_decreases_before_collapse():
    m = BubbleCloudSurrogate(ramp_time=0.0, wave_delay=False, t_end=12e-6)
    h = integrate(m.dynamics(single()), 10e-9, 12e-6)
    k = int(np.argmin(h["volume"]))
    assert k > 10
    assert np.all(np.diff(h["volume"][1 : k + 1]) < 0)


def test_symmetric_pair_has_identical_trajectories():
    c = CloudConfiguration(
        np.array([[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), np.array([1.0, 1.0]), np.zeros(3), 8.0
    )
    m = BubbleCloudSurrogate(t_end=15e-6)
    h = integrate(m.dynamics(c), 20e-9, 15e-6, record_radii=True)
    np.testing.assert_array_equal(h["radii"][:, 0], h["radii"][:, 1])


def test_time_step_refinement_converges_with_order_at_least_one():
    m = BubbleCloudSurrogate(wave_delay=False, dt0=80e-9)
    r = np.array(
        [integrate(m.dynamics(single()), m.time_step(l), 9.6e-6, record_radii=True)["radii"][-1, 0] for l in range(4)]
    )
    d = np.diff(r)
    assert np.all(np.sign(d) == np.sign(d[0]))
    assert np.all(np.log2(np.abs(d[:-1] / d[1:])) >= 1.0)


def test_surrogate_sample_outputs():
    m = BubbleCloudSurrogate(t_end=30e-6)
    s = m.sample(stream_key(SampleKey(1, 0, 0)), 0)
    assert s.valid
    assert set(m.qoi_names) <= set(s.qoi)
    grid, values = s.series["sensor_pressure"]
    assert grid.size == m.p.output_points and np.all(np.diff(grid) > 0)
    assert 0.0 < s.qoi["collapse_time"] <= m.p.t_end
    assert s.qoi["peak_location_distance"] <= m.p.cloud.cloud_radius


def test_lagged_coupling_matches_implicit_when_weak():
    c = CloudConfiguration(np.array([[-10.0, 0, 0], [10.0, 0, 0]]), np.array([1.0, 1.1]), np.zeros(3), 20.0)
    q = [BubbleCloudSurrogate(coupling=k, t_end=12e-6).run_cloud(c, 2).qoi["peak_pressure"] for k in ("implicit", "lagged")]
    assert q[0] == pytest.approx(q[1], rel=1e-3)


def test_lagged_coupling_fails_on_dense_cloud():
    m = BubbleCloudSurrogate(coupling="lagged", t_end=30e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = m.sample(stream_key(SampleKey(1, 0, 0)), 0)
    assert not s.valid


def test_surrogate_rejects_unknown_coupling():
    with pytest.raises(ValueError):
        BubbleCloudSurrogate(coupling="magic")
