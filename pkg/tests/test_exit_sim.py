import numpy as np
import pytest
from scipy.stats import norm

from exitwise.exit_sim import (
    SimConfig,
    bridge_crossing_probability,
    default_t_max,
    estimate_mean_abs_gap,
    sample_coupled_exits,
    simulate_coupled_exit,
)
from exitwise.model import (
    Ball,
    ConfigurationError,
    InitialCondition,
    Interval,
    brownian_motion,
    drifted_brownian_motion,
)


def test_sim_config_validation():
    SimConfig(dt=1e-3, seed=1)
    with pytest.raises(ConfigurationError):
        SimConfig(dt=0.0, seed=1)
    with pytest.raises(ConfigurationError):
        SimConfig(dt=-1e-3, seed=1)
    with pytest.raises(ConfigurationError):
        SimConfig(dt=1e-3, seed=1, t_max=5e-4)
    with pytest.raises(ConfigurationError):
        SimConfig(dt=1e-3, seed=1, substep_threshold=-1.0)
    with pytest.raises(ConfigurationError):
        SimConfig(dt=1e-3, seed=1, shard_size=0)


def test_bridge_probability_exact_values():
    # p = exp(-2 d0 d1 / (sigma^2 dt)); both endpoints one unit away,
    # sigma = 1, dt = 0.5 gives exp(-4).
    p = bridge_crossing_probability(0.0, 0.0, 1.0, 1.0, 0.5)
    assert p == pytest.approx(np.exp(-4.0), rel=1e-14)
    # either endpoint on the barrier, or a straddle, is a sure crossing
    assert bridge_crossing_probability(1.0, 0.3, 1.0, 1.0, 0.1) == 1.0
    assert bridge_crossing_probability(0.3, 1.0, 1.0, 1.0, 0.1) == 1.0
    assert bridge_crossing_probability(0.5, 1.5, 1.0, 1.0, 0.1) == 1.0


def test_bridge_probability_matches_reflection_density_ratio():
    # Same law written through reflected Gaussian densities:
    # p = phi(x1 - 2b + x0-offset...) / phi(...) reduces to
    # exp(-2 d0 d1 / s) with s = sigma^2 dt.  Check against the density
    # ratio form N(x0, s) evaluated at the reflection of x1.
    rng = np.random.default_rng(42)
    for _ in range(50):
        b = rng.uniform(0.5, 2.0)
        x0 = b - rng.uniform(0.01, 0.4)
        x1 = b - rng.uniform(0.01, 0.4)
        sigma = rng.uniform(0.3, 2.0)
        dt = rng.uniform(1e-4, 0.2)
        s = np.sqrt(sigma * sigma * dt)
        ref = norm.pdf(2.0 * b - x1, loc=x0, scale=s) / norm.pdf(x1, loc=x0, scale=s)
        got = bridge_crossing_probability(x0, x1, b, sigma, dt)
        assert got == pytest.approx(ref, rel=1e-10)


def test_bridge_probability_vs_discretized_bridge_max():
    # Frequency oracle: simulate pinned bridges on an ever finer grid and
    # count max-exceedances.  The discrete max only sees a subset of the
    # continuous path's excursions, so the frequencies increase with the
    # grid and stay below the closed form, converging toward it.
    x0, x1, barrier, sigma, dt = 0.8, 0.7, 1.0, 1.0, 0.1
    p_formula = bridge_crossing_probability(x0, x1, barrier, sigma, dt)
    assert p_formula == pytest.approx(np.exp(-2.0 * 0.2 * 0.3 / 0.1), rel=1e-14)

    rng = np.random.default_rng(12345)
    n_rep = 40000
    freqs = []
    for n_grid in (16, 64, 256):
        tt = np.linspace(0.0, dt, n_grid + 1)
        z = rng.standard_normal((n_rep, n_grid))
        w = np.concatenate([np.zeros((n_rep, 1)),
                            np.cumsum(np.sqrt(dt / n_grid) * z, axis=1)], axis=1)
        # pin to (x0, x1)
        path = x0 + sigma * (w - (tt / dt) * w[:, -1:]) + (tt / dt) * (x1 - x0)
        freqs.append(float(np.mean(np.max(path, axis=1) >= barrier)))
    assert freqs[0] < freqs[1] < freqs[2] < p_formula
    assert p_formula - freqs[2] < 0.04


def test_bridge_probability_rejects_bad_scale():
    with pytest.raises(ConfigurationError):
        bridge_crossing_probability(0.0, 0.0, 1.0, 0.0, 0.1)
    with pytest.raises(ConfigurationError):
        bridge_crossing_probability(0.0, 0.0, 1.0, 1.0, 0.0)


def test_start_on_boundary_exits_immediately():
    model = brownian_motion(1.0)
    cfg = SimConfig(dt=1e-3, seed=9)
    r1 = Interval(0.0, 1.0)
    r2 = Interval(0.2, 1.2)
    s = simulate_coupled_exit(model, np.array([0.2]), r1, r2, cfg)
    assert s.tau2 == 0.0
    assert s.exit_point2[0] == 0.2
    assert s.tau1 > 0.0


def test_start_outside_both_closures_rejected():
    model = brownian_motion(1.0)
    cfg = SimConfig(dt=1e-3, seed=9)
    with pytest.raises(ConfigurationError):
        simulate_coupled_exit(model, np.array([5.0]), Interval(0, 1),
                              Interval(0.2, 1.2), cfg)


def test_identical_regions_give_identical_clocks():
    model = brownian_motion(1.0)
    r = Interval(0.0, 1.0)
    ic = InitialCondition.fixed([0.5])
    for sub in (0.0, 0.5):
        cfg = SimConfig(dt=1e-3, seed=77, substep_threshold=sub)
        batch = sample_coupled_exits(model, ic, r, Interval(0.0, 1.0), cfg, n=10000)
        assert np.array_equal(batch.tau1, batch.tau2)
        assert np.array_equal(batch.exit_point1, batch.exit_point2)
        assert np.all(batch.e1 == 0)
        assert np.all(batch.e2 == 0)


def test_identical_balls_give_identical_clocks():
    model = brownian_motion(0.8, dim=2)
    r = Ball([0.0, 0.0], 1.0)
    ic = InitialCondition.fixed([0.2, -0.1])
    cfg = SimConfig(dt=2e-3, seed=5)
    batch = sample_coupled_exits(model, ic, r, Ball([0.0, 0.0], 1.0), cfg, n=4000)
    assert np.array_equal(batch.tau1, batch.tau2)
    assert np.array_equal(batch.exit_point1, batch.exit_point2)


def test_nested_regions_order_exit_times():
    model = brownian_motion(1.0)
    inner = Interval(0.1, 0.9)
    outer = Interval(0.0, 1.0)
    ic = InitialCondition.fixed([0.5])
    for sub in (0.0, 0.5):
        cfg = SimConfig(dt=1e-3, seed=13, substep_threshold=sub)
        batch = sample_coupled_exits(model, ic, inner, outer, cfg, n=10000)
        assert np.all(batch.tau1 <= batch.tau2)
        # the later clock never exits through a point still inside the region
        assert np.all(outer.boundary_distance(batch.exit_point2) <= 1e-9)


def test_nested_balls_order_exit_times():
    model = brownian_motion(1.0, dim=2)
    inner = Ball([0.0, 0.0], 0.6)
    outer = Ball([0.0, 0.0], 1.0)
    ic = InitialCondition.fixed([0.0, 0.0])
    cfg = SimConfig(dt=2e-3, seed=21, substep_threshold=0.5)
    batch = sample_coupled_exits(model, ic, inner, outer, cfg, n=3000)
    assert np.all(batch.tau1 <= batch.tau2)
    assert np.all(np.linalg.norm(batch.exit_point1, axis=1) <= 0.6 + 1e-9)


def test_exit_indicators_partition_the_gap():
    model = brownian_motion(1.0)
    r1 = Interval(0.0, 1.0)
    r2 = Interval(0.2, 1.2)
    ic = InitialCondition.fixed([0.5])
    cfg = SimConfig(dt=1e-3, seed=31)
    batch = sample_coupled_exits(model, ic, r1, r2, cfg, n=5000)
    assert set(np.unique(batch.e1)) <= {0, 1}
    assert set(np.unique(batch.e2)) <= {0, 1}
    assert np.all((batch.e1 == 1) == (batch.tau1 > batch.tau2))
    assert np.all((batch.e2 == 1) == (batch.tau2 > batch.tau1))
    gap = np.abs(batch.tau1 - batch.tau2)
    split = batch.e1 * (batch.tau1 - batch.tau2) + batch.e2 * (batch.tau2 - batch.tau1)
    assert np.array_equal(gap, split)


def test_runs_are_deterministic_and_worker_invariant():
    model = brownian_motion(1.0)
    r1 = Interval(0.0, 1.0)
    r2 = Interval(0.2, 1.2)
    ic = InitialCondition.fixed([0.5])
    cfg = SimConfig(dt=1e-3, seed=99)
    # 9000 samples span three shards of the default size
    a = sample_coupled_exits(model, ic, r1, r2, cfg, n=9000, workers=1)
    b = sample_coupled_exits(model, ic, r1, r2, cfg, n=9000, workers=2)
    assert np.array_equal(a.tau1, b.tau1)
    assert np.array_equal(a.tau2, b.tau2)
    assert np.array_equal(a.exit_point1, b.exit_point1)

    e1 = estimate_mean_abs_gap(model, ic, r1, r2, cfg, n=9000, workers=1)
    e2 = estimate_mean_abs_gap(model, ic, r1, r2, cfg, n=9000, workers=2)
    assert e1.mean == e2.mean
    assert e1.stderr == e2.stderr
    assert e1.n_samples == e2.n_samples == 9000


def test_estimate_reproducible_across_calls():
    model = drifted_brownian_motion(0.3, 1.0)
    cfg = SimConfig(dt=1e-3, seed=123)
    ic = InitialCondition.fixed([0.4])
    r1, r2 = Interval(0.0, 1.0), Interval(0.1, 1.1)
    a = estimate_mean_abs_gap(model, ic, r1, r2, cfg, n=2000)
    b = estimate_mean_abs_gap(model, ic, r1, r2, cfg, n=2000)
    assert a.mean == b.mean
    assert a.stderr == b.stderr


def test_step_halving_consistency():
    """Driving the same Wiener path at dt and dt/2 must land on nearby
    exit times: the scheme is strong order 1/2, so gaps scale like
    sqrt(dt).  Stats below were frozen from a 200-seed reference run."""
    model = brownian_motion(1.0)
    r = Interval(0.0, 1.0)
    dt = 1e-3
    gaps = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n_fine = 6000
        z_fine = rng.standard_normal(n_fine)
        z_coarse = (z_fine[0::2] + z_fine[1::2]) / np.sqrt(2.0)

        cfg_f = SimConfig(dt=dt / 2.0, seed=0, t_max=3.0, bridge_correction=False)
        cfg_c = SimConfig(dt=dt, seed=0, t_max=3.0, bridge_correction=False)
        s_f = simulate_coupled_exit(model, np.array([0.5]), r, r, cfg_f,
                                    increments=z_fine.reshape(-1, 1))
        s_c = simulate_coupled_exit(model, np.array([0.5]), r, r, cfg_c,
                                    increments=z_coarse.reshape(-1, 1))
        assert not s_f.censored1 and not s_c.censored1
        gaps.append(abs(s_f.tau1 - s_c.tau1))
    gaps = np.array(gaps)
    scale = np.sqrt(dt)
    assert np.median(gaps) <= 0.5 * scale
    assert np.mean(gaps <= 4.0 * scale) >= 0.95


def test_bridge_correction_removes_positive_bias():
    # Discrete-only exit detection overshoots the true mean exit time of
    # x(1-x) by roughly 0.583*sigma*sqrt(dt) worth of boundary overshoot;
    # with the crossing correction the estimate straddles the truth.
    model = brownian_motion(1.0)
    r = Interval(0.0, 1.0)
    ic = InitialCondition.fixed([0.5])
    n = 20000
    cfg_on = SimConfig(dt=1e-3, seed=2024)
    cfg_off = SimConfig(dt=1e-3, seed=2024, bridge_correction=False)
    est_on = estimate_mean_abs_gap(model, ic, r, Interval(0.0, 1.0), cfg_on, n=n)
    assert est_on.mean == 0.0  # identical regions sanity

    from exitwise.expected_exit import estimate_expected_exit_mc
    on = estimate_expected_exit_mc(model, np.array([0.5]), r, cfg_on, n=n)
    off = estimate_expected_exit_mc(model, np.array([0.5]), r, cfg_off, n=n)
    truth = 0.25
    z_on = (on.mean - truth) / on.stderr
    assert abs(z_on) <= 4.0
    excess = off.mean - on.mean
    pooled = np.hypot(on.stderr, off.stderr)
    assert excess > 6.0 * pooled
    # overshoot is of the predicted sqrt(dt) magnitude
    assert 0.25 * np.sqrt(1e-3) < excess < 1.2 * np.sqrt(1e-3)


def test_censoring_truncates_at_t_max():
    model = brownian_motion(1.0)
    r = Interval(0.0, 1.0)
    ic = InitialCondition.fixed([0.5])
    cfg = SimConfig(dt=1e-3, seed=8, t_max=0.05)
    batch = sample_coupled_exits(model, ic, r, Interval(0.2, 1.2), cfg, n=2000)
    assert np.any(batch.censored1)
    assert np.all(batch.tau1[batch.censored1] == 0.05)
    assert np.all(batch.tau1 <= 0.05)
    est = estimate_mean_abs_gap(model, ic, r, Interval(0.2, 1.2), cfg, n=2000)
    assert est.censor_rate > 0.5
    assert "high_censor_rate" in est.flags


def test_default_t_max_scales_with_geometry():
    model = brownian_motion(1.0)
    small = default_t_max(model, Interval(0.0, 1.0), Interval(0.0, 1.0))
    big = default_t_max(model, Interval(0.0, 2.0), Interval(0.0, 2.0))
    assert big == pytest.approx(4.0 * small)
    assert small > 10.0  # generous against x(1-x) <= 1/4


def test_mc_estimate_confidence_halfwidth():
    model = brownian_motion(1.0)
    ic = InitialCondition.fixed([0.5])
    cfg = SimConfig(dt=2e-3, seed=44)
    est = estimate_mean_abs_gap(model, ic, Interval(0, 1), Interval(0.2, 1.2),
                                cfg, n=1000)
    assert est.confidence_halfwidth_95 == pytest.approx(1.96 * est.stderr)
    assert est.stderr > 0.0


def test_injected_increment_exhaustion_raises():
    model = brownian_motion(1.0)
    cfg = SimConfig(dt=1e-3, seed=0, t_max=10.0, bridge_correction=False)
    with pytest.raises(ConfigurationError):
        simulate_coupled_exit(model, np.array([0.5]), Interval(0, 1),
                              Interval(0, 1), cfg,
                              increments=np.zeros((3, 1)))


def test_gap_mean_matches_reference_value():
    # E|tau1 - tau2| for unit BM from 0.5, regions (0,1) and (0.2,1.2),
    # equals eps(1-eps) = 0.16 exactly; a modest run should bracket it.
    model = brownian_motion(1.0)
    ic = InitialCondition.fixed([0.5])
    cfg = SimConfig(dt=5e-4, seed=314)
    est = estimate_mean_abs_gap(model, ic, Interval(0.0, 1.0),
                                Interval(0.2, 1.2), cfg, n=20000)
    assert abs(est.mean - 0.16) <= 4.0 * est.stderr
    assert est.stderr < 2e-3
