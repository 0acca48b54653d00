import numpy as np
import pytest

from exitwise.exit_sim import SimConfig
from exitwise.expected_exit import (
    closed_form_interval_bm,
    estimate_expected_exit_mc,
    solve_dirichlet_fd_1d,
    sup_expected_exit,
)
from exitwise.model import (
    Ball,
    ConfigurationError,
    Interval,
    brownian_motion,
    drifted_brownian_motion,
)


def test_closed_form_values():
    assert closed_form_interval_bm(0.5, 0.0, 1.0, 1.0) == pytest.approx(0.25)
    assert closed_form_interval_bm(0.1, 0.0, 1.0, 1.0) == pytest.approx(0.09)
    assert closed_form_interval_bm(0.0, 0.0, 1.0, 1.0) == 0.0
    assert closed_form_interval_bm(1.0, 0.0, 1.0, 1.0) == 0.0
    # doubling sigma quarters the mean exit time
    assert closed_form_interval_bm(0.5, 0.0, 1.0, 2.0) == pytest.approx(0.0625)
    xs = np.linspace(0.0, 1.0, 11)
    vals = closed_form_interval_bm(xs, 0.0, 1.0, 1.0)
    assert np.allclose(vals, xs * (1.0 - xs))


def test_closed_form_domain_checks():
    with pytest.raises(ConfigurationError):
        closed_form_interval_bm(1.5, 0.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        closed_form_interval_bm(0.5, 1.0, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        closed_form_interval_bm(0.5, 0.0, 1.0, 0.0)


def test_fd_solver_exact_on_quadratic():
    # pure BM on an interval has a quadratic solution, which central
    # differences reproduce to rounding error
    model = brownian_motion(1.0)
    for lo, hi in ((0.0, 1.0), (0.2, 1.2)):
        field = solve_dirichlet_fd_1d(model, Interval(lo, hi), m=1001)
        truth = (field.grid - lo) * (hi - field.grid)
        assert np.max(np.abs(field.values - truth)) <= 1e-6
        assert field.values[0] == 0.0
        assert field.values[-1] == 0.0
        assert np.all(field.values >= 0.0)


def test_fd_solver_matches_drifted_analytic():
    # mu=1, sigma=1 on (0,1): v(x) = (1 - exp(-2x)) / (1 - exp(-2)) - x
    model = drifted_brownian_motion(1.0, 1.0)
    field = solve_dirichlet_fd_1d(model, Interval(0.0, 1.0), m=2001)
    x = field.grid
    truth = (1.0 - np.exp(-2.0 * x)) / (1.0 - np.exp(-2.0)) - x
    assert np.max(np.abs(field.values - truth)) <= 1e-5
    assert field.evaluate(0.5) == pytest.approx((1.0 - np.exp(-1.0)) / (1.0 - np.exp(-2.0)) - 0.5,
                                                abs=1e-5)


def test_fd_solver_richardson_refinement():
    # second-order scheme: against a dense reference solve the coarse error
    # should shrink ~4x per halving of the mesh width
    model = drifted_brownian_motion(0.8, 0.7)
    region = Interval(-0.3, 1.1)
    ref = solve_dirichlet_fd_1d(model, region, m=8001)
    probe = np.linspace(-0.25, 1.05, 9)
    errs = []
    for m in (101, 201):
        f = solve_dirichlet_fd_1d(model, region, m=m)
        errs.append(np.max(np.abs(f.evaluate(probe) - ref.evaluate(probe))))
    assert errs[0] / errs[1] >= 3.0


def test_fd_solver_peclet_guard():
    model = drifted_brownian_motion(50.0, 0.3)
    with pytest.raises(ConfigurationError) as info:
        solve_dirichlet_fd_1d(model, Interval(0.0, 1.0), m=11)
    assert "nodes" in str(info.value)
    # the suggested resolution must actually be accepted
    import re
    m_need = int(re.search(r"(\d+)\s+nodes", str(info.value)).group(1))
    solve_dirichlet_fd_1d(model, Interval(0.0, 1.0), m=m_need)


def test_fd_solver_input_validation():
    model = brownian_motion(1.0)
    with pytest.raises(ConfigurationError):
        solve_dirichlet_fd_1d(model, Interval(0.0, 1.0), m=2)
    with pytest.raises(ConfigurationError):
        solve_dirichlet_fd_1d(brownian_motion(1.0, dim=2), Ball([0.0, 0.0], 1.0), m=11)


def test_field_evaluate_clamps_outside():
    model = brownian_motion(1.0)
    field = solve_dirichlet_fd_1d(model, Interval(0.0, 1.0), m=101)
    assert field.evaluate(-0.5) == 0.0
    assert field.evaluate(1.5) == 0.0
    assert field.max_value == pytest.approx(0.25, abs=1e-4)


def test_mc_expected_exit_interval():
    model = brownian_motion(1.0)
    cfg = SimConfig(dt=1e-3, seed=606)
    est = estimate_expected_exit_mc(model, np.array([0.5]), Interval(0.0, 1.0),
                                    cfg, n=20000)
    assert abs(est.mean - 0.25) <= 4.0 * est.stderr
    assert est.n_samples == 20000
    assert est.censor_rate == 0.0


def test_mc_expected_exit_disk():
    # from the center of a unit disk: E tau = (r^2 - |x|^2)/2 = 1/2
    model = brownian_motion(1.0, dim=2)
    cfg = SimConfig(dt=1e-3, seed=607)
    est = estimate_expected_exit_mc(model, np.array([0.0, 0.0]),
                                    Ball([0.0, 0.0], 1.0), cfg, n=20000)
    assert abs(est.mean - 0.5) <= 4.0 * est.stderr
    # off-center start
    est2 = estimate_expected_exit_mc(model, np.array([0.6, 0.0]),
                                     Ball([0.0, 0.0], 1.0), cfg, n=20000)
    assert abs(est2.mean - 0.32) <= 4.0 * est2.stderr


def test_mc_matches_fd_on_probes():
    model = drifted_brownian_motion(1.0, 1.0)
    region = Interval(0.0, 1.0)
    field = solve_dirichlet_fd_1d(model, region, m=2001)
    cfg = SimConfig(dt=1e-3, seed=99)
    for x in (0.25, 0.7):
        est = estimate_expected_exit_mc(model, np.array([x]), region, cfg, n=10000)
        assert abs(est.mean - field.evaluate(x)) <= 4.0 * est.stderr


def test_sup_expected_exit_fd_reference_pair():
    model = brownian_motion(1.0)
    r1 = Interval(0.0, 1.0)
    r2 = Interval(0.2, 1.2)
    cfg = SimConfig(dt=1e-3, seed=0)
    sup = sup_expected_exit(model, r1, r2, method="fd", cfg=cfg, m=16)
    # sole candidate 0.2, value 0.2*0.8 inside (0,1)
    assert sup.value == pytest.approx(0.16, abs=1e-7)
    assert sup.argmax[0] == pytest.approx(0.2)
    assert sup.method == "fd"

    swapped = sup_expected_exit(model, r2, r1, method="fd", cfg=cfg, m=16)
    assert swapped.value == pytest.approx(0.16, abs=1e-7)
    assert swapped.argmax[0] == pytest.approx(1.0)


def test_sup_expected_exit_empty_candidate_set():
    model = brownian_motion(1.0)
    cfg = SimConfig(dt=1e-3, seed=0)
    # nested: no boundary point of the outer region lies inside the inner
    sup = sup_expected_exit(model, Interval(0.1, 0.9), Interval(0.0, 1.0),
                            method="fd", cfg=cfg, m=16)
    assert sup.value == 0.0
    assert sup.argmax is None
    assert sup.n_points == 0


def test_sup_expected_exit_mc_agrees_with_fd():
    model = brownian_motion(1.0)
    r1 = Interval(0.0, 1.0)
    r2 = Interval(0.2, 1.2)
    cfg = SimConfig(dt=1e-3, seed=17)
    sup = sup_expected_exit(model, r1, r2, method="mc", cfg=cfg, m=16,
                            n_paths=8000)
    assert sup.method == "mc"
    assert sup.stderr is not None
    assert abs(sup.value - 0.16) <= 4.0 * sup.stderr
    assert sup.argmax[0] == pytest.approx(0.2)


def test_sup_expected_exit_method_validation():
    model = brownian_motion(1.0)
    cfg = SimConfig(dt=1e-3, seed=0)
    with pytest.raises(ConfigurationError):
        sup_expected_exit(model, Interval(0, 1), Interval(0.2, 1.2),
                          method="exact", cfg=cfg, m=8)
    with pytest.raises(ConfigurationError):
        sup_expected_exit(brownian_motion(1.0, dim=2), Ball([0, 0], 1.0),
                          Ball([0.5, 0.0], 1.0), method="fd", cfg=cfg, m=8)
