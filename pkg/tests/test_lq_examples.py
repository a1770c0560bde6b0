"""Tests for the linear-quadratic reference fixtures and their
verification pipelines."""

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcontrol.core import (
    ConfigError,
    EnsembleConfig,
    NonConvergenceError,
    make_time_grid,
    sample_brownian,
)
from mfcontrol.fbsde_solver import ContinuationSchedule
from mfcontrol.hypothesis_check import check_H4, check_H5, check_H6
from mfcontrol.lq_examples import (
    DeviationReport,
    LQ1Params,
    LQ2Params,
    VerifyConfig,
    deviation_check,
    lq1_candidate,
    lq1_model,
    lq2_adjoint_fbsde,
    lq2_candidate,
    lq2_fbsde,
    lq2_model,
    variational_margin,
    verify_example,
)
from mfcontrol.smp_control import cost, smp_gradient, solve_state


def _grid_noise(m, n, horizon=1.0, seed=7):
    grid = make_time_grid(horizon, m)
    noise = sample_brownian(grid, EnsembleConfig(particles=n, seed=seed))
    return grid, noise


def _rms(a):
    return float(np.sqrt(np.mean(np.square(a))))


# ======================================================================
# Parameter validation
# ======================================================================


def test_lq1_rejects_unbounded_coefficient():
    bad = LQ1Params(drift_x=lambda t: float("nan") if t > 0.5 else -0.3)
    with pytest.raises(ConfigError, match="drift_x"):
        lq1_model(bad)


def test_lq1_rejects_nonpositive_horizon():
    with pytest.raises(ConfigError, match="horizon"):
        LQ1Params(horizon=0.0).validate()


def test_lq2_sign_gate_names_coefficient():
    with pytest.raises(ConfigError, match="driver_x"):
        lq2_model(replace(LQ2Params(), driver_x=-0.2))


@given(name=st.sampled_from(LQ2Params._POSITIVE + LQ2Params._NEGATIVE))
@settings(max_examples=6)
def test_lq2_sign_gate_rejects_any_flip(name):
    flipped = -float(getattr(LQ2Params(), name))
    with pytest.raises(ConfigError, match=name):
        lq2_model(replace(LQ2Params(), **{name: flipped}))


def test_lq2_rejects_vanishing_control_weight():
    with pytest.raises(ConfigError, match="control_weight"):
        lq2_model(replace(LQ2Params(), control_weight=0.0))


def test_lq2_probe_encodings_skip_sign_gate():
    # The FBSDE encodings exist so the sampling certificates can probe
    # sign-violating parameter sets; constructing them must not gate.
    bad = replace(LQ2Params(), driver_x=-0.2)
    lq2_fbsde(bad)
    lq2_adjoint_fbsde(bad)


def test_lq2_fixture_monotonicity_constant():
    assert LQ2Params().monotonicity_constant() == pytest.approx(0.1)
    tightened = replace(LQ2Params(), drift_y=-0.05, drift_mean_y=-0.05)
    assert tightened.monotonicity_constant() == pytest.approx(0.05)


# ======================================================================
# Structural identities of the candidate formulas
# ======================================================================


def test_lq1_candidate_vanishes_without_control_coupling():
    params = replace(
        LQ1Params(), drift_control=0.0, diff_control=0.0, driver_control=0.0
    )
    grid, noise = _grid_noise(8, 128)
    u, history = lq1_candidate(params, grid, noise)
    assert np.all(u == 0.0)
    assert len(history) == 1  # formula is identically zero from sweep one


def test_lq2_candidate_vanishes_without_control_coupling():
    params = replace(
        LQ2Params(),
        drift_control=0.0, diff_control=0.0, driver_control=0.0,
        horizon=0.25,
    )
    grid, noise = _grid_noise(8, 128, horizon=0.25)
    u, history = lq2_candidate(params, grid, noise)
    assert np.all(u == 0.0)
    assert len(history) == 1


def test_lq2_candidate_formula_scales_with_control_weight():
    # One undamped sweep from u = 0 evaluates the feedback formula at
    # frozen multipliers, which the control weight must divide exactly;
    # the multipliers themselves do not see the weight at u = 0.
    grid, noise = _grid_noise(8, 128, horizon=0.25)

    def one_sweep(weight):
        params = replace(LQ2Params(), horizon=0.25, control_weight=weight)
        with pytest.raises(NonConvergenceError) as err:
            lq2_candidate(params, grid, noise, damping=1.0, tol=1e-300,
                          max_iter=1)
        return err.value.last

    assert np.array_equal(one_sweep(2.0), one_sweep(1.0) / 2.0)


# ======================================================================
# Fixture dynamics against closed-form recursions
# ======================================================================


def test_lq1_frozen_control_mean_path_matches_recursion():
    # Under any deterministic control the ensemble mean follows the
    # deterministic Euler recursion exactly, up to the martingale term
    # mean(diffusion * dW) of size O(1/sqrt(N)).
    params = LQ1Params()
    grid, noise = _grid_noise(64, 4096, seed=11)
    u = np.full((64, 4096), 0.3)
    sol = solve_state(lq1_model(params), u, grid, noise)

    mean_path = sol.x.mean(axis=1)
    m = np.empty(65)
    m[0] = params.x0
    for k in range(64):
        m[k + 1] = m[k] + grid.dt * (
            (params.drift_mean_x + params.drift_x) * m[k]
            + params.drift_control * 0.3
        )
    assert float(np.max(np.abs(mean_path - m))) < 0.02


def test_terminal_tie_is_exact():
    grid, noise = _grid_noise(8, 256)
    sol1 = solve_state(lq1_model(LQ1Params()), 0.0, grid, noise)
    np.testing.assert_array_equal(sol1.y[-1], sol1.x[-1])

    params2 = replace(LQ2Params(), horizon=0.25, terminal_gain=1.5)
    grid2, noise2 = _grid_noise(8, 256, horizon=0.25)
    sol2 = solve_state(lq2_model(params2), 0.0, grid2, noise2)
    np.testing.assert_allclose(sol2.y[-1], 1.5 * sol2.x[-1], atol=1e-12)


# ======================================================================
# Standing-condition certificates on the committed fixture
# ======================================================================


def test_lq2_state_encoding_passes_H4_H5():
    enc = lq2_fbsde(LQ2Params())
    h4 = check_H4(enc, n_samples=4000, seed=1)
    assert h4.passed and np.isfinite(h4.lipschitz)
    h5 = check_H5(enc, n_samples=1000, nested=16, seed=1)
    assert h5.passed
    assert h5.monotonicity >= 0.05  # fixture constant is 0.1
    assert h5.terminal_monotonicity == pytest.approx(1.0, rel=1e-6)
    assert not h5.violations


def test_lq2_adjoint_encoding_passes_H6():
    h6 = check_H6(lq2_adjoint_fbsde(LQ2Params()), n_samples=1000, nested=16,
                  seed=1)
    assert h6.passed
    assert h6.monotonicity >= 0.05
    assert not h6.violations


def test_lq2_sign_flip_fails_H5_with_witness():
    enc = lq2_fbsde(replace(LQ2Params(), driver_x=-0.2))
    h5 = check_H5(enc, n_samples=1000, nested=16, seed=1)
    assert not h5.passed
    assert h5.violations
    assert h5.worst_pair is not None


# ======================================================================
# Candidate construction and optimality
# ======================================================================


def test_lq1_candidate_is_stationary():
    grid, noise = _grid_noise(16, 2048, seed=3)
    u, history = lq1_candidate(LQ1Params(), grid, noise)
    assert history[-1]["target_gap"] <= 1e-6

    model = lq1_model(LQ1Params())
    grad = smp_gradient(model, u, grid, noise)
    j = cost(model, u, grid, noise)
    assert _rms(grad) <= 5e-3 * max(1.0, abs(j))

    vi = variational_margin(model, u, grid, noise, n_trials=10)
    assert vi["passed"]


def test_lq1_candidate_fixed_point_damping_insensitive():
    # The limit is a fixed point of the undamped map, so the damping
    # factor must only affect the route, not the destination.
    grid, noise = _grid_noise(8, 256)
    u_half, _ = lq1_candidate(LQ1Params(), grid, noise, damping=0.5, tol=1e-8)
    u_damped, _ = lq1_candidate(LQ1Params(), grid, noise, damping=0.35,
                                tol=1e-8)
    assert _rms(u_half - u_damped) < 5e-7


def test_candidate_rejects_bad_damping():
    grid, noise = _grid_noise(8, 64)
    with pytest.raises(ConfigError, match="damping"):
        lq1_candidate(LQ1Params(), grid, noise, damping=0.0)
    with pytest.raises(ConfigError, match="damping"):
        lq1_candidate(LQ1Params(), grid, noise, damping=1.5)


def test_candidate_nonconvergence_carries_history():
    grid, noise = _grid_noise(8, 64)
    with pytest.raises(NonConvergenceError) as err:
        lq1_candidate(LQ1Params(), grid, noise, tol=1e-14, max_iter=2)
    assert len(err.value.history) == 2
    assert err.value.last.shape == (8, 64)


# ======================================================================
# Deviation sampling
# ======================================================================


def test_deviation_check_accepts_candidate_rejects_offset():
    grid, noise = _grid_noise(16, 1024, seed=3)
    model = lq1_model(LQ1Params())
    u, _ = lq1_candidate(LQ1Params(), grid, noise)

    rep = deviation_check(model, u, grid, noise, n_deviations=6)
    assert isinstance(rep, DeviationReport)
    assert rep.passed
    assert len(rep.records) == 6
    assert rep.worst_margin == pytest.approx(
        min(r["margin"] for r in rep.records)
    )

    bad = deviation_check(model, u + 0.8, grid, noise, n_deviations=6)
    assert not bad.passed
    assert bad.worst_margin < 0.0


def test_variational_margin_flags_suboptimal_control():
    grid, noise = _grid_noise(16, 1024, seed=3)
    model = lq1_model(LQ1Params())
    u, _ = lq1_candidate(LQ1Params(), grid, noise)
    bad = variational_margin(model, u + 0.8, grid, noise, n_trials=10)
    assert not bad["passed"]
    assert bad["margin"] < 0.0


# ======================================================================
# End-to-end verification pipelines
# ======================================================================

_SMALL = dict(
    particles=512, n_deviations=8, sufficiency_samples=2000,
    hypothesis_samples=2000, control_trials=8,
)


def test_verify_example_rejects_unknown_example():
    with pytest.raises(ConfigError):
        verify_example(3)


def test_verify_example_lq1_passes_end_to_end():
    report = verify_example(
        1, grid=make_time_grid(1.0, 16), cfg=VerifyConfig(**_SMALL)
    )
    assert report.passed and report.failing_stage is None
    assert [s["name"] for s in report.stages] == [
        "candidate", "stationarity", "sufficiency", "deviations",
        "descent_recovery",
    ]
    assert all(s["passed"] for s in report.stages)
    assert report.candidate_cost > 0.0
    json.dumps(report.to_dict())  # stage payloads must stay JSON-ready


def test_verify_example_lq2_passes_end_to_end():
    report = verify_example(
        2,
        params=replace(LQ2Params(), horizon=0.25),
        grid=make_time_grid(0.25, 8),
        cfg=VerifyConfig(
            schedule=ContinuationSchedule(step=0.5), **_SMALL
        ),
    )
    assert report.passed and report.failing_stage is None
    assert [s["name"] for s in report.stages] == [
        "hypothesis", "candidate", "stationarity", "sufficiency",
        "deviations",
    ]
    assert report.stages[0]["monotonicity"] >= 0.05
    json.dumps(report.to_dict())


def test_verify_example_lq2_sign_violation_fails_at_hypothesis():
    report = verify_example(
        2,
        params=replace(LQ2Params(), driver_x=-0.2, horizon=0.25),
        grid=make_time_grid(0.25, 8),
        cfg=VerifyConfig(**_SMALL),
    )
    assert not report.passed
    assert report.failing_stage == "hypothesis"
    assert "H5" in report.stages[0]["failed_checks"]
    assert len(report.stages) == 1  # later stages short-circuit
