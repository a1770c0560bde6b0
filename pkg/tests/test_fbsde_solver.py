import numpy as np
import pytest

from mfcontrol.core import (
    ConfigError,
    DivergenceError,
    EnsembleConfig,
    NonConvergenceError,
    StateView,
    make_time_grid,
    sample_brownian,
)
from mfcontrol.fbsde_solver import (
    ContinuationSchedule,
    CoupledModel,
    LinearInhomogeneity,
    SolutionTriple,
    homotopy_coefficients,
    negate_forward_model,
    residual,
    solve_continuation,
    solve_linear_seed,
    solve_picard,
)
from mfcontrol.forward_mv import ForwardModel, simulate_forward
from mfcontrol.mf_bsde import BackwardModel, default_polynomial_basis, solve_mf_bsde

from oracles import linear_seed_mean_oracle


def _grid_noise(m=32, n=512, seed=2, horizon=1.0):
    g = make_time_grid(horizon, m)
    return g, sample_brownian(g, EnsembleConfig(particles=n, seed=seed))


def _canonical_model(x0=0.3):
    return CoupledModel(
        drift=lambda t, law, own: -law.y - own.y,
        diffusion=lambda t, law, own: -law.z - own.z,
        driver=lambda t, law, own: law.x + own.x,
        terminal_map=lambda xT: xT,
        initial=x0,
    )


def _scaled_model(x0=0.3):
    # monotone but not canonical: both loop gains doubled
    return CoupledModel(
        drift=lambda t, law, own: -2.0 * (law.y + own.y),
        diffusion=lambda t, law, own: -(law.z + own.z),
        driver=lambda t, law, own: 2.0 * (law.x + own.x),
        terminal_map=lambda xT: xT,
        initial=x0,
    )


def _mild_model(x0=0.3):
    # monotone with half-strength couplings: the decoupling map contracts
    # on short horizons, so both solver routes are usable
    return CoupledModel(
        drift=lambda t, law, own: -0.5 * (law.y + own.y),
        diffusion=lambda t, law, own: -0.5 * (law.z + own.z),
        driver=lambda t, law, own: 0.5 * (law.x + own.x),
        terminal_map=lambda xT: xT,
        initial=x0,
    )


# ----------------------------------------------------------------------
# linear seed
# ----------------------------------------------------------------------


def test_seed_constant_sources_match_shooting_oracle():
    g, w = _grid_noise(64)
    sol, _ = solve_linear_seed(
        LinearInhomogeneity(drift_source=0.7, driver_source=0.7), g, w, x0=0.0
    )
    ref = linear_seed_mean_oracle(0.7, 0.7, 0.0, 0.0, 1.0, 64)
    assert np.abs(sol.x.mean(axis=1) - ref[:, 0]).max() <= 5e-3
    assert np.abs(sol.y.mean(axis=1) - ref[:, 1]).max() <= 5e-3


def test_seed_error_shrinks_with_refinement():
    errs = []
    for m in (32, 64, 128):
        g, w = _grid_noise(m)
        sol, _ = solve_linear_seed(
            LinearInhomogeneity(drift_source=0.7, driver_source=0.7), g, w, x0=0.0
        )
        ref = linear_seed_mean_oracle(0.7, 0.7, 0.0, 0.0, 1.0, m)
        errs.append(np.abs(sol.x.mean(axis=1) - ref[:, 0]).max())
    assert errs[2] < errs[1] < errs[0]


def test_seed_recombination_identity():
    g, w = _grid_noise(32)
    sol, log = solve_linear_seed(
        LinearInhomogeneity(drift_source=0.5, terminal_shift=0.2), g, w, x0=0.1
    )
    assert np.abs((sol.y - sol.x) - log["auxiliary_y"]).max() <= 1e-12


def test_seed_random_terminal_shift_mean_oracle():
    # per-particle terminal shift: means still follow the deterministic
    # system with the sample-average shift (the system is linear)
    g, w = _grid_noise(64, n=4096)
    xi = 0.5 * w.cumulative()[-1]
    sol, _ = solve_linear_seed(LinearInhomogeneity(terminal_shift=xi), g, w, x0=0.4)
    ref = linear_seed_mean_oracle(0.0, 0.0, float(xi.mean()), 0.4, 1.0, 64)
    assert np.abs(sol.x.mean(axis=1) - ref[:, 0]).max() <= 2e-2
    assert np.abs(sol.y.mean(axis=1) - ref[:, 1]).max() <= 2e-2


def test_seed_time_dependent_callable_sources():
    g, w = _grid_noise(32)
    sol, _ = solve_linear_seed(
        LinearInhomogeneity(drift_source=lambda t: np.sin(t)), g, w, x0=0.0
    )
    assert np.all(np.isfinite(sol.x))


def test_seed_rejects_bad_source_shape():
    g, w = _grid_noise(8, n=16)
    with pytest.raises(ConfigError):
        solve_linear_seed(
            LinearInhomogeneity(drift_source=np.zeros((3, 3))), g, w
        )


# ----------------------------------------------------------------------
# homotopy blends
# ----------------------------------------------------------------------


def test_blend_at_zero_is_canonical_pair():
    model = _scaled_model()
    blend = homotopy_coefficients(model, 0.0)
    law = StateView(x=1.0, y=2.0, z=4.0)
    own = StateView(x=np.array([1.5]), y=np.array([3.0]), z=np.array([0.5]))
    assert blend.drift(0.0, law, own)[0] == pytest.approx(-5.0)  # -(2 + 3)
    assert blend.diffusion(0.0, law, own)[0] == pytest.approx(-4.5)
    assert blend.driver(0.0, law, own)[0] == pytest.approx(2.5)
    assert blend.terminal_map(np.array([7.0]))[0] == pytest.approx(7.0)


def test_blend_at_one_reproduces_model():
    model = _scaled_model()
    blend = homotopy_coefficients(model, 1.0)
    law = StateView(x=0.3, y=-1.0, z=0.2)
    own = StateView(x=np.array([0.1]), y=np.array([0.4]), z=np.array([-0.2]))
    for coef in ("drift", "diffusion", "driver"):
        assert getattr(blend, coef)(0.5, law, own)[0] == pytest.approx(
            getattr(model, coef)(0.5, law, own)[0]
        )


def test_blend_rejects_out_of_range():
    with pytest.raises(ConfigError):
        homotopy_coefficients(_scaled_model(), 1.5)
    with pytest.raises(ConfigError):
        homotopy_coefficients(_scaled_model(), -0.1)


def test_blend_interpolates_affinely():
    model = _scaled_model()
    law = StateView(x=0.2, y=0.5, z=-0.3)
    own = StateView(x=np.array([0.9]), y=np.array([-0.2]), z=np.array([0.6]))
    v0 = homotopy_coefficients(model, 0.0).drift(0.1, law, own)[0]
    v1 = homotopy_coefficients(model, 1.0).drift(0.1, law, own)[0]
    vh = homotopy_coefficients(model, 0.4).drift(0.1, law, own)[0]
    assert vh == pytest.approx(0.6 * v0 + 0.4 * v1)


# ----------------------------------------------------------------------
# picard
# ----------------------------------------------------------------------


def _decoupled_model():
    return CoupledModel(
        drift=lambda t, law, own: 0.4 * law.x - 0.2 * own.x,
        diffusion=lambda t, law, own: 0.3 + 0.0 * own.x,
        driver=lambda t, law, own: 0.5 * own.x + 0.1 * law.x,
        terminal_map=lambda xT: np.sin(xT),
        initial=0.8,
    )


def test_picard_decoupled_converges_in_two_sweeps():
    g, w = _grid_noise(16, n=256)
    sol, history = solve_picard(_decoupled_model(), g, w)
    assert len(history) == 2
    assert history[-1] <= 1e-12


def test_picard_zero_model_converges_in_one_sweep():
    g, w = _grid_noise(8, n=64)
    zero = CoupledModel(
        drift=lambda t, law, own: np.zeros_like(own.x),
        diffusion=lambda t, law, own: np.zeros_like(own.x),
        driver=None,
        terminal_map=0.0,
        initial=0.0,
    )
    sol, history = solve_picard(zero, g, w)
    assert len(history) == 1
    assert np.all(sol.x == 0.0) and np.all(sol.y == 0.0)


def test_picard_decoupled_equals_sequential_composition():
    g, w = _grid_noise(16, n=256)
    model = _decoupled_model()
    sol, _ = solve_picard(model, g, w)
    x = simulate_forward(
        ForwardModel(drift=model.drift, diffusion=model.diffusion, initial=0.8), g, w
    )
    y, z = solve_mf_bsde(
        BackwardModel(driver=model.driver, terminal=model.terminal_map), g, w, x
    )
    assert np.allclose(sol.x, x, atol=1e-12)
    assert np.allclose(sol.y, y, atol=1e-12)
    assert np.allclose(sol.z, z, atol=1e-12)


def test_picard_coupled_short_horizon_converges():
    # tolerance sits above the decoupling map's regression-noise change
    # floor (~1e-7 at this resolution); the macro modes contract at ~0.27
    g, w = _grid_noise(16, n=256, horizon=0.25)
    sol, history = solve_picard(_mild_model(), g, w, tol=1e-6, max_iter=80)
    assert history[-1] <= 1e-6
    rep = residual(_mild_model(), sol, g, w)
    assert rep.terminal <= 1e-8


def test_picard_monotone_violating_toy_fails():
    g, w = _grid_noise(32, n=64)
    bad = CoupledModel(
        drift=lambda t, law, own: -law.y - own.y,
        diffusion=lambda t, law, own: -law.z - own.z,
        driver=lambda t, law, own: -(law.x + own.x),  # wrong sign: monotonicity broken
        terminal_map=lambda xT: xT,
        initial=0.5,
    )
    with pytest.raises((NonConvergenceError, DivergenceError)):
        solve_picard(bad, g, w, max_iter=40)


def test_picard_reports_history_on_budget_exhaustion():
    g, w = _grid_noise(16, n=64)
    with pytest.raises(NonConvergenceError) as err:
        solve_picard(_scaled_model(), g, w, max_iter=3)
    assert len(err.value.history) == 3
    assert err.value.last is not None


# ----------------------------------------------------------------------
# continuation
# ----------------------------------------------------------------------


def test_continuation_on_canonical_model_returns_seed_solution():
    # agreement at the inner tolerance: the level iterations are exact here,
    # and the final polish only moves the answer by ridge-shrinkage bias
    g, w = _grid_noise(32)
    model = _canonical_model()
    sol, log = solve_continuation(model, g, w)
    seed_sol, _ = solve_linear_seed(LinearInhomogeneity(), g, w, x0=0.3)
    assert np.abs(sol.x - seed_sol.x).max() <= 1e-6
    assert np.abs(sol.y - seed_sol.y).max() <= 1e-6
    assert log[-1]["alpha"] == pytest.approx(1.0)


def test_continuation_scaled_model_matches_mean_oracle():
    g, w = _grid_noise(64)
    sol, _ = solve_continuation(_scaled_model(), g, w)
    ref = linear_seed_mean_oracle(0.0, 0.0, 0.0, 0.3, 1.0, 64, cb=2.0, cf=2.0)
    scale = np.abs(ref[:, 0]).max()
    assert np.abs(sol.x.mean(axis=1) - ref[:, 0]).max() <= 0.02 * max(scale, 1.0)


def test_continuation_agrees_with_picard_on_short_horizon():
    # where the decoupling map contracts, the polish lands the continuation
    # on the same discrete fixed point as solve_picard: agreement at solver
    # tolerance, far below any Monte Carlo scale
    g, w = _grid_noise(16, n=256, horizon=0.25)
    model = _mild_model()
    sol_c, log = solve_continuation(model, g, w)
    sol_p, _ = solve_picard(model, g, w, tol=1e-6, max_iter=80)
    rms = np.sqrt(
        np.mean(
            np.concatenate(
                [
                    (sol_c.x - sol_p.x).ravel(),
                    (sol_c.y - sol_p.y).ravel(),
                    (sol_c.z - sol_p.z).ravel(),
                ]
            )
            ** 2
        )
    )
    assert rms <= 5e-6
    assert isinstance(log[-1]["polish"], list)  # polish engaged, not rejected


def test_continuation_checkpoints_hit_one_exactly():
    g, w = _grid_noise(8, n=64)
    sol, log = solve_continuation(
        _canonical_model(), g, w, schedule=ContinuationSchedule(step=0.3)
    )
    alphas = [rec["alpha"] for rec in log]
    assert alphas[-1] == pytest.approx(1.0)
    assert max(alphas) <= 1.0 + 1e-12


def test_continuation_fails_cleanly_on_nonmonotone_model():
    g, w = _grid_noise(8, n=32)
    bad = CoupledModel(
        drift=lambda t, law, own: -law.y - own.y,
        diffusion=lambda t, law, own: -law.z - own.z,
        driver=lambda t, law, own: -3.0 * (law.x + own.x),
        terminal_map=lambda xT: -xT,
        initial=0.5,
    )
    sched = ContinuationSchedule(
        step=0.5, inner_max_iter=5, picard_max_iter=8, max_halvings=2
    )
    with pytest.raises((NonConvergenceError, DivergenceError)):
        solve_continuation(bad, g, w, schedule=sched)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ContinuationSchedule(step=0.0)
    with pytest.raises(ConfigError):
        ContinuationSchedule(step=1.5)
    with pytest.raises(ConfigError):
        ContinuationSchedule(inner_tol=-1.0)


# ----------------------------------------------------------------------
# sign normalization
# ----------------------------------------------------------------------


def test_negate_forward_is_involutive():
    model = _scaled_model()
    twice = negate_forward_model(negate_forward_model(model))
    law = StateView(x=0.7, y=-0.4, z=0.1)
    own = StateView(x=np.array([0.2]), y=np.array([1.1]), z=np.array([-0.6]))
    for coef in ("drift", "diffusion", "driver"):
        assert getattr(twice, coef)(0.3, law, own)[0] == pytest.approx(
            getattr(model, coef)(0.3, law, own)[0]
        )
    assert twice.terminal_map(np.array([1.3]))[0] == pytest.approx(1.3)


def test_backward_monotone_model_solved_via_negation():
    # image of the scaled model under the flip satisfies the mirrored
    # condition; solving the flipped-back system and mapping X -> -X must
    # satisfy the original equations
    model_bwd = negate_forward_model(_scaled_model())
    g, w = _grid_noise(32)
    normalized = negate_forward_model(model_bwd)
    sol_n, _ = solve_continuation(normalized, g, w)
    mapped = SolutionTriple(x=-sol_n.x, y=sol_n.y, z=sol_n.z)
    rep = residual(model_bwd, mapped, g, w)
    assert rep.forward <= 1e-6
    assert rep.terminal <= 1e-8


# ----------------------------------------------------------------------
# residuals
# ----------------------------------------------------------------------


def test_residual_vanishes_for_deterministic_backward_decoupled():
    # constant terminal and state-free driver make the backward component
    # deterministic; with zero ridge the regressions reproduce constants
    # exactly, so all three defining recursions are satisfied to rounding
    model = CoupledModel(
        drift=lambda t, law, own: 0.2 * own.x,
        diffusion=lambda t, law, own: 0.3 + 0.0 * own.x,
        driver=lambda t, law, own: 0.5 + 0.0 * own.y,
        terminal_map=2.0,
        initial=lambda rng, n: 1.0 + 0.2 * rng.standard_normal(n),
    )
    basis = default_polynomial_basis(ridge_scale=0.0)
    g, w = _grid_noise(16, n=256)
    sol, _ = solve_picard(model, g, w, basis=basis)
    rep = residual(model, sol, g, w)
    assert rep.forward <= 1e-12
    assert rep.backward <= 1e-12
    assert rep.terminal <= 1e-12


def test_residual_detects_perturbations():
    model = _decoupled_model()
    g, w = _grid_noise(16, n=256)
    sol, _ = solve_picard(model, g, w)
    base = residual(model, sol, g, w)

    bumped_x = SolutionTriple(x=sol.x + 0.05, y=sol.y, z=sol.z)
    assert residual(model, bumped_x, g, w).forward > base.forward + 1e-4

    bumped_y = SolutionTriple(x=sol.x, y=sol.y + 0.05, z=sol.z)
    assert residual(model, bumped_y, g, w).terminal > base.terminal + 1e-4
