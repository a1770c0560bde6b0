"""Stochastic-maximum-principle control for mean-field FBSDE systems.

The controlled state follows the coupled system

    dX_t  =  b(t, law, X, Y, Z, u) dt + sigma(t, law, X, Y, Z, u) dW_t
    -dY_t =  f(t, law, X, Y, Z, u) dt - Z_t dW_t,   Y_T = Phi(X_T),

(in the decoupled case b and sigma read only the x slots, so X can be
simulated first and (Y, Z) recovered by a backward pass) and the control
problem minimizes

    J(u) = E[ integral of law-averaged h(t, law, X, Y, Z, u) dt ]
         + E[ g(X_T) ] + E[ gamma(Y_0) ].

This module provides the first-order machinery around that problem: the
adjoint system (p, q, Q) and its solver, the Hamiltonian
H = b p + sigma q - f Q + h, the per-node gradient process E'[H_v], the
linearized (variational) state response to a control direction, projected
gradient descent with Armijo backtracking, a variational-inequality
residual over trial controls, a discrete duality (integration-by-parts)
defect, and a convexity/minimality sufficiency check.

Law arguments are statistics of the ensemble (empirical means), so every
law-coupling linearizes to "coefficient times mean of the perturbation".
The adjoint realizes the exact transpose of that pattern: a mean-coupled
term c(theta_i) * mean(delta) transposes to mean_j[c(theta_j) * w_j]
broadcast to every particle.  Keeping the discrete adjoint an exact
transpose of the discrete linearization is what makes the gradient agree
with common-noise finite differences of the cost to well inside one
percent on the linear-quadratic reference fixtures.

Controls are open-loop per particle: arrays [M, N] (scalars and [M]
arrays broadcast), adapted by construction since node k values feed only
the step from node k.  Feedback maps can be materialized on a state path
with :func:`feedback_to_open_loop`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from mfcontrol.core import (
    BrownianPaths,
    ConfigError,
    StateView,
    TimeGrid,
    view_means,
)
from mfcontrol.forward_mv import DEFAULT_GUARD, ForwardModel, Initial, simulate_forward
from mfcontrol.hypothesis_check import UniformPairSampler, check_convexity
from mfcontrol.mf_bsde import BackwardModel, RegressionBasis, solve_mf_bsde
from mfcontrol.fbsde_solver import (
    ContinuationSchedule,
    CoupledModel,
    SolutionTriple,
    _apply_terminal,
    negate_forward_model,
    solve_continuation,
)

__all__ = [
    "ControlModel",
    "AdjointTriple",
    "VariationalTriple",
    "SufficiencyReport",
    "identity_projection",
    "box_projection",
    "as_control",
    "feedback_to_open_loop",
    "solve_state",
    "solve_adjoint",
    "hamiltonian",
    "hamiltonian_control_slope",
    "solve_variational",
    "smp_gradient",
    "cost",
    "projected_gradient_descent",
    "variational_inequality_residual",
    "duality_gap",
    "check_sufficiency",
]

Coefficient = Callable[[float, StateView, StateView], np.ndarray]
TerminalMap = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]

#: coefficient names that may carry partial derivatives
_COEF_KEYS = ("drift", "diffusion", "driver", "running_cost")

#: differentiation slots: three law statistics, three own values, control
_SLOT_KEYS = ("law_x", "law_y", "law_z", "x", "y", "z", "v")


def identity_projection(control: np.ndarray) -> np.ndarray:
    """Projection onto an unconstrained action space (the identity)."""
    return control


def box_projection(lo: float, hi: float) -> Callable[[np.ndarray], np.ndarray]:
    """Elementwise projection onto the box [lo, hi]."""
    if not lo < hi:
        raise ConfigError(f"box bounds must satisfy lo < hi, got [{lo}, {hi}]")

    def project(control: np.ndarray) -> np.ndarray:
        return np.clip(control, lo, hi)

    return project


@dataclass(frozen=True)
class ControlModel:
    """Controlled mean-field FBSDE plus cost structure and action set.

    Coefficients are vectorized ``(t, law, own) -> array [N]`` with the
    control read from ``own.u`` (its ensemble mean sits in ``law.u``).
    ``coupled=False`` declares that ``drift``/``diffusion`` read only the
    x and u slots, which unlocks the cheap sequential state solve.

    ``partials`` supplies closed-form first derivatives: an outer key per
    coefficient ("drift", "diffusion", "driver", "running_cost") and an
    inner key per slot ("law_x", "law_y", "law_z", "x", "y", "z", "v");
    absent entries are identically zero.  Partials use the same
    ``(t, law, own)`` signature as the coefficients.

    ``project`` must be idempotent; a control u is admissible when
    ``project(u) == u`` elementwise.
    """

    drift: Coefficient
    diffusion: Coefficient
    driver: Optional[Coefficient]
    terminal_map: TerminalMap
    running_cost: Coefficient
    terminal_cost: Callable[[np.ndarray], np.ndarray]
    initial_cost: Callable[[np.ndarray], np.ndarray]
    partials: Mapping[str, Mapping[str, Coefficient]]
    terminal_slope: Callable[[np.ndarray], np.ndarray]
    terminal_cost_slope: Callable[[np.ndarray], np.ndarray]
    initial_cost_slope: Callable[[np.ndarray], np.ndarray]
    project: Callable[[np.ndarray], np.ndarray] = identity_projection
    initial: Initial = 0.0
    coupled: bool = False

    def __post_init__(self):
        for name, block in self.partials.items():
            if name not in _COEF_KEYS:
                raise ConfigError(
                    f"unknown coefficient {name!r} in partials; expected one of {_COEF_KEYS}"
                )
            for slot in block:
                if slot not in _SLOT_KEYS:
                    raise ConfigError(
                        f"unknown slot {slot!r} in partials[{name!r}]; "
                        f"expected one of {_SLOT_KEYS}"
                    )


@dataclass(frozen=True)
class AdjointTriple:
    """Adjoint processes: backward pair (p, q) and forward multiplier Q.

    All arrays [M+1, N].  By construction ``Q[0] = -gamma_y(Y_0)`` and
    ``p[M] = g_x(X_M) - Phi_x(X_M) Q[M]``.  ``warning`` carries the
    message of a failed monotonicity probe when certification was
    requested (``None`` otherwise).
    """

    p: np.ndarray
    q: np.ndarray
    Q: np.ndarray
    warning: Optional[str] = None


@dataclass(frozen=True)
class VariationalTriple:
    """Linearized state response (k, m, n) to a control direction.

    Arrays [M+1, N]; ``k[0] = 0`` and ``m[M] = Phi_x(X_M) k[M]``.  Exactly
    linear in the direction for fixed noise.
    """

    k: np.ndarray
    m: np.ndarray
    n: np.ndarray


# ======================================================================
# Control arrays and admissibility
# ======================================================================


def as_control(u, grid: TimeGrid, particles: int) -> np.ndarray:
    """Normalize a control to an open-loop array [M, N].

    Accepts a scalar (constant policy), an [M] array (deterministic in
    time), an [M, 1] column, or a full [M, N] array.
    """
    arr = np.asarray(u, dtype=float)
    m = grid.steps
    if arr.ndim == 0:
        return np.full((m, particles), float(arr))
    if arr.shape == (m,):
        return np.repeat(arr[:, None], particles, axis=1)
    if arr.shape == (m, 1):
        return np.repeat(arr, particles, axis=1)
    if arr.shape == (m, particles):
        return arr.astype(float, copy=True)
    raise ConfigError(
        f"control has shape {arr.shape}; expected scalar, ({m},), ({m}, 1) or ({m}, {particles})"
    )


def feedback_to_open_loop(policy, x_path: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Materialize a feedback map ``policy(t, x) -> array`` on a state path."""
    m = grid.steps
    out = np.empty((m, x_path.shape[1]))
    for k in range(m):
        out[k] = np.asarray(policy(k * grid.dt, x_path[k]), dtype=float)
    return out


def _require_admissible(model: ControlModel, u: np.ndarray) -> None:
    proj = np.asarray(model.project(u), dtype=float)
    if proj.shape != u.shape or not np.allclose(proj, u, rtol=0.0, atol=1e-9):
        raise ConfigError("control is not admissible: projection moves it")


# ======================================================================
# Frozen-trajectory evaluation cache
# ======================================================================


class _FrozenPath:
    """Coefficient and partial evaluations along a frozen (state, control)
    trajectory, cached per (name, slot, node)."""

    def __init__(self, model: ControlModel, u: np.ndarray, state: SolutionTriple, grid: TimeGrid):
        self.model = model
        self.u = u
        self.state = state
        self.grid = grid
        self._views: dict = {}
        self._vals: dict = {}

    def views(self, k: int):
        got = self._views.get(k)
        if got is None:
            u_k = self.u[min(k, self.grid.steps - 1)]
            own = StateView(
                x=self.state.x[k], y=self.state.y[k], z=self.state.z[k], u=u_k
            )
            got = (own, view_means(own))
            self._views[k] = got
        return got

    def partial(self, name: str, slot: str, k: int) -> np.ndarray:
        key = (name, slot, k)
        got = self._vals.get(key)
        if got is None:
            own, law = self.views(k)
            fn = self.model.partials.get(name, {}).get(slot)
            if fn is None or (name == "driver" and self.model.driver is None):
                got = np.zeros_like(own.x)
            else:
                val = np.asarray(fn(k * self.grid.dt, law, own), dtype=float)
                got = np.broadcast_to(val, own.x.shape)
            self._vals[key] = got
        return got


def _tmean(coef: np.ndarray, weight: np.ndarray) -> float:
    """Transpose of a mean coupling: mean_j of coefficient times weight."""
    return float(np.mean(coef * weight))


def _pairing(grid: TimeGrid, a: np.ndarray, b: np.ndarray) -> float:
    """Time-quadrature inner product E[ sum_k a_k b_k dt ] of [M, N] arrays."""
    return float(np.mean(np.sum(a * b, axis=0)) * grid.dt)


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


# ======================================================================
# State equation
# ======================================================================


def solve_state(
    model: ControlModel,
    u,
    grid: TimeGrid,
    noise: BrownianPaths,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
) -> SolutionTriple:
    """Solve the controlled state system for an admissible control.

    Decoupled models are solved sequentially: an Euler particle pass for
    X, then a regression backward pass for (Y, Z).  Coupled models are
    delegated to the homotopy continuation solver with the control
    threaded through every coefficient's ``own.u`` slot.

    Parameters
    ----------
    model : ControlModel
    u : scalar, [M], [M, 1] or [M, N]
        Admissible control (``project`` must leave it fixed).
    grid, noise
        Time grid and matching Brownian increment block.
    schedule : ContinuationSchedule, optional
        Coupled-route solver schedule.
    basis : RegressionBasis, optional
        Conditional-expectation basis for backward passes.
    guard : float
        Divergence guard radius.

    Returns
    -------
    SolutionTriple
        Arrays [M+1, N] for (X, Y, Z).
    """
    u = as_control(u, grid, noise.particles)
    _require_admissible(model, u)
    if model.coupled:
        cm = CoupledModel(
            drift=model.drift,
            diffusion=model.diffusion,
            driver=model.driver,
            terminal_map=model.terminal_map,
            initial=model.initial,
        )
        sol, _ = solve_continuation(
            cm, grid, noise, schedule=schedule, basis=basis, control=u, guard=guard
        )
        return sol
    fwd = ForwardModel(drift=model.drift, diffusion=model.diffusion, initial=model.initial)
    x = simulate_forward(fwd, grid, noise, control=u, guard=guard)
    y, z = solve_mf_bsde(
        BackwardModel(driver=model.driver, terminal=model.terminal_map),
        grid,
        noise,
        x,
        basis=basis,
        control=u,
    )
    return SolutionTriple(x=x, y=y, z=z)


# ======================================================================
# Adjoint system
# ======================================================================


def _h6_probe(drift, diffusion, driver, grid, seed, n, trials=8, radius=1.0):
    """Empirical mirrored-monotonicity probe of an assembled adjoint system.

    Draws random ensemble perturbation pairs (sized to the trajectory
    ensemble so frozen coefficient arrays broadcast) at a few nodes and
    evaluates the pairing of the coefficient differences against the
    perturbation; the mirrored condition requires it to be nonnegative.
    Returns the most negative normalized pairing observed.
    """
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0xAD01))
    m = grid.steps
    nodes = sorted({0, m // 3, (2 * m) // 3, m - 1})
    worst = np.inf
    for k in nodes:
        t = k * grid.dt
        for _ in range(trials):
            a = radius * (2.0 * rng.random((3, n)) - 1.0)
            b = radius * (2.0 * rng.random((3, n)) - 1.0)
            v1 = StateView(x=a[0], y=a[1], z=a[2])
            v2 = StateView(x=b[0], y=b[1], z=b[2])
            d = a - b
            db = np.asarray(drift(t, view_means(v1), v1)) - np.asarray(
                drift(t, view_means(v2), v2)
            )
            ds = np.asarray(diffusion(t, view_means(v1), v1)) - np.asarray(
                diffusion(t, view_means(v2), v2)
            )
            df = np.asarray(driver(t, view_means(v1), v1)) - np.asarray(
                driver(t, view_means(v2), v2)
            )
            pairing = float(np.mean(-df * d[0] + db * d[1] + ds * d[2]))
            denom = float(np.mean(np.sum(d * d, axis=0)))
            worst = min(worst, pairing / denom)
    return worst


def solve_adjoint(
    model: ControlModel,
    u,
    state: SolutionTriple,
    grid: TimeGrid,
    noise: BrownianPaths,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
    certify: bool = False,
) -> AdjointTriple:
    """Solve the adjoint system (p, q, Q) along a solved trajectory.

    The multiplier Q rides forward from ``Q_0 = -gamma_y(Y_0)`` and the
    pair (p, q) rides backward to ``p_T = g_x(X_T) - Phi_x(X_T) Q_T``.
    Every mean coupling of the state linearization appears here as its
    exact transpose: a term c(theta_i) * mean(delta) in the forward
    linearization contributes mean_j[c(theta_j) w_j] to the adjoint of
    the paired multiplier w.

    For decoupled models the Q equation involves only driver and running-
    cost partials in the (y, z) slots, so Q is integrated forward first
    and (p, q) follow by one regression backward pass.  For coupled
    models (Q, p, q) form a fully coupled mean-field FBSDE of the
    mirrored monotone type; it is solved by negating the forward
    component (the pair (-Q, p, q) is forward-monotone) and delegating to
    the continuation solver, then mapping Q back.

    With ``certify=True`` an empirical mirrored-monotonicity probe runs
    on the assembled coupled adjoint coefficients before solving; a
    violation does not raise but is attached to the result's ``warning``
    field.  Decoupled adjoints are solved sequentially and need no
    monotonicity, so the probe is skipped there.

    Parameters
    ----------
    model, u, grid, noise
        As in :func:`solve_state`; ``state`` must solve the state system
        for ``u`` on the same noise.
    schedule, basis, guard
        Coupled-route solver knobs.
    certify : bool
        Run the monotonicity probe (off by default).

    Returns
    -------
    AdjointTriple
    """
    u = as_control(u, grid, noise.particles)
    dw = noise.scalar()
    m, n = dw.shape
    dt = grid.dt
    path = _FrozenPath(model, u, state, grid)

    def p_coef(slot, k):
        return path.partial("drift", slot, k)

    def s_coef(slot, k):
        return path.partial("diffusion", slot, k)

    def f_coef(slot, k):
        return path.partial("driver", slot, k)

    def h_coef(slot, k):
        return path.partial("running_cost", slot, k)

    x_last = state.x[m]
    terminal_cost_slope = np.asarray(model.terminal_cost_slope(x_last), dtype=float)
    terminal_slope = np.asarray(model.terminal_slope(x_last), dtype=float)
    q0 = -np.asarray(model.initial_cost_slope(state.y[0]), dtype=float)
    q0 = np.broadcast_to(q0, (n,)).copy()

    if not model.coupled:
        # Q forward: its equation reads only (y, z) partials of f and h
        big_q = np.empty((m + 1, n))
        big_q[0] = q0
        for k in range(m):
            drift = (
                _tmean(f_coef("law_y", k), big_q[k])
                + f_coef("y", k) * big_q[k]
                - float(np.mean(h_coef("law_y", k)))
                - h_coef("y", k)
            )
            diff = (
                _tmean(f_coef("law_z", k), big_q[k])
                + f_coef("z", k) * big_q[k]
                - float(np.mean(h_coef("law_z", k)))
                - h_coef("z", k)
            )
            big_q[k + 1] = big_q[k] + drift * dt + diff * dw[k]

        def p_driver(t, law, own):
            k = grid.node_index(t)
            return (
                _tmean(p_coef("law_x", k), own.y)
                + p_coef("x", k) * own.y
                + _tmean(s_coef("law_x", k), own.z)
                + s_coef("x", k) * own.z
                + float(np.mean(h_coef("law_x", k)))
                + h_coef("x", k)
                - _tmean(f_coef("law_x", k), big_q[k])
                - f_coef("x", k) * big_q[k]
            )

        def p_terminal(xm):
            return terminal_cost_slope - terminal_slope * big_q[m]

        p, q = solve_mf_bsde(
            BackwardModel(driver=p_driver, terminal=p_terminal),
            grid,
            noise,
            state.x,
            basis=basis,
        )
        return AdjointTriple(p=p, q=q, Q=big_q, warning=None)

    # coupled: (Q, p, q) solved as one mirrored-monotone FBSDE
    def adj_drift(t, law, own):
        k = grid.node_index(t)
        return (
            _tmean(f_coef("law_y", k), own.x)
            + f_coef("y", k) * own.x
            - _tmean(p_coef("law_y", k), own.y)
            - p_coef("y", k) * own.y
            - _tmean(s_coef("law_y", k), own.z)
            - s_coef("y", k) * own.z
            - float(np.mean(h_coef("law_y", k)))
            - h_coef("y", k)
        )

    def adj_diffusion(t, law, own):
        k = grid.node_index(t)
        return (
            _tmean(f_coef("law_z", k), own.x)
            + f_coef("z", k) * own.x
            - _tmean(p_coef("law_z", k), own.y)
            - p_coef("z", k) * own.y
            - _tmean(s_coef("law_z", k), own.z)
            - s_coef("z", k) * own.z
            - float(np.mean(h_coef("law_z", k)))
            - h_coef("z", k)
        )

    def adj_driver(t, law, own):
        k = grid.node_index(t)
        return (
            _tmean(p_coef("law_x", k), own.y)
            + p_coef("x", k) * own.y
            + _tmean(s_coef("law_x", k), own.z)
            + s_coef("x", k) * own.z
            + float(np.mean(h_coef("law_x", k)))
            + h_coef("x", k)
            - _tmean(f_coef("law_x", k), own.x)
            - f_coef("x", k) * own.x
        )

    def adj_terminal(q_last):
        return terminal_cost_slope - terminal_slope * q_last

    adj_model = CoupledModel(
        drift=adj_drift,
        diffusion=adj_diffusion,
        driver=adj_driver,
        terminal_map=adj_terminal,
        initial=q0,
    )
    warning = None
    if certify:
        worst = _h6_probe(adj_drift, adj_diffusion, adj_driver, grid, noise.seed, n)
        if worst < -1e-9:
            warning = f"adjoint monotonicity probe found pairing ratio {worst:.3e}"
    # the adjoint's data are exogenous functionals of the state trajectory,
    # so the state path carries the regressions
    sol, _ = solve_continuation(
        negate_forward_model(adj_model),
        grid,
        noise,
        schedule=schedule,
        basis=basis,
        guard=guard,
        conditioning=state.x,
    )
    return AdjointTriple(p=sol.y, q=sol.z, Q=-sol.x, warning=warning)


# ======================================================================
# Hamiltonian
# ======================================================================


def hamiltonian(model: ControlModel, t, law, own, p, q, Q) -> np.ndarray:
    """Hamiltonian H = b p + sigma q - f Q + h at per-particle arguments.

    ``law``/``own`` are StateViews with the control in the u slots;
    (p, q, Q) are the multiplier values (arrays or scalars).
    """
    b = np.asarray(model.drift(t, law, own), dtype=float)
    s = np.asarray(model.diffusion(t, law, own), dtype=float)
    f = 0.0 if model.driver is None else np.asarray(model.driver(t, law, own), dtype=float)
    h = np.asarray(model.running_cost(t, law, own), dtype=float)
    return b * p + s * q - f * Q + h


def hamiltonian_control_slope(model: ControlModel, t, law, own, p, q, Q) -> np.ndarray:
    """Control derivative H_v = b_v p + sigma_v q - f_v Q + h_v."""

    def part(name):
        fn = model.partials.get(name, {}).get("v")
        if fn is None or (name == "driver" and model.driver is None):
            return 0.0
        return np.asarray(fn(t, law, own), dtype=float)

    return part("drift") * p + part("diffusion") * q - part("driver") * Q + part("running_cost")


# ======================================================================
# Variational (linearized state) system
# ======================================================================


def solve_variational(
    model: ControlModel,
    u,
    direction,
    state: SolutionTriple,
    grid: TimeGrid,
    noise: BrownianPaths,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
) -> VariationalTriple:
    """Solve the linearized state system along a control direction.

    The triple (k, m, n) starts at ``k_0 = 0``, is driven by the frozen
    coefficient partials along (state, u) plus the direction terms
    (b_v, sigma_v, f_v) times the direction, and closes with
    ``m_T = Phi_x(X_T) k_T``.  Law couplings act through means of the
    perturbation, matching the statistics-form linearization, so the
    solve is exactly linear in the direction for fixed noise.
    """
    u = as_control(u, grid, noise.particles)
    d = as_control(direction, grid, noise.particles)
    dw = noise.scalar()
    m_steps, n = dw.shape
    dt = grid.dt
    path = _FrozenPath(model, u, state, grid)
    slope = np.asarray(model.terminal_slope(state.x[m_steps]), dtype=float)

    if not model.coupled:
        kk = np.empty((m_steps + 1, n))
        kk[0] = 0.0
        for k in range(m_steps):
            mean_k = float(kk[k].mean())
            drift = (
                path.partial("drift", "law_x", k) * mean_k
                + path.partial("drift", "x", k) * kk[k]
                + path.partial("drift", "v", k) * d[k]
            )
            diff = (
                path.partial("diffusion", "law_x", k) * mean_k
                + path.partial("diffusion", "x", k) * kk[k]
                + path.partial("diffusion", "v", k) * d[k]
            )
            kk[k + 1] = kk[k] + drift * dt + diff * dw[k]

        def var_driver(t, law, own):
            k = grid.node_index(t)
            return (
                path.partial("driver", "law_x", k) * float(kk[k].mean())
                + path.partial("driver", "x", k) * kk[k]
                + path.partial("driver", "law_y", k) * law.y
                + path.partial("driver", "y", k) * own.y
                + path.partial("driver", "law_z", k) * law.z
                + path.partial("driver", "z", k) * own.z
                + path.partial("driver", "v", k) * d[k]
            )

        mv, nv = solve_mf_bsde(
            BackwardModel(driver=var_driver, terminal=lambda xm: slope * kk[m_steps]),
            grid,
            noise,
            state.x,
            basis=basis,
        )
        return VariationalTriple(k=kk, m=mv, n=nv)

    def lin(name):
        def coef(t, law, own):
            k = grid.node_index(t)
            return (
                path.partial(name, "law_x", k) * law.x
                + path.partial(name, "x", k) * own.x
                + path.partial(name, "law_y", k) * law.y
                + path.partial(name, "y", k) * own.y
                + path.partial(name, "law_z", k) * law.z
                + path.partial(name, "z", k) * own.z
                + path.partial(name, "v", k) * d[min(k, m_steps - 1)]
            )

        return coef

    var_model = CoupledModel(
        drift=lin("drift"),
        diffusion=lin("diffusion"),
        driver=lin("driver"),
        terminal_map=lambda k_last: slope * k_last,
        initial=0.0,
    )
    sol, _ = solve_continuation(
        var_model, grid, noise, schedule=schedule, basis=basis, guard=guard,
        conditioning=state.x,
    )
    return VariationalTriple(k=sol.x, m=sol.y, n=sol.z)


# ======================================================================
# Cost and gradient
# ======================================================================


def cost(
    model: ControlModel,
    u,
    grid: TimeGrid,
    noise: BrownianPaths,
    state: Optional[SolutionTriple] = None,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
) -> float:
    """Monte Carlo cost J(u): left-endpoint quadrature of the law-averaged
    running cost plus terminal and initial costs."""
    u = as_control(u, grid, noise.particles)
    if state is None:
        state = solve_state(model, u, grid, noise, schedule=schedule, basis=basis, guard=guard)
    path = _FrozenPath(model, u, state, grid)
    run = 0.0
    for k in range(grid.steps):
        own, law = path.views(k)
        run += float(np.mean(model.running_cost(k * grid.dt, law, own))) * grid.dt
    terminal = float(np.mean(model.terminal_cost(state.x[grid.steps])))
    start = float(np.mean(model.initial_cost(state.y[0])))
    return run + terminal + start


def smp_gradient(
    model: ControlModel,
    u,
    grid: TimeGrid,
    noise: BrownianPaths,
    state: Optional[SolutionTriple] = None,
    adjoint: Optional[AdjointTriple] = None,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
) -> np.ndarray:
    """Per-node cost gradient: the law-averaged Hamiltonian control slope.

    Solves the state and adjoint systems (unless supplied) and evaluates

        grad[k, i] = b_v p + sigma_v q - f_v Q + h_v

    along the trajectory.  Its time-quadrature pairing with a direction
    equals the directional derivative of :func:`cost` under common noise;
    descent methods and the variational-inequality residual both consume
    it.

    Returns
    -------
    ndarray, shape [M, N]
    """
    u = as_control(u, grid, noise.particles)
    if state is None:
        state = solve_state(model, u, grid, noise, schedule=schedule, basis=basis, guard=guard)
    if adjoint is None:
        adjoint = solve_adjoint(
            model, u, state, grid, noise, schedule=schedule, basis=basis, guard=guard
        )
    path = _FrozenPath(model, u, state, grid)
    grad = np.empty((grid.steps, noise.particles))
    for k in range(grid.steps):
        grad[k] = (
            path.partial("drift", "v", k) * adjoint.p[k]
            + path.partial("diffusion", "v", k) * adjoint.q[k]
            - path.partial("driver", "v", k) * adjoint.Q[k]
            + path.partial("running_cost", "v", k)
        )
    return grad


# ======================================================================
# Projected gradient descent
# ======================================================================


def projected_gradient_descent(
    model: ControlModel,
    u0,
    grid: TimeGrid,
    noise: BrownianPaths,
    steps: int = 20,
    eta0: float = 0.5,
    shrink: float = 0.5,
    slope: float = 1e-4,
    grad_tol: float = 0.0,
    min_eta: float = 1e-12,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
):
    """Projected gradient descent on the control cost with Armijo
    backtracking.

    Each iteration computes the gradient process, proposes
    ``Project(u - eta * grad)`` starting at ``eta0``, and shrinks the step
    until the common-noise cost satisfies the sufficient-decrease test
    ``J(candidate) <= J(u) - slope * <grad, u - candidate>``.  Because the
    noise is frozen, the cost is a deterministic function of the control,
    so the history is genuinely monotone.  Step-size underflow stops the
    run with a ``"stagnated"`` status entry instead of raising.

    Parameters
    ----------
    model, grid, noise
        Problem definition and frozen noise.
    u0
        Admissible starting control.
    steps : int
        Maximum iterations.
    eta0, shrink, slope : float
        Armijo parameters (initial step, backtrack factor, slope factor).
    grad_tol : float
        Stop when the projected-gradient residual
        ``rms(u - Project(u - eta0 * grad))`` falls to this level
        (0 disables the test).
    min_eta : float
        Step-size underflow threshold.

    Returns
    -------
    (ndarray [M, N], list of dict)
        Final control and per-iteration history (iteration, cost,
        gradient norm, accepted step, backtracks, optional status).
    """
    u = as_control(u0, grid, noise.particles)
    _require_admissible(model, u)
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    state = solve_state(model, u, grid, noise, schedule=schedule, basis=basis, guard=guard)
    value = cost(model, u, grid, noise, state=state)
    history: list = []
    for it in range(steps):
        adjoint = solve_adjoint(
            model, u, state, grid, noise, schedule=schedule, basis=basis, guard=guard
        )
        grad = smp_gradient(
            model, u, grid, noise, state=state, adjoint=adjoint,
            schedule=schedule, basis=basis, guard=guard,
        )
        residual = _rms(u - np.asarray(model.project(u - eta0 * grad), dtype=float))
        record = {
            "iteration": it,
            "cost": value,
            "grad_norm": _rms(grad),
            "residual": residual,
        }
        if grad_tol > 0.0 and residual <= grad_tol:
            record.update(step=0.0, backtracks=0, status="converged")
            history.append(record)
            break
        eta = eta0
        backtracks = 0
        accepted = False
        while eta >= min_eta:
            candidate = np.asarray(model.project(u - eta * grad), dtype=float)
            decrease = slope * _pairing(grid, grad, u - candidate)
            cand_state = solve_state(
                model, candidate, grid, noise, schedule=schedule, basis=basis, guard=guard
            )
            cand_value = cost(model, candidate, grid, noise, state=cand_state)
            if cand_value <= value - decrease:
                accepted = True
                break
            eta *= shrink
            backtracks += 1
        record.update(step=eta if accepted else 0.0, backtracks=backtracks)
        if not accepted:
            record["status"] = "stagnated"
            history.append(record)
            break
        history.append(record)
        u, value, state = candidate, cand_value, cand_state
    return u, history


# ======================================================================
# Optimality diagnostics
# ======================================================================


def variational_inequality_residual(
    model: ControlModel,
    u,
    trials: Sequence,
    grid: TimeGrid,
    noise: BrownianPaths,
    state: Optional[SolutionTriple] = None,
    adjoint: Optional[AdjointTriple] = None,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
) -> float:
    """Minimum over trial controls of the first-order pairing
    ``<grad, v - u>``; an optimum certifies with a residual that is
    nonnegative up to Monte Carlo tolerance."""
    u = as_control(u, grid, noise.particles)
    if not len(trials):
        raise ConfigError("need at least one trial control")
    grad = smp_gradient(
        model, u, grid, noise, state=state, adjoint=adjoint,
        schedule=schedule, basis=basis, guard=guard,
    )
    best = np.inf
    for trial in trials:
        v = as_control(trial, grid, noise.particles)
        best = min(best, _pairing(grid, grad, v - u))
    return float(best)


def duality_gap(
    model: ControlModel,
    u,
    direction,
    grid: TimeGrid,
    noise: BrownianPaths,
    state: Optional[SolutionTriple] = None,
    adjoint: Optional[AdjointTriple] = None,
    variational: Optional[VariationalTriple] = None,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
    signed: bool = False,
) -> float:
    """Defect of the discrete integration-by-parts identity linking the
    variational and adjoint systems.

    The identity equates the terminal/initial cost linearization
    E[g_x(X_T) k_T + gamma_y(Y_0) m_0] plus the running-cost state terms
    with the multiplier pairing E[int (b_v p + sigma_v q - f_v Q)
    (direction) dt].  Both sides are assembled from the solved triples
    and the absolute difference returned; it vanishes at first order in
    the step size.

    With ``signed=True`` the raw difference is returned instead of its
    magnitude.  At finite particle counts the defect carries a
    step-independent sampling offset on top of the O(dt) part, and
    isolating the latter (averaging replicate ensembles, differencing
    step-coarsened runs on shared increments) only works before the
    absolute value is taken.
    """
    u = as_control(u, grid, noise.particles)
    d = as_control(direction, grid, noise.particles)
    if state is None:
        state = solve_state(model, u, grid, noise, schedule=schedule, basis=basis, guard=guard)
    if adjoint is None:
        adjoint = solve_adjoint(
            model, u, state, grid, noise, schedule=schedule, basis=basis, guard=guard
        )
    if variational is None:
        variational = solve_variational(
            model, u, d, state, grid, noise, schedule=schedule, basis=basis, guard=guard
        )
    path = _FrozenPath(model, u, state, grid)
    m = grid.steps
    lhs = float(
        np.mean(
            np.asarray(model.terminal_cost_slope(state.x[m]), dtype=float) * variational.k[m]
        )
    ) + float(
        np.mean(
            np.asarray(model.initial_cost_slope(state.y[0]), dtype=float) * variational.m[0]
        )
    )
    run = 0.0
    for k in range(m):
        run += grid.dt * (
            float(np.mean(path.partial("running_cost", "law_x", k))) * float(variational.k[k].mean())
            + float(np.mean(path.partial("running_cost", "x", k) * variational.k[k]))
            + float(np.mean(path.partial("running_cost", "law_y", k))) * float(variational.m[k].mean())
            + float(np.mean(path.partial("running_cost", "y", k) * variational.m[k]))
            + float(np.mean(path.partial("running_cost", "law_z", k))) * float(variational.n[k].mean())
            + float(np.mean(path.partial("running_cost", "z", k) * variational.n[k]))
        )
    rhs = 0.0
    for k in range(m):
        rhs += grid.dt * float(
            np.mean(
                (
                    path.partial("drift", "v", k) * adjoint.p[k]
                    + path.partial("diffusion", "v", k) * adjoint.q[k]
                    - path.partial("driver", "v", k) * adjoint.Q[k]
                )
                * d[k]
            )
        )
    defect = lhs + run - rhs
    return defect if signed else abs(defect)


@dataclass(frozen=True)
class SufficiencyReport:
    """Outcome of the convexity/minimality sufficiency check.

    ``convexity`` maps check names (terminal_cost, initial_cost,
    terminal_map, hamiltonian_<s>) to their midpoint-test reports;
    ``minimality_violations`` counts sampled (node, particle, trial)
    points where a trial control beat the candidate's Hamiltonian by
    more than ``slack``.
    """

    passed: bool
    convexity: dict
    minimality_violations: int
    worst_violation: Optional[dict]
    slack: float
    control_trials: int


def check_sufficiency(
    model: ControlModel,
    u,
    grid: TimeGrid,
    noise: BrownianPaths,
    state: Optional[SolutionTriple] = None,
    adjoint: Optional[AdjointTriple] = None,
    n_samples: int = 20_000,
    control_trials: int = 32,
    radius: float = 10.0,
    slack: float = 1e-4,
    seed: int = 0,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
) -> SufficiencyReport:
    """First-order sufficiency check for a candidate control.

    Runs midpoint convexity tests on the terminal cost, initial cost, and
    terminal map, and on the Hamiltonian as a function of the full
    (law, own, control) tuple at multiplier values sampled along the
    trajectory; then verifies pointwise Hamiltonian minimality of the
    candidate against projected random trial controls, with ``slack``
    absorbing solver-tolerance suboptimality of the candidate.
    """
    u = as_control(u, grid, noise.particles)
    if state is None:
        state = solve_state(model, u, grid, noise, schedule=schedule, basis=basis, guard=guard)
    if adjoint is None:
        adjoint = solve_adjoint(
            model, u, state, grid, noise, schedule=schedule, basis=basis, guard=guard
        )
    sampler = UniformPairSampler(radius=radius)
    convexity = {
        "terminal_cost": check_convexity(
            lambda pts: np.asarray(model.terminal_cost(pts[:, 0]), dtype=float),
            dim=1, sampler=sampler, n_samples=n_samples, seed=seed,
        ),
        "initial_cost": check_convexity(
            lambda pts: np.asarray(model.initial_cost(pts[:, 0]), dtype=float),
            dim=1, sampler=sampler, n_samples=n_samples, seed=seed + 1,
        ),
        "terminal_map": check_convexity(
            lambda pts: _apply_terminal(model.terminal_map, pts[:, 0]),
            dim=1, sampler=sampler, n_samples=n_samples, seed=seed + 2,
        ),
    }
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0x5FF1C))
    m, n = grid.steps, noise.particles
    for s in range(4):
        k_s = int(rng.integers(0, m))
        i_s = int(rng.integers(0, n))
        t_s = k_s * grid.dt
        p_s, q_s, qq_s = (
            float(adjoint.p[k_s, i_s]),
            float(adjoint.q[k_s, i_s]),
            float(adjoint.Q[k_s, i_s]),
        )

        def ham_at(pts, t=t_s, p=p_s, q=q_s, qq=qq_s):
            law = StateView(x=pts[:, 0], y=pts[:, 1], z=pts[:, 2], u=pts[:, 6])
            own = StateView(x=pts[:, 3], y=pts[:, 4], z=pts[:, 5], u=pts[:, 6])
            return hamiltonian(model, t, law, own, p, q, qq)

        convexity[f"hamiltonian_{s}"] = check_convexity(
            ham_at, dim=7, sampler=sampler, n_samples=max(n_samples // 4, 1000),
            seed=seed + 10 + s,
        )

    path = _FrozenPath(model, u, state, grid)
    violations = 0
    worst = None
    worst_gap = 0.0
    for _ in range(control_trials):
        v = np.asarray(
            model.project(radius * (2.0 * rng.random((m, n)) - 1.0)), dtype=float
        )
        for k in range(m):
            own, law = path.views(k)
            base = hamiltonian(model, k * grid.dt, law, own, adjoint.p[k], adjoint.q[k], adjoint.Q[k])
            own_v = StateView(x=own.x, y=own.y, z=own.z, u=v[k])
            law_v = StateView(x=law.x, y=law.y, z=law.z, u=float(v[k].mean()))
            trial = hamiltonian(model, k * grid.dt, law_v, own_v, adjoint.p[k], adjoint.q[k], adjoint.Q[k])
            gap = base - trial
            bad = gap > slack
            violations += int(np.sum(bad))
            if np.any(bad):
                i = int(np.argmax(gap))
                if gap[i] > worst_gap:
                    worst_gap = float(gap[i])
                    worst = {
                        "node": k,
                        "particle": i,
                        "gap": worst_gap,
                        "candidate": float(u[k, i]),
                        "trial": float(v[k, i]),
                    }
    passed = all(rep.passed for rep in convexity.values()) and violations == 0
    return SufficiencyReport(
        passed=passed,
        convexity=convexity,
        minimality_violations=violations,
        worst_violation=worst,
        slack=slack,
        control_trials=control_trials,
    )
