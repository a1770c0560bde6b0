"""Coupled mean-field FBSDE solvers.

Target system (scalar state, scalar driver, law arguments as empirical
means):

    dX_t  =  b(t, law, X, Y, Z) dt + sigma(t, law, X, Y, Z) dW_t,   X_0 given
    -dY_t =  f(t, law, X, Y, Z) dt - Z_t dW_t,                      Y_T = Phi(X_T)

Three solver routes are provided:

* :func:`solve_linear_seed` — the canonical linear-monotone system (the
  alpha = 0 member of the homotopy family) with additive inhomogeneities,
  solved constructively: an auxiliary backward equation in variables
  (Y_aux, V) where V is the actual martingale integrand, an algebraic
  recovery of the auxiliary integrand, then a forward Euler pass and the
  recombination Y = Y_aux + X.
* :func:`solve_picard` — decoupling iteration (forward sweep with frozen
  backward paths, then a fresh backward sweep), with optional damping and
  Anderson acceleration.  Contractive only for short horizons or weak
  coupling; serves as the baseline and as the final polish of the
  continuation.
* :func:`solve_continuation` — homotopy in the blend parameter alpha from
  the canonical pair to the target model, with warm starts, per-segment
  step halving, and an inner source iteration whose fixed point solves the
  next blend level.  Each inner solve freezes the weighted difference
  between the model and the canonical pair as additive sources and applies
  the linear seed, so the stiff canonical core is always handled
  constructively.

The blend family (see :func:`homotopy_coefficients`):

    b_a     = a b     + (1 - a)(-mean_y - y)
    sigma_a = a sigma + (1 - a)(-mean_z - z)
    f_a     = a f     + (1 - a)(+mean_x + x)
    Phi_a   = a Phi   + (1 - a) x
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from mfcontrol.core import (
    BrownianPaths,
    ConfigError,
    DivergenceError,
    NonConvergenceError,
    RegressionError,
    StateView,
    TimeGrid,
)
from mfcontrol.forward_mv import DEFAULT_GUARD, Initial, resolve_initial
from mfcontrol.mf_bsde import BackwardModel, RegressionBasis, solve_mf_bsde

__all__ = [
    "CoupledModel",
    "SolutionTriple",
    "LinearInhomogeneity",
    "ContinuationSchedule",
    "ResidualReport",
    "solve_linear_seed",
    "homotopy_coefficients",
    "negate_forward_model",
    "solve_picard",
    "solve_continuation",
    "residual",
]

Coefficient = Callable[[float, StateView, StateView], np.ndarray]
TerminalMap = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class CoupledModel:
    """Coefficients of a coupled mean-field FBSDE.

    All coefficient callables are vectorized ``(t, law, own) -> array [N]``
    with (x, y, z) slots populated in both views (plus ``u`` when a control
    is threaded through by a caller).  ``driver=None`` means f = 0.
    """

    drift: Coefficient
    diffusion: Coefficient
    driver: Optional[Coefficient]
    terminal_map: TerminalMap
    initial: Initial = 0.0


@dataclass(frozen=True)
class SolutionTriple:
    """Node arrays [M+1, N] for the state, backward value, and integrand."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @property
    def nodes(self) -> int:
        return self.x.shape[0]

    @property
    def particles(self) -> int:
        return self.x.shape[1]


def _triple_rms(a: SolutionTriple, b: SolutionTriple) -> float:
    num = (
        np.square(a.x - b.x).sum()
        + np.square(a.y - b.y).sum()
        + np.square(a.z - b.z).sum()
    )
    cnt = a.x.size + a.y.size + a.z.size
    return float(np.sqrt(num / cnt))


def _apply_terminal(terminal: TerminalMap, x_last: np.ndarray) -> np.ndarray:
    if callable(terminal):
        return np.asarray(terminal(x_last), dtype=float)
    return np.broadcast_to(np.asarray(terminal, dtype=float), x_last.shape).astype(float)


# ======================================================================
# Inhomogeneities (additive sources in the Lemma-style placement)
# ======================================================================

Source = Union[None, float, np.ndarray, Callable[[float], float]]


@dataclass(frozen=True)
class LinearInhomogeneity:
    """Additive perturbations of the canonical linear-monotone system.

    Placement conventions (fixed throughout the package):

    * ``drift_source``     adds ``+gamma`` to the forward drift,
    * ``diffusion_source`` adds ``+varphi`` to the forward diffusion,
    * ``driver_source``    enters the backward integrand with a MINUS sign
      (integrand ``f - phi``),
    * ``terminal_shift``   adds ``+xi`` to the terminal value.

    Sources may be ``None`` (zero), floats, callables of t, or step arrays
    [M, N]; the terminal shift may be ``None``, a float, or an array [N].
    """

    drift_source: Source = None
    diffusion_source: Source = None
    driver_source: Source = None
    terminal_shift: Union[None, float, np.ndarray] = None


def _source_array(src: Source, grid: TimeGrid, n: int) -> np.ndarray:
    m = grid.steps
    if src is None:
        return np.zeros((m, n))
    if callable(src):
        vals = np.asarray([src(k * grid.dt) for k in range(m)], dtype=float)
        return np.broadcast_to(vals[:, None], (m, n)).copy()
    arr = np.asarray(src, dtype=float)
    if arr.ndim == 0:
        return np.full((m, n), float(arr))
    if arr.shape == (m, n):
        return arr
    raise ConfigError(f"source has shape {arr.shape}, expected scalar, callable or {(m, n)}")


def _terminal_array(shift, n: int) -> np.ndarray:
    if shift is None:
        return np.zeros(n)
    arr = np.asarray(shift, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape == (n,):
        return arr
    raise ConfigError(f"terminal shift has shape {arr.shape}, expected scalar or ({n},)")


# ======================================================================
# Linear seed (constructive solution of the canonical pair)
# ======================================================================


def solve_linear_seed(
    inhom: LinearInhomogeneity,
    grid: TimeGrid,
    noise: BrownianPaths,
    x0: Initial = 0.0,
    basis: Optional[RegressionBasis] = None,
    conditioning: Optional[np.ndarray] = None,
):
    """Solve the canonical linear-monotone pair with additive sources.

    The system is

        dX  = (-mean_Y - Y + gamma) dt + (-mean_Z - Z + varphi) dW
        -dY = ( mean_X + X - phi  ) dt - Z dW,    Y_T = X_T + xi

    solved constructively rather than by fixed-point iteration:

    1. an auxiliary backward equation is solved in variables (Y_aux, V),
       where V := mean_Z_aux + 2 Z_aux - varphi is the actual martingale
       integrand (the driver does not involve V, so the standard backward
       sweep applies unchanged):

           Y_aux,T = xi,
           driver  = -mean_Y_aux - Y_aux - phi + gamma;

    2. the auxiliary integrand is recovered algebraically per node:
       mean: Z_aux_bar = (V_bar + varphi_bar)/3, then
       Z_aux = (V + varphi - Z_aux_bar)/2;
    3. a forward Euler pass for X using (Y_aux, Z_aux);
    4. recombination Y = Y_aux + X, Z = Z_aux.

    Parameters
    ----------
    inhom : LinearInhomogeneity
    grid, noise : discretization and driver block
    x0 : initial state (float / array / sampler)
    basis : regression basis for the auxiliary backward sweep
    conditioning : array [M+1, N], optional
        Regression state for the auxiliary sweep.  Defaults to the running
        Brownian path; continuation passes the current iterate's state path
        (whose fixed point carries the sources' information).

    Returns
    -------
    (SolutionTriple, dict)
        The solution and a log carrying the auxiliary backward path
        (key ``"auxiliary_y"``).
    """
    dw = noise.scalar()
    m, n = dw.shape
    if m != grid.steps:
        raise ConfigError(f"noise has {m} steps but grid has {grid.steps}")

    gam = _source_array(inhom.drift_source, grid, n)
    vphi = _source_array(inhom.diffusion_source, grid, n)
    phi = _source_array(inhom.driver_source, grid, n)
    xi = _terminal_array(inhom.terminal_shift, n)
    cond = noise.cumulative() if conditioning is None else conditioning
    if cond.shape != (m + 1, n):
        raise ConfigError(f"conditioning has shape {cond.shape}, expected {(m + 1, n)}")

    def aux_driver(t, law, own):
        k = grid.node_index(t)
        return -law.y - own.y - phi[k] + gam[k]

    y_aux, v = solve_mf_bsde(
        BackwardModel(driver=aux_driver, terminal=xi),
        grid,
        noise,
        cond,
        basis=basis,
    )

    # node-aligned diffusion source (terminal node inherits the last step)
    vphi_nodes = np.vstack([vphi, vphi[-1:]])
    z_bar = (v.mean(axis=1, keepdims=True) + vphi_nodes.mean(axis=1, keepdims=True)) / 3.0
    z_aux = (v + vphi_nodes - z_bar) / 2.0

    dt = grid.dt
    x = np.empty((m + 1, n))
    x[0] = resolve_initial(x0, n, noise.seed)
    for k in range(m):
        drift = -x[k].mean() - x[k] - y_aux[k].mean() - y_aux[k] + gam[k]
        diff = -z_aux[k].mean() - z_aux[k] + vphi[k]
        x[k + 1] = x[k] + drift * dt + diff * dw[k]

    sol = SolutionTriple(x=x, y=y_aux + x, z=z_aux)
    return sol, {"auxiliary_y": y_aux}


# ======================================================================
# Homotopy blends and the (H6) sign normalization
# ======================================================================


def homotopy_coefficients(model: CoupledModel, alpha: float) -> CoupledModel:
    """Blend a model with the canonical linear-monotone pair.

    At ``alpha = 1`` the blend is the model itself; at ``alpha = 0`` it is
    the canonical pair solved by :func:`solve_linear_seed`.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"blend parameter must lie in [0, 1], got {alpha}")
    a = float(alpha)
    base_drift = model.drift
    base_diff = model.diffusion
    base_driver = model.driver
    base_terminal = model.terminal_map

    def drift(t, law, own):
        lin = -law.y - own.y
        return a * base_drift(t, law, own) + (1.0 - a) * lin

    def diffusion(t, law, own):
        lin = -law.z - own.z
        return a * base_diff(t, law, own) + (1.0 - a) * lin

    def driver(t, law, own):
        lin = law.x + own.x
        f = 0.0 if base_driver is None else base_driver(t, law, own)
        return a * f + (1.0 - a) * lin

    def terminal(x_last):
        return a * _apply_terminal(base_terminal, x_last) + (1.0 - a) * x_last

    return CoupledModel(
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal_map=terminal,
        initial=model.initial,
    )


def negate_forward_model(model: CoupledModel) -> CoupledModel:
    """Sign normalization turning a backward-monotone system into a
    forward-monotone one.

    Substituting X~ = -X (keeping Y, Z) conjugates the coefficients as

        b~(x~,...) = -b(-x~,...),   sigma~ = -sigma(-x~,...),
        f~(x~,...) =  f(-x~,...),   Phi~(x~) = Phi(-x~),

    and flips the sign of every monotonicity pairing, so a model satisfying
    the backward condition (H6) is mapped onto one satisfying (H5).  Solve
    the transformed model, then map the solution back via X = -X~.
    """

    def flip(view: StateView) -> StateView:
        x = None if view.x is None else -view.x
        return StateView(x=x, y=view.y, z=view.z, u=view.u)

    base_drift, base_diff, base_driver = model.drift, model.diffusion, model.driver
    base_terminal, base_initial = model.terminal_map, model.initial

    def drift(t, law, own):
        return -base_drift(t, flip(law), flip(own))

    def diffusion(t, law, own):
        return -base_diff(t, flip(law), flip(own))

    driver = None
    if base_driver is not None:

        def driver(t, law, own):  # noqa: F811 - deliberate conditional def
            return base_driver(t, flip(law), flip(own))

    def terminal(x_last):
        return _apply_terminal(base_terminal, -x_last)

    if callable(base_initial):

        def initial(rng, n):
            return -np.asarray(base_initial(rng, n), dtype=float)

    else:
        initial = -np.asarray(base_initial, dtype=float)
        if initial.ndim == 0:
            initial = float(initial)

    return CoupledModel(
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal_map=terminal,
        initial=initial,
    )


# ======================================================================
# Picard iteration (optionally damped / Anderson-accelerated)
# ======================================================================


@dataclass(frozen=True)
class _Sources:
    """Materialized additive sources threaded through a Picard solve."""

    drift: Optional[np.ndarray] = None  # [M, N], added to the drift
    diffusion: Optional[np.ndarray] = None  # [M, N], added to the diffusion
    driver: Optional[np.ndarray] = None  # [M, N], SUBTRACTED in the integrand
    terminal: Optional[np.ndarray] = None  # [N], added to the terminal value


class _AndersonMixer:
    """Type-II Anderson mixing on the flattened backward pair (Y, Z).

    Keeps a short history of (iterate, map output) pairs and extrapolates
    by least squares on residual differences.  On an affine fixed-point map
    this behaves like GMRES restarted at the memory length, which converges
    in regimes where plain Picard does not.
    """

    def __init__(self, memory: int):
        self.memory = int(memory)
        self.us: list = []
        self.gs: list = []

    def step(self, u: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.us.append(u)
        self.gs.append(g)
        if len(self.us) > self.memory + 1:
            self.us.pop(0)
            self.gs.pop(0)
        if len(self.us) < 2:
            return g
        res = [gi - ui for ui, gi in zip(self.us, self.gs)]
        d_res = np.column_stack([res[j + 1] - res[j] for j in range(len(res) - 1)])
        d_g = np.column_stack(
            [self.gs[j + 1] - self.gs[j] for j in range(len(self.gs) - 1)]
        )
        try:
            gamma, *_ = np.linalg.lstsq(d_res, res[-1], rcond=None)
        except np.linalg.LinAlgError:
            return g
        if not np.all(np.isfinite(gamma)):
            return g
        return g - d_g @ gamma


def _forward_sweep(model, grid, dw, y_cur, z_cur, control, sources, guard, seed):
    dt = grid.dt
    m, n = dw.shape
    x = np.empty((m + 1, n))
    x[0] = resolve_initial(model.initial, n, seed)
    for k in range(m):
        u_k = None if control is None else control[k]
        own = StateView(x=x[k], y=y_cur[k], z=z_cur[k], u=u_k)
        law = StateView(
            x=float(x[k].mean()),
            y=float(y_cur[k].mean()),
            z=float(z_cur[k].mean()),
            u=None if u_k is None else float(u_k.mean()),
        )
        t = k * dt
        b = model.drift(t, law, own)
        s = model.diffusion(t, law, own)
        if sources is not None:
            if sources.drift is not None:
                b = b + sources.drift[k]
            if sources.diffusion is not None:
                s = s + sources.diffusion[k]
        x[k + 1] = x[k] + b * dt + s * dw[k]
        peak = np.abs(x[k + 1]).max()
        if not (peak <= guard):
            i = int(np.abs(x[k + 1]).argmax())
            raise DivergenceError(k + 1, i, x[k + 1][i], guard)
    return x


def _backward_sweep(model, grid, noise, x_path, control, sources, basis, carrier=None):
    base_driver = model.driver

    driver = base_driver
    if sources is not None and sources.driver is not None:
        dsrc = sources.driver

        def driver(t, law, own):  # noqa: F811
            val = 0.0 if base_driver is None else base_driver(t, law, own)
            return val - dsrc[grid.node_index(t)]

    def terminal(x_last):
        vals = _apply_terminal(model.terminal_map, x_last)
        if sources is not None and sources.terminal is not None:
            vals = vals + sources.terminal
        return vals

    return solve_mf_bsde(
        BackwardModel(driver=driver, terminal=terminal),
        grid,
        noise,
        x_path,
        basis=basis,
        control=control,
        carrier=carrier,
    )


def _picard(
    model: CoupledModel,
    grid: TimeGrid,
    noise: BrownianPaths,
    tol: float,
    max_iter: int,
    initial_guess: Optional[SolutionTriple],
    damping: float,
    accel_memory: int,
    control: Optional[np.ndarray],
    basis: Optional[RegressionBasis],
    sources: Optional[_Sources],
    guard: float,
    conditioning: Optional[np.ndarray] = None,
):
    dw = noise.scalar()
    m, n = dw.shape
    if m != grid.steps:
        raise ConfigError(f"noise has {m} steps but grid has {grid.steps}")
    if not (0.0 < damping <= 1.0):
        raise ConfigError(f"damping must lie in (0, 1], got {damping}")

    if initial_guess is None:
        cur = SolutionTriple(
            x=np.zeros((m + 1, n)), y=np.zeros((m + 1, n)), z=np.zeros((m + 1, n))
        )
    else:
        cur = initial_guess

    mixer = _AndersonMixer(accel_memory) if accel_memory > 0 else None
    history: list = []
    out = cur
    for _ in range(max_iter):
        x_new = _forward_sweep(
            model, grid, dw, cur.y, cur.z, control, sources, guard, noise.seed
        )
        y_new, z_new = _backward_sweep(
            model, grid, noise, x_new, control, sources, basis, carrier=conditioning
        )
        out = SolutionTriple(x=x_new, y=y_new, z=z_new)
        change = _triple_rms(out, cur)
        history.append(change)
        if change <= tol:
            return out, history
        if mixer is not None:
            flat_u = np.concatenate([cur.y.ravel(), cur.z.ravel()])
            flat_g = np.concatenate([y_new.ravel(), z_new.ravel()])
            nxt = mixer.step(flat_u, flat_g)
            cur = SolutionTriple(
                x=x_new,
                y=nxt[: y_new.size].reshape(y_new.shape),
                z=nxt[y_new.size :].reshape(z_new.shape),
            )
        elif damping < 1.0:
            cur = SolutionTriple(
                x=x_new,
                y=(1.0 - damping) * cur.y + damping * y_new,
                z=(1.0 - damping) * cur.z + damping * z_new,
            )
        else:
            cur = out
    raise NonConvergenceError(
        f"decoupling iteration did not reach tol {tol:.1e} in {max_iter} sweeps "
        f"(last change {history[-1]:.3e})",
        history=history,
        last=out,
    )


def solve_picard(
    model: CoupledModel,
    grid: TimeGrid,
    noise: BrownianPaths,
    tol: float = 1e-6,
    max_iter: int = 50,
    initial_guess: Optional[SolutionTriple] = None,
    damping: float = 1.0,
    accel_memory: int = 0,
    control: Optional[np.ndarray] = None,
    basis: Optional[RegressionBasis] = None,
    guard: float = DEFAULT_GUARD,
    conditioning: Optional[np.ndarray] = None,
):
    """Decoupling (Picard) iteration for a coupled model.

    Each sweep simulates X forward with (Y, Z) frozen at the current
    iterate, then re-solves the backward pair on the new state path; the
    iteration stops when the triple-RMS change is at most ``tol``.  A
    decoupled model therefore converges in exactly two sweeps (the second
    only certifies the first), and an all-zero model in one.

    ``damping`` < 1 relaxes the update; ``accel_memory`` > 0 switches on
    Anderson mixing of the backward pair (used by the continuation driver;
    both defaults leave the plain scheme untouched).  ``conditioning``
    supplies an external regression carrier for the backward sweeps
    (default: the current forward path); systems whose data are exogenous
    functionals of another state path need this to avoid a carrier-feedback
    noise floor.

    Returns ``(SolutionTriple, history)`` where history is the list of
    change norms; raises :class:`NonConvergenceError` (carrying the history
    and last iterate) on budget exhaustion and :class:`DivergenceError` if
    a forward sweep leaves the guard region.
    """
    return _picard(
        model,
        grid,
        noise,
        tol=tol,
        max_iter=max_iter,
        initial_guess=initial_guess,
        damping=damping,
        accel_memory=accel_memory,
        control=control,
        basis=basis,
        sources=None,
        guard=guard,
        conditioning=conditioning,
    )


# ======================================================================
# Continuation in the blend parameter
# ======================================================================


@dataclass(frozen=True)
class ContinuationSchedule:
    """Homotopy schedule.

    ``step`` is the blend increment (checkpoints hit 1 exactly);
    ``inner_tol`` / ``inner_max_iter`` govern the source iteration at each
    level; a failing segment is retried with its step halved, at most
    ``max_halvings`` times across the whole run.  ``picard_tol`` /
    ``picard_max_iter`` / ``accel_memory`` tune the seed-preconditioned
    sweeps inside each level.  ``polish_max_iter`` caps the final plain
    decoupling polish at full blend (0 disables it).
    """

    step: float = 0.1
    inner_tol: float = 1e-6
    inner_max_iter: int = 60
    max_halvings: int = 4
    picard_tol: float = 1e-8
    picard_max_iter: int = 120
    accel_memory: int = 6
    polish_max_iter: int = 100

    def __post_init__(self):
        if not (0.0 < self.step <= 1.0):
            raise ConfigError(f"continuation step must lie in (0, 1], got {self.step}")
        if self.inner_tol <= 0 or self.picard_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.inner_max_iter < 1 or self.picard_max_iter < 1:
            raise ConfigError("iteration caps must be >= 1")
        if self.max_halvings < 0:
            raise ConfigError("max_halvings must be >= 0")
        if self.polish_max_iter < 0:
            raise ConfigError("polish_max_iter must be >= 0")


def _level_views(tri: SolutionTriple, k: int, control, grid):
    u_k = None if control is None else (control[k] if k < control.shape[0] else control[-1])
    own = StateView(x=tri.x[k], y=tri.y[k], z=tri.z[k], u=u_k)
    law = StateView(
        x=float(tri.x[k].mean()),
        y=float(tri.y[k].mean()),
        z=float(tri.z[k].mean()),
        u=None if u_k is None else float(u_k.mean()),
    )
    return own, law


def _blend_sources(model, tri, grid, weight, control):
    """Weighted difference between the model and the canonical pair,
    evaluated on a frozen solution triple and packaged as additive sources.

    Because  a*coef + (1-a)*canonical = canonical + a*(coef - canonical),
    the a-blend of the model equals the canonical pair driven by these
    sources at weight a; the same construction at weight delta gives the
    level-advance sources of the continuation.
    """
    m = grid.steps
    n = tri.particles
    dt = grid.dt
    drift_src = np.empty((m, n))
    diff_src = np.empty((m, n))
    drv_src = np.empty((m, n))
    for k in range(m):
        own, law = _level_views(tri, k, control, grid)
        t = k * dt
        b_full = np.broadcast_to(np.asarray(model.drift(t, law, own), dtype=float), (n,))
        s_full = np.broadcast_to(np.asarray(model.diffusion(t, law, own), dtype=float), (n,))
        if model.driver is None:
            f_full = np.zeros(n)
        else:
            f_full = np.broadcast_to(np.asarray(model.driver(t, law, own), dtype=float), (n,))
        drift_src[k] = weight * (tri.y[k] + tri.y[k].mean() + b_full)
        diff_src[k] = weight * (tri.z[k] + tri.z[k].mean() + s_full)
        # enters the integrand as "- driver_source"
        drv_src[k] = -weight * (f_full - tri.x[k].mean() - tri.x[k])
    term_src = weight * (_apply_terminal(model.terminal_map, tri.x[m]) - tri.x[m])
    return _Sources(drift=drift_src, diffusion=diff_src, driver=drv_src, terminal=term_src)


def _combine_sources(a: Optional[_Sources], b: Optional[_Sources]) -> Optional[_Sources]:
    if a is None:
        return b
    if b is None:
        return a

    def add(u, v):
        if u is None:
            return v
        if v is None:
            return u
        return u + v

    return _Sources(
        drift=add(a.drift, b.drift),
        diffusion=add(a.diffusion, b.diffusion),
        driver=add(a.driver, b.driver),
        terminal=add(a.terminal, b.terminal),
    )


def _zero_triple(m: int, n: int) -> SolutionTriple:
    return SolutionTriple(
        x=np.zeros((m + 1, n)), y=np.zeros((m + 1, n)), z=np.zeros((m + 1, n))
    )


def _seed_iteration(
    model: CoupledModel,
    grid: TimeGrid,
    noise: BrownianPaths,
    weight: float,
    ext: Optional[_Sources],
    warm: Optional[SolutionTriple],
    tol: float,
    max_iter: int,
    memory: int,
    control: Optional[np.ndarray],
    basis: Optional[RegressionBasis],
    conditioning: Optional[np.ndarray] = None,
):
    """Solve the ``weight``-blend of the model (plus external sources) by a
    seed-preconditioned fixed point.

    Each sweep freezes the non-canonical bracket -- the weighted difference
    between the model coefficients and the canonical pair -- at the current
    iterate and solves the resulting sourced canonical system exactly with
    :func:`solve_linear_seed`.  Handling the stiff canonical core implicitly
    keeps the sweep map's spectrum small (it vanishes entirely at weight 0
    and for canonical-equal models); Anderson mixing covers blends whose
    bracket is not a plain contraction.
    """
    dw = noise.scalar()
    m, n = dw.shape
    cur = warm if warm is not None else _zero_triple(m, n)
    mixer = _AndersonMixer(memory) if memory > 0 else None
    history: list = []
    out = cur
    for _ in range(max_iter):
        src = _combine_sources(_blend_sources(model, cur, grid, weight, control), ext)
        inhom = LinearInhomogeneity(
            drift_source=src.drift,
            diffusion_source=src.diffusion,
            driver_source=src.driver,
            terminal_shift=src.terminal,
        )
        if conditioning is not None:
            cond = conditioning
        else:
            cond = cur.x if float(np.ptp(cur.x)) > 0.0 else None
        out, _ = solve_linear_seed(
            inhom, grid, noise, x0=model.initial, basis=basis, conditioning=cond
        )
        change = _triple_rms(out, cur)
        history.append(change)
        if not np.isfinite(change):
            raise NonConvergenceError(
                f"seed-preconditioned sweep produced non-finite iterates at "
                f"blend weight {weight:.3f}",
                history=history,
                last=out,
            )
        if change <= tol:
            return out, history
        if mixer is not None:
            flat_u = np.concatenate([cur.x.ravel(), cur.y.ravel(), cur.z.ravel()])
            flat_g = np.concatenate([out.x.ravel(), out.y.ravel(), out.z.ravel()])
            nxt = mixer.step(flat_u, flat_g)
            sz = out.x.size
            cur = SolutionTriple(
                x=nxt[:sz].reshape(out.x.shape),
                y=nxt[sz : 2 * sz].reshape(out.y.shape),
                z=nxt[2 * sz :].reshape(out.z.shape),
            )
        else:
            cur = out
    raise NonConvergenceError(
        f"seed-preconditioned iteration did not reach tol {tol:.1e} in "
        f"{max_iter} sweeps at blend weight {weight:.3f} "
        f"(last change {history[-1]:.3e})",
        history=history,
        last=out,
    )


def _continuation_step(
    model, grid, noise, alpha0, delta, start, sched, basis, control, guard,
    conditioning=None,
):
    """Advance the homotopy from alpha0 to alpha0 + delta via the source
    iteration; returns (solution, inner change history).

    Outer loop: freeze the delta-weighted advance sources at the current
    iterate.  Inner solve: the alpha0-blend with those sources, via the
    seed-preconditioned fixed point (exact in one sweep at alpha0 = 0).
    """
    cur = start
    changes: list = []
    for _ in range(sched.inner_max_iter):
        sources = _blend_sources(model, cur, grid, delta, control)
        nxt, _ = _seed_iteration(
            model,
            grid,
            noise,
            weight=alpha0,
            ext=sources,
            warm=cur,
            tol=sched.picard_tol,
            max_iter=sched.picard_max_iter,
            memory=sched.accel_memory,
            control=control,
            basis=basis,
            conditioning=conditioning,
        )
        change = _triple_rms(nxt, cur)
        changes.append(change)
        cur = nxt
        if change <= sched.inner_tol:
            return cur, changes
    raise NonConvergenceError(
        f"continuation source iteration stalled at blend {alpha0:.3f} "
        f"(+{delta:.3f}); last change {changes[-1]:.3e}",
        history=changes,
        last=cur,
    )


def solve_continuation(
    model: CoupledModel,
    grid: TimeGrid,
    noise: BrownianPaths,
    schedule: Optional[ContinuationSchedule] = None,
    basis: Optional[RegressionBasis] = None,
    control: Optional[np.ndarray] = None,
    guard: float = DEFAULT_GUARD,
    conditioning: Optional[np.ndarray] = None,
):
    """Homotopy continuation from the canonical pair to the target model.

    Starts from the constructive linear seed at blend 0, then repeatedly
    advances the blend by the schedule step, warm-starting each level from
    the previous solution.  Each advance runs a source iteration whose
    fixed point solves the next blend level; if it stalls (or a sweep
    diverges) the failing segment is retried with the step halved, up to
    ``schedule.max_halvings`` halvings overall.

    After full blend is reached, a decoupling polish (:func:`solve_picard`
    warm-started at the homotopy output with the schedule's Anderson
    memory, run to the schedule's inner tolerance) is attempted.  Where
    the — possibly accelerated — decoupling map converges, this lands the
    answer on the fixed point of the standard discrete scheme, so the two
    solver routes agree to solver tolerance there (the homotopy acting as
    a globalizer); without the acceleration the plain map's slow modes at
    longer horizons would stall the polish inside its budget and leave the
    O(dt)-different homotopy representation in place.  Where the map
    diverges outright the polish fails fast and the homotopy
    representation is returned unchanged; the attempt is recorded in the
    log either way.  The polish deliberately does not chase tolerances
    below the inner tolerance: the decoupling map's regression noise modes
    carry a weak feedback instability, so it has a resolution-dependent
    change floor (around 1e-7 at desk scales) below which sweeps no longer
    contract.

    ``conditioning`` supplies an external regression carrier for every
    backward sweep in the run (seed, levels, polish).  The default carrier
    is the evolving forward path itself, which is right for self-contained
    systems; equations driven by exogenous random data (frozen arrays from
    another trajectory) need the generating path here, since their own
    forward variable cannot explain those data and the carrier-feedback
    noise floor then sits far above the inner tolerances.

    Returns ``(SolutionTriple, log)`` where the log is a list of per-level
    dicts (blend reached, inner change norms, halving events, polish
    outcome).
    """
    sched = schedule or ContinuationSchedule()
    seed_sol, seed_log = solve_linear_seed(
        LinearInhomogeneity(), grid, noise, x0=model.initial, basis=basis,
        conditioning=conditioning,
    )
    log: list = [{"alpha": 0.0, "seed": True}]
    cur = seed_sol
    alpha = 0.0
    delta = sched.step
    halvings = 0
    while alpha < 1.0 - 1e-12:
        step = min(delta, 1.0 - alpha)
        try:
            nxt, changes = _continuation_step(
                model, grid, noise, alpha, step, cur, sched, basis, control, guard,
                conditioning=conditioning,
            )
        except (NonConvergenceError, DivergenceError, RegressionError) as exc:
            halvings += 1
            if halvings > sched.max_halvings:
                raise NonConvergenceError(
                    f"continuation failed at blend {alpha:.3f} after "
                    f"{sched.max_halvings} step halvings (last step {step:.4f}); "
                    f"try a smaller schedule step",
                    history=[rec.get("changes", []) for rec in log if "changes" in rec],
                    last=cur,
                ) from exc
            delta = step / 2.0
            log.append({"alpha": alpha, "halved_to": delta})
            continue
        alpha = alpha + step
        cur = nxt
        log.append({"alpha": alpha, "changes": changes})
    if sched.polish_max_iter > 0:
        try:
            cur, polish_hist = solve_picard(
                model,
                grid,
                noise,
                tol=sched.inner_tol,
                max_iter=sched.polish_max_iter,
                initial_guess=cur,
                accel_memory=sched.accel_memory,
                control=control,
                basis=basis,
                guard=guard,
                conditioning=conditioning,
            )
        except (NonConvergenceError, DivergenceError, RegressionError):
            log.append({"alpha": 1.0, "polish": "rejected"})
        else:
            log.append({"alpha": 1.0, "polish": polish_hist})
    return cur, log


# ======================================================================
# Discrete residuals
# ======================================================================


@dataclass(frozen=True)
class ResidualReport:
    """RMS of the pathwise discrete defects of a solution triple."""

    forward: float
    backward: float
    terminal: float

    def worst(self) -> float:
        return max(self.forward, self.backward, self.terminal)


def residual(
    model: CoupledModel,
    sol: SolutionTriple,
    grid: TimeGrid,
    noise: BrownianPaths,
    control: Optional[np.ndarray] = None,
) -> ResidualReport:
    """Pathwise defects of ``sol`` in the discrete equations.

    Per step k the forward defect is
    ``X[k+1] - X[k] - b dt - sigma dW`` and the backward defect is
    ``Y[k] - Y[k+1] - f dt + Z[k] dW`` (coefficients evaluated on the
    solution's own snapshot at k); the terminal defect is
    ``Y[M] - Phi(X[M])``.  Each is reported as an RMS over (step,
    particle).  Note the backward defect of a least-squares solution has an
    irreducible sampling floor whenever Y carries a genuine martingale
    part; it vanishes only for deterministic backward components.
    """
    dw = noise.scalar()
    m, n = dw.shape
    dt = grid.dt
    fwd = np.empty((m, n))
    bwd = np.empty((m, n))
    for k in range(m):
        own, law = _level_views(sol, k, control, grid)
        t = k * dt
        b = model.drift(t, law, own)
        s = model.diffusion(t, law, own)
        f = 0.0 if model.driver is None else model.driver(t, law, own)
        fwd[k] = sol.x[k + 1] - sol.x[k] - b * dt - s * dw[k]
        bwd[k] = sol.y[k] - sol.y[k + 1] - f * dt + sol.z[k] * dw[k]
    term = sol.y[m] - _apply_terminal(model.terminal_map, sol.x[m])
    return ResidualReport(
        forward=float(np.sqrt(np.mean(np.square(fwd)))),
        backward=float(np.sqrt(np.mean(np.square(bwd)))),
        terminal=float(np.sqrt(np.mean(np.square(term)))),
    )
