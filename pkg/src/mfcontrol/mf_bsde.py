"""Mean-field BSDE solver via least-squares Monte Carlo.

Backward recursion on the particle ensemble for

    Y_t = xi + int_t^T fbar(s, law(Y,Z), Y_s, Z_s) ds - int_t^T Z_s dW_s,

where ``fbar`` may depend on the law (empirical means) of (X, Y, Z) and on a
frozen conditioning path X.  One step of the scheme:

    Ey[k] = Reg[ Y[k+1] | X[k] ]
    Z[k]  = Reg[ (Y[k+1] - Ey[k]) * dW[k] | X[k] ] / dt
    Y[k]  = Ey[k]  +  fbar(t_k, ...) * dt

with conditional expectations fitted by ridge-regularized polynomial
regression on the conditioning state, and the implicit (Y[k], Z[k]) inside
``fbar`` handled by a predictor (values at k+1) plus corrector re-evaluations.
Subtracting the fitted level Ey[k] from the integrand targets changes nothing
in the estimated conditional expectation (the shift is state-measurable, so
its true conditional product with the increment is zero) but removes the
level of Y from the target variance: the integrand estimate then degrades
with the conditional spread of Y[k+1], not with its magnitude, and a constant
terminal yields Z = 0 exactly.  The terminal Z node is not identified by the
scheme and is set to Z[M-1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from mfcontrol.core import (
    BrownianPaths,
    ConfigError,
    RegressionError,
    StateView,
    TimeGrid,
)

__all__ = [
    "RegressionBasis",
    "default_polynomial_basis",
    "regress_conditional_expectation",
    "BackwardModel",
    "solve_mf_bsde",
]

#: ridge escalation: multiply by 10 at most this many times before giving up
MAX_RIDGE_ESCALATIONS = 8
#: normal-equation condition number beyond which a fit is rejected
COND_LIMIT = 1e12


@dataclass(frozen=True)
class RegressionBasis:
    """Feature map for conditional-expectation regressions.

    ``features(x)`` maps a conditioning snapshot [N] to a design matrix
    [N, B].  ``ridge_scale`` sets the ridge weight lambda = ridge_scale * N.
    """

    features: Callable[[np.ndarray], np.ndarray]
    size: int
    ridge_scale: float = 1e-8
    name: str = "basis"


def default_polynomial_basis(degree: int = 3, ridge_scale: float = 1e-8) -> RegressionBasis:
    """Constant plus polynomials up to ``degree`` in the standardized state.

    Standardizing the conditioning values (same span, better conditioning)
    keeps the normal equations well-scaled without changing what the basis
    can represent.
    """
    if degree < 0:
        raise ConfigError(f"degree must be >= 0, got {degree}")

    def features(x: np.ndarray) -> np.ndarray:
        spread = x.std()
        if spread > 0.0:
            z = (x - x.mean()) / spread
        else:
            z = x - x.mean()
        return np.polynomial.polynomial.polyvander(z, degree)

    return RegressionBasis(
        features=features,
        size=degree + 1,
        ridge_scale=ridge_scale,
        name=f"poly{degree}",
    )


def regress_conditional_expectation(
    features: np.ndarray,
    targets: np.ndarray,
    ridge: float,
) -> np.ndarray:
    """Ridge-regularized least squares, returning basis coefficients.

    Solves (F'F + lambda I) c = F' targets; on an ill-conditioned system the
    ridge weight is escalated by factors of 10 (at most
    ``MAX_RIDGE_ESCALATIONS`` times) before a :class:`RegressionError` is
    raised carrying the offending condition number.

    ``targets`` may be [N] or [N, R] for several regressions sharing one
    design matrix.
    """
    f = np.asarray(features, dtype=float)
    if f.ndim != 2:
        raise ConfigError(f"features must be 2-d, got shape {f.shape}")
    gram = f.T @ f
    rhs = f.T @ np.asarray(targets, dtype=float)
    lam = float(ridge)
    eye = np.eye(f.shape[1])
    cond = np.inf
    for _ in range(MAX_RIDGE_ESCALATIONS + 1):
        g = gram + lam * eye
        cond = np.linalg.cond(g)
        if np.isfinite(cond) and cond <= COND_LIMIT:
            try:
                return np.linalg.solve(g, rhs)
            except np.linalg.LinAlgError:
                pass  # fall through to escalation
        lam = max(lam, 1e-300) * 10.0
    raise RegressionError(
        f"conditional-expectation regression ill-conditioned (cond ~ {cond:.3e}) "
        f"even after {MAX_RIDGE_ESCALATIONS} ridge escalations",
        condition_number=cond,
    )


Terminal = Union[np.ndarray, float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class BackwardModel:
    """Driver and terminal condition of a mean-field BSDE.

    ``driver(t, law, own)`` is vectorized over particles with slots
    (x, y, z, u) populated in both views; ``None`` means a zero driver.
    ``terminal`` is an array [N], a float, or a map of the terminal
    conditioning state.
    """

    driver: Optional[Callable[[float, StateView, StateView], np.ndarray]]
    terminal: Terminal


def _terminal_values(terminal: Terminal, x_last: np.ndarray, n: int) -> np.ndarray:
    if callable(terminal):
        vals = np.asarray(terminal(x_last), dtype=float)
    else:
        vals = np.broadcast_to(np.asarray(terminal, dtype=float), (n,)).astype(float)
    if vals.shape != (n,):
        raise ConfigError(f"terminal values have shape {vals.shape}, expected ({n},)")
    return vals


def solve_mf_bsde(
    model: BackwardModel,
    grid: TimeGrid,
    noise: BrownianPaths,
    conditioning: np.ndarray,
    basis: Optional[RegressionBasis] = None,
    control: Optional[np.ndarray] = None,
    inner_passes: int = 1,
    carrier: Optional[np.ndarray] = None,
):
    """Backward least-squares Monte Carlo sweep.

    Parameters
    ----------
    model : BackwardModel
    grid : TimeGrid
    noise : BrownianPaths
        Same increment block that generated the conditioning path.
    conditioning : array [M+1, N]
        Adapted path threaded into the driver's ``own.x`` / ``law.x`` slots
        and the terminal map (and regressed on, unless ``carrier`` is given).
    basis : RegressionBasis, optional
        Defaults to the standardized cubic-polynomial basis.
    control : array [M, N], optional
        Threaded into the driver's ``own.u`` / ``law.u`` slots.
    inner_passes : int
        Corrector re-evaluations for the implicit (Y[k], Z[k]) in the driver
        (the predictor always evaluates at the k+1 values first).
    carrier : array [M+1, N], optional
        Separate adapted path for the conditional-expectation regressions.
        Useful when the equation's own forward variable is a poor carrier of
        the filtration (e.g. multiplier equations whose data are exogenous
        functionals of another state path).

    Returns
    -------
    (Y, Z) : arrays [M+1, N]
    """
    if basis is None:
        basis = default_polynomial_basis()
    dw = noise.scalar()
    m, n = dw.shape
    if m != grid.steps:
        raise ConfigError(f"noise has {m} steps but grid has {grid.steps}")
    if conditioning.shape != (m + 1, n):
        raise ConfigError(
            f"conditioning has shape {conditioning.shape}, expected {(m + 1, n)}"
        )
    if control is not None and control.shape != (m, n):
        raise ConfigError(f"control has shape {control.shape}, expected {(m, n)}")
    if inner_passes < 0:
        raise ConfigError(f"inner_passes must be >= 0, got {inner_passes}")
    if carrier is None:
        carrier = conditioning
    elif carrier.shape != (m + 1, n):
        raise ConfigError(f"carrier has shape {carrier.shape}, expected {(m + 1, n)}")

    dt = grid.dt
    lam = basis.ridge_scale * n
    y = np.empty((m + 1, n))
    z = np.empty((m + 1, n))
    y[m] = _terminal_values(model.terminal, conditioning[m], n)

    for k in range(m - 1, -1, -1):
        feats = basis.features(carrier[k])
        ey = feats @ regress_conditional_expectation(feats, y[k + 1], lam)
        # integrand fit on level-centered targets (control variate: the
        # in-span shift leaves the estimand unchanged, kills the Y-level
        # component of the target noise)
        zfit = regress_conditional_expectation(feats, (y[k + 1] - ey) * dw[k], lam)
        z[k] = (feats @ zfit) / dt

        if model.driver is None:
            y[k] = ey
            continue

        t = k * dt
        x_k = conditioning[k]
        u_k = None if control is None else control[k]
        x_mean = float(x_k.mean())
        z_mean = float(z[k].mean())
        u_mean = None if u_k is None else float(u_k.mean())
        y_val = y[k + 1]  # predictor: implicit Y evaluated at the k+1 values
        for _ in range(inner_passes + 1):
            law = StateView(x=x_mean, y=float(y_val.mean()), z=z_mean, u=u_mean)
            own = StateView(x=x_k, y=y_val, z=z[k], u=u_k)
            y_val = ey + model.driver(t, law, own) * dt
        y[k] = y_val

    z[m] = z[m - 1]  # terminal integrand is not identified by the scheme
    return y, z
