"""Shared infrastructure: time grids, particle ensembles, Brownian drivers.

Conventions used across the package
-----------------------------------
* Uniform time grid with ``M`` steps on ``[0, T]``; node ``k`` is ``k*dt``.
* A path process is a plain numpy array of shape ``[M+1, N]`` (node-major,
  one column per particle).  Brownian increments have shape ``[M, N]`` for a
  scalar driver (``[M, N, d]`` in general).
* Mean-field ("law") arguments are realized as snapshot statistics of the
  particle ensemble: coefficient callables receive ``(t, law, own)`` where
  ``law`` is a :class:`StateView` of empirical means and ``own`` is a
  :class:`StateView` of per-particle arrays.  The independent-copy average
  E'[phi] is the same-ensemble empirical mean (self term included; the
  O(1/N) bias this introduces is accepted at desk scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np

__all__ = [
    "ConfigError",
    "DivergenceError",
    "NonConvergenceError",
    "RegressionError",
    "NumericalDomainError",
    "TimeGrid",
    "make_time_grid",
    "EnsembleConfig",
    "BrownianPaths",
    "sample_brownian",
    "StateView",
    "view_means",
    "EnsembleSnapshot",
    "PathProcess",
    "empirical_mean_field",
]


# ======================================================================
# Errors
# ======================================================================


class ConfigError(ValueError):
    """Invalid configuration (bad grid, ensemble, schedule, sign constraint)."""


class DivergenceError(RuntimeError):
    """A simulated path left the numerical guard region."""

    def __init__(self, step: int, particle: int, value: float, guard: float):
        self.step = int(step)
        self.particle = int(particle)
        self.value = float(value)
        self.guard = float(guard)
        super().__init__(
            f"path diverged at step {step}, particle {particle}: "
            f"|{value:.3e}| > guard {guard:.1e}"
        )


class NonConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget; carries the change history."""

    def __init__(self, message: str, history=None, last=None):
        self.history = list(history) if history is not None else []
        self.last = last
        super().__init__(message)


class RegressionError(RuntimeError):
    """Conditional-expectation regression failed even after ridge escalation."""

    def __init__(self, message: str, condition_number: float = float("nan")):
        self.condition_number = float(condition_number)
        super().__init__(message)


class NumericalDomainError(RuntimeError):
    """Non-finite values encountered where finite numbers are required."""


# ======================================================================
# Time grid
# ======================================================================


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with ``steps`` Euler steps.

    Attributes
    ----------
    horizon : float
        Terminal time T > 0.
    steps : int
        Number of steps M >= 1; the grid has M+1 nodes.
    """

    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0.0 and np.isfinite(self.horizon)):
            raise ConfigError(f"horizon must be a finite positive float, got {self.horizon}")
        if not (isinstance(self.steps, (int, np.integer)) and self.steps >= 1):
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def node_index(self, t: float) -> int:
        """Nearest node index for a node-valued time (guards float round-trip)."""
        k = int(round(t / self.dt))
        return min(max(k, 0), self.steps)


def make_time_grid(horizon: float, steps: int) -> TimeGrid:
    """Validated uniform time grid (raises :class:`ConfigError` on bad input)."""
    return TimeGrid(float(horizon), int(steps))


# ======================================================================
# Ensembles and Brownian drivers
# ======================================================================


@dataclass(frozen=True)
class EnsembleConfig:
    """Particle-ensemble configuration.

    Attributes
    ----------
    particles : int
        Ensemble size N >= 2 (empirical means need at least two samples).
    brownian_dim : int
        Driver dimension d >= 1.  The solver stack currently requires d = 1;
        :func:`sample_brownian` itself supports any d.
    seed : int
        Counter-based RNG key; equal seeds give bit-identical increments.
    """

    particles: int
    brownian_dim: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (isinstance(self.particles, (int, np.integer)) and self.particles >= 2):
            raise ConfigError(f"particles must be an integer >= 2, got {self.particles}")
        if not (isinstance(self.brownian_dim, (int, np.integer)) and self.brownian_dim >= 1):
            raise ConfigError(f"brownian_dim must be an integer >= 1, got {self.brownian_dim}")


@dataclass(frozen=True)
class BrownianPaths:
    """Increment block for one ensemble: ``increments[k, i, j]`` is particle
    i's j-th driver increment over step k.  ``dt`` is the step used to scale."""

    increments: np.ndarray
    dt: float
    seed: int

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def particles(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def scalar(self) -> np.ndarray:
        """View of shape [M, N] for the d = 1 case used by the solver stack."""
        if self.dim != 1:
            raise ConfigError(
                f"solver stack requires a scalar Brownian driver, got d = {self.dim}"
            )
        return self.increments[:, :, 0]

    def cumulative(self) -> np.ndarray:
        """Brownian path W at the grid nodes, shape [M+1, N] (d = 1 only)."""
        dw = self.scalar()
        w = np.empty((self.steps + 1, self.particles))
        w[0] = 0.0
        np.cumsum(dw, axis=0, out=w[1:])
        return w


def sample_brownian(grid: TimeGrid, cfg: EnsembleConfig) -> BrownianPaths:
    """Draw the full increment block for (grid, cfg) in one shot.

    Uses a counter-based Philox generator keyed by ``cfg.seed`` so the stream
    is reproducible bit-for-bit regardless of any later worker settings.
    """
    gen = np.random.Generator(np.random.Philox(key=cfg.seed))
    shape = (grid.steps, cfg.particles, cfg.brownian_dim)
    incr = gen.standard_normal(shape) * np.sqrt(grid.dt)
    return BrownianPaths(increments=incr, dt=grid.dt, seed=cfg.seed)


# ======================================================================
# State views (law statistics / per-particle slots)
# ======================================================================


@dataclass(frozen=True)
class StateView:
    """Named slots for the state tuple (x, y, z) plus control u.

    The same container serves two roles: as ``law`` it carries empirical
    means (floats, or arrays broadcastable against the ensemble axis); as
    ``own`` it carries per-particle arrays.  Absent slots are ``None``.
    """

    x: Any = None
    y: Any = None
    z: Any = None
    u: Any = None


def view_means(own: StateView) -> StateView:
    """Empirical means of the populated slots of ``own``."""

    def m(v):
        return None if v is None else float(np.mean(v))

    return StateView(x=m(own.x), y=m(own.y), z=m(own.z), u=m(own.u))


@dataclass(frozen=True)
class EnsembleSnapshot:
    """One time-slice of the ensemble: per-particle values plus the node time."""

    t: float
    values: np.ndarray  # [N] or [N, c] for tuple-valued states

    @property
    def particles(self) -> int:
        return self.values.shape[0]

    def mean(self):
        return self.values.mean(axis=0)


# A path process is just an array [M+1, N]; the alias documents intent in
# signatures without wrapping numpy.
PathProcess = np.ndarray


# ======================================================================
# Empirical mean-field operator
# ======================================================================


def empirical_mean_field(
    snapshot: EnsembleSnapshot,
    kernel: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    own: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Empirical independent-copy average of a two-argument kernel.

    For each own-value ``own[i]`` computes ``mean_j kernel(t, values[j], own[i])``
    — the particle discretization of E'[phi(t, X', x)] at x = own[i].  The
    self term j = i is included (O(1/N) bias, accepted).

    Parameters
    ----------
    snapshot : EnsembleSnapshot
        Primed-slot ensemble (values [N] or [N, c]).
    kernel : callable
        Vectorized ``phi(t, primed, own)``; must broadcast over a leading
        primed axis and a trailing own axis.
    own : array or None
        Own-slot values [K]; defaults to the snapshot's own values.

    Returns
    -------
    ndarray, shape [K]

    Notes
    -----
    This is the general O(N*K) two-slot form.  The solver stack normally uses
    the cheaper statistics form (coefficients of the empirical mean) instead;
    see the module docstring.
    """
    if own is None:
        own = snapshot.values
    primed = snapshot.values
    # broadcast primed on axis 0, own on axis 1
    vals = kernel(snapshot.t, primed[:, None], own[None, :])
    out = np.asarray(vals).mean(axis=0)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NumericalDomainError(
            f"empirical mean-field average is non-finite at own index {bad}"
        )
    return out
