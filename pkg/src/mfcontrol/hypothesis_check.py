"""Sampling-based certification of the package's standing conditions.

The solvers and optimality results in this package are organized around
three numbered standing conditions on a coupled model's coefficient map

    F(t, law, own) = (-f, b, sigma),   paired against  own = (x, y, z)
    via  <dF, du> = <-df, dx> + <db, dy> + <dsigma, dz>,

where ``law`` carries statistics (means) of an independent copy of the
state triple:

* (H4) — Lipschitz: |F(t, A) - F(t, B)| <= C |A - B| jointly in all six
  slot values (law and own treated as free coordinates), and likewise for
  the terminal map.
* (H5) — forward monotonicity: E<dF, du> <= -C1 E|du|^2 for coupled random
  triples (law slots tied to the distribution of the own slots), together
  with <dPhi(x), dx> >= mu1 |dx|^2, for positive constants C1, mu1.
* (H6) — the mirror image: E<dF, du> >= C1 E|du|^2 and
  <dPhi(x), dx> <= -mu1 |dx|^2 (satisfied by adjoint systems; models of
  this type are solved after a sign normalization).

The checkers are samplers, not provers: a reported violation is a true,
re-evaluable counterexample, while a "pass" is evidence at the sampled
radius.  Because the expectation in (H5)/(H6) ties the law slots to the
own-slot distribution, each monotonicity sample is a nested cloud: a pair
of coupled atom sets whose empirical means feed the law slots.  Cross
terms with the antisymmetric law placement then cancel in the cloud
average exactly as they do in expectation — testing the inequality with
free law slots instead would reject models whose monotonicity genuinely
lives under the expectation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from mfcontrol.core import ConfigError, StateView
from mfcontrol.fbsde_solver import CoupledModel, _apply_terminal

__all__ = [
    "UniformPairSampler",
    "MonotonicityReport",
    "check_H4",
    "check_H5",
    "check_H6",
    "check_convexity",
]

#: outer samples evaluated per vectorized block
_CHUNK = 8192

#: pairs closer than this are skipped in ratio estimates
_MIN_DISTANCE = 1e-9

#: relative growth of the Lipschitz estimate between half and full radius
#: that is flagged as a non-Lipschitz trend
_TREND_MARGIN = 1.15


@dataclass(frozen=True)
class UniformPairSampler:
    """Uniform coordinate-wise sampler on ``[-radius, radius]``.

    Any object with a ``radius`` attribute and a ``draw(rng, *shape)``
    method can stand in for it.
    """

    radius: float = 10.0

    def draw(self, rng: np.random.Generator, *shape: int) -> np.ndarray:
        return self.radius * (2.0 * rng.random(shape) - 1.0)


@dataclass(frozen=True)
class MonotonicityReport:
    """Outcome of a sampling certification run.

    ``lipschitz`` / ``lipschitz_terminal`` carry the estimated constant
    for (H4); ``monotonicity`` is the estimated pairing constant (C1-hat)
    and ``terminal_monotonicity`` the estimated terminal constant
    (mu1-hat) for (H5)/(H6).  ``worst_pair`` is the worst sampled witness
    (re-evaluable: it stores the raw sample values and the measured
    ratio).  ``trend_flag`` marks a Lipschitz estimate that grew
    materially from half to full radius.
    """

    check: str
    passed: bool
    lipschitz: Optional[float] = None
    lipschitz_terminal: Optional[float] = None
    monotonicity: Optional[float] = None
    terminal_monotonicity: Optional[float] = None
    violations: int = 0
    worst_pair: Optional[dict] = None
    n_samples: int = 0
    radius: float = 0.0
    nested: int = 0
    trend_flag: bool = False


# ======================================================================
# Shared evaluation helpers
# ======================================================================


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _coefficients(model: CoupledModel, t, law_xyz, own_xyz):
    """Evaluate (f, b, sigma) on flat arrays, broadcasting constants."""
    law = StateView(x=law_xyz[0], y=law_xyz[1], z=law_xyz[2])
    own = StateView(x=own_xyz[0], y=own_xyz[1], z=own_xyz[2])
    shape = own_xyz[0].shape
    b = np.broadcast_to(np.asarray(model.drift(t, law, own), dtype=float), shape)
    s = np.broadcast_to(np.asarray(model.diffusion(t, law, own), dtype=float), shape)
    if model.driver is None:
        f = np.zeros(shape)
    else:
        f = np.broadcast_to(np.asarray(model.driver(t, law, own), dtype=float), shape)
    return f, b, s


def _terminal(model: CoupledModel, x: np.ndarray) -> np.ndarray:
    return _apply_terminal(model.terminal_map, x)


def _chunks(total: int):
    done = 0
    while done < total:
        take = min(_CHUNK, total - done)
        yield take
        done += take


# ======================================================================
# (H4): joint Lipschitz estimate
# ======================================================================


def _lipschitz_pass(model, sampler, n_samples, time, rng, scale):
    """Max ratio |dF|/|dTheta| over pairs of free six-coordinate points."""
    best = 0.0
    witness = None
    for c in _chunks(n_samples):
        th1 = scale * sampler.draw(rng, c, 6)
        th2 = scale * sampler.draw(rng, c, 6)
        f1, b1, s1 = _coefficients(
            model, time, (th1[:, 0], th1[:, 1], th1[:, 2]), (th1[:, 3], th1[:, 4], th1[:, 5])
        )
        f2, b2, s2 = _coefficients(
            model, time, (th2[:, 0], th2[:, 1], th2[:, 2]), (th2[:, 3], th2[:, 4], th2[:, 5])
        )
        num = np.sqrt((f1 - f2) ** 2 + (b1 - b2) ** 2 + (s1 - s2) ** 2)
        den = np.sqrt(np.sum((th1 - th2) ** 2, axis=1))
        ok = den >= _MIN_DISTANCE
        ratios = np.where(ok, num / np.maximum(den, _MIN_DISTANCE), -np.inf)
        i = int(np.argmax(ratios))
        if ratios[i] > best:
            best = float(ratios[i])
            witness = {"kind": "coefficients", "point1": th1[i].copy(), "point2": th2[i].copy(), "ratio": best}
    return best, witness


def _terminal_lipschitz_pass(model, sampler, n_samples, rng, scale):
    best = 0.0
    for c in _chunks(n_samples):
        x1 = scale * sampler.draw(rng, c)
        x2 = scale * sampler.draw(rng, c)
        num = np.abs(_terminal(model, x1) - _terminal(model, x2))
        den = np.abs(x1 - x2)
        ok = den >= _MIN_DISTANCE
        if np.any(ok):
            best = max(best, float((num[ok] / den[ok]).max()))
    return best


def check_H4(
    model: CoupledModel,
    sampler: Optional[UniformPairSampler] = None,
    n_samples: int = 100_000,
    time: float = 0.0,
    seed: int = 0,
) -> MonotonicityReport:
    """Estimate the joint Lipschitz constant of (f, b, sigma) and of the
    terminal map by a max ratio over sampled point pairs.

    All six slot values (law and own) are treated as free coordinates, so
    the estimate bounds the coefficient map's sensitivity to both its own
    state and the statistics it receives.  The pass is repeated at half
    the sampler radius; an estimate that grows materially with radius is
    flagged as a non-Lipschitz trend (quadratic growth, for example) and
    fails the report even though every individual ratio is finite.

    Parameters
    ----------
    model : CoupledModel
    sampler : UniformPairSampler, optional
        Defaults to uniform on ``[-10, 10]`` per coordinate.
    n_samples : int
        Pairs per radius family.
    time : float
        Time at which the coefficients are sampled (checked models are
        typically autonomous).
    seed : int
        Philox key; reports are deterministic given (seed, sampler, n).

    Returns
    -------
    MonotonicityReport
        With ``lipschitz``, ``lipschitz_terminal``, ``trend_flag`` and the
        worst (largest-ratio) pair as witness.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    sampler = sampler or UniformPairSampler()
    rng = _rng(seed)
    full, witness = _lipschitz_pass(model, sampler, n_samples, time, rng, 1.0)
    half, _ = _lipschitz_pass(model, sampler, n_samples, time, rng, 0.5)
    t_full = _terminal_lipschitz_pass(model, sampler, n_samples, rng, 1.0)
    t_half = _terminal_lipschitz_pass(model, sampler, n_samples, rng, 0.5)
    trend = bool(full > _TREND_MARGIN * half + 1e-12) or bool(
        t_full > _TREND_MARGIN * t_half + 1e-12
    )
    return MonotonicityReport(
        check="H4",
        passed=not trend,
        lipschitz=full,
        lipschitz_terminal=t_full,
        violations=0,
        worst_pair=witness,
        n_samples=n_samples,
        radius=sampler.radius,
        trend_flag=trend,
    )


# ======================================================================
# (H5)/(H6): monotonicity via nested clouds
# ======================================================================


def _monotonicity_scan(model, sampler, n_samples, nested, time, seed, sign):
    """Shared (H5)/(H6) scan.

    ``sign`` = +1 checks E<dF, du> <= -C1 E|du|^2 with
    <dPhi, dx> >= mu1 |dx|^2 (the forward condition); ``sign`` = -1 checks
    the mirrored inequalities.  Returns the filled report fields.
    """
    rng = _rng(seed)
    best_ratio = np.inf
    witness = None
    violations = 0

    for c in _chunks(n_samples):
        own1 = sampler.draw(rng, c, nested, 3)
        own2 = sampler.draw(rng, c, nested, 3)
        flat1 = own1.reshape(c * nested, 3)
        flat2 = own2.reshape(c * nested, 3)
        law1 = np.repeat(own1.mean(axis=1), nested, axis=0)
        law2 = np.repeat(own2.mean(axis=1), nested, axis=0)
        f1, b1, s1 = _coefficients(
            model, time, (law1[:, 0], law1[:, 1], law1[:, 2]), (flat1[:, 0], flat1[:, 1], flat1[:, 2])
        )
        f2, b2, s2 = _coefficients(
            model, time, (law2[:, 0], law2[:, 1], law2[:, 2]), (flat2[:, 0], flat2[:, 1], flat2[:, 2])
        )
        d = flat1 - flat2
        atoms = -(f1 - f2) * d[:, 0] + (b1 - b2) * d[:, 1] + (s1 - s2) * d[:, 2]
        pairing = atoms.reshape(c, nested).mean(axis=1)
        denom = np.sum(d * d, axis=1).reshape(c, nested).mean(axis=1)
        ok = denom >= _MIN_DISTANCE**2
        ratios = np.where(ok, sign * -pairing / np.maximum(denom, _MIN_DISTANCE**2), np.inf)
        bad = ~np.isfinite(ratios) & ok
        ratios = np.where(bad, -np.inf, ratios)
        violations += int(np.sum((ratios <= 0.0) & ok))
        i = int(np.argmin(ratios))
        if ratios[i] < best_ratio:
            best_ratio = float(ratios[i])
            witness = {
                "kind": "pairing",
                "cloud1": own1[i].copy(),
                "cloud2": own2[i].copy(),
                "ratio": best_ratio,
            }

    best_terminal = np.inf
    for c in _chunks(n_samples):
        x1 = sampler.draw(rng, c)
        x2 = sampler.draw(rng, c)
        dx = x1 - x2
        ok = np.abs(dx) >= _MIN_DISTANCE
        pair = (_terminal(model, x1) - _terminal(model, x2)) * dx
        ratios = np.where(ok, sign * pair / np.maximum(dx * dx, _MIN_DISTANCE**2), np.inf)
        ratios = np.where(~np.isfinite(ratios) & ok, -np.inf, ratios)
        violations += int(np.sum((ratios <= 0.0) & ok))
        i = int(np.argmin(ratios))
        if ratios[i] < best_terminal:
            best_terminal = float(ratios[i])
            if best_terminal < best_ratio:
                witness = {
                    "kind": "terminal",
                    "x1": float(x1[i]),
                    "x2": float(x2[i]),
                    "ratio": best_terminal,
                }

    passed = violations == 0 and best_ratio > 0.0 and best_terminal > 0.0
    return best_ratio, best_terminal, violations, witness, passed


def check_H5(
    model: CoupledModel,
    sampler: Optional[UniformPairSampler] = None,
    n_samples: int = 100_000,
    nested: int = 32,
    time: float = 0.0,
    seed: int = 0,
) -> MonotonicityReport:
    """Certify the forward monotonicity condition (H5) by nested-cloud
    sampling.

    Each outer sample is a pair of coupled clouds of ``nested`` atom
    triples; the cloud means feed the law slots, and the pairing
    E<dF, du> and the normalizer E|du|^2 are cloud averages.  The reported
    constant is

        C1-hat = min over outer samples of  -<dF, du> / |du|^2,

    and mu1-hat the analogous minimum of <dPhi, dx>/|dx|^2 over point
    pairs; the check passes iff both minima are positive and no sampled
    ratio violates the inequality.  Tying the law slots to the cloud (and
    not sampling them freely) matters: models whose monotonicity relies on
    cancellation of antisymmetric law terms satisfy the inequality only
    under the expectation the clouds realize.

    Returns a :class:`MonotonicityReport` with ``monotonicity`` (C1-hat),
    ``terminal_monotonicity`` (mu1-hat), the violation count, and the
    worst sampled pair as a re-evaluable witness.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if nested < 1:
        raise ConfigError(f"nested must be >= 1, got {nested}")
    sampler = sampler or UniformPairSampler()
    c1, mu1, violations, witness, passed = _monotonicity_scan(
        model, sampler, n_samples, nested, time, seed, sign=+1
    )
    return MonotonicityReport(
        check="H5",
        passed=passed,
        monotonicity=c1,
        terminal_monotonicity=mu1,
        violations=violations,
        worst_pair=witness,
        n_samples=n_samples,
        radius=sampler.radius,
        nested=nested,
    )


def check_H6(
    model: CoupledModel,
    sampler: Optional[UniformPairSampler] = None,
    n_samples: int = 100_000,
    nested: int = 32,
    time: float = 0.0,
    seed: int = 0,
) -> MonotonicityReport:
    """Certify the mirrored monotonicity condition (H6).

    Identical sampling scheme to :func:`check_H5` with both inequalities
    reversed: the pairing must be bounded below by +C1 E|du|^2 and the
    terminal pairing above by -mu1 |dx|^2.  Adjoint systems are the
    typical (H6) models; the solvers handle them by a sign normalization,
    and this check certifies the condition they rely on.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if nested < 1:
        raise ConfigError(f"nested must be >= 1, got {nested}")
    sampler = sampler or UniformPairSampler()
    c1, mu1, violations, witness, passed = _monotonicity_scan(
        model, sampler, n_samples, nested, time, seed, sign=-1
    )
    return MonotonicityReport(
        check="H6",
        passed=passed,
        monotonicity=c1,
        terminal_monotonicity=mu1,
        violations=violations,
        worst_pair=witness,
        n_samples=n_samples,
        radius=sampler.radius,
        nested=nested,
    )


# ======================================================================
# Convexity (midpoint test)
# ======================================================================


def check_convexity(
    fn: Callable[[np.ndarray], np.ndarray],
    dim: int,
    sampler: Optional[UniformPairSampler] = None,
    n_samples: int = 100_000,
    seed: int = 0,
    slack: float = 1e-9,
) -> MonotonicityReport:
    """Midpoint convexity test for a scalar function of a state tuple.

    ``fn`` maps an array [n, dim] of points to values [n].  A sampled pair
    (a, b) is a violation when fn((a+b)/2) > (fn(a)+fn(b))/2 + slack.
    Used on terminal costs and on the Hamiltonian as a function of the
    state-and-control tuple at frozen multipliers, which is what the
    sufficiency results assume.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    sampler = sampler or UniformPairSampler()
    rng = _rng(seed)
    violations = 0
    worst = None
    worst_gap = -np.inf
    for c in _chunks(n_samples):
        a = sampler.draw(rng, c, dim)
        b = sampler.draw(rng, c, dim)
        gap = np.asarray(fn(0.5 * (a + b)), dtype=float) - 0.5 * (
            np.asarray(fn(a), dtype=float) + np.asarray(fn(b), dtype=float)
        )
        violations += int(np.sum(gap > slack))
        i = int(np.argmax(gap))
        if gap[i] > worst_gap:
            worst_gap = float(gap[i])
            worst = {"kind": "midpoint", "point1": a[i].copy(), "point2": b[i].copy(), "gap": worst_gap}
    return MonotonicityReport(
        check="convexity",
        passed=violations == 0,
        violations=violations,
        worst_pair=worst,
        n_samples=n_samples,
        radius=sampler.radius,
    )
