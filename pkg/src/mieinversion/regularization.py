"""Joint smoothing of the retrieved indices within one optical window.

Given a start combination x^1_0..x^s_0 (one index per wavelength) the window
problem minimises

    sum_j chi_j(x^j)^2 + gamma * [ sum_i ||x^{i-1} - 2 x^i + x^{i+1}||^2 + rho sum_i ||x^i||^2 ]

over the search box, where chi_j(x) = ||(q_t(x) - e_j) / sigma_j|| uses the
standard deviations of the measured means and one common truncation index t.
The penalty weight gamma is chosen so that the data misfit matches a target
derived from the misfit R0 of the start combination (discrepancy principle).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .forward import MeasurementSet
from .lsq import LMOptions, projected_lm
from .mie import RefractiveIndex, extinction_batch
from .retrieval import SearchDomain

__all__ = [
    "RegularizationConfig",
    "WindowProblem",
    "RegularizedSolution",
    "GammaSelection",
    "penalty",
    "discrepancy_target",
    "solve_regularized",
    "select_gamma",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegularizationConfig:
    """Penalty floor, discrepancy-rule factors and gamma search settings.

    ``tau_first`` is the factor applied to R0 in the first target rule; it
    defaults to ``tau1``.
    """

    rho: float = 1e-8
    tau1: float = 1.1
    tau2: float = 0.9
    theta: float = 1.5
    tau_first: float | None = None
    gamma_min: float = 1e-8
    gamma_max: float = 1e12
    gamma_max_limit: float = 1e16
    rel_tol: float = 0.01
    max_bisection: int = 60
    lm: LMOptions = LMOptions(max_iter=300)
    domain: SearchDomain = SearchDomain()

    def __post_init__(self):
        if not 0 < self.tau2 < self.tau1 < self.theta:
            raise ValueError("require 0 < tau2 < tau1 < theta")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if not 0 < self.gamma_min < self.gamma_max <= self.gamma_max_limit:
            raise ValueError("require 0 < gamma_min < gamma_max <= gamma_max_limit")


def penalty(xs, rho: float) -> float:
    """Squared second differences of the points plus rho times their squared norms."""
    pts = np.asarray(xs, dtype=float).reshape(-1, 2)
    d = pts[:-2] - 2.0 * pts[1:-1] + pts[2:] if pts.shape[0] >= 3 else np.zeros((0, 2))
    return float(np.sum(d * d) + rho * np.sum(pts * pts))


def _second_difference_matrix(s: int) -> np.ndarray:
    """(2(s-2), 2s) matrix mapping stacked points to their second differences."""
    rows = max(s - 2, 0)
    mat = np.zeros((2 * rows, 2 * s))
    for i in range(rows):
        for c in range(2):
            mat[2 * i + c, 2 * i + c] = 1.0
            mat[2 * i + c, 2 * (i + 1) + c] = -2.0
            mat[2 * i + c, 2 * (i + 2) + c] = 1.0
    return mat


class WindowProblem:
    """Data and start combination for the joint solve of one window.

    Parameters
    ----------
    measurements : sequence of MeasurementSet
        One per wavelength, in wavelength order.
    starts : array_like, shape (s, 2)
        Start combination (e.g. the smoothest candidate combination).
    t : float
        Common truncation index, at least every start's own index.
    m_med : complex or sequence
        Host-medium index, shared or one per wavelength.
    """

    def __init__(self, measurements: Sequence[MeasurementSet], starts, t: float, m_med=1.0):
        self.measurements = list(measurements)
        self.s = len(self.measurements)
        if self.s == 0:
            raise ValueError("a window needs at least one wavelength")
        self.starts = np.asarray(starts, dtype=float).reshape(self.s, 2)
        self.t = float(t)
        meds = m_med if isinstance(m_med, (list, tuple, np.ndarray)) else [m_med] * self.s
        self.m_med = [RefractiveIndex.of(m).value for m in meds]
        self.wavelengths = np.array([ms.wavelength for ms in self.measurements])
        self.n_data = sum(ms.radii.size for ms in self.measurements)
        self._d2 = _second_difference_matrix(self.s)
        self.r0 = self.data_residual(self.starts)

    @classmethod
    def from_candidates(cls, measurements, candidates, m_med=1.0) -> "WindowProblem":
        """Window problem started at the given candidates, t = max of their indices."""
        starts = np.array([c.x for c in candidates])
        t = max(c.t for c in candidates)
        return cls(measurements, starts, t, m_med)

    def data_rows(self, xs) -> tuple[np.ndarray, np.ndarray, bool]:
        """Stacked residuals (q - e)/sigma and their block-diagonal Jacobian."""
        xs = np.asarray(xs, dtype=float).reshape(self.s, 2)
        r = np.empty(self.n_data)
        jac = np.zeros((self.n_data, 2 * self.s))
        ok_all = True
        row = 0
        for j, ms in enumerate(self.measurements):
            vals, jj, ok = extinction_batch(xs[j][None, :], ms.radii, ms.wavelength, self.m_med[j], self.t)
            n = ms.radii.size
            sig = ms.sigmas
            r[row:row + n] = (vals[0] - ms.means) / sig
            jac[row:row + n, 2 * j:2 * j + 2] = jj[0] / sig[:, None]
            ok_all &= bool(ok[0])
            row += n
        return r, jac, ok_all

    def data_residual(self, xs) -> float:
        r, _, ok = self.data_rows(xs)
        return float(np.sum(r**2)) if ok else math.inf

    def stacked(self, xs, gamma: float, rho: float):
        """Augmented residual vector [data; sqrt(gamma) D2 x; sqrt(gamma rho) x] and Jacobian."""
        flat = np.asarray(xs, dtype=float).reshape(-1)
        r, jac, ok = self.data_rows(flat)
        sg = math.sqrt(gamma)
        sgr = math.sqrt(gamma * rho)
        eye = np.eye(2 * self.s)
        r_all = np.concatenate([r, sg * (self._d2 @ flat), sgr * flat])
        j_all = np.vstack([jac, sg * self._d2, sgr * eye])
        return r_all, j_all, ok


@dataclass
class RegularizedSolution:
    """Joint solution for one gamma; ``residual_sq`` is the data misfit only."""

    xs: np.ndarray
    residual_sq: float
    gamma: float
    converged: bool
    iterations: int


def solve_regularized(wp: WindowProblem, gamma: float, cfg: RegularizationConfig = RegularizationConfig(),
                      start=None) -> RegularizedSolution:
    """Box-constrained minimiser of data misfit + gamma * penalty from the start combination."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    x0 = (wp.starts if start is None else np.asarray(start, dtype=float)).reshape(1, -1)
    lower = np.tile(cfg.domain.lower, wp.s)
    upper = np.tile(cfg.domain.upper, wp.s)

    def fun(x):
        r, j, ok = wp.stacked(x[0], gamma, cfg.rho)
        return r[None, :], j[None, :, :], np.array([ok])

    res = projected_lm(fun, x0, lower, upper, cfg.lm)
    xs = res.x[0].reshape(wp.s, 2)
    return RegularizedSolution(xs, wp.data_residual(xs), float(gamma), bool(res.converged[0]),
                               int(res.iterations[0]))


def discrepancy_target(r0: float, s: int, cfg: RegularizationConfig = RegularizationConfig()) -> tuple[float, str]:
    """Target misfit: max(2 tau1 s, tau R0), switching to max(2 tau2 s, theta R0) if that exceeds theta R0.

    Returns the target and the name of the rule used ("first" or "second").
    """
    tau = cfg.tau1 if cfg.tau_first is None else cfg.tau_first
    target = max(2.0 * cfg.tau1 * s, tau * r0)
    if r0 > 0 and target / r0 <= cfg.theta:
        return target, "first"
    return max(2.0 * cfg.tau2 * s, cfg.theta * r0), "second"


@dataclass
class GammaSelection:
    """Outcome of the discrepancy-principle search."""

    gamma: float
    solution: RegularizedSolution
    target_r: float
    rule: str
    r0: float
    status: str
    steps: int
    trace: list[tuple[float, float]] = field(default_factory=list)

    @property
    def xs(self) -> np.ndarray:
        return self.solution.xs

    @property
    def achieved_r(self) -> float:
        return self.solution.residual_sq

    def to_dict(self, window: int | None = None, wavelengths=None) -> dict:
        wl = wavelengths if wavelengths is not None else [None] * len(self.xs)
        return {
            "window": window,
            "gamma": self.gamma,
            "target_R": self.target_r,
            "achieved_R": self.achieved_r,
            "solutions": [{"wavelength": None if w is None else float(w), "n": float(x[0]), "k": float(x[1])}
                          for w, x in zip(wl, self.xs)],
            "status": self.status,
        }


def select_gamma(wp: WindowProblem, cfg: RegularizationConfig = RegularizationConfig()) -> GammaSelection:
    """Bisection on log(gamma) until the data misfit is within ``rel_tol`` of the target.

    Status values: "ok", "underregularized" (target below the misfit at
    gamma = 0), "gamma_max" (target above the misfit at the largest gamma),
    "max_steps" (bisection budget exhausted; closest solution returned).
    """
    target, rule = discrepancy_target(wp.r0, wp.s, cfg)
    trace: list[tuple[float, float]] = []

    def solve(g):
        sol = solve_regularized(wp, g, cfg)
        trace.append((g, sol.residual_sq))
        return sol

    def close(sol):
        return abs(sol.residual_sq - target) <= cfg.rel_tol * target

    def result(g, sol, status, steps):
        return GammaSelection(g, sol, target, rule, wp.r0, status, steps, trace)

    sol0 = solve(0.0)
    if close(sol0):
        return result(0.0, sol0, "ok", 0)
    if sol0.residual_sq > target:
        return result(0.0, sol0, "underregularized", 0)
    lo, hi = cfg.gamma_min, cfg.gamma_max
    sol_lo = solve(lo)
    if close(sol_lo):
        return result(lo, sol_lo, "ok", 0)
    if sol_lo.residual_sq > target:
        # the target lies between gamma = 0 and gamma_min; bisect on that bracket instead
        lo_sol, lo = sol0, 0.0
        hi_sol = sol_lo
        hi = cfg.gamma_min
    else:
        lo_sol = sol_lo
        hi_sol = solve(hi)
        while hi_sol.residual_sq < target and not close(hi_sol) and hi < cfg.gamma_max_limit:
            hi = min(2.0 * hi, cfg.gamma_max_limit)
            hi_sol = solve(hi)
        if close(hi_sol):
            return result(hi, hi_sol, "ok", 0)
        if hi_sol.residual_sq < target:
            return result(hi, hi_sol, "gamma_max", 0)
    best_g, best = (lo, lo_sol) if abs(lo_sol.residual_sq - target) < abs(hi_sol.residual_sq - target) else (hi, hi_sol)
    for step in range(1, cfg.max_bisection + 1):
        mid = math.sqrt(lo * hi) if lo > 0 else hi * 1e-4
        sol = solve(mid)
        if abs(sol.residual_sq - target) < abs(best.residual_sq - target):
            best_g, best = mid, sol
        if close(sol):
            return result(mid, sol, "ok", step)
        if sol.residual_sq < target:
            lo = mid
        else:
            hi = mid
    return result(best_g, best, "max_steps", cfg.max_bisection)
