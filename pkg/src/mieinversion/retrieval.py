"""Per-wavelength multi-start retrieval of the particle refractive index.

Pipeline for one wavelength (:func:`retrieve_wavelength`):

1. ``grid_scan``: on a regular grid over the search box, screen for points
   where the Hessian of the fit function F = 1/2 ||Sigma^{-1/2}(q_t(x) - e)||^2
   at t = 3 is positive definite; run a local solve from each such point and
   keep the distinct results.
2. ``continuation_refine``: from each start, raise the truncation index in
   steps of 1/10, re-solving at every step, until the relative change of the
   squared residual over a whole unit block drops to ``tol_rel``.
3. ``accept_candidates``: keep candidates whose squared residual is below
   tau N delta^2, trying tau = 3, 5, 7 in turn.

``method=2`` replaces the continuation by evaluating every model at the
Wiscombe truncation index: step 1 followed directly by step 3.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .forward import MeasurementSet, NoiseModel, build_noise_model
from .lsq import LMOptions, projected_lm
from .mie import RefractiveIndex, extinction_batch, wiscombe_index

__all__ = [
    "WISCOMBE",
    "SearchDomain",
    "RetrievalConfig",
    "FitProblem",
    "CandidateSolution",
    "GridScanResult",
    "RetrievalResult",
    "objective",
    "residual_sq",
    "grid_scan",
    "local_solve",
    "dedup_points",
    "continuation_refine",
    "accept_candidates",
    "retrieve_wavelength",
]

log = logging.getLogger(__name__)

WISCOMBE = "wiscombe"


@dataclass(frozen=True)
class SearchDomain:
    """Search box [0, b_real] x [0, b_imag] and its start grid."""

    b_real: float = 20.0
    b_imag: float = 40.0
    n_real: int = 81
    n_imag: int = 161

    @classmethod
    def reduced(cls) -> "SearchDomain":
        """Coarser 41 x 81 grid (step 0.5) over the same box."""
        return cls(n_real=41, n_imag=81)

    @property
    def lower(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.b_real, self.b_imag])

    def points(self) -> np.ndarray:
        """Grid points, row-major over (real index i, imaginary index j)."""
        c = np.arange(self.n_real) * self.b_real / (self.n_real - 1)
        d = np.arange(self.n_imag) * self.b_imag / (self.n_imag - 1)
        cc, dd = np.meshgrid(c, d, indexing="ij")
        return np.column_stack([cc.ravel(), dd.ravel()])


@dataclass(frozen=True)
class RetrievalConfig:
    """Constants of the retrieval pipeline.

    ``residual_floor_rel`` sets the smallest squared residual that is
    resolved, relative to ||Sigma^{-1/2} e||^2.  Below it a residual counts as
    exactly zero (relevant only for noise-free data).  ``truncation_margin``
    caps the continuation at the largest Wiscombe index of the current point
    plus this margin.
    """

    domain: SearchDomain = SearchDomain()
    start_truncation: float = 3.0
    continuation_step: float = 0.1
    tol_rel: float = 1e-3
    dedup_rel: float = 1e-2
    tau_ladder: tuple[float, ...] = (3.0, 5.0, 7.0)
    lm: LMOptions = LMOptions()
    hessian_step: float = 1e-5
    residual_floor_rel: float = 1e-12
    truncation_margin: int = 10

    def __post_init__(self):
        for name in ("start_truncation", "continuation_step", "tol_rel", "dedup_rel", "hessian_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.tau_ladder or any(t <= 0 for t in self.tau_ladder):
            raise ValueError("tau_ladder must contain positive values")
        steps = 1.0 / self.continuation_step
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("continuation_step must divide 1")


class FitProblem:
    """Weighted least-squares data fit at one wavelength.

    Residual vector r(x) = Sigma^{-1/2} (q_t(x) - e) with the scaled covariance
    Sigma = delta^{-2} diag(sigma_i^2), i.e. weights delta / sigma_i.
    """

    def __init__(self, ms: MeasurementSet, nm: NoiseModel | None = None, m_med=1.0):
        self.ms = ms
        self.nm = nm if nm is not None else build_noise_model(ms)
        self.m_med = RefractiveIndex.of(m_med).value
        self.radii = ms.radii
        self.wavelength = float(ms.wavelength)
        self.data = ms.means
        self.weights = self.nm.weights
        self.delta_sq = self.nm.delta_sq

    @property
    def n_data(self) -> int:
        return int(self.radii.size)

    def truncation(self, x, t) -> np.ndarray | float:
        """Explicit truncation indices for ``t``, resolving ``WISCOMBE`` per point and radius."""
        if isinstance(t, str):
            if t != WISCOMBE:
                raise ValueError(f"unknown truncation rule {t!r}")
            x = np.atleast_2d(x)
            m = x[:, 0] + 1j * x[:, 1]
            rho = 2 * np.pi * self.radii / self.wavelength
            return wiscombe_index(rho[None, :], self.m_med, m[:, None]).astype(float)
        return t

    def residuals(self, x, t, gradient: bool = True):
        """Weighted residuals, Jacobians and validity for points x of shape (B, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        vals, jac, ok = extinction_batch(x, self.radii, self.wavelength, self.m_med,
                                         self.truncation(x, t), gradient)
        r = (vals - self.data) * self.weights
        if gradient:
            jac = jac * self.weights[None, :, None]
        return r, jac, ok

    def residual_sq(self, x, t) -> tuple[np.ndarray, np.ndarray]:
        """Unhalved squared residual ||r(x)||^2 and validity, batched."""
        r, _, ok = self.residuals(x, t, gradient=False)
        return np.where(ok, np.sum(r**2, axis=1), np.inf), ok

    def gradient(self, x, t) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of F = 1/2 ||r||^2, batched."""
        r, jac, ok = self.residuals(x, t)
        return np.einsum("bmi,bm->bi", jac, r), ok

    def residual_floor(self, cfg: RetrievalConfig) -> float:
        return cfg.residual_floor_rel * float(np.sum((self.weights * self.data) ** 2))

    def acceptance_threshold(self, tau: float, cfg: RetrievalConfig) -> float:
        return max(tau * self.n_data * self.delta_sq, self.residual_floor(cfg))


def _problem(ms, nm, m_med) -> FitProblem:
    return ms if isinstance(ms, FitProblem) else FitProblem(ms, nm, m_med)


def residual_sq(x, ms: MeasurementSet, nm: NoiseModel, t, m_med=1.0) -> float:
    """||Sigma^{-1/2}(q_t(x) - e)||^2 at a single point."""
    value, ok = _problem(ms, nm, m_med).residual_sq(np.asarray(x, dtype=float)[None, :], t)
    if not ok[0]:
        raise ArithmeticError(f"model evaluation failed at x={x}")
    return float(value[0])


def objective(x, ms: MeasurementSet, nm: NoiseModel, t, m_med=1.0) -> float:
    """Fit function F(x) = 1/2 ||Sigma^{-1/2}(q_t(x) - e)||^2."""
    return 0.5 * residual_sq(x, ms, nm, t, m_med)


@dataclass
class LocalSolution:
    x: np.ndarray
    residual_sq: float
    converged: bool
    iterations: int


def _solve_batch(problem: FitProblem, starts, t, cfg: RetrievalConfig):
    dom = cfg.domain
    return projected_lm(lambda x: problem.residuals(x, t), starts, dom.lower, dom.upper, cfg.lm)


def local_solve(start, ms, nm, t, cfg: RetrievalConfig = RetrievalConfig(), m_med=1.0) -> LocalSolution:
    """Box-constrained local minimiser of the fit function from ``start``."""
    problem = _problem(ms, nm, m_med)
    res = _solve_batch(problem, np.asarray(start, dtype=float)[None, :], t, cfg)
    return LocalSolution(res.x[0].copy(), float(res.cost[0]), bool(res.converged[0]), int(res.iterations[0]))


def dedup_points(points: np.ndarray, rel: float) -> list[int]:
    """Indices of points kept by sequential relative-distance deduplication.

    A point is kept when ||x - x_new|| / ||x|| >= rel for every kept x.
    """
    kept: list[int] = []
    for i, p in enumerate(np.asarray(points, dtype=float).reshape(-1, 2)):
        ok = True
        for j in kept:
            ref = points[j]
            norm = math.hypot(ref[0], ref[1])
            dist = math.hypot(ref[0] - p[0], ref[1] - p[1])
            if norm == 0.0:
                if dist == 0.0:
                    ok = False
                    break
                continue
            if dist / norm < rel:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


@dataclass
class GridScanResult:
    """Distinct local minimisers found from positive-definite grid points."""

    starts: np.ndarray
    seeds: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    n_grid: int
    n_pd: int
    n_failed: int


def hessian_screen(problem: FitProblem, points: np.ndarray, t, step: float):
    """Finite-difference Hessians of F from the analytic gradient.

    Returns the (P, 2, 2) Hessians and a validity mask.
    """
    p = points.shape[0]
    h = step * (1.0 + np.abs(points))
    shifted = np.concatenate([
        points + np.column_stack([h[:, 0], np.zeros(p)]),
        points - np.column_stack([h[:, 0], np.zeros(p)]),
        points + np.column_stack([np.zeros(p), h[:, 1]]),
        points - np.column_stack([np.zeros(p), h[:, 1]]),
    ])
    g, ok = problem.gradient(shifted, t)
    g = g.reshape(4, p, 2)
    ok = ok.reshape(4, p).all(axis=0)
    hess = np.empty((p, 2, 2))
    hess[:, :, 0] = (g[0] - g[1]) / (2 * h[:, 0:1])
    hess[:, :, 1] = (g[2] - g[3]) / (2 * h[:, 1:2])
    hess = 0.5 * (hess + np.transpose(hess, (0, 2, 1)))
    ok &= np.all(np.isfinite(hess), axis=(1, 2))
    return hess, ok


def grid_scan(ms, nm=None, cfg: RetrievalConfig = RetrievalConfig(), m_med=1.0, truncation=None) -> GridScanResult:
    """Multi-start search: PD screen on the grid, local solves, deduplication.

    ``truncation`` defaults to ``cfg.start_truncation``; pass ``WISCOMBE`` to
    evaluate every model at the Wiscombe index of the evaluated point.
    """
    problem = _problem(ms, nm, m_med)
    t = cfg.start_truncation if truncation is None else truncation
    pts = cfg.domain.points()
    hess, ok = hessian_screen(problem, pts, t, cfg.hessian_step)
    tr = hess[:, 0, 0] + hess[:, 1, 1]
    det = hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] * hess[:, 1, 0]
    pd = ok & (tr > 0) & (det > 0)
    n_failed = int(np.sum(~ok))
    if n_failed:
        log.debug("grid scan at l=%g: %d grid points failed to evaluate", problem.wavelength, n_failed)
    seeds = pts[pd]
    res = _solve_batch(problem, seeds, t, cfg)
    usable = res.status != 2
    sol_x, sol_c, sol_ok, seeds = res.x[usable], res.cost[usable], res.converged[usable], seeds[usable]
    keep = dedup_points(sol_x, cfg.dedup_rel)
    return GridScanResult(sol_x[keep], seeds[keep], sol_c[keep], sol_ok[keep], pts.shape[0], int(pd.sum()), n_failed)


@dataclass
class CandidateSolution:
    """A local solution of the fit problem at one wavelength.

    ``residual_sq`` is ||Sigma^{-1/2}(q_t(x) - e)||^2 at truncation ``t``.
    ``history`` lists (t, residual_sq) after every continuation sub-step.
    """

    x: tuple[float, float]
    t: float
    residual_sq: float
    accepted: bool = False
    tau_used: float | None = None
    converged: bool = True
    capped: bool = False
    d_rel: float = float("nan")
    seed: tuple[float, float] | None = None
    history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n(self) -> float:
        return self.x[0]

    @property
    def k(self) -> float:
        return self.x[1]

    @property
    def m(self) -> complex:
        return complex(self.x[0], self.x[1])

    def to_dict(self) -> dict:
        return {"n": self.x[0], "k": self.x[1], "t": self.t, "residual_sq": self.residual_sq,
                "tau_used": self.tau_used}


def continuation_refine(starts, ms, nm=None, cfg: RetrievalConfig = RetrievalConfig(), m_med=1.0,
                        seeds=None) -> list[CandidateSolution]:
    """Track local minimisers while the truncation index grows from ``cfg.start_truncation``.

    All starts advance through the same truncation schedule in lockstep.  In
    each unit block [c, c+1] the point is re-solved at c + p*step for every
    sub-step p; ``D_rel = |Res_cur - Res_new| / Res_cur`` compares the residual
    of the previous point at the previous index with that of the new point at
    the new index.  A start finishes once D_rel <= tol_rel after a block.
    """
    problem = _problem(ms, nm, m_med)
    starts = np.atleast_2d(np.asarray(starts, dtype=float)).reshape(-1, 2)
    n_start = starts.shape[0]
    seeds = starts.copy() if seeds is None else np.asarray(seeds, dtype=float).reshape(-1, 2)
    x = starts.copy()
    n_sub = int(round(1.0 / cfg.continuation_step))
    floor = max(1e-30, problem.residual_floor(cfg))
    history: list[list[tuple[float, float]]] = [[] for _ in range(n_start)]
    final_t = np.full(n_start, np.nan)
    final_res = np.full(n_start, np.nan)
    d_rel = np.full(n_start, np.nan)
    converged = np.ones(n_start, dtype=bool)
    capped = np.zeros(n_start, dtype=bool)
    active = np.ones(n_start, dtype=bool)
    c = float(cfg.start_truncation)
    rho = 2 * np.pi * problem.radii / problem.wavelength
    while np.any(active):
        idx = np.flatnonzero(active)
        res_new = None
        for p in range(1, n_sub + 1):
            t_old = c + (p - 1) / n_sub
            t_new = c + p / n_sub
            res_cur, ok_cur = problem.residual_sq(x[idx], t_old)
            sol = _solve_batch(problem, x[idx], t_new, cfg)
            res_new = sol.cost
            bad = ~sol.converged | ~ok_cur
            x[idx] = sol.x
            with np.errstate(invalid="ignore", divide="ignore"):
                dr = np.where(res_cur < floor, 0.0, np.abs(res_cur - res_new) / res_cur)
            d_rel[idx] = dr
            for i, j in enumerate(idx):
                history[j].append((t_new, float(res_new[i])))
            if np.any(bad):
                lost = idx[bad]
                converged[lost] = False
                active[lost] = False
                final_t[lost] = t_new
                final_res[lost] = res_new[bad]
                keep = ~bad
                idx, res_new = idx[keep], res_new[keep]
            if idx.size == 0:
                break
        c += 1.0
        if idx.size == 0:
            continue
        done = d_rel[idx] <= cfg.tol_rel
        m = x[idx, 0] + 1j * x[idx, 1]
        cap = wiscombe_index(rho[None, :], problem.m_med, m[:, None]).max(axis=1) + cfg.truncation_margin
        hit_cap = ~done & (c >= cap)
        fin = done | hit_cap
        capped[idx[hit_cap]] = True
        final_t[idx[fin]] = c
        final_res[idx[fin]] = res_new[fin]
        active[idx[fin]] = False
    return [
        CandidateSolution(
            x=(float(x[i, 0]), float(x[i, 1])), t=float(final_t[i]), residual_sq=float(final_res[i]),
            converged=bool(converged[i]), capped=bool(capped[i]), d_rel=float(d_rel[i]),
            seed=(float(seeds[i, 0]), float(seeds[i, 1])), history=history[i])
        for i in range(n_start)
    ]


def accept_candidates(cands: Sequence[CandidateSolution], ms, nm=None, cfg: RetrievalConfig = RetrievalConfig(),
                      m_med=1.0) -> list[CandidateSolution]:
    """Residual filter with the tau ladder, then deduplication.

    Candidates whose continuation was aborted are never accepted.  Returns
    the accepted candidates (``accepted`` and ``tau_used`` set) in input order;
    an empty list means no acceptable candidate.
    """
    problem = _problem(ms, nm, m_med)
    usable = [c for c in cands if c.converged and np.isfinite(c.residual_sq)]
    for tau in cfg.tau_ladder:
        thr = problem.acceptance_threshold(tau, cfg)
        hits = [c for c in usable if c.residual_sq < thr]
        if hits:
            pts = np.array([c.x for c in hits])
            return [replace(hits[i], accepted=True, tau_used=float(tau)) for i in dedup_points(pts, cfg.dedup_rel)]
    return []


@dataclass
class RetrievalResult:
    """Outcome of the candidate search at one wavelength."""

    wavelength: float
    candidates: list[CandidateSolution]
    status: str
    method: int
    n_starts: int
    elapsed_s: float
    all_candidates: list[CandidateSolution] = field(default_factory=list)
    scan: GridScanResult | None = None

    @property
    def ok(self) -> bool:
        return bool(self.candidates)

    @property
    def best(self) -> CandidateSolution | None:
        return self.candidates[0] if self.candidates else None

    def to_dict(self) -> dict:
        return {"wavelength": self.wavelength, "candidates": [c.to_dict() for c in self.candidates]}


def retrieve_wavelength(ms, nm=None, cfg: RetrievalConfig = RetrievalConfig(), m_med=1.0,
                        method: int = 1) -> RetrievalResult:
    """Candidate refractive indices at one wavelength, sorted by residual.

    ``method=1`` runs grid scan, continuation and acceptance.  ``method=2``
    runs the grid scan with the Wiscombe truncation index at every model
    evaluation and applies the same residual acceptance to its distinct local
    minimisers (no continuation).
    """
    t0 = time.perf_counter()
    problem = _problem(ms, nm, m_med)
    if method == 1:
        scan = grid_scan(problem, cfg=cfg)
        if scan.starts.shape[0] == 0:
            return RetrievalResult(problem.wavelength, [], "no candidates", 1, 0, time.perf_counter() - t0, [], scan)
        cands = continuation_refine(scan.starts, problem, cfg=cfg, seeds=scan.seeds)
        accepted = accept_candidates(cands, problem, cfg=cfg)
        status = "ok" if accepted else "no acceptable candidate"
    elif method == 2:
        scan = grid_scan(problem, cfg=cfg, truncation=WISCOMBE)
        cands = []
        for x, s, r, conv in zip(scan.starts, scan.seeds, scan.residuals, scan.converged):
            t = float(problem.truncation(x[None, :], WISCOMBE).max())
            cands.append(CandidateSolution((float(x[0]), float(x[1])), t, float(r), converged=bool(conv),
                                           seed=(float(s[0]), float(s[1]))))
        accepted = accept_candidates(cands, problem, cfg=cfg)
        status = "ok" if accepted else ("no acceptable candidate" if cands else "no candidates")
    else:
        raise ValueError("method must be 1 or 2")
    accepted.sort(key=lambda c: c.residual_sq)
    return RetrievalResult(problem.wavelength, accepted, status, method, int(scan.starts.shape[0]),
                           time.perf_counter() - t0, cands, scan)
