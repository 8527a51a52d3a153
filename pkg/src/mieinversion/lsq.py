"""Box-constrained nonlinear least squares by projected Levenberg-Marquardt.

The solver minimises F(x) = 1/2 ||r(x)||^2 subject to lower <= x <= upper for a
batch of independent problems at once.  Each problem keeps its own damping
parameter; all of them advance in lockstep so that one vectorised residual
call serves the whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["LMOptions", "LMResult", "projected_lm"]

ResidualFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LMOptions:
    """Stopping rules and damping schedule.

    A step that lowers the cost is always taken.  The damping is divided by
    ``lambda_down`` when the actual decrease exceeds ``gain_good`` times the
    decrease predicted by the linearised model, and multiplied by
    ``lambda_up`` when the step is rejected or the ratio falls below
    ``gain_poor``.

    Iteration stops when the projected gradient norm is at most
    ``gtol * (1 + F)``, when a step is shorter than ``xtol * (1 + ||x||)``, or
    when an accepted step lowers the cost by no more than ``ftol`` times its
    value (rounding level).
    """

    max_iter: int = 200
    gtol: float = 1e-9
    xtol: float = 1e-12
    ftol: float = 1e-15
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e16
    gain_good: float = 0.75
    gain_poor: float = 0.25


@dataclass
class LMResult:
    """Per-problem outcome of :func:`projected_lm`.

    ``cost`` is the unhalved squared residual norm ||r(x)||^2.
    ``status`` is 0 for converged, 1 for the iteration limit, 2 for a failed
    evaluation at the start point and 3 for a stalled damping schedule.
    """

    x: np.ndarray
    cost: np.ndarray
    iterations: np.ndarray
    status: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return self.status == 0


def _projected_gradient(x, g, lower, upper):
    return np.clip(x - g, lower, upper) - x


def projected_lm(fun: ResidualFn, x0, lower, upper, options: LMOptions = LMOptions()) -> LMResult:
    """Solve a batch of box-constrained least-squares problems.

    Parameters
    ----------
    fun : callable
        ``fun(x)`` with ``x`` of shape (b, p) returns ``(r, J, valid)`` with
        shapes (b, m), (b, m, p) and (b,).  Rows with ``valid == False`` are
        treated as failed evaluations.
    x0 : ndarray, shape (B, p)
        Start points; they are projected onto the box first.
    lower, upper : array_like, shape (p,)
        Box bounds.
    options : LMOptions

    Returns
    -------
    LMResult
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.atleast_2d(np.asarray(x0, dtype=float)), lower, upper).copy()
    n_prob, p = x.shape
    status = np.ones(n_prob, dtype=int)
    iters = np.zeros(n_prob, dtype=int)
    cost = np.full(n_prob, np.inf)
    if n_prob == 0:
        return LMResult(x, cost, iters, status)

    r, jac, ok = fun(x)
    r = np.array(r, dtype=float)
    jac = np.array(jac, dtype=float)
    status[~ok] = 2
    cost[ok] = np.sum(r[ok] ** 2, axis=1)
    lam = np.full(n_prob, options.lambda0)
    active = ok.copy()
    eye = np.eye(p)

    for _ in range(options.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, ra, ja = x[idx], r[idx], jac[idx]
        g = np.einsum("bmi,bm->bi", ja, ra)
        half_cost = 0.5 * cost[idx]
        pg = _projected_gradient(xa, g, lower, upper)
        done = np.linalg.norm(pg, axis=1) <= options.gtol * (1.0 + half_cost)
        status[idx[done]] = 0
        active[idx[done]] = False
        at_limit = iters[idx] >= options.max_iter
        active[idx[at_limit & ~done]] = False
        keep = ~done & ~at_limit
        if not np.any(keep):
            continue
        idx, xa, ga, ja = idx[keep], xa[keep], g[keep], ja[keep]
        iters[idx] += 1
        # variables held at a bound by an outward-pointing gradient stay fixed
        fixed = ((xa <= lower) & (ga > 0)) | ((xa >= upper) & (ga < 0))
        free = ~fixed
        a = np.einsum("bmi,bmj->bij", ja, ja)
        diag = np.einsum("bii->bi", a)
        scale = np.maximum(diag, 1e-12 * np.maximum(diag.max(axis=1, keepdims=True), 1e-300))
        lhs = a + lam[idx, None, None] * scale[:, :, None] * eye
        mask2 = free[:, :, None] & free[:, None, :]
        lhs = np.where(mask2, lhs, eye)
        rhs = np.where(free, -ga, 0.0)
        try:
            step = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(lhs[i], rhs[i], rcond=None)[0] for i in range(idx.size)])
        step = np.where(np.isfinite(step), step, 0.0)
        x_try = np.clip(xa + step, lower, upper)
        dx = np.linalg.norm(x_try - xa, axis=1)
        tiny = dx <= options.xtol * (1.0 + np.linalg.norm(xa, axis=1))
        status[idx[tiny]] = 0
        active[idx[tiny]] = False
        go = ~tiny
        if not np.any(go):
            continue
        idx, x_try, xa, ga, a = idx[go], x_try[go], xa[go], ga[go], a[go]
        s = x_try - xa
        predicted = -(np.einsum("bi,bi->b", ga, s) + 0.5 * np.einsum("bi,bij,bj->b", s, a, s))
        r_new, j_new, ok_new = fun(x_try)
        c_new = np.where(ok_new, np.sum(np.where(ok_new[:, None], r_new, 0.0) ** 2, axis=1), np.inf)
        actual = 0.5 * (cost[idx] - c_new)
        better = ok_new & (c_new < cost[idx])
        with np.errstate(invalid="ignore", divide="ignore"):
            gain = np.where(predicted > 0, actual / predicted, 0.0)
        acc = idx[better]
        # a decrease at the level of rounding error means F cannot be lowered further
        flat = better & (cost[idx] - c_new <= options.ftol * cost[idx])
        x[acc] = x_try[better]
        r[acc] = r_new[better]
        jac[acc] = j_new[better]
        cost[acc] = c_new[better]
        good = better & (gain > options.gain_good)
        lam[idx[good]] = np.maximum(lam[idx[good]] / options.lambda_down, 1e-12)
        poor = ~better | (gain < options.gain_poor)
        rej = idx[poor]
        lam[rej] *= options.lambda_up
        status[idx[flat]] = 0
        active[idx[flat]] = False
        stalled = rej[lam[rej] > options.lambda_max]
        status[stalled] = 3
        active[stalled] = False
    return LMResult(x, cost, iters, status)
