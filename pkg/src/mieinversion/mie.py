"""Mie extinction efficiency in an absorbing host medium, with analytic gradient.

The extinction efficiency of a sphere of radius r at wavelength l is the series

    Q_ext = l / (2 c I) * sum_n (2n + 1) Im(A_n + B_n)

where A_n and B_n are built from the internal coefficients (c_n, d_n) and the
external coefficients (a_n, b_n), and I is the average incident intensity.
The speed of light c cancels and is set to 1.

Derivatives with respect to the real and imaginary parts of the particle index
use that a_n..d_n are holomorphic in m_part: d/dn_part f = f'(m) and
d/dk_part f = i f'(m).  Squared moduli follow from
d|f|^2 = 2 Re(df conj(f)).

The public scalar API (``q_ext``, ``q_ext_gradient``, ``mie_terms``) wraps a
vectorised kernel, :func:`extinction_batch`, used by the retrieval code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .specfun import derivative_from_table, psi_table, xi_table

__all__ = [
    "EvaluationError",
    "RefractiveIndex",
    "ScatteringContext",
    "MieTermSet",
    "make_context",
    "wiscombe_truncation",
    "wiscombe_index",
    "mie_terms",
    "average_intensity",
    "intensity",
    "q_ext",
    "q_ext_gradient",
    "truncation_weights",
    "extinction_batch",
    "model_vector",
]

SPEED_OF_LIGHT = 1.0
DENOMINATOR_FLOOR = 1e-30
# Budget of complex entries per kernel chunk (points x radii x orders).
_CHUNK_ENTRIES = 300_000


class EvaluationError(ArithmeticError):
    """Raised when the series cannot be evaluated (pole, overflow)."""


@dataclass(frozen=True)
class RefractiveIndex:
    """Complex refractive index m = re + i im with nonnegative parts."""

    re: float
    im: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.re) and np.isfinite(self.im)):
            raise ValueError("refractive index must be finite")
        if self.re < 0 or self.im < 0:
            raise ValueError(f"refractive index parts must be nonnegative, got {self.re}+{self.im}i")

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)

    @classmethod
    def of(cls, m) -> "RefractiveIndex":
        if isinstance(m, RefractiveIndex):
            return m
        if isinstance(m, (tuple, list, np.ndarray)) and len(m) == 2:
            return cls(float(m[0]), float(m[1]))
        m = complex(m)
        return cls(m.real, m.imag)


@dataclass(frozen=True)
class ScatteringContext:
    """Sphere of given radius (um) illuminated at a wavelength (um)."""

    radius: float
    wavelength: float
    m_med: RefractiveIndex
    m_part: RefractiveIndex
    rho: float = field(init=False)
    z_med: complex = field(init=False)
    z_part: complex = field(init=False)

    def __post_init__(self):
        if not self.radius > 0 or not self.wavelength > 0:
            raise ValueError("radius and wavelength must be positive")
        rho = 2.0 * math.pi * self.radius / self.wavelength
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "z_med", rho * self.m_med.value)
        object.__setattr__(self, "z_part", rho * self.m_part.value)


def make_context(r: float, l: float, m_med, m_part) -> ScatteringContext:
    """Build a :class:`ScatteringContext`; indices may be complex numbers."""
    return ScatteringContext(float(r), float(l), RefractiveIndex.of(m_med), RefractiveIndex.of(m_part))


def wiscombe_index(rho, m_med, m_part) -> np.ndarray:
    """Vectorised truncation heuristic ceil(M + 4.05 M^(1/3) + 2)."""
    rho = np.asarray(rho, dtype=float)
    big_m = np.maximum(np.abs(rho), np.maximum(np.abs(rho * m_med), np.abs(rho * m_part)))
    return np.ceil(big_m + 4.05 * np.cbrt(big_m) + 2.0).astype(int)


def wiscombe_truncation(ctx: ScatteringContext) -> int:
    """Truncation index ceil(M + 4.05 M^(1/3) + 2), M = max(|rho|, |z_med|, |z_part|)."""
    return int(wiscombe_index(ctx.rho, ctx.m_med.value, ctx.m_part.value))


def intensity(radius, wavelength, m_med: complex):
    """Average incident intensity I(r, l) with c = 1 (vectorised over radius)."""
    radius = np.asarray(radius, dtype=float)
    n_med, k_med = m_med.real, m_med.imag
    if k_med == 0:
        return math.pi * radius**2 * n_med / (2.0 * SPEED_OF_LIGHT)
    a = 4.0 * math.pi * k_med * radius / wavelength
    # 1 + (a - 1) e^a, evaluated by its Taylor series for small a to avoid cancellation
    k = np.arange(2, 30)
    coef = (k - 1) / np.array([math.factorial(int(i)) for i in k], dtype=float)
    series = np.sum(coef * np.power.outer(np.asarray(a, dtype=float), k), axis=-1)
    direct = 1.0 + (a - 1.0) * np.exp(a)
    bracket = np.where(np.abs(a) < 0.5, series, direct)
    return wavelength**2 / (8.0 * math.pi * k_med**2) * n_med / (2.0 * SPEED_OF_LIGHT) * bracket


def average_intensity(ctx: ScatteringContext) -> float:
    """Average incident intensity for the context, with c = 1."""
    return float(intensity(ctx.radius, ctx.wavelength, ctx.m_med.value))


def truncation_weights(t, n_terms: int) -> np.ndarray:
    """Weights of orders 1..n_terms for a (possibly fractional) truncation index.

    Orders up to floor(t) get weight 1, order floor(t)+1 gets t - floor(t).
    """
    t = np.asarray(t, dtype=float)
    n = np.arange(1, n_terms + 1)
    return np.clip(t[..., None] - n + 1.0, 0.0, 1.0)


def _n_terms(t) -> int:
    return max(1, int(np.ceil(np.max(t))))


@dataclass
class _Series:
    """Per-order quantities of one kernel evaluation (orders 1..n)."""

    terms: np.ndarray
    d_n: np.ndarray | None
    d_k: np.ndarray | None
    valid: np.ndarray
    coeffs: dict | None = None


def _series_literal(radii, wavelength, m_med: complex, m_part, n_terms, gradient=True, keep_coeffs=False) -> _Series:
    """Evaluate prefactor * (2n+1) Im(A_n + B_n) directly from the coefficient formulas.

    Overflows once psi_n(z_med) leaves the floating-point range; used for
    :func:`mie_terms` and as a cross-check of :func:`_series`.

    Shapes: radii (R,), m_part (P,); outputs (R, P, n_terms).
    """
    radii = np.asarray(radii, dtype=float)
    m_part = np.asarray(m_part, dtype=complex)
    zero = m_part == 0
    m_part = np.where(zero, 1.0, m_part)
    m_p = m_part[None, :, None]
    rho = (2.0 * math.pi * radii / wavelength)[:, None]
    z_med = rho * m_med
    z_part = rho * m_part[None, :]
    n = np.arange(1, n_terms + 1)
    rho3 = rho[..., None]
    with np.errstate(all="ignore"):
        tm = xi_table(n_terms, z_med)
        dtm = derivative_from_table(tm, z_med)
        xm, dxm = tm[..., 2:], dtm[..., 1:]
        tp = psi_table(n_terms, z_med)
        dtp = derivative_from_table(tp, z_med)
        pm, dpm = tp[..., 2:], dtp[..., 1:]
        tx = xi_table(n_terms, z_part)
        dtx = derivative_from_table(tx, z_part)
        xp, dxp = tx[..., 2:], dtx[..., 1:]
        ddxp = (n * (n + 1) / z_part[..., None] ** 2 - 1.0) * xp

        ea = m_p * dxm * xp - m_med * xm * dxp
        da = m_p * dpm * xp - m_med * pm * dxp
        eb = m_p * xm * dxp - m_med * dxm * xp
        db = m_p * pm * dxp - m_med * dpm * xp
        w = pm * dxm - dpm * xm
        valid_n = (np.abs(da) >= DENOMINATOR_FLOOR) & (np.abs(db) >= DENOMINATOR_FLOOR)
        a = ea / da
        b = eb / db
        c = m_p * w / db
        d = -m_p * w / da

        lam = wavelength / (2.0 * math.pi)
        u1 = xp * np.conj(dxp) / m_p
        u2 = dxp * np.conj(xp) / m_p
        abs_a, abs_b = np.abs(a) ** 2, np.abs(b) ** 2
        abs_c, abs_d = np.abs(c) ** 2, np.abs(d) ** 2
        big_a = lam * (abs_c * u1 - abs_d * u2)
        v1 = dpm * np.conj(pm) / m_med
        v2 = pm * np.conj(dpm) / m_med
        big_b = lam * (abs_a * v1 - abs_b * v2)

        pref = (wavelength / (2.0 * SPEED_OF_LIGHT * intensity(radii, wavelength, m_med)))[:, None, None]
        pref = pref * (2 * n + 1)
        terms = pref * np.imag(big_a + big_b)
        valid_n &= np.isfinite(terms) & ~zero[None, :, None]

        d_n = d_k = None
        if gradient:
            # derivatives of numerators and denominators with respect to m_part
            dea = dxm * xp + m_p * dxm * rho3 * dxp - m_med * xm * rho3 * ddxp
            dda = dpm * xp + m_p * dpm * rho3 * dxp - m_med * pm * rho3 * ddxp
            deb = xm * dxp + m_p * xm * rho3 * ddxp - m_med * dxm * rho3 * dxp
            ddb = pm * dxp + m_p * pm * rho3 * ddxp - m_med * dpm * rho3 * dxp
            a_m = (dea * da - ea * dda) / da**2
            b_m = (deb * db - eb * ddb) / db**2
            c_m = w * (db - m_p * ddb) / db**2
            d_m = -w * (da - m_p * dda) / da**2

            def sq_n(f, f_m):
                return 2.0 * np.real(f_m * np.conj(f))

            def sq_k(f, f_m):
                return -2.0 * np.imag(f_m * np.conj(f))

            g11 = dxp * np.conj(dxp)
            u1_n = rho3 * (g11 + xp * np.conj(ddxp)) / m_p - u1 / m_p
            u1_k = 1j * rho3 * (g11 - xp * np.conj(ddxp)) / m_p - 1j * u1 / m_p
            u2_n = rho3 * (ddxp * np.conj(xp) + g11) / m_p - u2 / m_p
            u2_k = 1j * rho3 * (ddxp * np.conj(xp) - g11) / m_p - 1j * u2 / m_p

            a_n_ = lam * (sq_n(c, c_m) * u1 + abs_c * u1_n - sq_n(d, d_m) * u2 - abs_d * u2_n)
            a_k_ = lam * (sq_k(c, c_m) * u1 + abs_c * u1_k - sq_k(d, d_m) * u2 - abs_d * u2_k)
            b_n_ = lam * (sq_n(a, a_m) * v1 - sq_n(b, b_m) * v2)
            b_k_ = lam * (sq_k(a, a_m) * v1 - sq_k(b, b_m) * v2)
            d_n = pref * np.imag(a_n_ + b_n_)
            d_k = pref * np.imag(a_k_ + b_k_)
            valid_n &= np.isfinite(d_n) & np.isfinite(d_k)

    coeffs = None
    if keep_coeffs:
        coeffs = dict(a=a, b=b, c=c, d=d, A=big_a, B=big_b)
        if gradient:
            coeffs.update(a_m=a_m, b_m=b_m, c_m=c_m, d_m=d_m)
    return _Series(terms, d_n, d_k, valid_n, coeffs)



def _series(radii, wavelength, m_med: complex, m_part, n_terms, gradient=True) -> _Series:
    """Evaluate prefactor * (2n+1) Im(A_n + B_n) for orders 1..n_terms.

    Same quantities as :func:`_series_literal`, rewritten with the logarithmic
    derivatives D = xi'(z_part)/xi(z_part) and L = psi'(z_med)/psi(z_med):

        a psi = (m xi'_m - m_med xi_m D) / (m L - m_med D)
        b psi = (m xi_m D - m_med xi'_m) / (m D - m_med L)
        c xi  =  m W / (psi (m D - m_med L))
        d xi  = -m W / (psi (m L - m_med D)),     W = psi xi'_m - psi' xi_m

    so that |a|^2 psi' conj(psi) = |a psi|^2 L and so on.  Every factor stays
    bounded where psi_n(z_med) is huge and xi_n(z_med) tiny.

    Shapes: radii (R,), m_part (P,); outputs (R, P, n_terms).
    """
    radii = np.asarray(radii, dtype=float)
    m_part = np.asarray(m_part, dtype=complex)
    zero = m_part == 0
    m_part = np.where(zero, 1.0, m_part)
    m_p = m_part[None, :, None]
    rho = (2.0 * math.pi * radii / wavelength)[:, None]
    z_med = rho * m_med
    z_part = rho * m_part[None, :]
    n = np.arange(1, n_terms + 1)
    rho3 = rho[..., None]
    with np.errstate(all="ignore"):
        tm = xi_table(n_terms, z_med)
        dtm = derivative_from_table(tm, z_med)
        xm, dxm = tm[..., 2:], dtm[..., 1:]
        tp = psi_table(n_terms, z_med)
        dtp = derivative_from_table(tp, z_med)
        pm, dpm = tp[..., 2:], dtp[..., 1:]
        lm = dpm / pm
        w_over_p = (pm * dxm - dpm * xm) / pm
        tx = xi_table(n_terms, z_part)
        dtx = derivative_from_table(tx, z_part)
        dp = dtx[..., 1:] / tx[..., 2:]

        den1 = m_p * lm - m_med * dp  # Da / (psi xi_p)
        den2 = m_p * dp - m_med * lm  # Db / (psi xi_p)
        num_a = m_p * dxm - m_med * xm * dp
        num_b = m_p * xm * dp - m_med * dxm
        ta = num_a / den1
        tb = num_b / den2
        tc = m_p * w_over_p / den2
        td = -m_p * w_over_p / den1
        valid_n = (np.abs(den1) >= DENOMINATOR_FLOOR) & (np.abs(den2) >= DENOMINATOR_FLOOR)

        lam = wavelength / (2.0 * math.pi)
        abs_a, abs_b = np.abs(ta) ** 2, np.abs(tb) ** 2
        abs_c, abs_d = np.abs(tc) ** 2, np.abs(td) ** 2
        g = abs_c * np.conj(dp) - abs_d * dp
        big_a = lam * g / m_p
        big_b = lam * (abs_a * lm - abs_b * np.conj(lm)) / m_med

        pref = (wavelength / (2.0 * SPEED_OF_LIGHT * intensity(radii, wavelength, m_med)))[:, None, None]
        pref = pref * (2 * n + 1)
        terms = pref * np.imag(big_a + big_b)
        valid_n &= np.isfinite(terms) & ~zero[None, :, None]

        d_n = d_k = None
        if gradient:
            # d/dm of the log-derivative: rho (xi''/xi - D^2)
            dp_m = rho3 * ((n * (n + 1) / z_part[..., None] ** 2 - 1.0) - dp * dp)
            dden1 = lm - m_med * dp_m
            dden2 = dp + m_p * dp_m
            ta_m = ((-m_med * xm * dp_m) * den1 - num_a * dden1) / den1**2 + dxm / den1
            tb_m = ((xm * dp + m_p * xm * dp_m) * den2 - num_b * dden2) / den2**2
            tc_m = w_over_p * (den2 - m_p * dden2) / den2**2
            td_m = -w_over_p * (den1 - m_p * dden1) / den1**2

            def sq_n(f, f_m):
                return 2.0 * np.real(f_m * np.conj(f))

            def sq_k(f, f_m):
                return -2.0 * np.imag(f_m * np.conj(f))

            g_n = sq_n(tc, tc_m) * np.conj(dp) + abs_c * np.conj(dp_m) - sq_n(td, td_m) * dp - abs_d * dp_m
            g_k = (sq_k(tc, tc_m) * np.conj(dp) + abs_c * np.conj(1j * dp_m)
                   - sq_k(td, td_m) * dp - abs_d * 1j * dp_m)
            a_n_ = lam * (g_n / m_p - g / m_p**2)
            a_k_ = lam * (g_k / m_p - 1j * g / m_p**2)
            b_n_ = lam * (sq_n(ta, ta_m) * lm - sq_n(tb, tb_m) * np.conj(lm)) / m_med
            b_k_ = lam * (sq_k(ta, ta_m) * lm - sq_k(tb, tb_m) * np.conj(lm)) / m_med
            d_n = pref * np.imag(a_n_ + b_n_)
            d_k = pref * np.imag(a_k_ + b_k_)
            valid_n &= np.isfinite(d_n) & np.isfinite(d_k)
    return _Series(terms, d_n, d_k, valid_n)


def _points_to_complex(x) -> np.ndarray:
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return x.reshape(-1)
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    return x[:, 0] + 1j * x[:, 1]


def extinction_batch(x, radii, wavelength: float, m_med, t, gradient: bool = True):
    """Model values pi r_i^2 Q_ext for many particle indices at once.

    Parameters
    ----------
    x : array_like
        Particle indices, either complex of shape (P,) or real of shape (P, 2).
    radii : array_like
        Radii in um, shape (R,).
    wavelength : float
        Wavelength in um.
    m_med : complex or RefractiveIndex
        Index of the host medium.
    t : float or array_like
        Truncation index; scalar, shape (P,) or shape (P, R).
    gradient : bool
        Whether to return the Jacobian.

    Returns
    -------
    values : ndarray, shape (P, R)
    jac : ndarray, shape (P, R, 2) or None
        Derivatives with respect to (n_part, k_part).
    valid : ndarray of bool, shape (P,)
        False where some needed term could not be evaluated.
    """
    m_med = RefractiveIndex.of(m_med).value
    mp_all = _points_to_complex(x)
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    n_pts, n_rad = mp_all.size, radii.size
    t_arr = np.asarray(t, dtype=float)
    if t_arr.ndim == 1:
        t_arr = t_arr[:, None]
    t_all = np.broadcast_to(t_arr, (n_pts, n_rad))
    if np.any(t_all < 0):
        raise ValueError("truncation index must be nonnegative")
    values = np.zeros((n_pts, n_rad))
    jac = np.zeros((n_pts, n_rad, 2)) if gradient else None
    valid = np.zeros(n_pts, dtype=bool)
    if n_pts == 0:
        return values, jac, valid
    area = math.pi * radii**2
    # group points of similar cost together
    rho_max = 2.0 * math.pi * radii.max() / wavelength
    key = np.maximum(np.ceil(t_all.max(axis=1)), rho_max * np.abs(mp_all))
    order = np.argsort(key, kind="stable")
    start = 0
    while start < n_pts:
        n_terms = _n_terms(t_all[order[start]])
        size = max(1, _CHUNK_ENTRIES // (n_rad * (n_terms + 2)))
        stop = min(n_pts, start + size)
        idx = order[start:stop]
        n_terms = _n_terms(t_all[idx])
        s = _series(radii, wavelength, m_med, mp_all[idx], n_terms, gradient)
        wts = truncation_weights(t_all[idx].T, n_terms)  # (R, p, n)
        needed = wts > 0
        ok = np.all(s.valid | ~needed, axis=(0, 2))
        with np.errstate(invalid="ignore"):
            values[idx] = (np.sum(np.where(needed, s.terms * wts, 0.0), axis=2) * area[:, None]).T
            if gradient:
                jac[idx, :, 0] = (np.sum(np.where(needed, s.d_n * wts, 0.0), axis=2) * area[:, None]).T
                jac[idx, :, 1] = (np.sum(np.where(needed, s.d_k * wts, 0.0), axis=2) * area[:, None]).T
        valid[idx] = ok
        start = stop
    return values, jac, valid


@dataclass(frozen=True)
class MieTermSet:
    """Coefficients a..d and series terms A, B of one multipole order."""

    order: int
    a: complex
    b: complex
    c: complex
    d: complex
    A: complex
    B: complex
    valid: bool


def mie_terms(ctx: ScatteringContext, n: int) -> MieTermSet:
    """Mie coefficients and series terms of order ``n`` for one context."""
    n = int(n)
    if n < 1:
        raise ValueError("order must be >= 1")
    s = _series_literal([ctx.radius], ctx.wavelength, ctx.m_med.value, [ctx.m_part.value], n,
                        gradient=False, keep_coeffs=True)
    co = {k: complex(v[0, 0, n - 1]) for k, v in s.coeffs.items()}
    return MieTermSet(n, co["a"], co["b"], co["c"], co["d"], co["A"], co["B"], bool(s.valid[0, 0, n - 1]))


def _check_t(t) -> float:
    t = float(t)
    if not t >= 1:
        raise ValueError("truncation index must be >= 1")
    return t


def q_ext(ctx: ScatteringContext, t: float) -> float:
    """Extinction efficiency truncated at (possibly fractional) index ``t``.

    Raises
    ------
    EvaluationError
        If a term needed by the truncation is not finite or hits a pole.
    """
    t = _check_t(t)
    v, _, ok = extinction_batch([ctx.m_part.value], [ctx.radius], ctx.wavelength, ctx.m_med, t, gradient=False)
    if not ok[0]:
        raise EvaluationError(f"extinction series could not be evaluated for {ctx}")
    return float(v[0, 0] / (math.pi * ctx.radius**2))


def q_ext_gradient(ctx: ScatteringContext, t: float) -> tuple[float, float]:
    """Partial derivatives (dQ/dn_part, dQ/dk_part) of the truncated efficiency."""
    t = _check_t(t)
    _, j, ok = extinction_batch([ctx.m_part.value], [ctx.radius], ctx.wavelength, ctx.m_med, t)
    if not ok[0]:
        raise EvaluationError(f"extinction series could not be evaluated for {ctx}")
    area = math.pi * ctx.radius**2
    return float(j[0, 0, 0] / area), float(j[0, 0, 1] / area)


def model_vector(x, radii, l: float, m_med, t) -> tuple[np.ndarray, np.ndarray]:
    """Model vector (pi r_i^2 Q_ext(r_i))_i and its N x 2 Jacobian at x = (n, k).

    Raises
    ------
    EvaluationError
        Naming the first radius whose series failed.
    """
    x = np.asarray(x, dtype=float).reshape(2)
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    if radii.size == 0:
        raise ValueError("radii must be nonempty")
    vals = np.empty(radii.size)
    jac = np.empty((radii.size, 2))
    for i, r in enumerate(radii):
        v, j, ok = extinction_batch(x[None, :], [r], l, m_med, t)
        if not ok[0]:
            raise EvaluationError(f"model evaluation failed for radius index {i} (r={r})")
        vals[i], jac[i] = v[0, 0], j[0, 0]
    return vals, jac
