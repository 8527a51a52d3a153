"""Half-integer Bessel functions and Riccati-Bessel functions of complex argument.

The Riccati-Bessel functions used throughout the package are

    xi_n(z)  = sqrt(pi/2) sqrt(z) J_{n+1/2}(z)                     (= z j_n(z))
    psi_n(z) = sqrt(pi/2) sqrt(z) (J_{n+1/2}(z) + i Y_{n+1/2}(z))   (= z h_n^(1)(z))

with the principal branch of ``sqrt``.  Internally everything is computed from
the spherical Bessel functions j_n and y_n, for which

* j_n is obtained by Miller's downward recurrence, normalised against the
  closed form of j_0 or j_1 (whichever is larger in magnitude), and
* y_n is obtained from the spherical Hankel function h^(1)_n, itself computed
  by upward recurrence from its closed forms (upward recurrence of y_n alone
  breaks down far from the real axis).

Downward recurrence is used for every argument, not only for |z| < n: off the
real axis the upward recurrence for j_n loses accuracy once n approaches
|Im z|, even when |z| > n.

All table functions are vectorised over arbitrary arrays of arguments.
Entries that overflow are reported through a boolean ``finite`` mask instead of
being silently saturated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BesselBatch",
    "bessel_batch",
    "spherical_jy",
    "spherical_h1",
    "xi_table",
    "psi_table",
    "riccati_xi",
    "riccati_psi",
    "riccati_xi_prime",
    "riccati_psi_prime",
    "riccati_xi_second",
]

# Rescaling threshold used by the downward recurrence to avoid overflow.
_BIG = 1e150
_SMALL = 1e-150


def _as_complex_array(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    if np.any(z == 0):
        raise ValueError("argument z must be nonzero")
    return z


def _miller_start(n_max: int, abs_z_max: float) -> int:
    """Starting order for the downward recurrence."""
    ref = max(float(n_max), abs_z_max)
    return int(np.ceil(ref + 10.0 + 4.0 * ref ** (1.0 / 3.0))) + 5


def spherical_j(n_max: int, z) -> np.ndarray:
    """Spherical Bessel functions j_0..j_{n_max} by Miller's algorithm.

    Parameters
    ----------
    n_max : int
        Highest order returned.
    z : array_like of complex
        Nonzero arguments of any shape.

    Returns
    -------
    ndarray
        Array of shape ``z.shape + (n_max + 1,)``.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    z = _as_complex_array(z)
    shape = z.shape
    zf = z.ravel()
    m = zf.size
    out = np.zeros((m, n_max + 1), dtype=complex)
    if m == 0:
        return out.reshape(shape + (n_max + 1,))
    # exponent (in units of log10(_BIG)) attached to each stored order
    exps = np.zeros((m, n_max + 1), dtype=np.int64)
    start = _miller_start(n_max, float(np.max(np.abs(zf))))
    inv_z = 1.0 / zf
    f_hi = np.zeros(m, dtype=complex)  # f_{n+1}
    f_cur = np.full(m, 1e-30, dtype=complex)  # f_n
    level = np.zeros(m, dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(start, 0, -1):
            if n <= n_max:
                out[:, n] = f_cur
                exps[:, n] = level
            f_lo = (2 * n + 1) * inv_z * f_cur - f_hi
            f_hi, f_cur = f_cur, f_lo
            big = np.abs(f_cur) > _BIG
            if np.any(big):
                f_cur[big] *= _SMALL
                f_hi[big] *= _SMALL
                level[big] += 1
        out[:, 0] = f_cur
        exps[:, 0] = level
        # values stored earlier carry a smaller exponent than the final level
        shift = exps - level[:, None]
        scaled = out * np.power(_BIG, shift.astype(float))
        sin_z = np.sin(zf)
        cos_z = np.cos(zf)
        j0 = sin_z * inv_z
        j1 = (sin_z * inv_z - cos_z) * inv_z
        if n_max >= 1:
            use_j1 = np.abs(j1) > np.abs(j0)
            anchor = np.where(use_j1, j1, j0)
            raw = np.where(use_j1, scaled[:, 1], scaled[:, 0])
        else:
            anchor, raw = j0, scaled[:, 0]
        result = scaled * (anchor / raw)[:, None]
    return result.reshape(shape + (n_max + 1,))


def spherical_h1(n_max: int, z) -> np.ndarray:
    """Spherical Hankel functions h^(1)_0..h^(1)_{n_max} by upward recurrence.

    h^(1)_n grows with n for every argument, so the upward recurrence is
    stable.  Entries that overflow come back as non-finite values.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    z = _as_complex_array(z)
    out = np.empty(z.shape + (n_max + 1,), dtype=complex)
    with np.errstate(over="ignore", invalid="ignore"):
        inv_z = 1.0 / z
        e = np.exp(1j * z)
        out[..., 0] = -1j * e * inv_z
        if n_max >= 1:
            out[..., 1] = -e * (z + 1j) * inv_z * inv_z
        for n in range(1, n_max):
            out[..., n + 1] = (2 * n + 1) * inv_z * out[..., n] - out[..., n - 1]
    return out


def spherical_y(n_max: int, z) -> np.ndarray:
    """Spherical Bessel functions y_0..y_{n_max}.

    Formed as y_n = -i (h^(1)_n - j_n) so that the result stays accurate far
    from the real axis, where y_n is dominated by its j_n component.
    """
    j = spherical_j(n_max, z)
    h = spherical_h1(n_max, z)
    with np.errstate(over="ignore", invalid="ignore"):
        return -1j * (h - j)


def spherical_jy(n_max: int, z) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(j, y)`` tables of spherical Bessel functions, orders 0..n_max."""
    j = spherical_j(n_max, z)
    h = spherical_h1(n_max, z)
    with np.errstate(over="ignore", invalid="ignore"):
        return j, -1j * (h - j)


@dataclass(frozen=True)
class BesselBatch:
    """Half-integer Bessel functions J_{k+1/2}(z), Y_{k+1/2}(z) for k = 0..order_max.

    ``finite`` flags entries that could be represented; callers must treat a
    ``False`` entry as an evaluation failure.
    """

    order_max: int
    argument: complex
    j_half: np.ndarray
    y_half: np.ndarray
    finite: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.finite))


def bessel_batch(n_max: int, z: complex) -> BesselBatch:
    """Evaluate J_{k+1/2}(z) and Y_{k+1/2}(z) for k = 0..n_max.

    Raises
    ------
    ValueError
        If ``z == 0`` or ``n_max < 0``.
    """
    z = complex(z)
    j, y = spherical_jy(n_max, z)
    factor = np.sqrt(2.0 / np.pi) * np.sqrt(z)
    with np.errstate(over="ignore", invalid="ignore"):
        jh = factor * j
        yh = factor * y
    finite = np.isfinite(jh) & np.isfinite(yh)
    return BesselBatch(int(n_max), z, jh, yh, finite)


def xi_table(n_max: int, z) -> np.ndarray:
    """xi_n(z) for n = -1..n_max, last axis indexed by ``n + 1``.

    xi_{-1}(z) = cos z is included so that derivatives can be formed for n = 0.
    """
    z = _as_complex_array(z)
    out = np.empty(z.shape + (n_max + 2,), dtype=complex)
    out[..., 0] = np.cos(z)
    out[..., 1:] = z[..., None] * spherical_j(n_max, z)
    return out


def psi_table(n_max: int, z) -> np.ndarray:
    """psi_n(z) for n = -1..n_max, last axis indexed by ``n + 1``."""
    z = _as_complex_array(z)
    out = np.empty(z.shape + (n_max + 2,), dtype=complex)
    with np.errstate(over="ignore", invalid="ignore"):
        out[..., 0] = np.exp(1j * z)
        out[..., 1:] = z[..., None] * spherical_h1(n_max, z)
    return out


def derivative_from_table(table: np.ndarray, z) -> np.ndarray:
    """First derivatives of orders 0..n_max from an order -1..n_max table.

    Uses f'_n(z) = f_{n-1}(z) - (n/z) f_n(z).
    """
    z = np.asarray(z, dtype=complex)
    n = np.arange(table.shape[-1] - 1)
    with np.errstate(over="ignore", invalid="ignore"):
        return table[..., :-1] - n * table[..., 1:] / z[..., None]


def _scalar_order(n: int) -> int:
    n = int(n)
    if n < 0:
        raise ValueError("order n must be nonnegative")
    return n


def riccati_xi(n: int, z: complex) -> complex:
    """xi_n(z) = sqrt(pi/2) sqrt(z) J_{n+1/2}(z)."""
    n = _scalar_order(n)
    return complex(xi_table(n, z)[n + 1])


def riccati_psi(n: int, z: complex) -> complex:
    """psi_n(z) = sqrt(pi/2) sqrt(z) (J_{n+1/2}(z) + i Y_{n+1/2}(z))."""
    n = _scalar_order(n)
    return complex(psi_table(n, z)[n + 1])


def riccati_xi_prime(n: int, z: complex) -> complex:
    """First derivative of xi_n at z."""
    n = _scalar_order(n)
    tab = xi_table(n, z)
    return complex(derivative_from_table(tab, z)[n])


def riccati_psi_prime(n: int, z: complex) -> complex:
    """First derivative of psi_n at z."""
    n = _scalar_order(n)
    tab = psi_table(n, z)
    return complex(derivative_from_table(tab, z)[n])


def riccati_xi_second(n: int, z: complex) -> complex:
    """Second derivative of xi_n, (n(n+1)/z^2 - 1) xi_n(z)."""
    n = _scalar_order(n)
    z = complex(z)
    xi = riccati_xi(n, z)
    return (n * (n + 1) / z**2 - 1.0) * xi
