"""Independent reference implementations used only by the tests.

Nothing here imports the production kernels.  The Bessel oracle uses mpmath
hypergeometric evaluation, the classical Mie oracle follows the textbook
logarithmic-derivative scheme for a non-absorbing host, and the smoothness
oracle enumerates every combination with itertools.
"""
from __future__ import annotations

import cmath
import itertools
import math

import mpmath as mp
import numpy as np

DPS = 40


def mp_sph_j(n: int, z) -> complex:
    """Spherical Bessel j_n(z) in high precision."""
    with mp.workdps(DPS):
        z = mp.mpc(z)
        return complex(mp.sqrt(mp.pi / (2 * z)) * mp.besselj(n + mp.mpf(1) / 2, z))


def mp_sph_y(n: int, z) -> complex:
    with mp.workdps(DPS):
        z = mp.mpc(z)
        return complex(mp.sqrt(mp.pi / (2 * z)) * mp.bessely(n + mp.mpf(1) / 2, z))


def mp_bessel_half(n: int, z) -> tuple[complex, complex]:
    """(J_{n+1/2}(z), Y_{n+1/2}(z))."""
    with mp.workdps(DPS):
        z = mp.mpc(z)
        nu = n + mp.mpf(1) / 2
        return complex(mp.besselj(nu, z)), complex(mp.bessely(nu, z))


def mp_xi(n: int, z) -> complex:
    """z j_n(z)."""
    with mp.workdps(DPS):
        z = mp.mpc(z)
        return complex(mp.sqrt(mp.pi * z / 2) * mp.besselj(n + mp.mpf(1) / 2, z))


def mp_psi(n: int, z) -> complex:
    """z h1_n(z) = z (j_n + i y_n)."""
    with mp.workdps(DPS):
        z = mp.mpc(z)
        nu = n + mp.mpf(1) / 2
        return complex(mp.sqrt(mp.pi * z / 2) * (mp.besselj(nu, z) + 1j * mp.bessely(nu, z)))


def xi1_closed(z: complex) -> complex:
    """xi_1(z) = sin z / z - cos z."""
    return cmath.sin(z) / z - cmath.cos(z)


def psi2_closed(z: complex) -> complex:
    """z h1_2(z) from the elementary expression of the spherical Hankel function."""
    return z * cmath.exp(1j * z) * (1j / z - 3 / z**2 - 3j / z**3)


def central_diff(f, z, h=1e-6):
    return (f(z + h) - f(z - h)) / (2 * h)


def second_diff(f, z, h=1e-4):
    return (f(z + h) - 2 * f(z) + f(z - h)) / h**2


def cauchy_derivative(f, z: complex, radius: float = 1e-3, n: int = 16) -> complex:
    """f'(z) for holomorphic f from the trapezoidal Cauchy integral (spectrally accurate)."""
    theta = 2 * np.pi * np.arange(n) / n
    pts = z + radius * np.exp(1j * theta)
    vals = np.array([f(p) for p in pts])
    return complex(np.mean(vals * np.exp(-1j * theta)) / radius)


def classical_qext(size: float, m_rel: complex, n_stop: int | None = None) -> float:
    """Extinction efficiency of a sphere in a non-absorbing host.

    ``size`` is the size parameter in the host, ``m_rel`` the particle index
    relative to the host.  The particle log-derivative is obtained by
    downward recurrence and the host functions by upward recurrence.
    """
    x = float(size)
    mx = m_rel * x
    if n_stop is None:
        n_stop = int(round(x + 4.0 * x ** (1 / 3) + 2.0))
    nmx = int(round(max(n_stop, abs(mx)) + 16))
    d = [0j] * (nmx + 1)
    for n in range(nmx, 0, -1):
        d[n - 1] = n / mx - 1.0 / (d[n] + n / mx)
    psi0, psi1 = math.cos(x), math.sin(x)
    chi0, chi1 = -math.sin(x), math.cos(x)
    xi1 = complex(psi1, -chi1)
    total = 0.0
    for n in range(1, n_stop + 1):
        psi = (2 * n - 1) * psi1 / x - psi0
        chi = (2 * n - 1) * chi1 / x - chi0
        xi = complex(psi, -chi)
        an = ((d[n] / m_rel + n / x) * psi - psi1) / ((d[n] / m_rel + n / x) * xi - xi1)
        bn = ((m_rel * d[n] + n / x) * psi - psi1) / ((m_rel * d[n] + n / x) * xi - xi1)
        total += (2 * n + 1) * (an + bn).real
        psi0, psi1 = psi1, psi
        chi0, chi1 = chi1, chi
        xi1 = complex(psi1, -chi1)
    return 2.0 / x**2 * total


def classical_qext_mp(size: float, m_rel: complex, n_stop: int) -> float:
    """Same quantity directly from mpmath Bessel functions (validates :func:`classical_qext`)."""
    total = mp.mpf(0)
    with mp.workdps(30):
        x = mp.mpf(size)
        mx = mp.mpc(m_rel) * x
        for n in range(1, n_stop + 1):
            nu = n + mp.mpf(1) / 2

            def riccati_j(z, k):
                return mp.sqrt(mp.pi * z / 2) * mp.besselj(k + mp.mpf(1) / 2, z)

            def riccati_h(z, k):
                nu_ = k + mp.mpf(1) / 2
                return mp.sqrt(mp.pi * z / 2) * (mp.besselj(nu_, z) + 1j * mp.bessely(nu_, z))

            pj, pjm = riccati_j(x, n), riccati_j(x, n - 1)
            dpj = pjm - n * pj / x
            h, hm = riccati_h(x, n), riccati_h(x, n - 1)
            dh = hm - n * h / x
            q, qm = riccati_j(mx, n), riccati_j(mx, n - 1)
            dq = qm - n * q / mx
            m = mp.mpc(m_rel)
            an = (m * q * dpj - pj * dq) / (m * q * dh - h * dq)
            bn = (q * dpj - m * pj * dq) / (q * dh - m * h * dq)
            total += (2 * n + 1) * mp.re(an + bn)
            del nu
        return float(2 / x**2 * total)


def intensity_formula(r: float, l: float, m_med: complex) -> float:
    """Average incident intensity in mpmath, c = 1."""
    with mp.workdps(30):
        n_med, k_med = mp.mpf(m_med.real), mp.mpf(m_med.imag)
        r, l = mp.mpf(r), mp.mpf(l)
        if k_med == 0:
            return float(mp.pi * r**2 * n_med / 2)
        a = 4 * mp.pi * k_med * r / l
        return float(l**2 / (8 * mp.pi * k_med**2) * n_med / 2 * (1 + (a - 1) * mp.exp(a)))


def smoothness(points) -> float:
    pts = [tuple(map(float, p)) for p in points]
    total = 0.0
    for i in range(1, len(pts) - 1):
        for c in range(2):
            total += (pts[i - 1][c] - 2 * pts[i][c] + pts[i + 1][c]) ** 2
    return total


def brute_force_min(candidates) -> tuple[float, tuple[int, ...]]:
    """Exhaustive minimum of :func:`smoothness` over all combinations."""
    best, arg = math.inf, None
    for picks in itertools.product(*[range(len(c)) for c in candidates]):
        s = smoothness([candidates[i][p] for i, p in enumerate(picks)])
        if s < best:
            best, arg = s, picks
    return best, arg


def classical_coeffs_mp(size: float, m_rel: complex, n: int) -> tuple[complex, complex]:
    """Textbook a_n, b_n for a non-absorbing host from mpmath Bessel functions."""
    with mp.workdps(30):
        x = mp.mpf(size)
        m = mp.mpc(m_rel)
        mx = m * x

        def rj(z, k):
            return mp.sqrt(mp.pi * z / 2) * mp.besselj(k + mp.mpf(1) / 2, z)

        def rh(z, k):
            nu = k + mp.mpf(1) / 2
            return mp.sqrt(mp.pi * z / 2) * (mp.besselj(nu, z) + 1j * mp.bessely(nu, z))

        pj = rj(x, n)
        dpj = rj(x, n - 1) - n * pj / x
        h = rh(x, n)
        dh = rh(x, n - 1) - n * h / x
        q = rj(mx, n)
        dq = rj(mx, n - 1) - n * q / mx
        an = (m * q * dpj - pj * dq) / (m * q * dh - h * dq)
        bn = (q * dpj - m * pj * dq) / (q * dh - m * h * dq)
        return complex(an), complex(bn)
