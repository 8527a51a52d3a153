"""Synthetic spectral extinction data for monodisperse aerosols.

Extinctions are simulated in normalised units (particle count 1), so a
measurement at radius r is pi r^2 Q_ext(r, l).

Random numbers come from numpy's PCG64 generator; Gaussian variates use
numpy's ziggurat transform (``Generator.standard_normal``).  Each wavelength
draws from its own substream seeded by ``SeedSequence([seed, sweep, j])``, so
serial and parallel runs produce identical data.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .materials import DispersionTable, index_at
from .mie import RefractiveIndex, extinction_batch, wiscombe_index

__all__ = [
    "SIGMA_FLOOR",
    "MeasurementSet",
    "NoiseModel",
    "simulate_true",
    "noisy_means",
    "build_noise_model",
    "measurement_rng",
    "write_measurements_csv",
    "read_measurements_csv",
]

SIGMA_FLOOR = 1e-30
MEASUREMENT_COLUMNS = ("wavelength_um", "radius_um", "mean_extinction", "sigma", "n_samples")


@dataclass(frozen=True)
class MeasurementSet:
    """Sample means of normalised extinction at one wavelength.

    Attributes
    ----------
    radii : ndarray
        Particle radii in um.
    wavelength : float
        Wavelength in um.
    means : ndarray
        Sample means e_i.
    sample_std : ndarray
        Sample standard deviations of the individual draws (divisor N_s - 1).
    sample_size : int
        Number of draws N_s behind every mean.
    particle_counts : ndarray
        Particle counts n_i; always 1 for normalised data.
    """

    radii: np.ndarray
    wavelength: float
    means: np.ndarray
    sample_std: np.ndarray
    sample_size: int
    particle_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "means", np.atleast_1d(np.asarray(self.means, dtype=float)))
        object.__setattr__(self, "sample_std", np.atleast_1d(np.asarray(self.sample_std, dtype=float)))
        if self.particle_counts is None:
            object.__setattr__(self, "particle_counts", np.ones_like(radii))
        n = radii.size
        if not (self.means.size == self.sample_std.size == self.particle_counts.size == n):
            raise ValueError("radii, means, sample_std and particle_counts must have equal length")
        if not np.all(np.isfinite(self.means)):
            raise ValueError("means must be finite")
        if self.sample_size < 1:
            raise ValueError("sample_size must be positive")

    @property
    def sigmas(self) -> np.ndarray:
        """Standard deviation of each sample mean, floored at ``SIGMA_FLOOR``."""
        se = self.sample_std / self.particle_counts / np.sqrt(self.sample_size)
        return np.maximum(se, SIGMA_FLOOR)


@dataclass(frozen=True)
class NoiseModel:
    """Noise level delta^2 = max sigma_i^2 and scaled variances sigma_i^2 / delta^2."""

    delta_sq: float
    sigma_scaled: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        """Diagonal of Sigma^{-1/2}."""
        return 1.0 / np.sqrt(self.sigma_scaled)


def build_noise_model(ms_or_sigmas) -> NoiseModel:
    """Noise model from a :class:`MeasurementSet` or an array of sigmas.

    Raises
    ------
    ValueError
        If all sigmas are zero or any is negative.
    """
    sig = ms_or_sigmas.sigmas if isinstance(ms_or_sigmas, MeasurementSet) else ms_or_sigmas
    sig = np.asarray(sig, dtype=float)
    if np.any(sig < 0) or not np.all(np.isfinite(sig)):
        raise ValueError("sigmas must be finite and nonnegative")
    delta_sq = float(np.max(sig**2)) if sig.size else 0.0
    if delta_sq == 0.0:
        raise ValueError("degenerate noise model: all sigmas are zero")
    scaled = sig**2 / delta_sq
    if np.any(scaled == 0):
        raise ValueError("degenerate noise model: a zero sigma cannot be inverted")
    return NoiseModel(delta_sq, scaled)


MaterialLike = DispersionTable | Callable[[float], object]


def _material_index(material: MaterialLike, l: float) -> complex:
    if isinstance(material, DispersionTable):
        return index_at(material, l).value
    value = material(l)
    return RefractiveIndex.of(value).value


def simulate_true(material: MaterialLike, m_med, radii: Sequence[float], wavelengths: Sequence[float]) -> np.ndarray:
    """Noise-free extinctions e[i, j] = pi r_i^2 Q_ext(r_i, l_j) at the Wiscombe truncation.

    ``material`` and ``m_med`` may be dispersion tables, callables of the
    wavelength, or constant indices (``m_med`` only).
    """
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    wavelengths = np.atleast_1d(np.asarray(wavelengths, dtype=float))
    out = np.empty((radii.size, wavelengths.size))
    for j, l in enumerate(wavelengths):
        try:
            m_part = _material_index(material, l)
        except ValueError as exc:
            raise ValueError(f"no refractive index for wavelength {l} um: {exc}") from exc
        mm = _material_index(m_med, l) if (isinstance(m_med, DispersionTable) or callable(m_med)) \
            else RefractiveIndex.of(m_med).value
        rho = 2 * np.pi * radii / l
        t = wiscombe_index(rho, mm, m_part)
        vals, _, ok = extinction_batch([m_part], radii, l, mm, t[None, :], gradient=False)
        if not ok[0]:
            raise ArithmeticError(f"extinction could not be evaluated at wavelength {l} um")
        out[:, j] = vals[0]
    return out


def measurement_rng(seed: int, sweep: int, wavelength_index: int) -> np.random.Generator:
    """Independent generator for one (seed, sweep, wavelength) triple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(sweep), int(wavelength_index)])))


def noisy_means(
    e_true,
    noise_fraction: float,
    sample_size: int,
    seed: int,
    radii: Sequence[float],
    wavelengths: Sequence[float],
    sweep: int = 0,
) -> list[MeasurementSet]:
    """Average ``sample_size`` noisy draws e_true * (1 + noise_fraction * Z) per entry.

    Returns one :class:`MeasurementSet` per wavelength (column of ``e_true``).
    """
    if noise_fraction < 0:
        raise ValueError("noise_fraction must be nonnegative")
    if sample_size < 2:
        raise ValueError("sample_size must be at least 2")
    e_true = np.atleast_2d(np.asarray(e_true, dtype=float))
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    wavelengths = np.atleast_1d(np.asarray(wavelengths, dtype=float))
    if e_true.shape != (radii.size, wavelengths.size):
        raise ValueError("e_true must have shape (len(radii), len(wavelengths))")
    out = []
    for j, l in enumerate(wavelengths):
        e = e_true[:, j]
        if noise_fraction == 0:
            means, std = e.copy(), np.zeros_like(e)
        else:
            z = measurement_rng(seed, sweep, j).standard_normal((sample_size, radii.size))
            draws = e + noise_fraction * e * z
            means = draws.mean(axis=0)
            std = draws.std(axis=0, ddof=1)
        out.append(MeasurementSet(radii, float(l), means, std, int(sample_size)))
    return out


def write_measurements_csv(sets: Sequence[MeasurementSet], path) -> None:
    """Write measurement sets; ``sigma`` is the per-draw sample standard deviation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MEASUREMENT_COLUMNS)
        for ms in sets:
            for r, m, s in zip(ms.radii, ms.means, ms.sample_std):
                w.writerow([repr(float(ms.wavelength)), repr(float(r)), repr(float(m)), repr(float(s)), ms.sample_size])


def read_measurements_csv(path) -> list[MeasurementSet]:
    """Inverse of :func:`write_measurements_csv`; groups rows by wavelength in file order."""
    groups: dict[float, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MEASUREMENT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"measurement file lacks columns {sorted(missing)}")
        for row in reader:
            groups.setdefault(float(row["wavelength_um"]), []).append(row)
    out = []
    for l, rows in groups.items():
        sizes = {int(r["n_samples"]) for r in rows}
        if len(sizes) != 1:
            raise ValueError(f"inconsistent n_samples at wavelength {l}")
        out.append(MeasurementSet(
            [float(r["radius_um"]) for r in rows], l,
            [float(r["mean_extinction"]) for r in rows],
            [float(r["sigma"]) for r in rows], sizes.pop()))
    return out


