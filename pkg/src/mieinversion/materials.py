"""Dispersion tables for particle materials and the study wavelength grid."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .mie import RefractiveIndex

__all__ = [
    "DispersionParseError",
    "DispersionTable",
    "WavelengthGrid",
    "load_dispersion",
    "parse_dispersion",
    "index_at",
    "default_grid",
    "builtin_material",
    "BUILTIN_MATERIALS",
    "synthetic_index",
]

BUILTIN_MATERIALS = {
    "synthetic": "synthetic_smooth.csv",
    "vacuum": "vacuum.csv",
    "water": "water.csv",
    "silver": "silver.csv",
    "csi": "csi.csv",
}


class DispersionParseError(ValueError):
    """A dispersion file violates the table format; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DispersionTable:
    """Sampled complex refractive index n(l) + i k(l), wavelengths in um."""

    name: str
    wavelengths: np.ndarray
    n: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=float)
        if wl.size < 2:
            raise DispersionParseError("a dispersion table needs at least 2 samples")
        if np.any(np.diff(wl) <= 0):
            raise DispersionParseError("wavelengths must be strictly increasing")
        if np.any(np.asarray(self.n) < 0) or np.any(np.asarray(self.k) < 0):
            raise DispersionParseError("n and k must be nonnegative")

    @property
    def samples(self) -> list[tuple[float, float, float]]:
        return list(zip(self.wavelengths.tolist(), self.n.tolist(), self.k.tolist()))

    def __call__(self, l: float) -> RefractiveIndex:
        return index_at(self, l)


def parse_dispersion(text: str, name: str = "material") -> DispersionTable:
    """Parse CSV text with header ``wavelength_um,n,k``; ``#`` lines are comments."""
    rows = []
    header_seen = False
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in next(csv.reader([line]))]
        if not header_seen:
            if [f.lower() for f in fields] != ["wavelength_um", "n", "k"]:
                raise DispersionParseError("expected header 'wavelength_um,n,k'", lineno)
            header_seen = True
            continue
        if len(fields) != 3:
            raise DispersionParseError(f"expected 3 fields, got {len(fields)}", lineno)
        try:
            wl, n, k = (float(f) for f in fields)
        except ValueError as exc:
            raise DispersionParseError(f"not a number: {exc}", lineno) from None
        if not (np.isfinite(wl) and np.isfinite(n) and np.isfinite(k)):
            raise DispersionParseError("values must be finite", lineno)
        if wl <= 0:
            raise DispersionParseError("wavelength must be positive", lineno)
        if n < 0 or k < 0:
            raise DispersionParseError("n and k must be nonnegative", lineno)
        if rows and wl <= rows[-1][1]:
            raise DispersionParseError("wavelengths must be strictly increasing", lineno)
        rows.append((lineno, wl, n, k))
    if not header_seen:
        raise DispersionParseError("missing header")
    if len(rows) < 2:
        raise DispersionParseError("a dispersion table needs at least 2 samples", rows[-1][0] if rows else None)
    arr = np.array([r[1:] for r in rows])
    return DispersionTable(name, arr[:, 0], arr[:, 1], arr[:, 2])


def load_dispersion(path) -> DispersionTable:
    """Load and validate a dispersion CSV file."""
    path = Path(path)
    return parse_dispersion(path.read_text(), name=path.stem)


def builtin_material(name: str) -> DispersionTable:
    """Load one of the dispersion tables shipped with the package."""
    try:
        fname = BUILTIN_MATERIALS[name]
    except KeyError:
        raise KeyError(f"unknown material {name!r}; choose from {sorted(BUILTIN_MATERIALS)}") from None
    text = resources.files("mieinversion").joinpath("data", fname).read_text()
    return parse_dispersion(text, name=name)


def synthetic_index(l) -> np.ndarray:
    """Exact index of the synthetic smooth material, n = 1.4 + 0.05 l, k = 0.01 + 0.002 l."""
    l = np.asarray(l, dtype=float)
    return (1.4 + 0.05 * l) + 1j * (0.01 + 0.002 * l)


def index_at(table: DispersionTable, l: float) -> RefractiveIndex:
    """Piecewise-linear interpolation of n and k at wavelength ``l``.

    Raises
    ------
    ValueError
        If ``l`` lies outside the sampled range.
    """
    l = float(l)
    wl = table.wavelengths
    if not wl[0] <= l <= wl[-1]:
        raise ValueError(f"wavelength {l} um outside table range [{wl[0]}, {wl[-1]}] of {table.name}")
    i = int(np.searchsorted(wl, l, side="right")) - 1
    i = min(max(i, 0), wl.size - 2)
    if l == wl[i]:
        return RefractiveIndex(float(table.n[i]), float(table.k[i]))
    if l == wl[i + 1]:
        return RefractiveIndex(float(table.n[i + 1]), float(table.k[i + 1]))
    w = (l - wl[i]) / (wl[i + 1] - wl[i])
    n = (1 - w) * table.n[i] + w * table.n[i + 1]
    k = (1 - w) * table.k[i] + w * table.k[i + 1]
    return RefractiveIndex(float(n), float(k))


WINDOW_SPECS = ((0.6, 0.8, 8), (1.1, 1.3, 8), (1.6, 1.8, 8), (2.1, 2.5, 16), (3.1, 3.3, 8))


@dataclass(frozen=True)
class WavelengthGrid:
    """Wavelengths (um) grouped into optical windows."""

    windows: tuple[np.ndarray, ...]

    @property
    def wavelengths(self) -> np.ndarray:
        return np.concatenate(self.windows)

    @property
    def window_index(self) -> np.ndarray:
        """Window number (0-based) of every wavelength in :attr:`wavelengths`."""
        return np.concatenate([np.full(w.size, i) for i, w in enumerate(self.windows)])

    def __len__(self) -> int:
        return int(sum(w.size for w in self.windows))

    def to_json(self) -> str:
        return json.dumps({"windows": [w.tolist() for w in self.windows]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "WavelengthGrid":
        data = json.loads(text)
        return cls.from_lists(data["windows"])

    @classmethod
    def from_lists(cls, windows: Sequence[Sequence[float]]) -> "WavelengthGrid":
        wins = tuple(np.asarray(w, dtype=float) for w in windows)
        if any(w.size == 0 for w in wins):
            raise ValueError("empty wavelength window")
        return cls(wins)


def default_grid() -> WavelengthGrid:
    """The 48-wavelength grid: 8, 8, 8, 16 and 8 points over five windows."""
    return WavelengthGrid(tuple(np.linspace(a, b, n) for a, b, n in WINDOW_SPECS))
