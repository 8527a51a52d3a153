"""Multi-sweep retrieval studies on simulated data and their reports.

One sweep simulates noisy measurements for every wavelength of the grid,
retrieves candidates per wavelength, picks the smoothest combination per
optical window and regularises it.  Reports are plain CSV/JSON files.

CSV columns of the per-wavelength table (``study.csv``)::

    sweep, window, wavelength_um, n_true, k_true, n_unreg, k_unreg, n_reg,
    k_reg, rel_err_unreg_pct, rel_err_reg_pct, time_ms, tau_used, gamma

Failed wavelengths have empty index and error fields.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .coupling import greedy_smoothest
from .forward import MeasurementSet, noisy_means, simulate_true
from .materials import BUILTIN_MATERIALS, DispersionTable, WavelengthGrid, builtin_material, default_grid, \
    index_at, load_dispersion
from .regularization import GammaSelection, RegularizationConfig, WindowProblem, select_gamma
from .retrieval import RetrievalConfig, RetrievalResult, SearchDomain, retrieve_wavelength

__all__ = [
    "ConfigError",
    "StudyConfig",
    "StudyRow",
    "StudyReport",
    "ComparisonRow",
    "ComparisonReport",
    "relative_error_pct",
    "run_sweep",
    "run_retrieval_study",
    "run_truncation_comparison",
    "process_window",
    "aggregate_rows",
    "emit_reports",
    "read_study_csv",
    "CSV_COLUMNS",
]

log = logging.getLogger(__name__)

CSV_COLUMNS = ("sweep", "window", "wavelength_um", "n_true", "k_true", "n_unreg", "k_unreg", "n_reg", "k_reg",
               "rel_err_unreg_pct", "rel_err_reg_pct", "time_ms", "tau_used", "gamma")


class ConfigError(ValueError):
    """Invalid study configuration."""


def relative_error_pct(x, x_ref) -> float:
    """100 * ||x - x_ref|| / ||x_ref|| for points (n, k)."""
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    return float(100.0 * np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref))


@dataclass
class StudyConfig:
    """Settings of a retrieval study.

    ``material`` is a built-in material name or a path to a dispersion CSV.
    ``grid_size`` selects the start grid: "full" (81 x 161) or "reduced"
    (41 x 81).
    """

    material: str = "synthetic"
    medium: complex = 1.0 + 0.0j
    radii: tuple[float, ...] = (0.1, 0.2, 0.3)
    windows: tuple[tuple[float, ...], ...] | None = None
    noise_fraction: float = 0.05
    sample_size: int = 300
    sweeps: int = 10
    seed: int = 0
    grid_size: str = "full"
    threads: int = 1
    tau_ladder: tuple[float, ...] = (3.0, 5.0, 7.0)
    tol_rel: float = 1e-3
    regularize: bool = True
    out: str | None = None

    def __post_init__(self):
        try:
            self.radii = tuple(float(r) for r in self.radii)
            self.medium = complex(self.medium) if not isinstance(self.medium, (list, tuple)) \
                else complex(self.medium[0], self.medium[1])
            self.noise_fraction = float(self.noise_fraction)
            self.sample_size = int(self.sample_size)
            self.sweeps = int(self.sweeps)
            self.seed = int(self.seed)
            self.threads = int(self.threads)
            self.tau_ladder = tuple(float(t) for t in self.tau_ladder)
            if self.windows is not None:
                self.windows = tuple(tuple(float(l) for l in w) for w in self.windows)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed configuration value: {exc}") from None
        if not self.radii or any(r <= 0 for r in self.radii) or len(set(self.radii)) != len(self.radii):
            raise ConfigError("radii must be positive and distinct")
        if self.sweeps < 1:
            raise ConfigError("sweeps must be >= 1")
        if self.noise_fraction < 0:
            raise ConfigError("noise must be nonnegative")
        if self.sample_size < 2:
            raise ConfigError("sample_size must be >= 2")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.grid_size not in ("full", "reduced"):
            raise ConfigError("grid_size must be 'full' or 'reduced'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.medium.real < 0 or self.medium.imag < 0:
            raise ConfigError("medium index must have nonnegative parts")
        if self.windows is not None and (not self.windows or any(len(w) == 0 for w in self.windows)):
            raise ConfigError("windows must be nonempty lists of wavelengths")

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "StudyConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["medium"] = [self.medium.real, self.medium.imag]
        return d

    @property
    def grid(self) -> WavelengthGrid:
        return default_grid() if self.windows is None else WavelengthGrid.from_lists(self.windows)

    @property
    def domain(self) -> SearchDomain:
        return SearchDomain() if self.grid_size == "full" else SearchDomain.reduced()

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(domain=self.domain, tau_ladder=self.tau_ladder, tol_rel=self.tol_rel)

    def regularization_config(self) -> RegularizationConfig:
        return RegularizationConfig(domain=self.domain)

    def load_material(self) -> DispersionTable:
        try:
            if self.material in BUILTIN_MATERIALS:
                return builtin_material(self.material)
            return load_dispersion(self.material)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load material {self.material!r}: {exc}") from None


@dataclass
class StudyRow:
    """One (sweep, wavelength) record."""

    sweep: int
    window: int
    wavelength_um: float
    n_true: float
    k_true: float
    n_unreg: float = math.nan
    k_unreg: float = math.nan
    n_reg: float = math.nan
    k_reg: float = math.nan
    rel_err_unreg_pct: float = math.nan
    rel_err_reg_pct: float = math.nan
    time_ms: float = math.nan
    tau_used: float = math.nan
    gamma: float = math.nan

    @property
    def failed(self) -> bool:
        return math.isnan(self.n_unreg)


@dataclass
class WindowOutcome:
    """Selection and regularisation of one window in one sweep."""

    window: int
    wavelengths: list[float]
    picks: list[int]
    smoothness: float
    selection: GammaSelection | None

    def to_dict(self) -> dict:
        d = self.selection.to_dict(self.window, self.wavelengths) if self.selection else {
            "window": self.window, "gamma": None, "target_R": None, "achieved_R": None, "solutions": [],
            "status": "skipped"}
        d["picks"] = self.picks
        d["smoothness"] = self.smoothness
        return d


@dataclass
class StudyReport:
    """Per-wavelength rows plus per-sweep retrieval and window details."""

    config: dict
    rows: list[StudyRow] = field(default_factory=list)
    retrievals: list[list[dict]] = field(default_factory=list)
    windows: list[list[dict]] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        return aggregate_rows(self.rows)


def _nan_stats(values) -> dict:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return {"mean": None, "max": None, "median": None}
    return {"mean": float(v.mean()), "max": float(v.max()), "median": float(np.median(v))}


def aggregate_rows(rows: Sequence[StudyRow]) -> dict:
    """Aggregate statistics recomputable from the CSV rows alone.

    Per window: mean/max/median relative errors of unregularised and
    regularised solutions, the sweep-averaged regularised solution per
    wavelength with its relative error, and failure counts.  Overall:
    run-time statistics.
    """
    out: dict = {"windows": {}, "n_rows": len(rows)}
    by_window: dict[int, list[StudyRow]] = {}
    for r in rows:
        by_window.setdefault(r.window, []).append(r)
    for w in sorted(by_window):
        rs = by_window[w]
        per_wl: dict[float, list[StudyRow]] = {}
        for r in rs:
            per_wl.setdefault(r.wavelength_um, []).append(r)
        averaged = []
        for l in sorted(per_wl):
            ok = [r for r in per_wl[l] if not math.isnan(r.n_reg)]
            if not ok:
                averaged.append({"wavelength": l, "n": None, "k": None, "rel_err_pct": None})
                continue
            n = float(np.mean([r.n_reg for r in ok]))
            k = float(np.mean([r.k_reg for r in ok]))
            ref = (ok[0].n_true, ok[0].k_true)
            averaged.append({"wavelength": l, "n": n, "k": k, "rel_err_pct": relative_error_pct((n, k), ref)})
        avg_err = [a["rel_err_pct"] for a in averaged if a["rel_err_pct"] is not None]
        out["windows"][str(w)] = {
            "n_rows": len(rs),
            "n_failed": sum(r.failed for r in rs),
            "rel_err_unreg_pct": _nan_stats([r.rel_err_unreg_pct for r in rs]),
            "rel_err_reg_pct": _nan_stats([r.rel_err_reg_pct for r in rs]),
            "averaged_solution": averaged,
            "averaged_rel_err_pct": {"mean": float(np.mean(avg_err)) if avg_err else None,
                                     "max": float(np.max(avg_err)) if avg_err else None},
        }
    times = [r.time_ms for r in rows if not math.isnan(r.time_ms)]
    out["time_ms"] = {"total": float(np.sum(times)) if times else 0.0, **_nan_stats(times)}
    out["n_failed"] = sum(r.failed for r in rows)
    return out


def _retrieve_task(args) -> RetrievalResult:
    ms, cfg, m_med, method = args
    t0 = time.perf_counter()
    try:
        return retrieve_wavelength(ms, cfg=cfg, m_med=m_med, method=method)
    except Exception as exc:  # one bad wavelength must not abort the sweep
        log.warning("retrieval failed at %.4g um: %s", ms.wavelength, exc)
        return RetrievalResult(float(ms.wavelength), [], f"error: {exc}", method, 0, time.perf_counter() - t0)


def _retrieve_all(sets: Sequence[MeasurementSet], cfg: RetrievalConfig, m_med, method: int, threads: int):
    tasks = [(ms, cfg, m_med, method) for ms in sets]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_retrieve_task, tasks))
    return [_retrieve_task(t) for t in tasks]


def process_window(window: int, sets: Sequence[MeasurementSet], results: Sequence[RetrievalResult],
                   m_med, reg_cfg: RegularizationConfig | None) -> WindowOutcome:
    """Smoothest combination and (optionally) regularisation over successful wavelengths."""
    ok = [i for i, r in enumerate(results) if r.ok]
    wls = [float(sets[i].wavelength) for i in ok]
    if not ok:
        return WindowOutcome(window, [], [], math.nan, None)
    comb = greedy_smoothest([results[i].candidates for i in ok], labels=wls)
    chosen = [results[i].candidates[p] for i, p in zip(ok, comb.picks)]
    selection = None
    if reg_cfg is not None:
        try:
            wp = WindowProblem.from_candidates([sets[i] for i in ok], chosen, m_med)
            selection = select_gamma(wp, reg_cfg)
        except Exception as exc:
            log.warning("regularisation failed in window %d: %s", window, exc)
    return WindowOutcome(window, wls, list(comb.picks), comb.smoothness, selection)


def run_sweep(cfg: StudyConfig, sweep: int, material: DispersionTable | None = None,
              e_true: np.ndarray | None = None, method: int = 1):
    """Simulate, retrieve, select and regularise one sweep.

    Returns ``(rows, retrievals, windows)``.
    """
    material = material if material is not None else cfg.load_material()
    grid = cfg.grid
    wavelengths = grid.wavelengths
    if e_true is None:
        e_true = simulate_true(material, cfg.medium, cfg.radii, wavelengths)
    sets = noisy_means(e_true, cfg.noise_fraction, cfg.sample_size, cfg.seed, cfg.radii, wavelengths, sweep=sweep)
    results = _retrieve_all(sets, cfg.retrieval_config(), cfg.medium, method, cfg.threads)
    reg_cfg = cfg.regularization_config() if cfg.regularize else None
    win_idx = grid.window_index
    rows: list[StudyRow] = []
    outcomes = []
    for w in range(len(grid.windows)):
        members = np.flatnonzero(win_idx == w)
        wsets = [sets[i] for i in members]
        wres = [results[i] for i in members]
        outcome = process_window(w, wsets, wres, cfg.medium, reg_cfg)
        outcomes.append(outcome)
        ok = [i for i, r in enumerate(wres) if r.ok]
        reg_by_pos = {}
        if outcome.selection is not None:
            for pos, x in zip(ok, outcome.selection.xs):
                reg_by_pos[pos] = x
        pick_by_pos = dict(zip(ok, outcome.picks))
        for pos, (ms, res) in enumerate(zip(wsets, wres)):
            m_true = index_at(material, ms.wavelength)
            row = StudyRow(sweep, w, float(ms.wavelength), m_true.re, m_true.im, time_ms=1e3 * res.elapsed_s)
            if res.ok:
                cand = res.candidates[pick_by_pos[pos]]
                row.n_unreg, row.k_unreg = cand.x
                row.tau_used = cand.tau_used
                row.rel_err_unreg_pct = relative_error_pct(cand.x, (m_true.re, m_true.im))
                if pos in reg_by_pos:
                    row.n_reg, row.k_reg = (float(v) for v in reg_by_pos[pos])
                    row.rel_err_reg_pct = relative_error_pct(reg_by_pos[pos], (m_true.re, m_true.im))
                    row.gamma = outcome.selection.gamma
            rows.append(row)
    retrievals = [dict(r.to_dict(), status=r.status, sweep=sweep) for r in results]
    windows = [dict(o.to_dict(), sweep=sweep) for o in outcomes]
    return rows, retrievals, windows


def run_retrieval_study(cfg: StudyConfig) -> StudyReport:
    """Run ``cfg.sweeps`` sweeps; a failing wavelength is recorded and the sweep continues."""
    material = cfg.load_material()
    e_true = simulate_true(material, cfg.medium, cfg.radii, cfg.grid.wavelengths)
    report = StudyReport(cfg.to_dict())
    for sweep in range(cfg.sweeps):
        rows, retrievals, windows = run_sweep(cfg, sweep, material, e_true)
        report.rows.extend(rows)
        report.retrievals.append(retrievals)
        report.windows.append(windows)
        log.info("sweep %d done: %d failures", sweep, sum(r.failed for r in rows))
    return report


@dataclass
class ComparisonRow:
    """Per (sweep, wavelength) outcome of the two truncation strategies."""

    sweep: int
    window: int
    wavelength_um: float
    n_method1: float
    k_method1: float
    n_method2: float
    k_method2: float
    deviation_pct: float
    time_ms_method1: float
    time_ms_method2: float


@dataclass
class ComparisonReport:
    config: dict
    rows: list[ComparisonRow] = field(default_factory=list)

    @property
    def time_method1_s(self) -> float:
        return float(np.sum([r.time_ms_method1 for r in self.rows])) / 1e3

    @property
    def time_method2_s(self) -> float:
        return float(np.sum([r.time_ms_method2 for r in self.rows])) / 1e3

    @property
    def max_deviation_pct(self) -> float:
        devs = [r.deviation_pct for r in self.rows if not math.isnan(r.deviation_pct)]
        return float(max(devs)) if devs else math.nan

    @property
    def summary(self) -> dict:
        n_missing = sum(math.isnan(r.deviation_pct) for r in self.rows)
        return {"time_method1_s": self.time_method1_s, "time_method2_s": self.time_method2_s,
                "max_deviation_pct": self.max_deviation_pct, "n_rows": len(self.rows),
                "n_incomparable": n_missing}


def run_truncation_comparison(cfg: StudyConfig) -> ComparisonReport:
    """Candidate search with continuation (method 1) versus Wiscombe truncation (method 2).

    For each sweep both methods see the same measurements; within each window
    the smoothest combination of each method's candidates is selected and the
    relative deviation 100 ||x2 - x1|| / ||x1|| is reported per wavelength.
    """
    material = cfg.load_material()
    grid = cfg.grid
    wavelengths = grid.wavelengths
    e_true = simulate_true(material, cfg.medium, cfg.radii, wavelengths)
    rcfg = cfg.retrieval_config()
    report = ComparisonReport(cfg.to_dict())
    win_idx = grid.window_index
    for sweep in range(cfg.sweeps):
        sets = noisy_means(e_true, cfg.noise_fraction, cfg.sample_size, cfg.seed, cfg.radii, wavelengths, sweep=sweep)
        res1 = _retrieve_all(sets, rcfg, cfg.medium, 1, cfg.threads)
        res2 = _retrieve_all(sets, rcfg, cfg.medium, 2, cfg.threads)
        for w in range(len(grid.windows)):
            members = np.flatnonzero(win_idx == w)
            picks = []
            for res in (res1, res2):
                wres = [res[i] for i in members]
                ok = [i for i, r in enumerate(wres) if r.ok]
                chosen = {}
                if ok:
                    comb = greedy_smoothest([wres[i].candidates for i in ok])
                    chosen = {pos: wres[pos].candidates[p].x for pos, p in zip(ok, comb.picks)}
                picks.append(chosen)
            for pos, i in enumerate(members):
                x1 = picks[0].get(pos, (math.nan, math.nan))
                x2 = picks[1].get(pos, (math.nan, math.nan))
                dev = relative_error_pct(x2, x1) if (pos in picks[0] and pos in picks[1]) else math.nan
                report.rows.append(ComparisonRow(sweep, w, float(wavelengths[i]), x1[0], x1[1], x2[0], x2[1], dev,
                                                 1e3 * res1[i].elapsed_s, 1e3 * res2[i].elapsed_s))
    return report


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _parse(v: str, kind):
    if kind is int:
        return int(v)
    return math.nan if v == "" else float(v)


def write_rows_csv(rows: Sequence, path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in columns])


def read_study_csv(path) -> list[StudyRow]:
    """Parse a ``study.csv`` written by :func:`emit_reports`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected columns in {path}")
        out = []
        for rec in reader:
            vals = {c: _parse(rec[c], int if c in ("sweep", "window") else float) for c in CSV_COLUMNS}
            out.append(StudyRow(**vals))
    return out


def emit_reports(report, directory) -> list[Path]:
    """Write CSV and JSON files for a study or comparison report; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(report, ComparisonReport):
        cols = [f.name for f in fields(ComparisonRow)]
        p = d / "comparison.csv"
        write_rows_csv(report.rows, p, cols)
        q = d / "comparison.json"
        q.write_text(json.dumps({"config": report.config, "summary": report.summary}, indent=2, default=_json_default))
        return [p, q]
    p = d / "study.csv"
    write_rows_csv(report.rows, p, CSV_COLUMNS)
    written.append(p)
    q = d / "aggregates.json"
    q.write_text(json.dumps({"config": report.config, "aggregates": report.aggregates}, indent=2,
                            default=_json_default))
    written.append(q)
    if report.retrievals:
        c = d / "candidates.json"
        c.write_text(json.dumps(report.retrievals, indent=1, default=_json_default))
        written.append(c)
    if report.windows:
        wfile = d / "windows.json"
        wfile.write_text(json.dumps(report.windows, indent=1, default=_json_default))
        written.append(wfile)
    return written


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not JSON serialisable: {type(o)}")
