"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 no wavelength
could be retrieved.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .forward import noisy_means, read_measurements_csv, simulate_true, write_measurements_csv
from .materials import WavelengthGrid
from .study import (ConfigError, StudyConfig, StudyReport, _json_default, _retrieve_all, aggregate_rows,
                    emit_reports, process_window, read_study_csv, run_retrieval_study, run_truncation_comparison)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_RESULT = 3

log = logging.getLogger("mieinversion")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with study settings")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--sweeps", type=int, help="number of independent noise realisations")
    p.add_argument("--noise", type=float, help="relative noise level of single draws, e.g. 0.05")
    p.add_argument("--material", help="built-in material name or dispersion CSV path")
    p.add_argument("--threads", type=int, help="worker processes for per-wavelength retrieval")
    p.add_argument("--grid", choices=("full", "reduced"), dest="grid_size", help="start grid resolution")
    p.add_argument("--out", help="output directory (or file for 'simulate')")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mieinversion",
                                     description="Refractive index retrieval from spectral extinction data.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "write simulated noisy measurements to CSV"),
                        ("retrieve", "retrieve indices from a measurement CSV"),
                        ("compare-truncation", "compare continuation with fixed Wiscombe truncation"),
                        ("study", "run a multi-sweep retrieval study")):
        _common(sub.add_parser(name, help=help_))
    sub.choices["simulate"].add_argument("--sweep", type=int, default=0, help="sweep index of the realisation")
    sub.choices["retrieve"].add_argument("measurements", help="measurement CSV")
    rep = sub.add_parser("report", help="recompute aggregates from a study CSV")
    rep.add_argument("csv", help="study.csv written by 'study'")
    rep.add_argument("--out", help="write aggregates JSON here instead of stdout")
    return parser


def load_config(args) -> StudyConfig:
    data = {}
    if args.config:
        data = StudyConfig.from_file(args.config).to_dict()
    for key in ("seed", "sweeps", "material", "threads", "grid_size", "out"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if getattr(args, "noise", None) is not None:
        data["noise_fraction"] = args.noise
    return StudyConfig.from_dict(data)


def _out_dir(cfg: StudyConfig, default: str) -> Path:
    return Path(cfg.out or default)


def cmd_simulate(cfg: StudyConfig, args) -> int:
    grid = cfg.grid
    e_true = simulate_true(cfg.load_material(), cfg.medium, cfg.radii, grid.wavelengths)
    sets = noisy_means(e_true, cfg.noise_fraction, cfg.sample_size, cfg.seed, cfg.radii, grid.wavelengths,
                       sweep=args.sweep)
    path = Path(cfg.out or "measurements.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_measurements_csv(sets, path)
    print(path)
    return EXIT_OK


def cmd_retrieve(cfg: StudyConfig, args) -> int:
    try:
        sets = read_measurements_csv(args.measurements)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read measurements: {exc}") from None
    results = _retrieve_all(sets, cfg.retrieval_config(), cfg.medium, 1, cfg.threads)
    wls = np.array([ms.wavelength for ms in sets])
    grid = cfg.grid
    win = np.full(wls.size, -1)
    for w, members in enumerate(grid.windows):
        for l in members:
            win[np.isclose(wls, l, rtol=0, atol=1e-9)] = w
    if np.any(win < 0):
        log.warning("%d wavelengths lie outside the configured windows and are not regularised",
                    int(np.sum(win < 0)))
    reg_cfg = cfg.regularization_config() if cfg.regularize else None
    windows = []
    for w in np.unique(win[win >= 0]):
        idx = np.flatnonzero(win == w)
        outcome = process_window(int(w), [sets[i] for i in idx], [results[i] for i in idx], cfg.medium, reg_cfg)
        windows.append(outcome.to_dict())
    out = _out_dir(cfg, "retrieval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "candidates.json").write_text(json.dumps([dict(r.to_dict(), status=r.status) for r in results],
                                                    indent=1, default=_json_default))
    (out / "windows.json").write_text(json.dumps(windows, indent=1, default=_json_default))
    n_ok = sum(r.ok for r in results)
    print(f"{n_ok}/{len(results)} wavelengths retrieved; results in {out}")
    return EXIT_OK if n_ok else EXIT_NO_RESULT


def cmd_study(cfg: StudyConfig, args) -> int:
    report = run_retrieval_study(cfg)
    paths = emit_reports(report, _out_dir(cfg, "study"))
    for p in paths:
        print(p)
    return EXIT_NO_RESULT if all(r.failed for r in report.rows) else EXIT_OK


def cmd_compare(cfg: StudyConfig, args) -> int:
    report = run_truncation_comparison(cfg)
    emit_reports(report, _out_dir(cfg, "comparison"))
    print(json.dumps(report.summary, indent=2))
    return EXIT_NO_RESULT if np.isnan(report.max_deviation_pct) else EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = read_study_csv(args.csv)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read study CSV: {exc}") from None
    text = json.dumps(aggregate_rows(rows), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args)
        handler = {"simulate": cmd_simulate, "retrieve": cmd_retrieve, "study": cmd_study,
                   "compare-truncation": cmd_compare}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
