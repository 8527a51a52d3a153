import json
import subprocess
import sys

import numpy as np
import pytest

from mieinversion.cli import main
from mieinversion.forward import MeasurementSet, read_measurements_csv, write_measurements_csv


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"grid_size": "reduced", "windows": [[3.1, 3.2, 3.3]], "sweeps": 1}))
    return p


def test_simulate_and_retrieve(tmp_path, small_cfg):
    meas = tmp_path / "m.csv"
    assert main(["simulate", "--config", str(small_cfg), "--noise", "0.05", "--seed", "3", "--out", str(meas)]) == 0
    sets = read_measurements_csv(meas)
    assert [ms.wavelength for ms in sets] == [3.1, 3.2, 3.3]
    out = tmp_path / "r"
    assert main(["retrieve", str(meas), "--config", str(small_cfg), "--out", str(out)]) == 0
    windows = json.loads((out / "windows.json").read_text())
    assert windows[0]["status"] == "ok" and len(windows[0]["solutions"]) == 3
    cands = json.loads((out / "candidates.json").read_text())
    assert len(cands) == 3 and cands[0]["candidates"]


def test_study_and_report(tmp_path, small_cfg, capsys):
    out = tmp_path / "s"
    assert main(["study", "--config", str(small_cfg), "--noise", "0.05", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", str(out / "study.csv")]) == 0
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads((out / "aggregates.json").read_text())["aggregates"]
    assert printed == saved
    saved_cfg = json.loads((out / "aggregates.json").read_text())["config"]
    assert saved_cfg["noise_fraction"] == 0.05 and saved_cfg["sweeps"] == 1


def test_config_errors_exit_2(tmp_path, small_cfg):
    assert main(["study", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["study", "--config", str(small_cfg), "--sweeps", "0"]) == 2
    assert main(["study", "--config", str(small_cfg), "--material", str(tmp_path / "missing.csv")]) == 2
    assert main(["retrieve", str(tmp_path / "missing.csv")]) == 2
    assert main(["report", str(tmp_path / "missing.csv")]) == 2


def test_no_retrievable_wavelength_exit_3(tmp_path, small_cfg):
    # means no spherical particle can produce: the radii disagree by large factors
    sets = [MeasurementSet([0.1, 0.2, 0.3], l, [5.0, 1e-4, 3.0], np.array([1e-4, 1e-8, 1e-4]) * np.sqrt(300), 300)
            for l in (3.1, 3.2)]
    meas = tmp_path / "bad.csv"
    write_measurements_csv(sets, meas)
    assert main(["retrieve", str(meas), "--config", str(small_cfg), "--out", str(tmp_path / "o")]) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mieinversion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "retrieve", "compare-truncation", "study", "report"):
        assert cmd in out.stdout
