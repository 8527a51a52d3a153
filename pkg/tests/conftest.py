import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_addoption(parser):
    parser.addoption("--extended", action="store_true", default=False,
                     help="run checks on the full 81 x 161 start grid")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--extended"):
        return
    skip = pytest.mark.skip(reason="needs --extended")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """``criterion(number, ok, detail)`` prints and records one PASS/FAIL line, then asserts ``ok``."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def synthetic():
    from mieinversion.materials import builtin_material

    return builtin_material("synthetic")


def _cached(name, compute):
    """Run ``compute`` once; optionally persist to $MIEINVERSION_TEST_CACHE for development reruns."""
    import os
    import pickle

    cache = os.environ.get("MIEINVERSION_TEST_CACHE")
    if not cache:
        return compute()
    path = Path(cache) / f"{name}.pkl"
    if path.exists():
        return pickle.loads(path.read_bytes())
    value = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(value))
    return value


STUDY_SEED = 2011


@pytest.fixture(scope="session")
def study_5pct():
    from mieinversion.study import StudyConfig, run_retrieval_study

    cfg = StudyConfig(noise_fraction=0.05, sweeps=10, seed=STUDY_SEED)
    return _cached("study_5pct", lambda: run_retrieval_study(cfg))


@pytest.fixture(scope="session")
def study_30pct():
    from mieinversion.study import StudyConfig, run_retrieval_study

    cfg = StudyConfig(noise_fraction=0.30, sweeps=10, seed=STUDY_SEED)
    return _cached("study_30pct", lambda: run_retrieval_study(cfg))


@pytest.fixture(scope="session")
def comparison_5pct():
    from mieinversion.study import StudyConfig, run_truncation_comparison

    cfg = StudyConfig(noise_fraction=0.05, sweeps=2, seed=STUDY_SEED)
    return _cached("comparison_5pct", lambda: run_truncation_comparison(cfg))
