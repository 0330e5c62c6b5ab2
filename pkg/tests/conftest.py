import json
import pathlib

import pytest

from safe_nmpc.synthesis import run_synthesis

CONFIG_DIR = pathlib.Path(__file__).resolve().parents[1] / "configs"


def load_config(name):
    with open(CONFIG_DIR / f"{name}.json", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def design_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("designs")


def _design(name, design_dir):
    art = run_synthesis(load_config(name))
    path = design_dir / f"{name}.artifact.json"
    art.save(path)
    return art, path


@pytest.fixture(scope="session")
def scalar_tmpc(design_dir):
    return _design("scalar_tmpc", design_dir)


@pytest.fixture(scope="session")
def scalar_rmpc(design_dir):
    return _design("scalar_rmpc", design_dir)


@pytest.fixture(scope="session")
def di_tmpc(design_dir):
    return _design("di_tmpc", design_dir)


@pytest.fixture(scope="session")
def di_rmpc(design_dir):
    return _design("di_rmpc", design_dir)


@pytest.fixture(scope="session")
def di_rompc(design_dir):
    return _design("di_rompc", design_dir)


@pytest.fixture(scope="session")
def unicycle_rmpc(design_dir):
    return _design("unicycle_rmpc", design_dir)


def scenario_dict(name, artifact_path, **overrides):
    d = load_config(f"{name}_scenario")
    d["artifact"] = str(artifact_path)
    d.update(overrides)
    return d


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
