import numpy as np
import pytest

from affectformer import autograd
from affectformer.data.synth import SynthSpec, synthesize_dataset

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or rep.failed:
        name = marker.args[0]
        _criteria[name] = _criteria.get(name, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _criteria.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")


@pytest.fixture(autouse=True)
def _debug_numerics(monkeypatch):
    monkeypatch.setattr(autograd, "DEBUG_NUMERICS", True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny two-stream synthetic dataset on disk: 3 train videos, 1 val video."""
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(train_videos=3, val_videos=1, frames=40, stream_a=4, stream_b=2, seed=7)
    return synthesize_dataset(spec, out)
