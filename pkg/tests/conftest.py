import numpy as np
import pytest

from uapforge.adapters import ToyDualEncoder
from uapforge.dataset import synth_toy_dataset

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    num, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[num] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[num]
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the acceptance line."""
    def _set(text):
        record_property("detail", text)
        print(text)
    return _set


@pytest.fixture(scope="session")
def toy_bundle():
    return ToyDualEncoder(seed=0, geometry=(16, 16, 3), embed_dim=32)


@pytest.fixture(scope="session")
def small_ds():
    return synth_toy_dataset(1, 6, geometry=(16, 16, 3), vocab_size=20, caption_len=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
