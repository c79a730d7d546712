import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("default", deadline=None, max_examples=40)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=5)
hypothesis.settings.load_profile("default")

# -- acceptance reporting --------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.fixture
def detail(request):
    """Free-text measurement attached to the criterion line."""
    box = []
    request.node._criterion_detail = box
    return box


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    text = "; ".join(getattr(item, "_criterion_detail", []))
    _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", text)
    line = f"criterion {n} {title}: {_CRITERIA[n][1]}" + (f" ({text})" if text else "")
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {title}: {verdict}" + (f" ({text})" if text else ""))
