import os
from collections import defaultdict

import numpy as np
import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            num, title = mark.args
            _criteria.setdefault(num, {"title": title, "outcomes": defaultdict(list)})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for num, entry in _criteria.items():
        if f"criterion{num:02d}" in report.nodeid:
            entry["outcomes"][report.outcome].append(report.nodeid.split("::")[-1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria):
        entry = _criteria[num]
        out = entry["outcomes"]
        if out["failed"]:
            verdict = "FAIL"
        elif out["passed"]:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        note = f" (skipped: {', '.join(out['skipped'])})" if out["skipped"] else ""
        tr.write_line(f"criterion {num:2d} {verdict}: {entry['title']}{note}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mnist_dir():
    d = os.environ.get("CAPSDENSE_DATA")
    if not d:
        pytest.skip("MNIST files not provided (set CAPSDENSE_DATA)")
    for sub in ("mnist", ""):
        root = os.path.join(d, sub)
        if os.path.exists(os.path.join(root, "train-images-idx3-ubyte")) or \
                os.path.exists(os.path.join(root, "train-images-idx3-ubyte.gz")):
            return root
    pytest.skip(f"no MNIST IDX files under {d}")
