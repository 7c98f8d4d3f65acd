import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qdplasso.dataset import Dataset, NormMode, generate_synthetic, normalize

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def eye2():
    """X = I_2, y = (1, 0)."""
    return Dataset(np.eye(2), np.array([1.0, 0.0]), NormMode.RAW)


def small_problem(n=20, d=6, s=3, seed=0, mode=NormMode.FROBENIUS, noise_std=0.0):
    ds, gt = generate_synthetic(n, d, s, seed, noise_std)
    return normalize(ds, gt, mode)


_criteria: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= call.excinfo is None
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_runtest_logreport(report):
    # setup or teardown errors also fail a criterion
    if report.when != "call" and report.failed:
        for number, entry in _criteria.items():
            if f"criterion_{number:02d}" in report.nodeid:
                entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{status} criterion {number}: {entry['title']}" + (f" ({detail})" if detail else ""))
