import time

import numpy as np
import pytest

from expertmerge.subspace import ExpertSubspace

_acceptance_results = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    _acceptance_results.append((number, title, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, duration in sorted(_acceptance_results):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({duration:.2f}s)")


def orthonormal(rng, d, r):
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q


def orthogonal_blocks(rng, d, sizes):
    """Mutually orthogonal orthonormal blocks of the given widths."""
    q = orthonormal(rng, d, sum(sizes))
    out, start = [], 0
    for s in sizes:
        out.append(q[:, start:start + s])
        start += s
    return out


def make_expert(rng, shape, r, tasks=(1,), left=None, right=None, sigma=None):
    d_o, d_i = shape
    left = orthonormal(rng, d_o, r) if left is None else left
    right = orthonormal(rng, d_i, r) if right is None else right
    if sigma is None:
        sigma = np.sort(rng.uniform(0.5, 3.0, r))[::-1]
    return ExpertSubspace(left, right, np.asarray(sigma, dtype=float), frozenset(tasks))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
