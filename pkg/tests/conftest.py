import numpy as np
import pytest

from urbanseg.core import PointCloud
from urbanseg.network import LayerConfig


def random_cloud(rng, n, num_classes=5, colors=True, labels=True, scale=10.0, schema="urban5"):
    return PointCloud(
        rng.uniform(-scale, scale, size=(n, 3)),
        rng.integers(0, 256, size=(n, 3), dtype=np.uint8) if colors else None,
        rng.integers(0, num_classes, size=n) if labels else None,
        schema,
    )


def brute_sq_dist(q, p):
    """Squared distances summed x, then y, then z (same order as the index)."""
    out = np.zeros((len(q), len(p)))
    for d in range(3):
        diff = q[:, d, None] - p[None, :, d]
        out = out + diff * diff
    return out


def brute_knn(points, k, include_self):
    d2 = brute_sq_dist(points, points)
    n = len(points)
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        order = sorted(others, key=lambda j: (d2[i, j], j))
        row = ([i] + order[: k - 1]) if include_self else order[:k]
        idx[i] = row
        dist[i] = [0.0 if j == i else np.sqrt(d2[i, j]) for j in row]
    return idx, dist


def brute_radius(points, r, include_self):
    d = np.sqrt(brute_sq_dist(points, points))
    out = []
    for i in range(len(points)):
        hits = [j for j in range(len(points)) if d[i, j] <= r and (include_self or j != i)]
        out.append(np.array(sorted(hits, key=lambda j: (d[i, j], j)), dtype=np.int64))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """Small network used by fast tests: 64 points, 2 levels."""
    return LayerConfig(k=4, decimation_ratio=2, feature_dims=(4, 8), num_layers=2, head_dims=(8, 8))


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion after the run

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    if hasattr(rep, "wasxfail"):
        status = "FAIL" if rep.skipped else "PASS"
        note = "expected failure: " + rep.wasxfail if rep.skipped else "unexpectedly passed"
    else:
        status = "PASS" if rep.passed else "FAIL"
        note = ""
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE.append((marker.args[0], status, " | ".join(x for x in (detail, note) if x)))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{status} {name}" + (f" ({detail})" if detail else ""))
