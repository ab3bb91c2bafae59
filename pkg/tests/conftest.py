import numpy as np
import pytest

from gam_audit.dataset import BINARY, CONTINUOUS, Dataset


def make_dataset(columns, label, kinds=None, groups=None, label_name="y"):
    columns = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    kinds = kinds or {}
    kinds = {k: kinds.get(k, CONTINUOUS) for k in columns}
    label = np.asarray(label, dtype=float)
    groups = np.arange(len(label)) if groups is None else np.asarray(groups)
    return Dataset(columns, kinds, label, groups.astype(np.int64), label_name=label_name)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def additive_data(rng):
    """Two smooth effects plus one binary effect and one pure-noise feature."""
    n = 400
    x1 = rng.uniform(-2, 2, n)
    x2 = rng.uniform(-2, 2, n)
    noise_feat = rng.normal(size=n)
    b = (rng.uniform(size=n) < 0.4).astype(float)
    y = np.sin(1.5 * x1) + 0.5 * x2**2 + 0.8 * b + 0.1 * rng.normal(size=n)
    return make_dataset(
        {"x1": x1, "x2": x2, "z": noise_feat, "b": b}, y, kinds={"b": BINARY}, groups=np.arange(n) // 4
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
