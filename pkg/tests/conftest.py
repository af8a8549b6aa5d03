from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


def brute_knn(points: np.ndarray, i: int, k: int) -> np.ndarray:
    """k nearest of point i by exhaustive scan, self excluded, ties to the lower index."""
    d = np.sqrt(((points - points[i]) ** 2).sum(axis=1))
    order = sorted((float(d[j]), j) for j in range(len(points)) if j != i)
    return np.array([j for _, j in order[:k]], dtype=np.int64)


def sphere_points(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
