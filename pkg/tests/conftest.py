import numpy as np
import pytest

from splitmark.nn import Conv2d, Dense, Flatten, Model, ReLU, ScaleNorm


def tiny_conv_model(seed: int = 0, dtype=np.float32) -> Model:
    """Every layer kind, small enough for exhaustive finite differences."""
    layers = [
        Conv2d(1, 3), ReLU(), ScaleNorm(3), Conv2d(3, 2), ReLU(), Flatten(),
        Dense(2 * 5 * 4, 6), ReLU(), ScaleNorm(6), Dense(6, 3),
    ]
    return Model(layers, (1, 5, 4), seed=seed, dtype=dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
