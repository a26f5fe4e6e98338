import numpy as np
import pytest

from eslab.data import gen_blobs, split
from eslab.models import build_model
from eslab.training import train_classifier


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_blobs():
    ds = gen_blobs(4, 8, 400, 0.1, seed=3)
    return split(ds, 100, seed=3)


@pytest.fixture(scope="session")
def small_victim(small_blobs):
    train, test = small_blobs
    net = build_model("mlp-small", (8,), 4, seed=5)
    train_classifier(net, train, test, epochs=10, lr=3e-3, seed=5)
    return net


CRITERIA: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    """Record one acceptance verdict; all verdicts are echoed in the terminal summary."""
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
