import sys

import numpy as np
import pytest

from fourcropnet import tensor_core as tc
from fourcropnet.data import generate_synthetic_dataset


def numerical_gradient(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        plus = f()
        x[i] = orig - eps
        minus = f()
        x[i] = orig
        grad[i] = (plus - minus) / (2 * eps)
    return grad


def max_rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def f64():
    with tc.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """15 classes x 20 images, the desk-scale stand-in dataset."""
    return generate_synthetic_dataset(15, 20, seed=7, out_dir=tmp_path_factory.mktemp("synth") / "data", size=32)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS):
        terminalreporter.write_line(line)
