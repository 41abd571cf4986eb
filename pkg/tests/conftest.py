import numpy as np
import pytest

from advit import autodiff as ad
from advit.autodiff import Tensor


class LinearScorer:
    """logits = flatten(x) @ W + b; small enough to attack in closed form."""

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.zeros(self.W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)

    def __call__(self, x, leaves=None):
        x = ad.as_tensor(x)
        flat = x.reshape(x.shape[0], -1)
        return ad.matmul(flat, Tensor(self.W)) + Tensor(self.b)


class TinyMLP:
    """Two-layer GELU network on flattened images."""

    def __init__(self, d_in, hidden=16, classes=3, seed=0):
        rng = np.random.default_rng(seed)
        self.W1 = rng.normal(size=(d_in, hidden)) / np.sqrt(d_in)
        self.W2 = rng.normal(size=(hidden, classes)) / np.sqrt(hidden)

    def __call__(self, x, leaves=None):
        x = ad.as_tensor(x)
        h = ad.gelu(ad.matmul(x.reshape(x.shape[0], -1), Tensor(self.W1)))
        return ad.matmul(h, Tensor(self.W2))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def emit(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
