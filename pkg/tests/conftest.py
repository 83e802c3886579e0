import numpy as np
import pytest

from orderlab import autodiff as ad
from orderlab.data import DialogueSample, GenConfig, generate_synthetic_corpus


def numeric_grad(fn, arrays, h=1e-4):
    """Central finite differences of scalar ``fn()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn()
            arr[idx] = orig - h
            down = fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def gradcheck(build, leaves, h=1e-4):
    """Compare analytic and central-difference gradients of ``build(*leaves)``; returns max rel error."""
    for t in leaves:
        t.grad = None
    loss = build(*leaves)
    ad.backward(loss)
    analytic = [t.grad.copy() for t in leaves]

    def f():
        with ad.no_grad():
            return float(build(*leaves).data)

    numeric = numeric_grad(f, [t.data for t in leaves], h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(GenConfig(n_personas=3, n_train=40, n_test=12, n_categories=5, seed=7))


@pytest.fixture
def two_persona_sample():
    return DialogueSample.from_text(["i like tea", "i ski"], ["hi"], "hello")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
