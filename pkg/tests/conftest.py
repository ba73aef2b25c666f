import numpy as np
import pytest

from paratranscnn.gradcheck import check_function
from paratranscnn.tensor import reset_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_grads(name, fn, inputs, rtol=1e-5, eps=1e-6):
    """Finite-difference check of ``fn`` w.r.t. every input; fails with the worst offender."""
    results = check_function(name, fn, inputs, rtol=rtol, eps=eps)
    bad = [r for r in results if not r.ok]
    assert not bad, bad
    return results


def strict_rel(results):
    """Worst relative error over all elements, without the absolute floor."""
    return max(r.max_rel for r in results)


def module_gradcheck(module, x, rtol=1e-5, eps=1e-6, seed=0, call=None):
    """Finite-difference check of a module's parameters and input (f64, kinks frozen)."""
    from paratranscnn import ops
    from paratranscnn.gradcheck import compare, numeric_grad
    from paratranscnn.tensor import Tensor, backward, no_grad

    call = call or (lambda m, t: m(t))
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    buffers = {k: v.copy() for k, v in module.named_buffers()}
    module.zero_grad()
    with ops.record_kinks() as kinks:
        out = call(module, xt)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    backward(ops.sum(ops.mul(out, proj)))

    def f():
        with no_grad(), ops.replay_kinks(kinks):
            return float((call(module, xt).data * proj).sum())

    results = [compare("input", xt.grad, numeric_grad(f, xt.data, eps), rtol)]
    for name, p in module.named_parameters():
        results.append(compare(name, p.grad, numeric_grad(f, p.data, eps), rtol))
    for k, v in module.named_buffers():
        v[...] = buffers[k]
    bad = [r for r in results if not r.ok]
    assert not bad, bad
    return results


ACCEPTANCE_LINES = []


def verdict(number, title, ok, detail):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
