import numpy as np
import pytest
import torch

torch.set_num_threads(1)

FD_STEP = 1e-5
FD_RTOL = 1e-4


def central_differences(fn, tensors, step=FD_STEP):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, one coordinate at a time."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_gradients(fn, tensors):
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for g, t in zip(grads, tensors)]


def relative_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


def gradient_check(fn, tensors, step=FD_STEP):
    return relative_error(analytic_gradients(fn, tensors), central_differences(fn, tensors, step))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; printed after the run regardless of capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
