import numpy as np
import pytest


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Norm-relative error; gradients smaller than ``floor`` are compared absolutely."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(num / den)


def check_module_grads(module, forward, x: np.ndarray, rng, h: float = 1e-5):
    """Compare analytic input and parameter gradients of ``module`` to central differences.

    ``forward(x)`` must return the module output; the scalar objective is
    ``sum(output * R)`` for a fixed random ``R``. Returns the worst relative error.
    """
    y = forward(x)
    R = rng.standard_normal(y.shape)
    module.zero_grad()
    forward(x)
    gx = module.backward(R)
    if isinstance(gx, tuple):
        gx = gx[0]
    analytic = {k: p.grad.copy() for k, p in module.named_params()}

    def obj():
        return float((forward(x) * R).sum())

    errs = {"input": rel_error(gx, numeric_grad(obj, x, h))}
    for k, p in module.named_params():
        errs[k] = rel_error(analytic[k], numeric_grad(obj, p.value, h))
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
