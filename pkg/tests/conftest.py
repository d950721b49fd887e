import numpy as np
import pytest

from specmix import tensor as T


def finite_diff_check(build_loss, params, h=1e-5, probe_seed=0):
    """Compare tape gradients of a scalar loss against central differences.

    build_loss() must rebuild the forward pass from the current parameter
    values.  Returns the worst relative error over all parameter entries,
    normalized per parameter by the largest gradient magnitude so that
    entries with near-zero true gradient do not dominate.
    """
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
    T.backward(loss, tape)
    analytic = [np.array(p.grad, copy=True) if p.grad is not None
                else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(build_loss().data)
            p.data[idx] = orig - h
            fm = float(build_loss().data)
            p.data[idx] = orig
            num[idx] = (fp - fm) / (2.0 * h)
        scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-6)
        worst = max(worst, float(np.max(np.abs(num - ana)) / scale))
    return worst


def random_probe(rng, shape):
    """Fixed random linear functional; keeps FD checks well-conditioned."""
    return rng.normal(size=shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
