import numpy as np
import pytest

from surfnet import shapes
from surfnet import autodiff as ad


@pytest.fixture(scope="session")
def goldens():
    return shapes.golden_meshes()


@pytest.fixture(scope="session")
def icosphere2():
    return shapes.icosphere(2)


def finite_difference_grads(make_loss, params, h=1e-5):
    """Central differences of a scalar loss for every parameter entry.

    ``make_loss(tape, param_tensors)`` must rebuild the loss from scratch.
    """
    fd = {}
    for k, v in params.items():
        out = np.zeros_like(v)
        flat = v.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            tape = ad.Tape()
            up = float(make_loss(tape, {kk: ad.leaf(tape, vv) for kk, vv in params.items()}).value)
            flat[idx] = orig - h
            tape = ad.Tape()
            dn = float(make_loss(tape, {kk: ad.leaf(tape, vv) for kk, vv in params.items()}).value)
            flat[idx] = orig
            out.ravel()[idx] = (up - dn) / (2.0 * h)
        fd[k] = out
    return fd


def assert_grads_close(make_loss, params, rtol=1e-5, atol=1e-8):
    """Analytic gradients must match central differences per tensor norm.

    The absolute floor absorbs f64 finite-difference noise (~1e-11) on
    parameters whose true gradient is zero.
    """
    tape = ad.Tape()
    pt = {k: ad.leaf(tape, v.copy(), requires_grad=True) for k, v in params.items()}
    loss = make_loss(tape, pt)
    ad.backward(loss)
    fd = finite_difference_grads(make_loss, params)
    for k in params:
        a = pt[k].grad
        err = np.linalg.norm(a - fd[k])
        assert err <= rtol * np.linalg.norm(fd[k]) + atol, (
            f"{k}: grad mismatch {err:.3e} (analytic {np.linalg.norm(a):.3e}, "
            f"fd {np.linalg.norm(fd[k]):.3e})")
