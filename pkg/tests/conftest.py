"""Shared oracles and helpers for the test suite.

The gradient oracle here is deliberately independent of the autodiff
engine: it evaluates the loss twice per coordinate with central
differences on 64-bit values and never touches ``.grad``.
"""

import numpy as np
import pytest

from cham import tensor as T


def finite_difference(loss_fn, param, eps=1e-5):
    """Central-difference gradient of ``loss_fn()`` wrt a tensor's data.

    ``loss_fn`` must be deterministic and read ``param.data`` afresh on
    every call. Returns an array shaped like the parameter.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
    return grad


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7, context=""):
    """Elementwise |a - n| <= atol + rtol * max(|a|, |n|)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > bound
    if bad.any():
        idx = tuple(np.argwhere(bad)[0])
        raise AssertionError(
            f"{context} gradient mismatch at {idx}: "
            f"analytic {analytic[idx]!r} vs numeric {numeric[idx]!r} "
            f"({int(bad.sum())} of {bad.size} entries off)"
        )


def check_gradients(make_loss, tensors, context="", rtol=1e-4, atol=1e-7):
    """Compare one backward pass against the FD oracle for each tensor.

    ``make_loss`` rebuilds the scalar loss from the live ``.data`` of the
    given tensors, so the oracle can perturb them in place.
    """
    loss = make_loss()
    for t in tensors:
        t.grad = None
    T.backward(loss)
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_difference(lambda: make_loss().item(), t)
        assert_grads_close(analytic, numeric, rtol, atol,
                           context=f"{context} wrt {t.name or 'tensor'}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
