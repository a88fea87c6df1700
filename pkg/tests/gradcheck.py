"""Central finite-difference oracle used by the gradient tests.

Kept independent of the tape: it only re-evaluates a scalar function while
perturbing raw arrays in place.
"""

import numpy as np

FD_STEP = 1e-5
REL_TOL = 1e-4


def finite_difference(f, arrays, step=FD_STEP):
    """Central-difference gradients of scalar ``f()`` w.r.t. each array in place."""
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(grad)
    return grads


def relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))


def assert_matches_fd(f, tensors, tol=REL_TOL, step=FD_STEP):
    """Backward through ``f`` and compare every tensor's gradient to the oracle."""
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    numeric = finite_difference(lambda: f().item(), [t.data for t in tensors], step)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "missing gradient"
        err = relative_error(t.grad, num)
        assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
