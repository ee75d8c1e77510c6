"""Shared finite-difference gradient checking for the nn operator set."""

import numpy as np

REL_TOL = 1e-4
EPS = 1e-5


def central_diff(loss_fn, array, index, eps=EPS):
    old = array[index]
    array[index] = old + eps
    hi = loss_fn()
    array[index] = old - eps
    lo = loss_fn()
    array[index] = old
    return (hi - lo) / (2.0 * eps)


def check_grad(loss_fn, array, grad, rng, probes=20, rel_tol=REL_TOL, eps=EPS):
    """Compare analytic grad entries against central differences.

    Probes ``probes`` random entries of ``array``; asserts relative error
    below ``rel_tol`` (absolute tolerance guards near-zero gradients).
    """
    flat_idx = rng.choice(array.size, size=min(probes, array.size), replace=False)
    for fi in flat_idx:
        index = np.unravel_index(fi, array.shape)
        num = central_diff(loss_fn, array, index, eps)
        ana = grad[index]
        denom = max(abs(num), abs(ana), 1e-6)
        assert abs(num - ana) / denom < rel_tol, (
            f"grad mismatch at {index}: numeric {num:.8e} vs analytic {ana:.8e}")
