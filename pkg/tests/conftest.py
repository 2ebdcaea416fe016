"""Shared oracles and helpers for the test suite.

The finite-difference gradient here is the independent check against which
the autodiff backward passes are verified; it never calls into the package's
backward machinery.
"""

import numpy as np


def central_diff_grad(f, arrays, index, h=1e-4):
    """d f(arrays) / d arrays[index] by central differences.

    ``f`` maps a list of numpy arrays to a float and is re-evaluated with
    perturbed copies; differencing is done in float64.
    """
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(base)
        flat[i] = orig - h
        lo = f(base)
        flat[i] = orig
        gflat[i] = (float(hi) - float(lo)) / (2.0 * h)
    return grad


def max_rel_err(analytic, reference):
    """max |a - r| scaled by the largest reference magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(np.abs(reference).max(), 1e-8)
    return float(np.abs(analytic - reference).max() / scale)
