"""Central finite-difference oracle used across the test suite.

The oracle re-evaluates a scalar-valued closure under elementwise
perturbations of the raw parameter arrays; it never touches the autodiff
path it is checking.
"""

import numpy as np


def finite_difference(f, arrays, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. each array in ``arrays``.

    Perturbs the arrays in place and restores them. Returns one gradient array
    per input array.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-5):
    """Max elementwise relative error with an absolute-scale floor.

    Entries whose magnitude on both sides stays below ``floor`` are compared
    on the ``floor`` scale, so genuine zeros do not produce spurious blowups
    while still bounding the absolute disagreement.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = np.abs(a - n) / denom
    return float(err.max()) if err.size else 0.0
