"""Central-finite-difference gradient oracle.

Deliberately independent of the tape: it only perturbs raw parameter arrays
and re-evaluates a scalar loss closure, so it can vouch for the reverse pass
without sharing any code with it. 64-bit inputs only; finite-difference
tolerances are meaningless in 32-bit.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError, Tensor


def finite_difference_grad(loss_fn, params, h: float = 1e-5):
    """Numerical gradient of ``loss_fn()`` w.r.t. each tensor in ``params``.

    ``loss_fn`` must be a pure function of the current parameter values and
    return a python float. Returns a list of arrays, one per parameter.
    """
    grads = []
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("finite differences require float64 parameters")
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6):
    """Worst-case elementwise relative error between two gradient arrays.

    The denominator is floored so near-zero entries compare absolutely.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_gradients_match(loss_fn, params: list[Tensor], tol: float = 1e-4, h: float = 1e-5):
    """Run backward via the caller, then compare ``p.grad`` against the oracle."""
    numeric = finite_difference_grad(loss_fn, params, h=h)
    worst = 0.0
    for p, num in zip(params, numeric):
        assert p.grad is not None, "parameter missing analytic gradient"
        worst = max(worst, max_relative_error(p.grad, num))
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e} > {tol:g}"
    return worst
