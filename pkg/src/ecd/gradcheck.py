"""Central finite-difference gradient verification harness.

Runs in float64; used by the test suite to validate every analytic
gradient in the trainable modules.
"""
from __future__ import annotations

import numpy as np


def numerical_grad(func, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar-valued func at x (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(func(x))
        flat[i] = orig - step
        f_minus = float(func(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative error with an absolute floor for near-zero entries."""
    num = np.abs(analytic - numeric)
    den = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(num / den))


def check_param_grads(loss_fn, params: dict, step: float = 1e-4) -> dict[str, float]:
    """Compare analytic grads on `params` (name -> Tensor) against central
    finite differences of `loss_fn() -> Tensor`. Returns per-block max
    relative error."""
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: np.array(p.grad) for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        def scalar_at(x, _p=p):
            saved = _p.data
            _p.data = x
            try:
                return loss_fn().data
            finally:
                _p.data = saved

        numeric = numerical_grad(scalar_at, p.data, step=step)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
