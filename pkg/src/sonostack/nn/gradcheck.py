"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``, 0 when both vanish.

    A positive ``floor`` keeps gradients that are zero in exact arithmetic
    (a bias feeding batch norm, say) from scoring round-off as a 100% error.
    """
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(loss_fn, tensors, eps=1e-6, max_entries=None, rng=None, floor=0.0):
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph from the current tensor values on
    every call and return a scalar Tensor. When ``max_entries`` is set, a
    random subset of coordinates of each tensor is probed. Returns the
    relative error per tensor, in input order.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    errors = []
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric[j] = (hi - lo) / (2 * eps)
        errors.append(relative_error(a.reshape(-1)[idx], numeric, floor))
    return errors
