"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["max_relative_error", "check_gradients"]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(1, |a|, |n|), reduced to the maximum."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, params, h: float = 1e-5, max_elements: int = 64,
                    rng: np.random.Generator | None = None) -> float:
    """Compare backprop gradients of ``build_loss()`` against central differences.

    ``build_loss`` must construct the graph from scratch on each call and
    return a scalar Tensor; ``params`` are the leaf tensors to perturb.
    Large tensors are subsampled to ``max_elements`` entries per tensor.
    Returns the worst relative error over all checked entries.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if n > max_elements:
            positions = rng.choice(n, size=max_elements, replace=False)
        else:
            positions = np.arange(n)
        for pos in positions:
            saved = flat[pos]
            flat[pos] = saved + h
            up = build_loss().item()
            flat[pos] = saved - h
            down = build_loss().item()
            flat[pos] = saved
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, max_relative_error(np.asarray(a.reshape(-1)[pos]),
                                                  np.asarray(numeric)))
    return worst
