"""Central finite-difference verification of analytic gradients.

Checks run in float64: parameters are temporarily promoted, gradients compared,
then restored. The comparison is a normalized max-error:
max|a - n| / max(max|a|, max|n|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from .layers import Module
from .tensor import Tensor


def _promote(module: Module) -> list[np.ndarray]:
    saved = []
    for p in module.parameters():
        saved.append(p.data)
        p.data = p.data.astype(np.float64)
    return saved


def _restore(module: Module, saved: list[np.ndarray]):
    for p, d in zip(module.parameters(), saved):
        p.data = d


def check_module_gradients(module: Module, loss_fn, rng: np.random.Generator,
                           h: float = 1e-3, max_coords: int = 12) -> float:
    """Compare analytic parameter gradients of `loss_fn(module)` to central differences.

    loss_fn must rebuild the forward pass on every call and return a scalar Tensor.
    Returns the worst normalized error across all sampled coordinates.
    """
    saved = _promote(module)
    try:
        module.zero_grad()
        loss = loss_fn(module)
        loss.backward()
        worst = 0.0
        for p in module.parameters():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            n = flat.size
            coords = rng.choice(n, size=min(max_coords, n), replace=False)
            num = np.zeros(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                up = loss_fn(module).item()
                flat[c] = orig - h
                down = loss_fn(module).item()
                flat[c] = orig
                num[j] = (up - down) / (2.0 * h)
            ana = analytic.reshape(-1)[coords]
            scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0), 1e-8)
            worst = max(worst, float(np.max(np.abs(ana - num)) / scale))
        return worst
    finally:
        _restore(module, saved)


def check_input_gradient(fn, x: np.ndarray, rng: np.random.Generator,
                         h: float = 1e-3, max_coords: int = 12) -> float:
    """Same check for gradients w.r.t. an input array; fn(Tensor) -> scalar Tensor."""
    x = x.astype(np.float64)
    t = Tensor(x, requires_grad=True)
    fn(t).backward()
    analytic = t.grad.reshape(-1)
    flat = x.reshape(-1)
    coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
    num = np.zeros(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = fn(Tensor(x)).item()
        flat[c] = orig - h
        down = fn(Tensor(x)).item()
        flat[c] = orig
        num[j] = (up - down) / (2.0 * h)
    ana = analytic[coords]
    scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0), 1e-8)
    return float(np.max(np.abs(ana - num)) / scale)
