"""Shared oracles for the test suite."""

import numpy as np

from disconet.tensor import Tensor, backward


def numeric_grad(f, t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Largest elementwise |a - b| / max(|a| + |b|, floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def check_grads(f, leaves, h: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients over ``leaves``."""
    for t in leaves:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numeric_grad(f, t, h)))
    return worst


def projector(shape, rng) -> np.ndarray:
    """Fixed random weights turning a tensor into a well-conditioned scalar."""
    return rng.standard_normal(shape)


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)
