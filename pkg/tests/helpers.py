"""Shared test utilities: random inputs and the gradient comparison."""

from __future__ import annotations

import numpy as np

from disguise import diffcore as dc

GRAD_RTOL = 1e-3
GRAD_FLOOR = 1e-6


def rand_image(rng: np.random.Generator, size: int = 16, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    return rng.uniform(lo, hi, size=(size, size, 3))


def away_from(rng: np.random.Generator, ref: np.ndarray, gap: float = 0.02, spread: float = 0.08) -> np.ndarray:
    """A point near ``ref`` whose every element differs by at least ``gap``.

    Keeps ``|a - b|`` well away from its kink so central differences are valid.
    """
    step = rng.uniform(gap, spread, size=ref.shape) * rng.choice([-1.0, 1.0], size=ref.shape)
    out = ref + step
    bad = (out < 0) | (out > 1)
    out[bad] = ref[bad] - step[bad]
    return out


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Largest elementwise relative error where either gradient exceeds ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / scale[mask]))


def check_grad(build, x: np.ndarray, h: float = 1e-5, indices=None) -> float:
    """Compare backward() against central differences for ``x -> build(node)``."""
    _, g = dc.grad_of(build, x)
    fd = dc.finite_difference_grad(lambda v: dc.item(build(dc.const(v))), x, h=h, indices=indices)
    if indices is not None:
        idx = np.asarray(list(indices))
        return grad_mismatch(g.ravel()[idx], fd.ravel()[idx])
    return grad_mismatch(g, fd)
