"""Dense float64 array helpers and hand-written reverse-mode pieces.

Arrays are plain ``numpy.ndarray`` objects in float64. The backward
functions here are the only differentiation machinery in the package; the
matcher and the attack compose them by hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError

GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOL = 1e-4


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateInputError when any slice has zero norm.
    """
    v = as_tensor(v)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norm


def l2_normalize_backward(u: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``upstream . (u / |u|)`` with respect to ``u`` (last axis)."""
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise NumericError("normalization of a zero pre-activation has no gradient")
    e = u / norm
    proj = np.sum(e * upstream, axis=-1, keepdims=True)
    return (upstream - e * proj) / norm


def cosine(u, v) -> float:
    u = as_tensor(u).ravel()
    v = as_tensor(v).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine with a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping mean pooling over the two spatial axes of (..., H, W, C)."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"image {h}x{w} not divisible by pool factor {factor}")
    x = x.reshape(*lead, h // factor, factor, w // factor, factor, c)
    return x.mean(axis=(-4, -2))


def avg_pool_backward(g: np.ndarray, factor: int) -> np.ndarray:
    """Spread pooled-grid gradients back onto the pixels they averaged."""
    g = as_tensor(g) / (factor * factor)
    return np.repeat(np.repeat(g, factor, axis=-3), factor, axis=-2)


def tanh_backward(h: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through ``h = tanh(z)`` given the forward output ``h``."""
    return upstream * (1.0 - h * h)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = GRAD_CHECK_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    probe_count: int
    passed: bool


def grad_check(analytic, numeric, tol: float = GRAD_CHECK_TOL) -> GradCheckReport:
    """Compare two gradients coordinate-wise with a symmetric relative error."""
    a = as_tensor(analytic)
    n = as_tensor(numeric)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return GradCheckReport(0.0, 0, True)
    rel = np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))
    worst = float(rel.max())
    return GradCheckReport(worst, int(a.size), worst < tol)
