"""Reflectance-consistency and white-light losses with their gradients.

Both are normalised by pixel and channel count so values do not depend on
resolution; the consistency loss is additionally averaged over frame pairs.
"""
from __future__ import annotations

import numpy as np

from ._kernels import pairwise_abs


def _check_frames(frames, minimum: int) -> np.ndarray:
    a = np.asarray(frames, dtype=np.float64)
    if a.ndim < 2 or a.shape[0] < minimum:
        raise ValueError(f"need at least {minimum} frames, got {a.shape[0] if a.ndim else 0}")
    return a


def pairwise_l1(frames, smooth: float = 0.0, with_grad: bool = False):
    """Mean over pixels and frame pairs of ``|a_i - a_j|``.

    With ``smooth > 0`` the Charbonnier surrogate ``sqrt(d^2 + s^2) - s`` is
    used instead, which is differentiable at zero.
    """
    a = _check_frames(frames, 2)
    n = a.shape[0]
    norm = n * (n - 1) // 2 * a[0].size
    flat = np.ascontiguousarray(a.reshape(n, -1))
    total, grad = pairwise_abs(flat, float(smooth), with_grad)
    if with_grad:
        return total / norm, grad.reshape(a.shape) / norm
    return total / norm


def loss_rc(log_reflectances) -> float:
    """Reflectance consistency: mean absolute disagreement over frame pairs."""
    return pairwise_l1(log_reflectances)


def loss_wl(color_fields, with_grad: bool = False):
    """White light: L1 norm of the per-pixel sum of bi-color fields over frames."""
    b = _check_frames(color_fields, 1)
    s = b.sum(axis=0)
    value = float(np.abs(s).sum()) / s.size
    if with_grad:
        return value, np.broadcast_to(np.sign(s) / s.size, b.shape).copy()
    return value
