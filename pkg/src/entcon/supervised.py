"""Soft Dice and cross-entropy losses for labeled volumes, with analytic
gradients w.r.t. the predicted probabilities."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .uncertainty import EPS

DICE_SMOOTH = 1e-5


def _check(p: np.ndarray, y: np.ndarray):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.ndim != y.ndim + 1 or p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise ContractError(f"probability shape {p.shape} does not match labels {y.shape}")
    return p, y


def dice_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Soft Dice on the foreground channel: 1 - (2*sum(p1*y) + s) / (sum(p1) + sum(y) + s).

    Returns (loss, grad) with grad shaped like ``p``; only the foreground
    channel receives gradient.
    """
    p, y = _check(p, y)
    fg = p[:, 1]
    yf = (y == 1).astype(np.float64)
    inter = (fg * yf).sum()
    a = 2.0 * inter + DICE_SMOOTH
    b = fg.sum() + yf.sum() + DICE_SMOOTH
    loss = 1.0 - a / b
    grad = np.zeros_like(p)
    grad[:, 1] = -(2.0 * yf * b - a) / b ** 2
    return float(loss), grad


def ce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over voxels of -ln p[true class], probabilities clamped.

    Gradient is -1/(N * p_y) at the true channel, zero where the clamp is
    active (so it stays consistent with finite differences of the clamped
    forward).
    """
    p, y = _check(p, y)
    n = y.size
    idx = np.expand_dims(y, 1)
    p_true = np.take_along_axis(p, idx, axis=1)[:, 0]
    q = np.clip(p_true, EPS, 1.0 - EPS)
    loss = float(-np.log(q).sum() / n)
    g_true = np.where((p_true >= EPS) & (p_true <= 1.0 - EPS), -1.0 / (n * q), 0.0)
    grad = np.zeros_like(p)
    np.put_along_axis(grad, idx, np.expand_dims(g_true, 1), axis=1)
    return loss, grad
