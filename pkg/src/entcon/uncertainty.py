"""Entropy and gambling-softmax primitives.

All functions accept plain float arrays with the channel axis at position 1
(i.e. (B, C, ...) layouts) and compute in float64. Natural logarithms
throughout; entropies are in nats.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ParameterError

# Probabilities are clamped to [EPS, 1-EPS] before any log; the entropy
# derivative diverges at the simplex boundary otherwise.
EPS = 1e-7


def entropy(p: np.ndarray, axis: int = 1, eps: float = EPS) -> np.ndarray:
    """Shannon entropy -sum_c p_c ln p_c per voxel, channel axis reduced."""
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return -(q * np.log(q)).sum(axis=axis)


def entropy_grad(p: np.ndarray, eps: float = EPS) -> np.ndarray:
    """dH/dp_c = -(ln p_c + 1), zero where the clamp is active.

    The zero outside [eps, 1-eps] keeps the analytic gradient consistent
    with finite differences of the clamped forward.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(p, eps, 1.0 - eps)
    g = -(np.log(q) + 1.0)
    g[(p < eps) | (p > 1.0 - eps)] = 0.0
    return g


def gambling_softmax(p: np.ndarray, temperature: float = 1.0, axis: int = 1,
                     eps: float = EPS) -> np.ndarray:
    """Confidence-adjusted, temperature-scaled renormalization of ``p``.

    Per voxel with confidence c = max_k p_k:

        out_k = exp(ln p_k / T + (1 - c)) / sum_j exp(ln p_j / T + (1 - c))

    The (1 - c) shift is a per-voxel scalar and cancels under normalization;
    it is kept literal so the implementation matches the defining formula.
    At T = 1 the output equals ``p`` (up to the clamp).
    """
    if temperature <= 0:
        raise ParameterError(f"gambling temperature must be > 0, got {temperature}")
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    conf = q.max(axis=axis, keepdims=True)
    logits = np.log(q) / temperature + (1.0 - conf)
    logits -= logits.max(axis=axis, keepdims=True)  # stability only
    e = np.exp(logits)
    return e / e.sum(axis=axis, keepdims=True)


_AXES = {"H": 0, "W": 1, "D": 2}


def export_entropy_slices(h: np.ndarray, axis: str, out_dir: str) -> list[str]:
    """Write one CSV per slice of an entropy map along a spatial axis.

    ``h`` is (H, W, D) or (B, H, W, D); batch items get a ``vol<b>_`` file
    prefix when B > 1. Files are named ``slice_<axis>_<index>.csv`` with one
    row per first remaining axis. Returns the written paths.
    """
    if axis not in _AXES:
        raise ParameterError(f"axis must be one of H, W, D, got {axis!r}")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 3:
        vols = [h]
    elif h.ndim == 4:
        vols = list(h)
    else:
        raise ParameterError(f"entropy map must be 3-D or 4-D, got {h.ndim}-D")
    os.makedirs(out_dir, exist_ok=True)
    ax = _AXES[axis]
    written = []
    for b, vol in enumerate(vols):
        prefix = f"vol{b}_" if len(vols) > 1 else ""
        for idx in range(vol.shape[ax]):
            sl = np.take(vol, idx, axis=ax)
            path = os.path.join(out_dir, f"{prefix}slice_{axis}_{idx}.csv")
            with open(path, "w") as fh:
                for row in sl:
                    fh.write(",".join(repr(float(v)) for v in row))
                    fh.write("\n")
            written.append(path)
    return written
