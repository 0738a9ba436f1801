"""Minimal differentiable segmentation network with a projection head.

Architecture (all same-padding, zero pad):

    x (B,1,H,W,D) -> conv 3x3x3 (1 -> F) + bias -> ReLU -> features
    features -> conv 1x1x1 (F -> classes) + bias -> logits -> softmax -> p
    features -> [conv 3x3x3 dil 1 (F -> E)] + [conv 3x3x3 dil 2 (F -> E)]
                 summed + shared bias -> z grid (projection head)

Forward, reverse-mode backward, SGD with momentum/weight decay and the EMA
teacher update are all hand-implemented in float64 with fixed reduction
order, so end-to-end finite-difference checks and bitwise reproducibility
both hold. Parameters live in plain dicts keyed by PARAM_KEYS.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ContractError, ParameterError, TrainingDivergedError
from .volumes import read_array, write_array

PARAM_KEYS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
              "projA_w", "projB_w", "proj_b")


def init_params(features: int = 8, embed_dim: int = 16, classes: int = 2,
                rng: np.random.Generator | None = None) -> dict:
    """He-style Gaussian init, zero biases."""
    rng = rng or np.random.default_rng(0)
    f, e, c = features, embed_dim, classes
    return {
        "conv1_w": rng.normal(0.0, np.sqrt(2.0 / 27.0), (f, 1, 3, 3, 3)),
        "conv1_b": np.zeros(f),
        "conv2_w": rng.normal(0.0, np.sqrt(2.0 / f), (c, f)),
        "conv2_b": np.zeros(c),
        "projA_w": rng.normal(0.0, np.sqrt(2.0 / (27.0 * f)), (e, f, 3, 3, 3)),
        "projB_w": rng.normal(0.0, np.sqrt(2.0 / (27.0 * f)), (e, f, 3, 3, 3)),
        "proj_b": np.zeros(e),
    }


def arch_of(params: dict) -> dict:
    return {
        "features": params["conv1_w"].shape[0],
        "embed_dim": params["projA_w"].shape[0],
        "classes": params["conv2_w"].shape[0],
    }


# ---------------------------------------------------------------------------
# 3-D convolution, kernel 3, arbitrary dilation, same zero padding.


def _conv3(x: np.ndarray, w: np.ndarray, dilation: int) -> np.ndarray:
    B, Ci, H, W, D = x.shape
    pad = dilation
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    acc = np.zeros((w.shape[0], B, H, W, D))
    for dx in range(3):
        sx = slice(dx * dilation, dx * dilation + H)
        for dy in range(3):
            sy = slice(dy * dilation, dy * dilation + W)
            for dz in range(3):
                sz = slice(dz * dilation, dz * dilation + D)
                acc += np.tensordot(w[:, :, dx, dy, dz], xp[:, :, sx, sy, sz],
                                    axes=(1, 1))
    return np.moveaxis(acc, 0, 1)


def _conv3_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray,
                    dilation: int, need_dx: bool = True):
    B, Ci, H, W, D = x.shape
    pad = dilation
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    dw = np.zeros_like(w)
    dxp = np.zeros((Ci, B, H + 2 * pad, W + 2 * pad, D + 2 * pad)) if need_dx else None
    for dx in range(3):
        sx = slice(dx * dilation, dx * dilation + H)
        for dy in range(3):
            sy = slice(dy * dilation, dy * dilation + W)
            for dz in range(3):
                sz = slice(dz * dilation, dz * dilation + D)
                window = xp[:, :, sx, sy, sz]
                dw[:, :, dx, dy, dz] = np.tensordot(
                    dout, window, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                if need_dx:
                    dxp[:, :, sx, sy, sz] += np.tensordot(
                        w[:, :, dx, dy, dz], dout, axes=(0, 1))
    if not need_dx:
        return dw, None
    dx_full = np.moveaxis(dxp, 0, 1)[:, :, pad:pad + H, pad:pad + W, pad:pad + D]
    return dw, dx_full


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, axis: int = 1) -> np.ndarray:
    inner = (grad_p * p).sum(axis=axis, keepdims=True)
    return p * (grad_p - inner)


def forward(params: dict, x: np.ndarray, want_proj: bool = True) -> dict:
    """Run the network; returns a cache dict with ``p`` (softmax
    probabilities), ``z`` (projection grid, None when ``want_proj`` is off)
    and the intermediates backward needs. Skipping the projection head
    saves most of the compute when no contrastive term consumes it."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5 or x.shape[1] != 1:
        raise ContractError(f"expected (B,1,H,W,D) input, got {x.shape}")
    if min(x.shape[2:]) < 3:
        raise ContractError(f"spatial dims must be >= 3, got {x.shape[2:]}")
    pre = _conv3(x, params["conv1_w"], 1) + params["conv1_b"][None, :, None, None, None]
    feat = np.maximum(pre, 0.0)
    logits = (np.moveaxis(np.tensordot(params["conv2_w"], feat, axes=(1, 1)), 0, 1)
              + params["conv2_b"][None, :, None, None, None])
    p = softmax(logits)
    z = None
    if want_proj:
        z = (_conv3(feat, params["projA_w"], 1)
             + _conv3(feat, params["projB_w"], 2)
             + params["proj_b"][None, :, None, None, None])
    return {"x": x, "pre": pre, "feat": feat, "logits": logits, "p": p, "z": z}


def backward(params: dict, cache: dict, grad_p: np.ndarray | None = None,
             grad_z: np.ndarray | None = None) -> dict:
    """Reverse-mode gradients for all parameters given upstream gradients on
    the probabilities and/or the projection grid."""
    if cache is None or "feat" not in cache:
        raise ContractError("forward cache required")
    feat, pre, x, p = cache["feat"], cache["pre"], cache["x"], cache["p"]
    grads = {k: np.zeros_like(params[k]) for k in PARAM_KEYS}
    dfeat = np.zeros_like(feat)

    if grad_p is not None:
        gl = softmax_backward(p, np.asarray(grad_p, dtype=np.float64))
        grads["conv2_w"] = np.tensordot(gl, feat, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grads["conv2_b"] = gl.sum(axis=(0, 2, 3, 4))
        dfeat += np.moveaxis(np.tensordot(params["conv2_w"], gl, axes=(0, 1)), 0, 1)

    if grad_z is not None:
        gz = np.asarray(grad_z, dtype=np.float64)
        grads["proj_b"] = gz.sum(axis=(0, 2, 3, 4))
        dwA, dfA = _conv3_backward(feat, params["projA_w"], gz, 1)
        dwB, dfB = _conv3_backward(feat, params["projB_w"], gz, 2)
        grads["projA_w"], grads["projB_w"] = dwA, dwB
        dfeat += dfA + dfB

    dpre = dfeat * (pre > 0.0)
    dw1, _ = _conv3_backward(x, params["conv1_w"], dpre, 1, need_dx=False)
    grads["conv1_w"] = dw1
    grads["conv1_b"] = dpre.sum(axis=(0, 2, 3, 4))
    return grads


# ---------------------------------------------------------------------------
# Optimization


def init_opt_state(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def sgd_step(params: dict, grads: dict, state: dict, lr: float = 0.01,
             momentum: float = 0.9, weight_decay: float = 1e-4):
    """v <- m*v + g + wd*theta; theta <- theta - lr*v. Returns new
    (params, state); inputs are not mutated."""
    new_p, new_s = {}, {}
    for k in PARAM_KEYS:
        g = grads[k]
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for {k}")
        v = momentum * state[k] + g + weight_decay * params[k]
        new_s[k] = v
        new_p[k] = params[k] - lr * v
    return new_p, new_s


def ema_update(teacher: dict, student: dict, alpha: float) -> dict:
    """theta_t <- alpha*theta_t + (1-alpha)*theta_s, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"EMA decay must be in [0, 1], got {alpha}")
    return {k: alpha * teacher[k] + (1.0 - alpha) * student[k] for k in PARAM_KEYS}


# ---------------------------------------------------------------------------
# Checkpoints: flat float64 payload in the shared array format plus a JSON
# manifest describing the layout.


def save_checkpoint(out_dir: str, params: dict, epoch: int = 0,
                    rng_seed: int | None = None, extra: dict | None = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    layout, chunks, offset = [], [], 0
    for k in PARAM_KEYS:
        a = np.asarray(params[k], dtype=np.float64)
        layout.append({"name": k, "shape": list(a.shape), "offset": offset})
        chunks.append(a.ravel())
        offset += a.size
    flat = np.concatenate(chunks)
    write_array(flat, os.path.join(out_dir, "params"))
    manifest = {
        "arch": arch_of(params),
        "epoch": int(epoch),
        "rng_seed": rng_seed,
        "layout": layout,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return out_dir


def load_checkpoint(ckpt_dir: str) -> tuple[dict, dict]:
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    flat = read_array(os.path.join(ckpt_dir, "params"))
    params = {}
    for entry in manifest["layout"]:
        n = int(np.prod(entry["shape"]))
        start = entry["offset"]
        params[entry["name"]] = flat[start:start + n].reshape(entry["shape"])
    return params, manifest
