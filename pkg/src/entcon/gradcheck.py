"""Central finite-difference verification of every analytic gradient.

Each suite draws random instances, compares the analytic gradient against
central differences of the matching forward function, and reports the worst
relative error, defined in the standard hybrid form

    ||g - fd||_inf / max(1, ||g||_inf, ||fd||_inf)

(absolute below unit gradient magnitude, relative above, so zero-gradient
instances are not drowned by the ~1e-10 roundoff floor central differences
carry at h = 1e-6). All arithmetic is float64 with step h = 1e-6 unless
stated otherwise.

The patch-contrastive suite freezes focal weights, entropy factors and
hard-negative selection at the base point (the stop-gradient convention the
analytic gradient uses), then perturbs embeddings only. The end-to-end
suite differentiates the full composite loss (dice + cross-entropy +
eta * (consistency + contrastive)) through the network per parameter.
"""

from __future__ import annotations

import numpy as np

from . import consistency, contrastive, network, supervised


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.ravel()
    xf = x.copy().ravel()
    for j in range(xf.size):
        orig = xf[j]
        xf[j] = orig + h
        fp = f(xf.reshape(x.shape))
        xf[j] = orig - h
        fm = f(xf.reshape(x.shape))
        xf[j] = orig
        flat[j] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(fd, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(1.0, float(np.abs(a).max()), float(np.abs(b).max()))
    return float(np.abs(a - b).max() / scale)


def random_prob_field(rng, shape, classes=2, margin=1e-3):
    """Random probability field with every channel >= margin from {0, 1}."""
    raw = rng.uniform(margin, 1.0, (shape[0], classes) + tuple(shape[1:]))
    p = raw / raw.sum(axis=1, keepdims=True)
    # renormalization can push a channel below margin; mix toward uniform
    p = (1.0 - classes * margin) * p + margin
    return p


def consistency_suite(seed: int = 0, trials: int = 100, h: float = 1e-6) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        shape = (1, 3, 3, 3)
        ps = random_prob_field(rng, shape)
        pt = random_prob_field(rng, shape)
        beta = 0.0 if t % 10 == 0 else float(rng.uniform(0.05, 2.0))
        mode = ("dual", "student_only", "teacher_only")[t % 3]
        reg = t % 4 != 0
        grad = consistency.consistency_grad(ps, pt, beta, mode, reg)
        fd = fd_gradient(
            lambda q: consistency.consistency_forward(q, pt, beta, mode, reg)["loss"],
            ps, h)
        worst = max(worst, max_rel_error(grad, fd))
    return {"suite": "consistency", "trials": trials, "max_rel_error": worst}


def dice_suite(seed: int = 0, trials: int = 25, h: float = 1e-6) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = random_prob_field(rng, (1, 4, 2, 2))
        y = rng.integers(0, 2, (1, 4, 2, 2))
        _, grad = supervised.dice_loss(p, y)
        fd = fd_gradient(lambda q: supervised.dice_loss(q, y)[0], p, h)
        worst = max(worst, max_rel_error(grad, fd))
    return {"suite": "dice", "trials": trials, "max_rel_error": worst}


def ce_suite(seed: int = 0, trials: int = 25, h: float = 1e-6) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = random_prob_field(rng, (1, 4, 2, 2))
        y = rng.integers(0, 2, (1, 4, 2, 2))
        _, grad = supervised.ce_loss(p, y)
        fd = fd_gradient(lambda q: supervised.ce_loss(q, y)[0], p, h)
        worst = max(worst, max_rel_error(grad, fd))
    return {"suite": "cross_entropy", "trials": trials, "max_rel_error": worst}


def random_embeddings(rng, n, dim):
    z = rng.normal(0.0, 1.0, (n, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def contrastive_suite(seed: int = 0, trials: int = 20, h: float = 1e-6) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, dim = int(rng.integers(4, 9)), 5
        zs = random_embeddings(rng, n, dim)
        zt = random_embeddings(rng, n, dim)
        cs = rng.integers(0, 2, n)
        ct = rng.integers(0, 2, n)
        h_patch = rng.uniform(0.0, 1.0, n)
        tau, gamma, k_top = 0.6, float(rng.uniform(0.3, 2.0)), 2
        ctx = contrastive.build_context(zs, cs, zt, ct, gamma, k_top, h_patch)
        grad = contrastive.contrastive_grad(zs, zt, ctx, tau)
        fd = fd_gradient(
            lambda q: contrastive.contrastive_value(q, zt, ctx, tau), zs, h)
        worst = max(worst, max_rel_error(grad, fd))
    return {"suite": "contrastive", "trials": trials, "max_rel_error": worst}


# ---------------------------------------------------------------------------
# End-to-end composite through the network


def composite_loss(params: dict, batch: dict, eta: float = 1.0,
                   beta: float = 1.0, tau: float = 0.6, gamma: float = 0.5,
                   k_top: int = 2, patch_k: int = 2, entropy_mode: str = "dual",
                   frozen_ctx: list | None = None, want_grads: bool = False):
    """Total loss (supervised + eta * unsupervised) and, optionally, its
    parameter gradients.

    ``batch`` carries ``x_lab``/``y_lab`` plus ``x_unl_s``/``x_unl_t`` (the
    two views of the unlabeled volumes). The teacher is frozen at
    ``batch["teacher"]``. When ``frozen_ctx`` is given, the contrastive pair
    context is reused instead of rebuilt, which is what makes per-parameter
    finite differencing match the stop-gradient convention.
    """
    cache_lab = network.forward(params, batch["x_lab"])
    d_loss, d_grad = supervised.dice_loss(cache_lab["p"], batch["y_lab"])
    c_loss, c_grad = supervised.ce_loss(cache_lab["p"], batch["y_lab"])

    teacher = batch["teacher"]
    cache_s = network.forward(params, batch["x_unl_s"])
    cache_t = network.forward(teacher, batch["x_unl_t"])
    ps, pt = cache_s["p"], cache_t["p"]
    u_loss = consistency.consistency_forward(ps, pt, beta, entropy_mode)["loss"]

    B = ps.shape[0]
    f_loss = 0.0
    ctxs = []
    z_gradients = np.zeros_like(cache_s["z"]) if want_grads else None
    for b in range(B):
        zs, raw_s = contrastive.pool_and_normalize(cache_s["z"][b], patch_k)
        zt, _ = contrastive.pool_and_normalize(cache_t["z"][b], patch_k)
        if frozen_ctx is not None:
            ctx = frozen_ctx[b]
        else:
            pseudo = np.argmax(pt[b], axis=0)
            cls = contrastive.patch_labels(pseudo, patch_k)
            ctx = contrastive.build_context(zs, cls, zt, cls, gamma, k_top, 0.0)
        ctxs.append(ctx)
        f_loss += contrastive.contrastive_value(zs, zt, ctx, tau) / B
        if want_grads:
            gz = contrastive.contrastive_grad(zs, zt, ctx, tau) * (eta / B)
            z_gradients[b] = contrastive.pool_adjoint(
                gz, raw_s, cache_s["z"][b].shape, patch_k)

    total = d_loss + c_loss + eta * (u_loss + f_loss)
    if not want_grads:
        return total, ctxs

    grads_lab = network.backward(params, cache_lab, grad_p=d_grad + c_grad)
    gu = consistency.consistency_grad(ps, pt, beta, entropy_mode) * eta
    grads_unl = network.backward(params, cache_s, grad_p=gu, grad_z=z_gradients)
    grads = {k: grads_lab[k] + grads_unl[k] for k in network.PARAM_KEYS}
    return total, grads, ctxs


def end_to_end_suite(seed: int = 0, h: float = 1e-6, features: int = 4,
                     embed_dim: int = 6, size: int = 4) -> dict:
    """Per-parameter FD of the composite loss on a small volume."""
    rng = np.random.default_rng(seed)
    params = network.init_params(features, embed_dim, 2, rng)
    teacher = network.init_params(features, embed_dim, 2, rng)
    batch = {
        "x_lab": rng.normal(0.0, 1.0, (1, 1, size, size, size)),
        "y_lab": rng.integers(0, 2, (1, size, size, size)),
        "x_unl_s": rng.normal(0.0, 1.0, (1, 1, size, size, size)),
        "x_unl_t": rng.normal(0.0, 1.0, (1, 1, size, size, size)),
        "teacher": teacher,
    }
    total, grads, ctxs = composite_loss(params, batch, want_grads=True)
    worst = 0.0
    for key in network.PARAM_KEYS:
        def f_of(theta, key=key):
            trial = dict(params)
            trial[key] = theta
            return composite_loss(trial, batch, frozen_ctx=ctxs)[0]
        fd = fd_gradient(f_of, params[key], h)
        worst = max(worst, max_rel_error(grads[key], fd))
    return {"suite": "end_to_end", "params": sum(p.size for p in params.values()),
            "max_rel_error": worst}


SUITE_THRESHOLDS = {
    "consistency": 1e-6,
    "dice": 1e-6,
    "cross_entropy": 1e-6,
    "contrastive": 1e-5,
    "end_to_end": 1e-5,
}


def run_all(seed: int = 0) -> list[dict]:
    results = [
        consistency_suite(seed),
        dice_suite(seed),
        ce_suite(seed),
        contrastive_suite(seed),
        end_to_end_suite(seed),
    ]
    for r in results:
        r["threshold"] = SUITE_THRESHOLDS[r["suite"]]
        r["ok"] = r["max_rel_error"] < r["threshold"]
    return results
