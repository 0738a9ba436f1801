"""Focal, entropy-aware patch contrastive loss between student and teacher
embeddings.

A volume's projection-head output is partitioned into a k*k*k grid of
patches, each mean-pooled to one vector and L2-normalized. For an anchor
patch i with positive set P(i) (same-class student patches, i excluded)
and negative set N(i) (different-class student patches), the loss term is

    (1/|P(i)|) sum_{k in P(i)} Fpos_ik * (-log(exp(S_ik) / D_ik))
    D_ik = exp(S_ik) + sum_{q in N(i)} Fneg_iq * (exp(S_iq) + (1/K_i) sum_l exp(S_il))

where S_xy = cos(z_x, z_y) / tau, the l-sum runs over the top-K_i
different-class teacher patches by cosine similarity to the anchor, and the
dual focal weights are

    Fpos_ik = (1 - c_ik)^gamma * exp(Hpatch_i)    Fneg_iq = c_iq^gamma

with c the raw cosine clamped to [0, 1] and Hpatch the anchor patch's
aggregated (gambling-softmax) entropy. The batch loss is the mean over
anchors with at least one positive.

Focal weights, the entropy factor and the top-k selection are treated as
constants of the current step: the gradient does not flow through them
(stop-gradient, the usual focal-loss convention). ``PairContext`` captures
those frozen quantities so finite-difference checks can perturb embeddings
under the exact convention the analytic gradient uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

NORM_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Patch plumbing


def _pad_to_multiple(grid: np.ndarray, k: int) -> np.ndarray:
    """Edge-replicate spatial axes (last three) up to multiples of k."""
    pads = [(0, 0)] * (grid.ndim - 3)
    for ax in range(grid.ndim - 3, grid.ndim):
        rem = (-grid.shape[ax]) % k
        pads.append((0, rem))
    if any(p != (0, 0) for p in pads):
        grid = np.pad(grid, pads, mode="edge")
    return grid


def partition_average(grid: np.ndarray, k: int, normalize: bool = True) -> np.ndarray:
    """Mean-pool a feature grid (E, H, W, D) into k^3 patch vectors (P, E).

    Spatial dims that do not divide k are edge-replicated up first. With
    ``normalize`` each vector is scaled to unit L2 norm (zero vectors are
    left untouched).
    """
    if k <= 0:
        raise ParameterError(f"patch grid size must be positive, got {k}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4:
        raise ContractError(f"expected (E, H, W, D) feature grid, got {grid.ndim}-D")
    grid = _pad_to_multiple(grid, k)
    E, H, W, D = grid.shape
    h, w, d = H // k, W // k, D // k
    g = grid.reshape(E, k, h, k, w, k, d)
    # patch index order: (kx, ky, kz) row-major, matching patch_labels
    means = g.mean(axis=(2, 4, 6)).reshape(E, k ** 3).T
    if normalize:
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        means = means / np.maximum(norms, NORM_FLOOR)
    return np.ascontiguousarray(means)


def patch_labels(mask: np.ndarray, k: int, threshold: float = 0.5,
                 classes: int = 2) -> np.ndarray:
    """Collapse a voxel mask (H, W, D) to one class per k^3 patch.

    Binary: class 1 iff the patch's mean foreground fraction exceeds
    ``threshold``. Multi-class: majority vote (lowest class wins ties).
    """
    if k <= 0:
        raise ParameterError(f"patch grid size must be positive, got {k}")
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ContractError(f"expected (H, W, D) mask, got {mask.ndim}-D")
    m = _pad_to_multiple(mask[None].astype(np.int64), k)[0]
    H, W, D = m.shape
    h, w, d = H // k, W // k, D // k
    cells = m.reshape(k, h, k, w, k, d).transpose(0, 2, 4, 1, 3, 5).reshape(k ** 3, -1)
    if classes == 2:
        frac = cells.mean(axis=1)
        return (frac > threshold).astype(np.int64)
    counts = np.stack([(cells == c).sum(axis=1) for c in range(classes)], axis=1)
    return counts.argmax(axis=1).astype(np.int64)


def pool_and_normalize(grid: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch vectors both normalized and raw; the raw means feed the
    normalization Jacobian in :func:`pool_adjoint`."""
    raw = partition_average(grid, k, normalize=False)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / np.maximum(norms, NORM_FLOOR), raw


def pool_adjoint(grad_vectors: np.ndarray, vectors_raw: np.ndarray,
                 grid_shape: tuple, k: int, normalize: bool = True) -> np.ndarray:
    """Backpropagate d(loss)/d(patch vectors) to the feature grid.

    ``vectors_raw`` are the pre-normalization patch means (P, E);
    ``grid_shape`` is the original (E, H, W, D). Inverts the edge padding by
    accumulating padded-voxel gradients onto their source edge voxels.
    """
    E, H, W, D = grid_shape
    g = np.asarray(grad_vectors, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(vectors_raw, axis=1, keepdims=True)
        safe = np.maximum(norms, NORM_FLOOR)
        u = vectors_raw / safe
        g = (g - (g * u).sum(axis=1, keepdims=True) * u) / safe
        g[norms[:, 0] < NORM_FLOOR] = 0.0
    Hp, Wp, Dp = (H + (-H) % k), (W + (-W) % k), (D + (-D) % k)
    h, w, d = Hp // k, Wp // k, Dp // k
    per_voxel = g.reshape(k, k, k, E).transpose(3, 0, 1, 2) / (h * w * d)
    padded = np.repeat(np.repeat(np.repeat(per_voxel, h, axis=1), w, axis=2), d, axis=3)
    if (Hp, Wp, Dp) == (H, W, D):
        return padded
    out = np.zeros(grid_shape, dtype=np.float64)
    ix = np.minimum(np.arange(Hp), H - 1)
    iy = np.minimum(np.arange(Wp), W - 1)
    iz = np.minimum(np.arange(Dp), D - 1)
    np.add.at(out, (slice(None), ix[:, None, None], iy[None, :, None], iz[None, None, :]), padded)
    return out


# ---------------------------------------------------------------------------
# Similarities and weights


def similarity(vectors: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise similarity matrix S = cos / tau plus the raw cosine matrix."""
    if tau <= 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    z = np.asarray(vectors, dtype=np.float64)
    c_raw = np.clip(z @ z.T, -1.0, 1.0)
    return c_raw / tau, c_raw


def focal_weights(c_raw: np.ndarray, gamma: float,
                  h_patch: np.ndarray | float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Dual focal weights from raw cosines clamped to [0, 1].

    Returns (f_pos, f_neg), both shaped like ``c_raw``; f_pos[i, k] carries
    the anchor i's entropy factor exp(h_patch[i]).
    """
    if gamma < 0:
        raise ParameterError("gamma must be >= 0")
    s = np.clip(np.asarray(c_raw, dtype=np.float64), 0.0, 1.0)
    h = np.asarray(h_patch, dtype=np.float64)
    ent = np.exp(h if h.ndim == 0 else h[:, None])
    f_pos = (1.0 - s) ** gamma * ent
    f_neg = s ** gamma
    return f_pos, f_neg


def topk_hard_negatives(student: np.ndarray, student_class: np.ndarray,
                        teacher: np.ndarray, teacher_class: np.ndarray,
                        k_top: int) -> list[np.ndarray]:
    """Per anchor, indices of the top-k different-class teacher patches by
    cosine similarity, descending; fewer when fewer exist, possibly empty."""
    zs = np.asarray(student, dtype=np.float64)
    zt = np.asarray(teacher, dtype=np.float64)
    if zs.shape[1] != zt.shape[1]:
        raise ContractError("student and teacher embedding dims differ")
    sims = zs @ zt.T
    out = []
    for i in range(zs.shape[0]):
        cand = np.nonzero(teacher_class != student_class[i])[0]
        if cand.size == 0:
            out.append(np.empty(0, dtype=np.int64))
            continue
        order = cand[np.argsort(-sims[i, cand], kind="stable")]
        out.append(order[: min(k_top, order.size)].astype(np.int64))
    return out


# ---------------------------------------------------------------------------
# Loss and gradient


@dataclass
class PairContext:
    """Everything the loss treats as constant under differentiation:
    pair sets, focal weights, entropy factors and hard-negative choices."""

    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    hard_negatives: list[np.ndarray]
    f_pos: np.ndarray      # (P, P), anchor x positive-candidate
    f_neg: np.ndarray      # (P, P), anchor x negative-candidate
    anchors: np.ndarray    # indices with >= 1 positive
    degenerate: bool       # no anchor has both positives and negatives


def build_context(student: np.ndarray, student_class: np.ndarray,
                  teacher: np.ndarray, teacher_class: np.ndarray,
                  gamma: float, k_top: int,
                  h_patch: np.ndarray | float = 0.0) -> PairContext:
    P = student.shape[0]
    if P < 2:
        raise ContractError("need at least two patches")
    _, c_raw = similarity(student, 1.0)
    f_pos, f_neg = focal_weights(c_raw, gamma, h_patch)
    same = student_class[:, None] == student_class[None, :]
    np.fill_diagonal(same, False)
    positives = [np.nonzero(same[i])[0] for i in range(P)]
    negatives = [np.nonzero(student_class != student_class[i])[0] for i in range(P)]
    hard = topk_hard_negatives(student, student_class, teacher, teacher_class, k_top)
    anchors = np.array([i for i in range(P) if positives[i].size > 0], dtype=np.int64)
    degenerate = not any(
        positives[i].size > 0 and negatives[i].size > 0 for i in range(P)
    )
    return PairContext(positives, negatives, hard, f_pos, f_neg, anchors, degenerate)


def contrastive_value(student: np.ndarray, teacher: np.ndarray,
                      ctx: PairContext, tau: float) -> float:
    """Loss value for given embeddings under a frozen :class:`PairContext`."""
    if tau <= 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    zs = np.asarray(student, dtype=np.float64)
    zt = np.asarray(teacher, dtype=np.float64)
    if ctx.anchors.size == 0:
        return 0.0
    s_ss = (zs @ zs.T) / tau
    s_st = (zs @ zt.T) / tau
    total = 0.0
    for i in ctx.anchors:
        pos, neg, hn = ctx.positives[i], ctx.negatives[i], ctx.hard_negatives[i]
        hn_term = np.exp(s_st[i, hn]).sum() / hn.size if hn.size else 0.0
        neg_sum_base = (ctx.f_neg[i, neg] * (np.exp(s_ss[i, neg]) + hn_term)).sum()
        e_pos = np.exp(s_ss[i, pos])
        # -log(exp(S_ik)/D) = log(D/exp(S_ik)) = log1p(negsum/exp(S_ik));
        # D >= exp(S_ik) since every added term is nonnegative, and the
        # no-negative collapse comes out exactly 0
        term = (ctx.f_pos[i, pos] * np.log1p(neg_sum_base / e_pos)).sum() / pos.size
        total += term
    return float(total / ctx.anchors.size)


def contrastive_grad(student: np.ndarray, teacher: np.ndarray,
                     ctx: PairContext, tau: float) -> np.ndarray:
    """Gradient of :func:`contrastive_value` w.r.t. the student embeddings,
    under the frozen-context (stop-gradient) convention."""
    if tau <= 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    zs = np.asarray(student, dtype=np.float64)
    zt = np.asarray(teacher, dtype=np.float64)
    P = zs.shape[0]
    g_ss = np.zeros((P, P))
    g_st = np.zeros((P, zt.shape[0]))
    if ctx.anchors.size == 0:
        return np.zeros_like(zs)
    a = ctx.anchors.size
    s_ss = (zs @ zs.T) / tau
    s_st = (zs @ zt.T) / tau
    for i in ctx.anchors:
        pos, neg, hn = ctx.positives[i], ctx.negatives[i], ctx.hard_negatives[i]
        hn_exp = np.exp(s_st[i, hn]) if hn.size else np.zeros(0)
        hn_term = hn_exp.sum() / hn.size if hn.size else 0.0
        neg_exp = np.exp(s_ss[i, neg])
        neg_sum_base = (ctx.f_neg[i, neg] * (neg_exp + hn_term)).sum()
        e_pos = np.exp(s_ss[i, pos])
        d = e_pos + neg_sum_base
        w = ctx.f_pos[i, pos] / (a * pos.size)
        # d/dS_ik: w * (-1 + e^{S_ik} / D_ik)
        g_ss[i, pos] += w * (-1.0 + e_pos / d)
        r = (w / d).sum()
        if neg.size:
            g_ss[i, neg] += ctx.f_neg[i, neg] * neg_exp * r
            if hn.size:
                g_st[i, hn] += ctx.f_neg[i, neg].sum() * (hn_exp / hn.size) * r
    grad = (g_ss @ zs + g_ss.T @ zs + g_st @ zt) / tau
    return grad


def contrastive_forward(student: np.ndarray, student_class: np.ndarray,
                        teacher: np.ndarray, teacher_class: np.ndarray,
                        tau: float, gamma: float, k_top: int,
                        h_patch: np.ndarray | float = 0.0) -> dict:
    """Build the pair context and evaluate the loss.

    Returns ``{"loss", "degenerate", "context"}``; a degenerate batch (no
    anchor with both positives and negatives) yields loss 0 with the flag
    set rather than an error.
    """
    ctx = build_context(student, student_class, teacher, teacher_class,
                        gamma, k_top, h_patch)
    loss = contrastive_value(student, teacher, ctx, tau)
    return {"loss": loss, "degenerate": ctx.degenerate, "context": ctx}
