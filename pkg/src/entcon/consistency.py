"""Uncertainty-weighted consistency loss between student and teacher
probabilities, with its analytic gradient and the adaptive beta schedule.

The loss over N voxels (channel axis 1) is

    L = (1/N) sum_i  ||ps_i - pt_i||^2 / (exp(b*Hs_i) + exp(b*Ht_i))
      + (b/N) sum_i (Hs_i + Ht_i)

where Hs/Ht are the per-voxel entropies of the student/teacher predictions.
High joint uncertainty inflates the denominator and damps the voxel's
squared-error penalty; the second term pushes entropies down as b stays
positive. ``entropy_mode`` selects which entropies participate: "dual"
keeps both, "student_only" zeroes Ht, "teacher_only" zeroes Hs (in both the
denominator and the regularizer).

With beta = 0 the loss degenerates to mean squared error / 2 with no
regularizer, which is the scale-free baseline configuration.

The gradient is taken w.r.t. the student probabilities only; the teacher is
an EMA copy and receives no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .uncertainty import EPS, entropy, entropy_grad

ENTROPY_MODES = ("dual", "student_only", "teacher_only")


@dataclass(frozen=True)
class BetaSchedule:
    """Uncertainty-scale schedule b(t) over epochs t in [0, T].

    mode "none"     -> b = 0 (disables entropy weighting and regularizer)
    mode "fixed"    -> b = fixed_value
    mode "adaptive" -> b(t) = max(beta_min, beta_max * exp(-decay * t / T))
    """

    mode: str = "adaptive"
    beta_max: float = 1.0
    beta_min: float = 0.1
    decay: float = 0.1
    total_epochs: int = 1
    fixed_value: float = 1.0

    def __post_init__(self):
        if self.mode not in ("none", "fixed", "adaptive"):
            raise ParameterError(f"unknown beta mode {self.mode!r}")
        if self.mode == "adaptive":
            if not (0.0 < self.beta_min <= self.beta_max):
                raise ParameterError("need 0 < beta_min <= beta_max")
            if self.decay < 0:
                raise ParameterError("decay must be >= 0")
        if self.mode == "fixed" and self.fixed_value < 0:
            raise ParameterError("fixed beta must be >= 0")
        if self.total_epochs < 1:
            raise ParameterError("total_epochs must be >= 1")

    def beta_at(self, t: int | float) -> float:
        if t < 0 or t > self.total_epochs:
            raise ParameterError(
                f"epoch {t} outside [0, {self.total_epochs}]"
            )
        if self.mode == "none":
            return 0.0
        if self.mode == "fixed":
            return float(self.fixed_value)
        return float(
            max(self.beta_min,
                self.beta_max * np.exp(-self.decay * t / self.total_epochs))
        )


def _check_pair(ps: np.ndarray, pt: np.ndarray, beta: float):
    ps = np.asarray(ps, dtype=np.float64)
    pt = np.asarray(pt, dtype=np.float64)
    if ps.shape != pt.shape:
        raise ContractError(f"shape mismatch {ps.shape} vs {pt.shape}")
    if ps.ndim < 2:
        raise ContractError("expected a channel axis at position 1")
    if beta < 0:
        raise ParameterError("beta must be >= 0")
    return ps, pt


def _mode_entropies(ps, pt, entropy_mode):
    if entropy_mode not in ENTROPY_MODES:
        raise ParameterError(f"unknown entropy_mode {entropy_mode!r}")
    hs = entropy(ps) if entropy_mode in ("dual", "student_only") else 0.0
    ht = entropy(pt) if entropy_mode in ("dual", "teacher_only") else 0.0
    return hs, ht


def consistency_forward(ps: np.ndarray, pt: np.ndarray, beta: float,
                        entropy_mode: str = "dual",
                        regularizer: bool = True) -> dict:
    """Evaluate the loss. Returns a dict with ``loss`` plus per-voxel
    diagnostic maps ``consistency`` (weighted squared error) and
    ``entropy_reg`` (included entropies, unscaled by beta).

    ``regularizer=False`` drops the entropy term and keeps only the
    weighted alignment, the "entropy weighting without a scale" ablation
    configuration.
    """
    ps, pt = _check_pair(ps, pt, beta)
    hs, ht = _mode_entropies(ps, pt, entropy_mode)
    sq = ((ps - pt) ** 2).sum(axis=1)
    denom = np.exp(beta * np.asarray(hs)) + np.exp(beta * np.asarray(ht))
    per_voxel = sq / denom
    ent_sum = np.asarray(hs + ht, dtype=np.float64)
    if ent_sum.ndim == 0:
        ent_sum = np.broadcast_to(ent_sum, sq.shape)
    n = sq.size
    loss = float(per_voxel.sum() / n)
    if regularizer:
        loss += float(beta * ent_sum.sum() / n)
    return {
        "loss": loss,
        "consistency": per_voxel,
        "entropy_reg": ent_sum,
        "denominator": denom if np.ndim(denom) else np.full(sq.shape, float(denom)),
    }


def consistency_grad(ps: np.ndarray, pt: np.ndarray, beta: float,
                     entropy_mode: str = "dual",
                     regularizer: bool = True) -> np.ndarray:
    """Analytic gradient of :func:`consistency_forward` w.r.t. ``ps``.

    Three terms per voxel i, channel c (student entropy active only when
    the mode includes it; the third only with the regularizer on):

        2 (ps - pt)_ic / denom_i
      - beta * ||ps_i - pt_i||^2 * exp(beta*Hs_i) * dHs/dps_ic / denom_i^2
      + beta * dHs/dps_ic

    all scaled by 1/N, with dHs/dp_c = -(ln p_c + 1) under the clamp.
    """
    ps, pt = _check_pair(ps, pt, beta)
    include_student = entropy_mode in ("dual", "student_only")
    hs, ht = _mode_entropies(ps, pt, entropy_mode)
    sq = ((ps - pt) ** 2).sum(axis=1)
    e_hs = np.exp(beta * np.asarray(hs))
    denom = e_hs + np.exp(beta * np.asarray(ht))
    n = sq.size

    grad = 2.0 * (ps - pt) / np.expand_dims(denom, 1)
    if include_student and beta != 0.0:
        dh = entropy_grad(ps)
        grad -= np.expand_dims(beta * sq * e_hs / denom ** 2, 1) * dh
        if regularizer:
            grad += beta * dh
    return grad / n


def mse_consistency(ps: np.ndarray, pt: np.ndarray) -> tuple[float, np.ndarray]:
    """Plain mean-teacher consistency: mean over voxels of the channel-summed
    squared error, and its gradient w.r.t. ``ps``. This is the vanilla
    baseline the weighted loss is compared against."""
    ps, pt = _check_pair(ps, pt, 0.0)
    sq = ((ps - pt) ** 2).sum(axis=1)
    n = sq.size
    return float(sq.sum() / n), 2.0 * (ps - pt) / n


def denominator_bounds(classes: int, beta: float) -> tuple[float, float]:
    """Attainable range of exp(b*Hs) + exp(b*Ht): [2, 2 * classes**beta]."""
    return 2.0, 2.0 * classes ** beta
