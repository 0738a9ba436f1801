"""scikit-learn style wrapper around the semi-supervised trainer.

``SemiSupervisedSegmenter`` fits on arrays of volumes with partial masks
(unlabeled volumes carry all -1 labels, the usual semi-supervised sklearn
convention) and predicts voxel masks, so the method composes with clone,
grid search and pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import network
from .errors import ContractError
from .trainer import Dataset, RunConfig, train


def _check_volumes(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ContractError(f"X must be (n_volumes, H, W, D), got {X.shape}")
    if not np.isfinite(X).all():
        raise ContractError("X contains NaN or Inf")
    if min(X.shape[1:]) < 3:
        raise ContractError("spatial dims must be >= 3")
    return X


class SemiSupervisedSegmenter(BaseEstimator):
    """Mean-teacher segmentation with entropy-weighted consistency and
    focal patch-contrastive regularization.

    Parameters mirror the trainer's RunConfig; see that class for the
    semantics of each. ``val_fraction`` carves a validation split off the
    labeled volumes for checkpoint selection.
    """

    def __init__(self, epochs=10, eta=1.0, use_consistency=True,
                 use_contrastive=True, entropy_mode="dual",
                 beta_mode="adaptive", beta_max=1.0, beta_min=0.1,
                 beta_decay=0.1, beta_fixed=1.0, tau=0.6, gamma=0.5,
                 top_k=4, patch_k=4, features=8, embed_dim=16,
                 batch_labeled=2, batch_unlabeled=2, lr=0.01, momentum=0.9,
                 weight_decay=1e-4, ema_alpha=0.99, noise_sigma=0.3,
                 val_fraction=0.25, seed=0, out_dir=None):
        self.epochs = epochs
        self.eta = eta
        self.use_consistency = use_consistency
        self.use_contrastive = use_contrastive
        self.entropy_mode = entropy_mode
        self.beta_mode = beta_mode
        self.beta_max = beta_max
        self.beta_min = beta_min
        self.beta_decay = beta_decay
        self.beta_fixed = beta_fixed
        self.tau = tau
        self.gamma = gamma
        self.top_k = top_k
        self.patch_k = patch_k
        self.features = features
        self.embed_dim = embed_dim
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.ema_alpha = ema_alpha
        self.noise_sigma = noise_sigma
        self.val_fraction = val_fraction
        self.seed = seed
        self.out_dir = out_dir

    def _config(self, out_dir) -> RunConfig:
        return RunConfig(
            out_dir=out_dir, seed=self.seed, epochs=self.epochs,
            batch_labeled=self.batch_labeled, batch_unlabeled=self.batch_unlabeled,
            eta=self.eta, use_consistency=self.use_consistency,
            use_contrastive=self.use_contrastive, entropy_mode=self.entropy_mode,
            beta_mode=self.beta_mode, beta_max=self.beta_max,
            beta_min=self.beta_min, beta_decay=self.beta_decay,
            beta_fixed=self.beta_fixed, tau=self.tau, gamma=self.gamma,
            top_k=self.top_k, patch_k=self.patch_k, features=self.features,
            embed_dim=self.embed_dim, ema_alpha=self.ema_alpha, lr=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay,
            noise_sigma=self.noise_sigma)

    def fit(self, X, y):
        """X: (n, H, W, D) float volumes; y: (n, H, W, D) int masks with
        all -1 marking unlabeled volumes."""
        X = _check_volumes(X)
        y = np.asarray(y)
        if y.shape != X.shape:
            raise ContractError(f"y shape {y.shape} must match X {X.shape}")
        unlabeled_mask = np.array([(vol == -1).all() for vol in y])
        labeled_idx = np.nonzero(~unlabeled_mask)[0]
        if labeled_idx.size == 0:
            raise ContractError("need at least one labeled volume")
        if any(((vol != -1) & ((vol < 0) | (vol > 1))).any() for vol in y):
            raise ContractError("labeled masks must be binary (or all -1)")

        n_val = max(1, int(round(self.val_fraction * labeled_idx.size))) \
            if labeled_idx.size > 1 else 0
        val_idx = labeled_idx[:n_val]
        fit_idx = labeled_idx[n_val:]
        if fit_idx.size == 0:  # too few labeled volumes to hold any out
            fit_idx, val_idx = labeled_idx, labeled_idx
        data = Dataset(
            labeled=[(X[i], y[i].astype(np.int64)) for i in fit_idx],
            unlabeled=[X[i] for i in np.nonzero(unlabeled_mask)[0]],
            val=[(X[i], y[i].astype(np.int64)) for i in val_idx],
            val_meta=[{"id": str(i), "category": "", "scatter": ""}
                      for i in val_idx],
        )

        import tempfile
        if self.out_dir is None:
            with tempfile.TemporaryDirectory(prefix="entcon_fit_") as tmp:
                summary = train(self._config(tmp), data)
                params, _ = network.load_checkpoint(summary["checkpoint_best"])
        else:
            summary = train(self._config(self.out_dir), data)
            params, _ = network.load_checkpoint(summary["checkpoint_best"])
        self.params_ = params
        self.best_val_dice_ = summary["best_val_dice"]
        self.history_ = summary["final"]
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise ContractError("fit the estimator first")
        X = _check_volumes(X)
        return np.stack(
            [network.forward(self.params_, x[None, None], want_proj=False)["p"][0]
             for x in X])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y) -> float:
        """Mean Dice over volumes."""
        from .metrics import dice_iou
        preds = self.predict(X)
        y = np.asarray(y)
        return float(np.mean([dice_iou(p, t)[0] for p, t in zip(preds, y)]))
