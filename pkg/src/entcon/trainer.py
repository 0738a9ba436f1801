"""Semi-supervised mean-teacher training loop, ablation runner and
checkpoint evaluation.

Per iteration the student sees an augmented labeled half-batch (Dice +
cross-entropy against ground truth) and an unlabeled half-batch under two
views sharing one geometric transform but carrying independent intensity
noise: the student's view feeds the uncertainty-weighted consistency loss
against the teacher's view, and the two projection grids feed the focal
patch-contrastive loss with teacher hard negatives and teacher-argmax
pseudo-labels. Only the student is optimized; the teacher tracks it by EMA.

    total = dice + ce + eta * (consistency + contrastive)

Everything is driven by a serializable RunConfig and separate spawned RNG
streams per pipeline, so a fixed seed reproduces the epoch log and the
checkpoints bitwise, and an eta = 0 run is bitwise identical to one with
the unlabeled volumes removed.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import consistency, contrastive, network, supervised
from .errors import ConfigError, TrainingDivergedError
from .metrics import VolumeMetrics, aggregate, evaluate_pair, write_report
from .synth import augment, draw_transform, apply_transform, intensity_noise
from .uncertainty import entropy, gambling_softmax
from .volumes import read_volume

EPOCH_LOG_COLUMNS = ("epoch", "beta", "loss_sup", "loss_cons", "loss_contrast",
                     "loss_total", "val_dice", "val_iou", "val_hd95", "val_asd")


@dataclass
class RunConfig:
    """Complete description of one training run; JSON round-trips exactly."""

    manifest: str = ""
    out_dir: str = ""
    seed: int = 0
    epochs: int = 10
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    eta: float = 1.0
    use_consistency: bool = True      # entropy-weighted loss vs plain MSE
    use_contrastive: bool = True
    use_entropy_regularizer: bool = True
    entropy_mode: str = "dual"        # dual | student_only | teacher_only
    beta_mode: str = "adaptive"       # none | fixed | adaptive
    beta_max: float = 1.0
    beta_min: float = 0.1
    beta_decay: float = 0.1
    beta_fixed: float = 1.0
    tau: float = 0.6
    gamma: float = 0.5
    top_k: int = 4
    patch_k: int = 4
    gambling_temp: float = 1.0
    normalize_patch_entropy: bool = True
    features: int = 8
    embed_dim: int = 16
    classes: int = 2
    ema_alpha: float = 0.99
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    noise_sigma: float = 0.3
    crop: int | None = None
    labeled_ratio: float | None = None  # provenance; filled from the manifest

    def beta_schedule(self) -> consistency.BetaSchedule:
        return consistency.BetaSchedule(
            mode=self.beta_mode, beta_max=self.beta_max, beta_min=self.beta_min,
            decay=self.beta_decay, total_epochs=self.epochs,
            fixed_value=self.beta_fixed)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.entropy_mode not in consistency.ENTROPY_MODES:
            raise ConfigError(f"unknown entropy_mode {self.entropy_mode!r}")
        if self.tau <= 0 or self.gamma < 0 or self.top_k < 1 or self.patch_k < 1:
            raise ConfigError("need tau > 0, gamma >= 0, top_k >= 1, patch_k >= 1")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError("ema_alpha must be in [0, 1]")
        self.beta_schedule()  # raises on bad schedule parameters
        return self

    def to_json(self, path: str):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path: str, **overrides) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update(overrides)
        return RunConfig(**data)


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class Dataset:
    """In-memory dataset: float64 images (H, W, D) and int masks."""

    labeled: list[tuple[np.ndarray, np.ndarray]]
    unlabeled: list[np.ndarray]
    val: list[tuple[np.ndarray, np.ndarray]]
    val_meta: list[dict] = field(default_factory=list)
    labeled_ratio: float | None = None


def load_dataset(manifest_path: str) -> Dataset:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    by_id = {e["id"]: e for e in manifest["volumes"]}

    def load(entry):
        img = read_volume(os.path.join(base, entry["image"]))
        msk = read_volume(os.path.join(base, entry["mask"]))
        return (np.asarray(img.data[0, 0], dtype=np.float64),
                np.asarray(msk.data[0], dtype=np.int64))

    labeled, unlabeled, val, val_meta = [], [], [], []
    for vid in manifest["split"]["train"]:
        e = by_id[vid]
        x, y = load(e)
        if e["labeled"]:
            labeled.append((x, y))
        else:
            unlabeled.append(x)
    for vid in manifest["split"]["val"]:
        e = by_id[vid]
        val.append(load(e))
        val_meta.append({"id": vid, "category": e.get("category", ""),
                         "scatter": e.get("scatter", "")})
    return Dataset(labeled, unlabeled, val, val_meta,
                   manifest.get("labeled_ratio"))


class _Sampler:
    """Cycles through indices in seeded shuffled order, reshuffling on wrap."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


# ---------------------------------------------------------------------------
# Training


def _patch_entropy(p_student: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Per-patch mean of the (optionally ln C - normalized) gambling-softmax
    entropy of the student predictions; one value per patch."""
    ph = gambling_softmax(p_student[None], cfg.gambling_temp)[0]
    h = entropy(ph[None], axis=1)[0]
    if cfg.normalize_patch_entropy:
        h = h / np.log(cfg.classes)
    return contrastive.partition_average(h[None], cfg.patch_k, normalize=False)[:, 0]


def _unlabeled_losses(params, teacher, xs, xt, beta, cfg: RunConfig):
    """Consistency + contrastive losses on one unlabeled batch, plus
    parameter gradients (already scaled by eta)."""
    cache_s = network.forward(params, xs, want_proj=cfg.use_contrastive)
    cache_t = network.forward(teacher, xt, want_proj=cfg.use_contrastive)
    ps, pt = cache_s["p"], cache_t["p"]

    if cfg.use_consistency:
        cons = consistency.consistency_forward(
            ps, pt, beta, cfg.entropy_mode, cfg.use_entropy_regularizer)["loss"]
        g_cons = consistency.consistency_grad(
            ps, pt, beta, cfg.entropy_mode, cfg.use_entropy_regularizer)
    else:
        cons, g_cons = consistency.mse_consistency(ps, pt)

    contr = 0.0
    grad_z = None
    degenerate = 0
    if cfg.use_contrastive:
        B = ps.shape[0]
        grad_z = np.zeros_like(cache_s["z"])
        for b in range(B):
            zs, raw_s = contrastive.pool_and_normalize(cache_s["z"][b], cfg.patch_k)
            zt, _ = contrastive.pool_and_normalize(cache_t["z"][b], cfg.patch_k)
            pseudo = np.argmax(pt[b], axis=0)
            cls = contrastive.patch_labels(pseudo, cfg.patch_k, classes=cfg.classes)
            h_patch = _patch_entropy(ps[b], cfg)
            res = contrastive.contrastive_forward(
                zs, cls, zt, cls, cfg.tau, cfg.gamma, cfg.top_k, h_patch)
            contr += res["loss"] / B
            degenerate += int(res["degenerate"])
            gz = contrastive.contrastive_grad(zs, zt, res["context"], cfg.tau)
            grad_z[b] = contrastive.pool_adjoint(
                gz * (cfg.eta / B), raw_s, cache_s["z"][b].shape, cfg.patch_k)

    grads = network.backward(params, cache_s, grad_p=cfg.eta * g_cons,
                             grad_z=grad_z)
    return cons, contr, grads, degenerate


def _validate(params, data: Dataset) -> list[VolumeMetrics]:
    rows = []
    for (x, y), meta in zip(data.val, data.val_meta or
                            [{"id": str(i), "category": "", "scatter": ""}
                             for i in range(len(data.val))]):
        cache = network.forward(params, x[None, None], want_proj=False)
        pred = np.argmax(cache["p"][0], axis=0)
        rows.append(evaluate_pair(pred, y, meta["id"], meta["category"],
                                  meta["scatter"]))
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: RunConfig, data: Dataset | None = None) -> dict:
    """Run one training; writes epoch_log.csv, timing.csv, resolved
    config and best/final checkpoints under cfg.out_dir. Returns a summary
    dict with the final/best validation metrics and artifact paths."""
    cfg.validate()
    if data is None:
        data = load_dataset(cfg.manifest)
    if not data.labeled:
        raise ConfigError("dataset has no labeled volumes")
    if cfg.labeled_ratio is None:
        cfg = replace(cfg, labeled_ratio=data.labeled_ratio)
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.to_json(os.path.join(cfg.out_dir, "resolved_config.json"))

    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_init = np.random.default_rng(streams[0])
    rng_lab = np.random.default_rng(streams[1])
    rng_lab_aug = np.random.default_rng(streams[2])
    rng_unl = np.random.default_rng(streams[3])
    rng_unl_aug = np.random.default_rng(streams[4])

    params = network.init_params(cfg.features, cfg.embed_dim, cfg.classes, rng_init)
    teacher = {k: v.copy() for k, v in params.items()}
    opt = network.init_opt_state(params)
    sched = cfg.beta_schedule()

    use_unlabeled = cfg.eta > 0 and len(data.unlabeled) > 0
    if use_unlabeled:
        iters = max(1, int(np.ceil(len(data.unlabeled) / cfg.batch_unlabeled)))
        unl_sampler = _Sampler(len(data.unlabeled), rng_unl)
    else:
        iters = max(1, int(np.ceil(len(data.labeled) / cfg.batch_labeled)))
    lab_sampler = _Sampler(len(data.labeled), rng_lab)

    log_rows, timing_rows = [], []
    best = {"dice": -1.0, "epoch": -1}
    ckpt_best = os.path.join(cfg.out_dir, "checkpoint_best")
    ckpt_final = os.path.join(cfg.out_dir, "checkpoint_final")

    for epoch in range(cfg.epochs):
        t0 = time.time()
        beta = sched.beta_at(epoch)
        sums = {"sup": 0.0, "cons": 0.0, "contr": 0.0, "total": 0.0}
        for _ in range(iters):
            idx = lab_sampler.take(cfg.batch_labeled)
            xs, ys = [], []
            for i in idx:
                x, y = data.labeled[i]
                xa, ya = augment(x, y, int(rng_lab_aug.integers(2 ** 63)), cfg.crop)
                xa = intensity_noise(xa, cfg.noise_sigma,
                                     int(rng_lab_aug.integers(2 ** 63)))
                xs.append(xa)
                ys.append(ya)
            x_lab = np.stack(xs)[:, None]
            y_lab = np.stack(ys)
            cache = network.forward(params, x_lab, want_proj=False)
            d_loss, d_grad = supervised.dice_loss(cache["p"], y_lab)
            c_loss, c_grad = supervised.ce_loss(cache["p"], y_lab)
            grads = network.backward(params, cache, grad_p=d_grad + c_grad)
            sup = d_loss + c_loss

            cons = contr = 0.0
            if use_unlabeled:
                uidx = unl_sampler.take(cfg.batch_unlabeled)
                views_s, views_t = [], []
                for i in uidx:
                    x = data.unlabeled[i]
                    t = draw_transform(int(rng_unl_aug.integers(2 ** 63)),
                                       x.shape, cfg.crop)
                    xg = apply_transform(x, t)
                    views_s.append(intensity_noise(
                        xg, cfg.noise_sigma, int(rng_unl_aug.integers(2 ** 63))))
                    views_t.append(intensity_noise(
                        xg, cfg.noise_sigma, int(rng_unl_aug.integers(2 ** 63))))
                xs_u = np.stack(views_s)[:, None]
                xt_u = np.stack(views_t)[:, None]
                cons, contr, g_unl, _ = _unlabeled_losses(
                    params, teacher, xs_u, xt_u, beta, cfg)
                grads = {k: grads[k] + g_unl[k] for k in network.PARAM_KEYS}

            total = sup + cfg.eta * (cons + contr)
            try:
                if not np.isfinite(total):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                params, opt = network.sgd_step(params, grads, opt, cfg.lr,
                                               cfg.momentum, cfg.weight_decay)
            except TrainingDivergedError as err:
                last_good = os.path.join(cfg.out_dir, "checkpoint_last_good")
                network.save_checkpoint(last_good, params, epoch, cfg.seed)
                _write_logs(cfg.out_dir, log_rows, timing_rows)
                err.last_good_checkpoint = last_good
                raise
            teacher = network.ema_update(teacher, params, cfg.ema_alpha)
            sums["sup"] += sup
            sums["cons"] += cons
            sums["contr"] += contr
            sums["total"] += total

        val_rows = _validate(params, data)
        agg = aggregate(val_rows) or {"dice": 0.0, "iou": 0.0, "hd95": 0.0, "asd": 0.0}
        row = {
            "epoch": epoch,
            "beta": beta,
            "loss_sup": sums["sup"] / iters,
            "loss_cons": sums["cons"] / iters,
            "loss_contrast": sums["contr"] / iters,
            "loss_total": sums["total"] / iters,
            "val_dice": agg["dice"],
            "val_iou": agg["iou"],
            "val_hd95": agg["hd95"],
            "val_asd": agg["asd"],
        }
        log_rows.append(row)
        timing_rows.append({"epoch": epoch, "wall_time_s": time.time() - t0})
        if agg["dice"] > best["dice"]:
            best = {"dice": agg["dice"], "epoch": epoch}
            network.save_checkpoint(ckpt_best, params, epoch, cfg.seed)

    network.save_checkpoint(ckpt_final, params, cfg.epochs - 1, cfg.seed)
    network.save_checkpoint(ckpt_final + "_teacher", teacher, cfg.epochs - 1,
                            cfg.seed)
    _write_logs(cfg.out_dir, log_rows, timing_rows)
    final = log_rows[-1]
    return {
        "out_dir": cfg.out_dir,
        "epoch_log": os.path.join(cfg.out_dir, "epoch_log.csv"),
        "checkpoint_best": ckpt_best,
        "checkpoint_final": ckpt_final,
        "best_val_dice": best["dice"],
        "best_epoch": best["epoch"],
        "final": final,
    }


def _write_logs(out_dir, log_rows, timing_rows):
    with open(os.path.join(out_dir, "epoch_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_LOG_COLUMNS)
        for r in log_rows:
            w.writerow([r["epoch"]] + [_fmt(r[c]) for c in EPOCH_LOG_COLUMNS[1:]])
    with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_time_s"])
        for r in timing_rows:
            w.writerow([r["epoch"], f"{r['wall_time_s']:.3f}"])


# ---------------------------------------------------------------------------
# Ablation grid


AXIS_FIELDS = {
    "entropy_mode": str,
    "beta_mode": str,
    "beta_fixed": float,
    "gamma": float,
    "top_k": int,
    "use_consistency": bool,
    "use_contrastive": bool,
    "use_entropy_regularizer": bool,
    "eta": float,
}


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    return {"true": True, "false": False}[str(v).lower()]


def ablate(base: RunConfig, axes: dict[str, list], seeds: list[int],
           out_dir: str) -> dict:
    """Cartesian product over declared axes x seeds. Writes per-run rows to
    ablation_runs.csv and per-cell seed means to ablation_cells.csv."""
    for name in axes:
        if name not in AXIS_FIELDS:
            raise ConfigError(f"unsupported ablation axis {name!r}; "
                              f"choose from {sorted(AXIS_FIELDS)}")
    os.makedirs(out_dir, exist_ok=True)
    names = sorted(axes)
    cells = [()]
    for name in names:
        cast = AXIS_FIELDS[name]
        vals = [(_parse_bool(v) if cast is bool else cast(v)) for v in axes[name]]
        cells = [c + ((name, v),) for c in cells for v in vals]

    data = load_dataset(base.manifest)
    run_rows, cell_rows = [], []
    for cell in cells:
        overrides = dict(cell)
        finals = []
        for seed in seeds:
            cell_id = "_".join(f"{n}={v}" for n, v in cell) or "base"
            run_dir = os.path.join(out_dir, f"{cell_id}_seed{seed}")
            cfg = replace(base, seed=seed, out_dir=run_dir, **overrides)
            summary = train(cfg, data)
            finals.append(summary["final"])
            run_rows.append({**overrides, "seed": seed,
                             **{k: summary["final"][k] for k in
                                ("val_dice", "val_iou", "val_hd95", "val_asd")}})
        cell_rows.append({**overrides, "n_seeds": len(seeds),
                          **{k: float(np.mean([f[k] for f in finals]))
                             for k in ("val_dice", "val_iou", "val_hd95", "val_asd")}})

    def dump(path, rows, lead):
        cols = lead + ["val_dice", "val_iou", "val_hd95", "val_asd"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([r.get(c, "") for c in cols])
        return path

    runs_csv = dump(os.path.join(out_dir, "ablation_runs.csv"), run_rows,
                    names + ["seed"])
    cells_csv = dump(os.path.join(out_dir, "ablation_cells.csv"), cell_rows,
                     names + ["n_seeds"])
    return {"runs_csv": runs_csv, "cells_csv": cells_csv, "cells": cell_rows}


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(checkpoint: str | None, manifest_path: str,
             group_by: list[str] | None = None, out_dir: str | None = None,
             oracle: bool = False) -> dict:
    """Per-volume metrics on the manifest's validation split, grouped means
    over the requested keys. ``oracle`` substitutes ground truth for the
    prediction (test hook for the metric pipeline)."""
    data = load_dataset(manifest_path)
    if not oracle:
        params, _ = network.load_checkpoint(checkpoint)
    rows = []
    for (x, y), meta in zip(data.val, data.val_meta):
        if oracle:
            pred = y
        else:
            pred = np.argmax(
                network.forward(params, x[None, None], want_proj=False)["p"][0],
                axis=0)
        rows.append(evaluate_pair(pred, y, meta["id"], meta["category"],
                                  meta["scatter"]))
    result = {"per_volume": rows, "overall": aggregate(rows), "groups": {}}
    warnings = []
    for key in group_by or []:
        if key not in ("category", "scatter"):
            raise ConfigError(f"can only group by category/scatter, not {key!r}")
        values = sorted({getattr(r, key) for r in rows})
        for v in values:
            sub = [r for r in rows if getattr(r, key) == v]
            if not sub:
                warnings.append(f"empty group {key}={v}")
                continue
            result["groups"][f"{key}={v}"] = aggregate(sub)
    result["warnings"] = warnings
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_report(rows, os.path.join(out_dir, "per_volume.csv"))
        with open(os.path.join(out_dir, "groups.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "n", "dice", "iou", "hd95", "asd"])
            w.writerow(["overall", result["overall"]["n"]]
                       + [repr(result["overall"][k]) for k in ("dice", "iou", "hd95", "asd")])
            for g, agg in result["groups"].items():
                w.writerow([g, agg["n"]]
                           + [repr(agg[k]) for k in ("dice", "iou", "hd95", "asd")])
    return result
