"""Deterministic synthetic 3D lesion volumes with exact ground-truth masks.

Background is smoothed, normalized Gaussian noise; lesions are ellipsoids of
elevated intensity with a soft edge straddling the mask boundary. Size and
scatter categories mirror the class-imbalance regimes of small/scattered
stroke lesions: small scattered volumes stay under 2% foreground, large
volumes exceed 5%, both enforced at generation time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import GenerationError, ParameterError
from .volumes import LabelField, VolumeBatch, write_volume

GENERATOR_VERSION = "1"

# (count range, radius range) per size category, tuned for 32^3 volumes so
# the foreground-fraction invariants hold by construction.
CATEGORY_PRESETS = {
    "small": ((3, 5), (1.5, 2.5)),
    "medium": ((2, 3), (3.5, 5.0)),
    "large": ((1, 1), (7.5, 9.0)),
}
SCATTERS = ("scattered", "non-scattered")

_FRACTION_LIMITS = {"small": (0.0, 0.02), "medium": (0.005, 0.08), "large": (0.05, 0.30)}
_MAX_RETRIES = 200


@dataclass(frozen=True)
class LesionSpec:
    count: int
    radius_range: tuple[float, float]
    contrast: float = 2.5
    category: str = "medium"
    scatter: str = "scattered"
    axis_jitter: float = 0.2  # relative semi-axis variation; 0 = spheres

    def __post_init__(self):
        if self.count < 0:
            raise ParameterError("lesion count must be >= 0")
        if self.radius_range[0] < 1 or self.radius_range[1] < self.radius_range[0]:
            raise ParameterError("radii must be >= 1 and ordered")
        if self.scatter not in SCATTERS:
            raise ParameterError(f"unknown scatter {self.scatter!r}")


def spec_for(category: str, scatter: str, contrast: float = 2.5,
             rng: np.random.Generator | None = None,
             size: int = 32) -> LesionSpec:
    """Draw a concrete LesionSpec from a category preset.

    Radius presets are stated for 32^3 volumes and scale linearly with the
    smallest volume edge (floored at 1 voxel) so the per-category
    foreground-fraction windows stay meaningful at other sizes.
    """
    if category not in CATEGORY_PRESETS:
        raise ParameterError(f"unknown category {category!r}")
    (clo, chi), radii = CATEGORY_PRESETS[category]
    scale = size / 32.0
    radii = (max(1.0, radii[0] * scale), max(1.0, radii[1] * scale))
    count = int(rng.integers(clo, chi + 1)) if rng is not None else clo
    return LesionSpec(count=count, radius_range=radii, contrast=contrast,
                      category=category, scatter=scatter)


def _place_centers(rng, size, radii, scatter):
    """One placement attempt; None when a lesion cannot be placed."""
    centers = []
    if scatter == "non-scattered":
        m = radii.max() + 1.0
        if m >= min(size) - m:
            return None
        hub = rng.uniform(m, min(size) - m, 3)
    for i in range(radii.shape[0]):
        margin = radii[i].max() + 1.0
        if np.any(margin >= np.array(size) - margin):
            return None
        for _ in range(40):
            if scatter == "scattered":
                c = rng.uniform(margin, np.array(size) - margin)
                ok = all(np.linalg.norm(c - p) >= (radii[i].max() + rj + 1.0)
                         for p, rj in zip(centers, radii.max(axis=1)))
            else:
                c = np.clip(hub + rng.normal(0.0, 2.0, 3),
                            margin, np.array(size) - margin)
                ok = True
            if ok:
                centers.append(c)
                break
        else:
            return None
    return centers


def gen_volume(seed: int, size: tuple[int, int, int],
               spec: LesionSpec) -> tuple[VolumeBatch, LabelField]:
    """Generate one (1,1,H,W,D) volume and its (1,H,W,D) mask, bitwise
    deterministic per (seed, size, spec)."""
    size = tuple(int(s) for s in size)
    if min(size) < 16:
        raise ParameterError(f"volume size must be >= 16 per axis, got {size}")
    if 2.0 * (spec.radius_range[1] + 2.0) >= min(size):
        raise GenerationError("lesions do not fit inside the volume")
    rng = np.random.default_rng(seed)

    noise = rng.standard_normal(size)
    bg = gaussian_filter(noise, sigma=2.5)
    bg = (bg - bg.mean()) / (bg.std() + 1e-12)

    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij")
    lo_frac, hi_frac = _FRACTION_LIMITS.get(spec.category, (0.0, 1.0))
    for _ in range(_MAX_RETRIES):
        radii = rng.uniform(*spec.radius_range, (spec.count, 1)) * (
            1.0 + rng.uniform(-spec.axis_jitter, spec.axis_jitter, (spec.count, 3)))
        if spec.count == 0:
            mask = np.zeros(size, dtype=np.int32)
            bump = 0.0
            break
        centers = _place_centers(rng, size, radii, spec.scatter)
        if centers is None:
            continue
        mask = np.zeros(size, dtype=np.int32)
        bump = np.zeros(size)
        for c, ax in zip(centers, radii):
            r2 = sum(((g - ci) / a) ** 2 for g, ci, a in zip(grids, c, ax))
            r = np.sqrt(r2)
            mask[r <= 1.0] = 1
            # soft edge: full contrast inside r=0.8, linear falloff to 1.2
            bump += np.clip((1.2 - r) / 0.4, 0.0, 1.0)
        frac = mask.mean()
        if lo_frac <= frac <= hi_frac:
            break
    else:
        raise GenerationError(
            "could not satisfy lesion placement and foreground-fraction "
            f"constraints (fraction window [{lo_frac}, {hi_frac}])")

    vol = (bg + spec.contrast * bump).astype(np.float32)
    return VolumeBatch(vol[None, None]), LabelField(mask[None])


# ---------------------------------------------------------------------------
# Augmentation: seeded flips, 90-degree rotations and cropping applied
# identically to image and mask, plus image-only intensity noise.


@dataclass(frozen=True)
class Transform:
    flips: tuple[bool, bool, bool] = (False, False, False)
    rot_axes: tuple[int, int] = (0, 1)
    rot_k: int = 0
    crop_start: tuple[int, int, int] = (0, 0, 0)
    crop_size: tuple[int, int, int] | None = None

    @staticmethod
    def identity():
        return Transform()


def draw_transform(seed: int, shape: tuple[int, int, int],
                   crop: int | None = None) -> Transform:
    rng = np.random.default_rng(seed)
    flips = tuple(bool(b) for b in rng.integers(0, 2, 3))
    axes = [(0, 1), (0, 2), (1, 2)][int(rng.integers(0, 3))]
    k = int(rng.integers(0, 4))
    if crop is None:
        return Transform(flips, axes, k)
    if any(crop > s for s in shape):
        raise ParameterError(f"crop {crop} exceeds volume shape {shape}")
    # rotation permutes axes, so crop after rotation on the rotated shape;
    # with cubic volumes the shape is unchanged and offsets are direct
    start = tuple(int(rng.integers(0, s - crop + 1)) for s in shape)
    return Transform(flips, axes, k, start, (crop, crop, crop))


def apply_transform(vol: np.ndarray, t: Transform) -> np.ndarray:
    """Apply to a (H, W, D) array; same call works for image and mask."""
    out = vol
    for ax, f in enumerate(t.flips):
        if f:
            out = np.flip(out, axis=ax)
    if t.rot_k % 4:
        out = np.rot90(out, k=t.rot_k, axes=t.rot_axes)
    if t.crop_size is not None:
        sx, sy, sz = t.crop_start
        cx, cy, cz = t.crop_size
        out = out[sx:sx + cx, sy:sy + cy, sz:sz + cz]
    return np.ascontiguousarray(out)


def augment(x: np.ndarray, y: np.ndarray, seed: int,
            crop: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Same seeded geometric transform on image and mask (both (H, W, D))."""
    t = draw_transform(seed, x.shape, crop)
    return apply_transform(x, t), apply_transform(y, t)


def intensity_noise(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive Gaussian noise; the per-view perturbation of the two
    mean-teacher streams."""
    if sigma == 0.0:
        return x
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, x.shape)


# ---------------------------------------------------------------------------
# Dataset builder


@dataclass
class GenConfig:
    out_dir: str
    n_train: int = 40
    n_val: int = 8
    size: tuple[int, int, int] = (32, 32, 32)
    labeled_ratio: float = 0.1
    categories: tuple[str, ...] = ("small", "medium", "large")
    scatters: tuple[str, ...] = SCATTERS
    contrast: float = 2.5
    seed: int = 0


def build_dataset(cfg: GenConfig) -> dict:
    """Generate volumes over the category/scatter grid, write them plus a
    manifest.json, and return the manifest dict.

    The labeled subset is a seeded shuffle of the training volumes of size
    max(1, round(labeled_ratio * n_train)) (0 when the ratio is 0).
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    ss = np.random.SeedSequence(cfg.seed)
    seeds = ss.generate_state(cfg.n_train + cfg.n_val + 1)
    pick_rng = np.random.default_rng(seeds[-1])

    grid = [(c, s) for c in cfg.categories for s in cfg.scatters]
    entries = []
    for i in range(cfg.n_train + cfg.n_val):
        cat, sca = grid[i % len(grid)]
        vseed = int(seeds[i])
        spec = spec_for(cat, sca, cfg.contrast,
                        np.random.default_rng(vseed ^ 0x5EED), min(cfg.size))
        vol, mask = gen_volume(vseed, cfg.size, spec)
        name = f"vol_{i:03d}"
        write_volume(vol, os.path.join(cfg.out_dir, name + "_img"))
        write_volume(mask, os.path.join(cfg.out_dir, name + "_msk"))
        entries.append({
            "id": name,
            "image": name + "_img.bin",
            "mask": name + "_msk.bin",
            "labeled": False,
            "seed": vseed,
            "category": cat,
            "scatter": sca,
        })

    train_ids = [e["id"] for e in entries[: cfg.n_train]]
    val_ids = [e["id"] for e in entries[cfg.n_train:]]
    if cfg.labeled_ratio > 0:
        n_lab = max(1, int(round(cfg.labeled_ratio * cfg.n_train)))
    else:
        n_lab = 0
    order = pick_rng.permutation(cfg.n_train)
    labeled = {train_ids[j] for j in order[:n_lab]}
    for e in entries:
        e["labeled"] = e["id"] in labeled

    manifest = {
        "volumes": entries,
        "split": {"train": train_ids, "val": val_ids},
        "labeled_ratio": cfg.labeled_ratio,
        "size": list(cfg.size),
        "generator_version": GENERATOR_VERSION,
    }
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest
