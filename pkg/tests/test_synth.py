import json
import os

import numpy as np
import pytest

from entcon.errors import GenerationError, ParameterError
from entcon.synth import (GenConfig, LesionSpec, Transform, apply_transform,
                          augment, build_dataset, draw_transform, gen_volume,
                          intensity_noise, spec_for)


def test_zero_count_gives_empty_mask():
    spec = LesionSpec(count=0, radius_range=(2, 3))
    vol, mask = gen_volume(1, (16, 16, 16), spec)
    assert mask.data.sum() == 0
    assert np.isfinite(vol.data).all()


def test_determinism_bitwise():
    spec = LesionSpec(count=2, radius_range=(2, 3), category="small")
    a_vol, a_mask = gen_volume(42, (16, 16, 16), spec)
    b_vol, b_mask = gen_volume(42, (16, 16, 16), spec)
    assert a_vol.data.tobytes() == b_vol.data.tobytes()
    assert a_mask.data.tobytes() == b_mask.data.tobytes()
    c_vol, _ = gen_volume(43, (16, 16, 16), spec)
    assert a_vol.data.tobytes() != c_vol.data.tobytes()


def test_sphere_voxel_count():
    # digital sphere of radius 4: 4/3*pi*4^3 ~ 268 voxels
    spec = LesionSpec(count=1, radius_range=(4.0, 4.0), category="medium",
                      axis_jitter=0.0)
    _, mask = gen_volume(7, (32, 32, 32), spec)
    assert 240 <= mask.data.sum() <= 300


def test_lesion_contrast_elevates_intensity():
    # same seed, contrast 3 vs 0: the difference isolates the lesion bump
    # (the local background can be +-1.5 sigma, so a global comparison is
    # not a valid oracle)
    kw = dict(count=1, radius_range=(4.0, 4.0), category="medium",
              axis_jitter=0.0)
    vol3, mask = gen_volume(3, (32, 32, 32), LesionSpec(contrast=3.0, **kw))
    vol0, mask0 = gen_volume(3, (32, 32, 32), LesionSpec(contrast=0.0, **kw))
    assert np.array_equal(mask.data, mask0.data)
    bump = (vol3.data - vol0.data)[0, 0]
    assert bump[mask.data[0] == 1].mean() > 2.0   # ~0.87 * contrast
    assert bump[mask.data[0] == 1].min() >= 0.0
    assert bump[mask.data[0] == 0].max() <= 3.0   # soft halo only


def test_volume_too_small_rejected():
    with pytest.raises(ParameterError):
        gen_volume(0, (8, 8, 8), LesionSpec(count=1, radius_range=(2, 3)))


def test_unplaceable_lesion_raises():
    with pytest.raises(GenerationError):
        gen_volume(0, (16, 16, 16), LesionSpec(count=1, radius_range=(7, 8)))


def test_category_fraction_invariants():
    # small scattered < 2% foreground, large > 5%, enforced at generation
    for seed in range(5):
        spec = spec_for("small", "scattered", rng=np.random.default_rng(seed))
        _, mask = gen_volume(seed, (32, 32, 32), spec)
        assert mask.data.mean() < 0.02
        spec = spec_for("large", "scattered", rng=np.random.default_rng(seed))
        _, mask = gen_volume(seed + 100, (32, 32, 32), spec)
        assert mask.data.mean() > 0.05


def test_scattered_lesions_are_disjoint():
    spec = LesionSpec(count=3, radius_range=(1.5, 2.5), category="small",
                      scatter="scattered")
    from scipy.ndimage import label
    _, mask = gen_volume(11, (32, 32, 32), spec)
    _, n_components = label(mask.data[0])
    assert n_components == 3


# ---------------------------------------------------------------------------
# Augmentation


def test_identity_transform_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 8, 8))
    assert np.array_equal(apply_transform(x, Transform.identity()), x)


def test_double_flip_is_involution():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 6, 6))
    t = Transform(flips=(True, False, True))
    assert np.array_equal(apply_transform(apply_transform(x, t), t), x)


def test_augment_applies_same_transform_to_image_and_mask():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8, 8, 8))
    y = (x > 0.5).astype(np.int64)
    xa, ya = augment(x, y, seed=5)
    assert np.array_equal(ya, (xa > 0.5).astype(np.int64))


def test_flip_then_crop_mask_subset():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, (8, 8, 8))
    x = y.astype(float)
    xa, ya = augment(x, y, seed=9, crop=6)
    assert xa.shape == (6, 6, 6)
    assert ya.sum() <= y.sum()


def test_crop_larger_than_volume_rejected():
    with pytest.raises(ParameterError):
        draw_transform(0, (8, 8, 8), crop=9)


def test_augment_deterministic_per_seed():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, 8, 8))
    y = (x > 0).astype(np.int64)
    a = augment(x, y, seed=13)
    b = augment(x, y, seed=13)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_intensity_noise_seeded():
    x = np.zeros((4, 4, 4))
    a = intensity_noise(x, 0.5, 3)
    b = intensity_noise(x, 0.5, 3)
    c = intensity_noise(x, 0.5, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(intensity_noise(x, 0.0, 5), x)


# ---------------------------------------------------------------------------
# Dataset builder


def test_labeled_count_exact(tmp_path):
    cfg = GenConfig(out_dir=str(tmp_path), n_train=10, n_val=0,
                    size=(16, 16, 16), labeled_ratio=0.1,
                    categories=("small",), seed=3)
    manifest = build_dataset(cfg)
    assert sum(e["labeled"] for e in manifest["volumes"]) == 1


def test_category_filter(tmp_path):
    cfg = GenConfig(out_dir=str(tmp_path), n_train=4, n_val=2,
                    size=(16, 16, 16), labeled_ratio=0.25,
                    categories=("small",), scatters=("scattered",), seed=5)
    manifest = build_dataset(cfg)
    assert all(e["category"] == "small" for e in manifest["volumes"])
    assert all(e["scatter"] == "scattered" for e in manifest["volumes"])


def test_manifest_deterministic(tmp_path):
    cfg_a = GenConfig(out_dir=str(tmp_path / "a"), n_train=6, n_val=2,
                      size=(16, 16, 16), categories=("small",), seed=11)
    cfg_b = GenConfig(out_dir=str(tmp_path / "b"), n_train=6, n_val=2,
                      size=(16, 16, 16), categories=("small",), seed=11)
    a = build_dataset(cfg_a)
    b = build_dataset(cfg_b)
    a_str = json.dumps({k: v for k, v in a.items()}, sort_keys=True)
    b_str = json.dumps({k: v for k, v in b.items()}, sort_keys=True)
    assert a_str == b_str
    img = (tmp_path / "a" / a["volumes"][0]["image"]).read_bytes()
    img_b = (tmp_path / "b" / b["volumes"][0]["image"]).read_bytes()
    assert img == img_b


def test_manifest_schema(tmp_path):
    cfg = GenConfig(out_dir=str(tmp_path), n_train=4, n_val=2,
                    size=(16, 16, 16), categories=("small",), seed=2)
    manifest = build_dataset(cfg)
    assert set(manifest) >= {"volumes", "split", "generator_version"}
    for e in manifest["volumes"]:
        assert set(e) >= {"image", "mask", "labeled", "seed", "category", "scatter"}
        assert os.path.exists(tmp_path / e["image"])
        assert os.path.exists(tmp_path / e["mask"])
    paths = [e["image"] for e in manifest["volumes"]]
    assert len(paths) == len(set(paths))
    assert len(manifest["split"]["train"]) == 4
    assert len(manifest["split"]["val"]) == 2
