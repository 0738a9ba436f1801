import math

import numpy as np
import pytest

from entcon.errors import ContractError
from entcon.metrics import (aggregate, dice_iou, evaluate_pair,
                            surface_distances, surface_voxels, write_report)


# ---------------------------------------------------------------------------
# Brute-force oracle: full pairwise distance matrix, independent of the
# KD-tree implementation.


def oracle_surfaces(mask):
    m = np.asarray(mask).astype(bool)
    out = []
    H, W, D = m.shape
    for x in range(H):
        for y in range(W):
            for z in range(D):
                if not m[x, y, z]:
                    continue
                boundary = False
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nx, ny, nz = x + dx, y + dy, z + dz
                    if not (0 <= nx < H and 0 <= ny < W and 0 <= nz < D) \
                            or not m[nx, ny, nz]:
                        boundary = True
                        break
                if boundary:
                    out.append((x, y, z))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def oracle_distances(a, b):
    sa = oracle_surfaces(a).astype(np.float64)
    sb = oracle_surfaces(b).astype(np.float64)
    d_ab = np.sqrt(((sa[:, None] - sb[None]) ** 2).sum(-1)).min(axis=1)
    d_ba = np.sqrt(((sb[:, None] - sa[None]) ** 2).sum(-1)).min(axis=1)
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    return float(np.percentile(pooled, 95)), float(pooled.mean())


def _ball(center, r, shape=(12, 12, 12)):
    g = np.indices(shape)
    d2 = sum((g[i] - center[i]) ** 2 for i in range(3))
    return (d2 <= r * r).astype(int)


# ---------------------------------------------------------------------------
# Dice / IoU


def test_identical_masks():
    m = _ball((6, 6, 6), 3)
    assert dice_iou(m, m) == (1.0, 1.0)


def test_disjoint_masks():
    a = _ball((3, 3, 3), 2)
    b = _ball((9, 9, 9), 2)
    assert dice_iou(a, b) == (0.0, 0.0)


def test_counting_oracle():
    a = np.zeros((4, 2, 2), dtype=int)
    b = np.zeros((4, 2, 2), dtype=int)
    a.ravel()[:8] = 1
    b.ravel()[4:12] = 1
    d, i = dice_iou(a, b)
    assert d == pytest.approx(0.5)
    assert i == pytest.approx(4 / 12)


def test_both_empty_convention():
    z = np.zeros((4, 4, 4), dtype=int)
    assert dice_iou(z, z) == (1.0, 1.0)


def test_dice_geq_iou_property():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.integers(0, 2, (6, 6, 6))
        b = rng.integers(0, 2, (6, 6, 6))
        d, i = dice_iou(a, b)
        assert d >= i - 1e-15


def test_shape_mismatch():
    with pytest.raises(ContractError):
        dice_iou(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


# ---------------------------------------------------------------------------
# Surface distances


def test_identical_masks_zero_distance():
    m = _ball((6, 6, 6), 3)
    hd, asd, collapsed = surface_distances(m, m)
    assert (hd, asd, collapsed) == (0.0, 0.0, False)


def test_two_single_voxels_euclidean():
    a = np.zeros((8, 8, 8), dtype=int)
    b = np.zeros((8, 8, 8), dtype=int)
    a[0, 0, 0] = 1
    b[3, 4, 0] = 1
    hd, asd, _ = surface_distances(a, b)
    assert hd == pytest.approx(5.0)
    assert asd == pytest.approx(5.0)


def test_dilation_bound():
    from scipy.ndimage import binary_dilation
    a = _ball((6, 6, 6), 3)
    b = binary_dilation(a).astype(int)
    hd, asd, _ = surface_distances(a, b)
    assert asd <= 1.0 + 1e-9
    assert hd <= math.sqrt(3) + 1e-9


def test_empty_mask_sentinel():
    m = _ball((6, 6, 6), 2)
    z = np.zeros_like(m)
    sentinel = math.sqrt(3 * 12 ** 2)
    for a, b in ((m, z), (z, m), (z, z)):
        hd, asd, collapsed = surface_distances(a, b)
        assert collapsed
        assert hd == pytest.approx(sentinel)
        assert asd == pytest.approx(sentinel)


def test_symmetry_bitwise():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.integers(0, 2, (8, 8, 8))
        b = rng.integers(0, 2, (8, 8, 8))
        if a.sum() == 0 or b.sum() == 0:
            continue
        f = surface_distances(a, b)
        r = surface_distances(b, a)
        assert f[0] == r[0] and f[1] == r[1]


def test_surface_extraction_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        m = rng.integers(0, 2, (6, 6, 6))
        got = surface_voxels(m)
        want = oracle_surfaces(m)
        assert np.array_equal(got, want)


def test_distances_match_bruteforce_oracle():
    rng = np.random.default_rng(3)
    for _ in range(15):
        a = rng.integers(0, 2, (8, 8, 8))
        b = rng.integers(0, 2, (8, 8, 8))
        if a.sum() == 0 or b.sum() == 0:
            continue
        hd, asd, _ = surface_distances(a, b)
        ohd, oasd = oracle_distances(a, b)
        assert hd == ohd and asd == oasd  # bitwise equality


# ---------------------------------------------------------------------------
# Reports


def test_report_roundtrip(tmp_path):
    rows = [evaluate_pair(_ball((6, 6, 6), 3), _ball((6, 6, 7), 3), "v0", "small",
                          "scattered")]
    path = write_report(rows, str(tmp_path / "report.csv"))
    lines = open(path).read().splitlines()
    assert lines[0] == "volume_id,category,scatter,dice,iou,hd95,asd"
    cells = lines[1].split(",")
    assert cells[0] == "v0" and cells[1] == "small"
    assert float(cells[3]) == rows[0].dice  # exact repr round-trip


def test_aggregate_means():
    rows = [evaluate_pair(_ball((6, 6, 6), 3), _ball((6, 6, 6), 3), "a", "", ""),
            evaluate_pair(_ball((6, 6, 6), 3), _ball((6, 6, 7), 3), "b", "", "")]
    agg = aggregate(rows)
    assert agg["n"] == 2
    assert agg["dice"] == pytest.approx((rows[0].dice + rows[1].dice) / 2)
    assert aggregate([]) == {}
