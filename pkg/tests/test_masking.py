import numpy as np
import pytest

from udaseg.masking import apply_mask, generate_patch_mask


def test_ratio_zero_keeps_all(rng):
    pm = generate_patch_mask(64, 64, 16, 0.0, rng)
    assert np.all(pm.mask == 1)


def test_ratio_one_masks_all(rng):
    pm = generate_patch_mask(64, 64, 16, 1.0, rng)
    assert np.all(pm.mask == 0)


@pytest.mark.parametrize("a, t", [(0, 0.5), (-4, 0.5), (16, -0.1), (16, 1.5)])
def test_bad_args(rng, a, t):
    with pytest.raises(ValueError):
        generate_patch_mask(64, 64, a, t, rng)


def patch_constant(mask, a):
    h, w = mask.shape
    down = mask[::a, ::a]
    up = np.kron(down, np.ones((a, a)))[:h, :w]
    return np.array_equal(up, mask)


def test_mask_matches_grid_rule(rng):
    pm = generate_patch_mask(128, 96, 16, 0.4, rng)
    assert pm.grid.shape == (8, 6)
    for p in range(8):
        for q in range(6):
            block = pm.mask[p * 16:(p + 1) * 16, q * 16:(q + 1) * 16]
            assert np.all(block == float(pm.grid[p, q] > 0.4))


def test_non_divisible_size(rng):
    pm = generate_patch_mask(70, 50, 16, 0.5, rng)
    assert pm.mask.shape == (70, 50)
    assert patch_constant(pm.mask, 16)


def test_masked_fraction_statistics():
    rng = np.random.default_rng(0)
    fr = []
    for _ in range(1000):
        pm = generate_patch_mask(128, 128, 16, 0.7, rng)
        assert patch_constant(pm.mask, 16)
        fr.append(pm.masked_fraction)
    assert abs(np.mean(fr) - 0.7) <= 0.02


def test_deterministic():
    a = generate_patch_mask(64, 64, 8, 0.7, np.random.default_rng(5)).mask
    b = generate_patch_mask(64, 64, 8, 0.7, np.random.default_rng(5)).mask
    assert np.array_equal(a, b)


def test_fresh_masks_agreement_rate():
    rng = np.random.default_rng(3)
    t = 0.7
    agree = []
    prev = generate_patch_mask(128, 128, 16, t, rng).mask
    for _ in range(500):
        cur = generate_patch_mask(128, 128, 16, t, rng).mask
        agree.append((cur == prev).mean())
        prev = cur
    expected = 1 - 2 * t * (1 - t)
    # 64 patches per mask; 3 sigma of the mean over 500 pairs
    sigma = np.sqrt(expected * (1 - expected) / 64 / 500)
    assert abs(np.mean(agree) - expected) < 3 * sigma + 1e-3


def test_apply_mask(rng):
    x = rng.random((32, 32, 3)).astype(np.float32)
    ones = generate_patch_mask(32, 32, 8, 0.0, rng)
    zeros = generate_patch_mask(32, 32, 8, 1.0, rng)
    assert np.array_equal(apply_mask(x, ones), x)
    assert np.all(apply_mask(x, zeros) == 0)
    for _ in range(20):
        pm = generate_patch_mask(32, 32, 8, 0.5, rng)
        out = apply_mask(x, pm)
        assert np.array_equal(out, x * pm.mask[..., None])
        kept = pm.mask.astype(bool)
        assert np.array_equal(out[kept], x[kept])
        assert np.all(out[~kept] == 0)


def test_apply_mask_size_mismatch(rng):
    pm = generate_patch_mask(32, 32, 8, 0.5, rng)
    with pytest.raises(ValueError):
        apply_mask(np.zeros((16, 16, 3)), pm)
