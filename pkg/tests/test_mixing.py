import itertools
import math

import numpy as np
import pytest

from udaseg.mixing import (MixMask, apply_mix, build_mix_mask, prior_guided_select,
                           select_classes)
from udaseg.taxonomy import ClassTaxonomy

IGN = 255


def label_with(classes, shape=(8, 8), rng=None):
    rng = rng or np.random.default_rng(0)
    y = rng.choice(np.asarray(classes), size=shape)
    flat = y.reshape(-1)
    flat[: len(classes)] = classes  # every class present
    return y


def test_select_half_of_four(rng):
    y = label_with([0, 1, 2, 3])
    c = select_classes(y, 0.5, rng)
    assert len(c) == 2 and set(c) <= {0, 1, 2, 3}


def test_select_all(rng):
    y = label_with([0, 3, 5, 7])
    assert select_classes(y, 1.0, rng) == [0, 3, 5, 7]


def test_select_ceil_and_ignore(rng):
    y = label_with([1, 2, 4])
    y[0, :] = IGN
    y[1, :3] = [1, 2, 4]
    assert len(select_classes(y, 0.5, rng)) == 2  # ceil(1.5)
    assert IGN not in select_classes(y, 1.0, rng)


def test_select_empty(rng):
    assert select_classes(np.full((4, 4), IGN), 0.5, rng) == []


def test_select_fraction_bounds(rng):
    with pytest.raises(ValueError):
        select_classes(label_with([0, 1]), 1.5, rng)


def test_select_uniform_over_pairs():
    rng = np.random.default_rng(99)
    y = label_with([0, 1, 2, 3])
    counts = {}
    n = 10_000
    for _ in range(n):
        k = tuple(select_classes(y, 0.5, rng))
        counts[k] = counts.get(k, 0) + 1
    pairs = list(itertools.combinations(range(4), 2))
    assert set(counts) == set(pairs)
    exact = 1 / math.comb(4, 2)
    for p in pairs:
        assert abs(counts[p] / n - exact) <= 0.02


def test_prior_guided_intersects_present(cityscapes):
    wall, building, fence = (cityscapes.class_id(n) for n in ("wall", "building", "fence"))
    road = cityscapes.class_id("road")
    y = np.full((6, 6), road)
    y[:2] = wall
    y[2:4] = building

    class Fixed:
        # base draw of ClassMix: pick "wall"
        def choice(self, n, size, replace):
            present = [road, wall, building]
            present.sort()
            return np.array([present.index(wall)])

    got = prior_guided_select(y, cityscapes, 1 / 3, Fixed())
    present = {road, wall, building}
    assert set(got) == ({wall} | cityscapes.related[wall]) & present == {wall, building}
    assert fence not in got


def test_prior_guided_without_groups_matches_classmix(toy_taxonomy):
    tax = toy_taxonomy.with_active_groups([])
    y = label_with(list(range(8)), (16, 16))
    for seed in range(20):
        a = prior_guided_select(y, tax, 0.5, np.random.default_rng(seed))
        b = select_classes(y, 0.5, np.random.default_rng(seed))
        assert a == b


def test_rider_pulls_bicycle(toy_taxonomy):
    tax = toy_taxonomy.with_active_groups(["human_vehicle"])
    rider, bicycle, road = (tax.class_id(n) for n in ("rider", "bicycle", "road"))
    y = np.full((8, 8), road)
    y[2:4, 3] = rider
    y[4:6, 2:5] = bicycle
    for seed in range(50):
        c = prior_guided_select(y, tax, 0.5, np.random.default_rng(seed))
        if rider in c or bicycle in c:
            assert rider in c and bicycle in c


def test_prior_guided_superset(toy_taxonomy):
    y = label_with(list(range(8)), (16, 16))
    for seed in range(50):
        base = select_classes(y, 0.5, np.random.default_rng(seed))
        pg = prior_guided_select(y, toy_taxonomy, 0.5, np.random.default_rng(seed))
        assert set(base) <= set(pg)


def test_mask_empty_and_full():
    y = label_with([0, 1, 2])
    y[0, 0] = IGN
    assert not build_mix_mask(y, []).mask.any()
    full = build_mix_mask(y, [0, 1, 2]).mask
    assert np.array_equal(full.astype(bool), y != IGN)
    # ignore pixels are never copied, even if requested
    assert build_mix_mask(y, [0, 1, 2, IGN]).mask[0, 0] == 0


def test_mask_membership_oracle(rng):
    for _ in range(50):
        y = rng.integers(0, 6, size=(12, 10))
        c = list(rng.choice(6, size=rng.integers(0, 7), replace=False))
        m = build_mix_mask(y, c)
        oracle = np.array([[1 if y[i, j] in c else 0 for j in range(10)] for i in range(12)])
        assert np.array_equal(m.mask, oracle)
        assert set(np.unique(m.mask)) <= {0, 1}


def random_pair(rng, h=16, w=16):
    x_s = rng.random((h, w, 3)).astype(np.float32)
    x_t = rng.random((h, w, 3)).astype(np.float32)
    y_s = rng.integers(0, 8, (h, w))
    y_t = rng.integers(0, 8, (h, w))
    return x_s, y_s, x_t, y_t


def test_apply_mix_identities(rng):
    x_s, y_s, x_t, y_t = random_pair(rng)
    zeros = MixMask(np.zeros((16, 16), np.uint8), [])
    ones = MixMask(np.ones((16, 16), np.uint8), [])
    xm, ym = apply_mix(x_s, y_s, x_t, y_t, zeros)
    assert np.array_equal(xm, x_t) and np.array_equal(ym, y_t)
    xm, ym = apply_mix(x_s, y_s, x_t, y_t, ones)
    assert np.array_equal(xm, x_s) and np.array_equal(ym, y_s)


def test_apply_mix_arithmetic_oracle(rng):
    for _ in range(100):
        x_s, y_s, x_t, y_t = random_pair(rng)
        m = build_mix_mask(y_s, list(rng.choice(8, 4, replace=False)))
        xm, ym = apply_mix(x_s, y_s, x_t, y_t, m)
        M = m.mask.astype(np.float32)
        assert np.array_equal(xm, M[..., None] * x_s + (1 - M[..., None]) * x_t)
        assert np.array_equal(ym, (M * y_s + (1 - M) * y_t).astype(ym.dtype))


def test_apply_mix_properties(rng):
    for _ in range(50):
        x_s, y_s, x_t, y_t = random_pair(rng)
        c = list(rng.choice(8, 3, replace=False))
        m = build_mix_mask(y_s, c)
        xm, ym = apply_mix(x_s, y_s, x_t, y_t, m)
        from_src = np.all(xm == x_s, axis=2) & (ym == y_s)
        from_tgt = np.all(xm == x_t, axis=2) & (ym == y_t)
        assert np.all(from_src | from_tgt)
        # image and label provenance agree
        sel = m.mask.astype(bool)
        assert np.all(from_src[sel]) and np.all(from_tgt[~sel])
        assert set(np.unique(ym)) <= set(c) | set(np.unique(y_t))
        # self-mix identity
        xx, yy = apply_mix(x_s, y_s, x_s, y_s, m)
        assert np.array_equal(xx, x_s) and np.array_equal(yy, y_s)


def test_apply_mix_size_mismatch(rng):
    x_s, y_s, x_t, y_t = random_pair(rng)
    m = MixMask(np.zeros((8, 8), np.uint8), [])
    with pytest.raises(ValueError):
        apply_mix(x_s, y_s, x_t, y_t, m)
