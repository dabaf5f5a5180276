import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facemae.patchmask import (
    IndivisibleDimensions,
    PatchGrid,
    ShapeMismatch,
    apply_mask,
    mask_image,
    patchify,
    region_mask,
    region_patches,
    sample_random_mask,
    unpatchify,
)
from facemae.tensorio import MaskPattern


def test_patchify_layout_4x4():
    img = np.arange(16.0).reshape(4, 4)
    tokens = patchify(img, 2)
    assert tokens.shape == (4, 4)
    np.testing.assert_array_equal(tokens[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tokens[3], [10, 11, 14, 15])


def test_indivisible_dimensions():
    with pytest.raises(IndivisibleDimensions):
        patchify(np.zeros((5, 5)), 2)


def test_unpatchify_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        unpatchify(np.zeros((3, 4)), 2, 2, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31))
def test_patchify_roundtrip(rows, cols, s, c, seed):
    img = np.random.default_rng(seed).uniform(size=(rows * s, cols * s, c))
    tokens = patchify(img, s)
    assert tokens.shape == (rows * cols, s * s * c)
    np.testing.assert_array_equal(unpatchify(tokens, rows, cols, s), img)
    # token i is the patch at (i div cols, i mod cols)
    i = (rows * cols) // 2
    r, q = divmod(i, cols)
    np.testing.assert_array_equal(tokens[i], img[r * s:(r + 1) * s, q * s:(q + 1) * s].reshape(-1))


def test_batched_patchify_matches_single():
    imgs = np.random.default_rng(0).uniform(size=(3, 8, 8, 1))
    batched = patchify(imgs, 4)
    for b in range(3):
        np.testing.assert_array_equal(batched[b], patchify(imgs[b], 4))


def test_random_mask_196_patches():
    pat = sample_random_mask(196, 0.75, 123)
    assert len(pat.masked) == 147
    assert len(pat.visible) == 49


def test_zero_ratio_masks_nothing():
    assert sample_random_mask(16, 0.0, 5).masked == frozenset()


def test_random_mask_deterministic():
    assert sample_random_mask(64, 0.6, 9) == sample_random_mask(64, 0.6, 9)
    assert sample_random_mask(64, 0.6, 9) != sample_random_mask(64, 0.6, 10)


@pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
def test_ratio_out_of_range(ratio):
    with pytest.raises(ValueError):
        sample_random_mask(16, ratio, 0)


def test_random_mask_marginal_uniformity():
    counts = np.zeros(16)
    for seed in range(10_000):
        counts += sample_random_mask(16, 0.5, seed).as_bool()
    freq = counts / 10_000
    assert freq.min() >= 0.47 and freq.max() <= 0.53


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.floats(0, 0.99), st.integers(0, 2**40))
def test_visible_plus_masked_is_total(n, ratio, seed):
    pat = sample_random_mask(n, ratio, seed)
    assert len(pat.visible) + len(pat.masked) == n
    assert len(pat.masked) == int(np.floor(ratio * n + 1e-9))


def _region_oracle(rows, cols, s, r0, r1, c0, c1):
    h, w = rows * s, cols * s
    out = set()
    for r in range(rows):
        for c in range(cols):
            cy, cx = r * s + s / 2, c * s + s / 2
            if r0 * h <= cy < r1 * h and c0 * w <= cx < c1 * w:
                out.add(r * cols + c)
    return out


def test_eye_region_on_14x14_grid():
    grid = PatchGrid(16, 14, 14)
    expected = _region_oracle(14, 14, 16, 0.25, 0.45, 0.15, 0.85)
    assert set(region_patches(grid, "eye")) == expected
    # rows 3..5 (centers 56, 72, 88 of 224) and columns 2..11 (centers 40..184)
    assert expected == {r * 14 + c for r in (3, 4, 5) for c in range(2, 12)}
    pat = region_mask(grid, "eye", 0.75, 3)
    assert expected <= pat.masked
    assert len(pat.masked) == 147


def test_mouth_region_matches_oracle():
    grid = PatchGrid(8, 4, 4)
    assert set(region_patches(grid, "mouth")) == _region_oracle(4, 4, 8, 0.65, 0.85, 0.30, 0.70)


def test_ratio_equal_to_coverage_masks_exactly_region():
    grid = PatchGrid(16, 14, 14)
    core = set(region_patches(grid, "eye"))
    pat = region_mask(grid, "eye", len(core) / 196, 0)
    assert pat.masked == core


def test_ratio_below_coverage_errors():
    with pytest.raises(ValueError):
        region_mask(PatchGrid(16, 14, 14), "eye", 0.05, 0)


def test_apply_mask_examples():
    tokens = np.arange(8.0).reshape(4, 2)
    vis, idx = apply_mask(tokens, MaskPattern(4, {1, 2}))
    np.testing.assert_array_equal(idx, [0, 3])
    np.testing.assert_array_equal(vis, tokens[[0, 3]])
    vis, idx = apply_mask(tokens, MaskPattern(4, set()))
    np.testing.assert_array_equal(vis, tokens)
    vis, idx = apply_mask(tokens, MaskPattern(4, {0, 1, 3}))
    assert vis.shape == (1, 2) and idx.tolist() == [2]


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        apply_mask(np.zeros((3, 2)), MaskPattern(4, {1}))


def test_mask_image_zeroes_masked_patches():
    img = np.ones((8, 8, 1))
    out = mask_image(img, MaskPattern(4, {0, 3}), 4)
    assert out[:4, :4].sum() == 0 and out[4:, 4:].sum() == 0
    assert out[:4, 4:].min() == 1 and out[4:, :4].min() == 1
