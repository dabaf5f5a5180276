"""Patch tokenization and mask-pattern generation.

Images are (H, W, C) arrays, optionally with a leading batch axis. Tokens
are flattened square patches in row-major patch order, each laid out as
(row-in-patch, col-in-patch, channel).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorio import MaskPattern

REGIONS = {
    # normalized (row_lo, row_hi, col_lo, col_hi) on an aligned face
    "eye": (0.25, 0.45, 0.15, 0.85),
    "mouth": (0.65, 0.85, 0.30, 0.70),
}


class ShapeMismatch(ValueError):
    pass


class IndivisibleDimensions(ShapeMismatch):
    pass


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if height % patch_size or width % patch_size:
            raise IndivisibleDimensions(
                f"{height}x{width} image is not divisible into {patch_size}x{patch_size} patches")
        return cls(patch_size, height // patch_size, width // patch_size)


def patchify(image: np.ndarray, s: int) -> np.ndarray:
    """(..., H, W, C) -> (..., n_patches, s*s*C). A 2-D image is treated as C=1."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    *lead, h, w, c = image.shape
    if h % s or w % s:
        raise IndivisibleDimensions(f"{h}x{w} image is not divisible by patch size {s}")
    rows, cols = h // s, w // s
    x = image.reshape(*lead, rows, s, cols, s, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # (..., rows, cols, s, s, c)
    return x.reshape(*lead, rows * cols, s * s * c)


def unpatchify(tokens: np.ndarray, rows: int, cols: int, s: int) -> np.ndarray:
    """Inverse of :func:`patchify`; returns (..., H, W, C)."""
    tokens = np.asarray(tokens)
    *lead, n, p = tokens.shape
    if n != rows * cols or p % (s * s):
        raise ShapeMismatch(f"tokens {tokens.shape} do not fit a {rows}x{cols} grid of {s}x{s} patches")
    c = p // (s * s)
    nl = len(lead)
    x = tokens.reshape(*lead, rows, cols, s, s, c)
    x = np.moveaxis(x, nl + 1, nl + 2)  # (..., rows, s, cols, s, c)
    return x.reshape(*lead, rows * s, cols * s, c)


def _n_masked(n_patches: int, ratio: float) -> int:
    # small epsilon keeps e.g. 0.75 * 196 == 147 exactly when ratio is a decimal literal
    return int(math.floor(ratio * n_patches + 1e-9))


def _fisher_yates_prefix(pool: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    pool = pool.copy()
    if m == 0:
        return pool[:0]
    picks = rng.integers(np.arange(m), len(pool))
    for i, j in enumerate(picks.tolist()):
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:m]


def sample_random_mask(n_patches: int, ratio: float, seed: int) -> MaskPattern:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    m = _n_masked(n_patches, ratio)
    rng = np.random.default_rng(seed)
    chosen = _fisher_yates_prefix(np.arange(n_patches), m, rng)
    return MaskPattern(n_patches, frozenset(chosen.tolist()), ratio=ratio, strategy="random")


def region_patches(grid: PatchGrid, region: str) -> list[int]:
    """Patch indices whose centers fall inside the named normalized rectangle."""
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}; expected one of {sorted(REGIONS)}")
    r0, r1, c0, c1 = REGIONS[region]
    s = grid.patch_size
    height, width = grid.rows * s, grid.cols * s
    out = []
    for i in range(grid.n_patches):
        cy = (i // grid.cols) * s + s / 2
        cx = (i % grid.cols) * s + s / 2
        if r0 * height <= cy < r1 * height and c0 * width <= cx < c1 * width:
            out.append(i)
    return out


def region_mask(grid: PatchGrid, region: str, ratio: float, seed: int) -> MaskPattern:
    """Mask every patch of ``region``, then top up at random to floor(ratio * n)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    core = region_patches(grid, region)
    budget = _n_masked(grid.n_patches, ratio)
    if budget < len(core):
        raise ValueError(
            f"ratio {ratio} masks {budget} patches but the {region} region covers {len(core)}")
    outside = np.array([i for i in range(grid.n_patches) if i not in set(core)], dtype=np.int64)
    rng = np.random.default_rng(seed)
    extra = _fisher_yates_prefix(outside, budget - len(core), rng)
    return MaskPattern(grid.n_patches, frozenset(core) | frozenset(extra.tolist()),
                       ratio=ratio, strategy=region)


def make_mask(grid: PatchGrid, strategy: str, ratio: float, seed: int) -> MaskPattern:
    if strategy == "random":
        return sample_random_mask(grid.n_patches, ratio, seed)
    return region_mask(grid, strategy, ratio, seed)


def apply_mask(tokens: np.ndarray, pattern: MaskPattern):
    """Return (visible tokens, visible indices) in ascending patch order."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] != pattern.n_patches:
        raise ShapeMismatch(f"{tokens.shape[0]} tokens but pattern covers {pattern.n_patches} patches")
    idx = np.asarray(pattern.visible, dtype=np.int64)
    return tokens[idx], idx


def mask_image(image: np.ndarray, pattern: MaskPattern, s: int, fill: float = 0.0) -> np.ndarray:
    """Replace masked patches with a constant; the raw masked-dataset baseline."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    grid = PatchGrid.for_image(image.shape[0], image.shape[1], s)
    tokens = patchify(image, s).copy()
    tokens[pattern.as_bool()] = fill
    return unpatchify(tokens, grid.rows, grid.cols, s)
