"""Deterministic face-like identity datasets built from Gaussian blob prototypes.

Each identity owns six blobs drawn from its own sub-seed. Every instance of
that identity shifts the whole arrangement by a small integer offset and
adds pixel noise, so images of one identity cluster while identities stay
apart under pooled features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import mix64
from .tensorio import Dataset, InvariantViolation

N_BLOBS = 6


@dataclass(frozen=True)
class SynthConfig:
    n_ids: int = 50
    imgs_per_id: int = 20
    size: int = 32
    seed: int = 1
    intra_noise: float = 0.05
    jitter: int = 2
    image_offset: int = 0  # first per-identity image index; disjoint offsets give fresh instances

    def __post_init__(self):
        if self.n_ids < 1 or self.imgs_per_id < 1:
            raise InvariantViolation("n_ids and imgs_per_id must be >= 1")
        if self.size < 16:
            raise InvariantViolation("size must be >= 16")
        if not self.intra_noise >= 0:
            raise InvariantViolation("intra_noise must be >= 0")
        if self.jitter < 0 or self.image_offset < 0:
            raise InvariantViolation("jitter and image_offset must be >= 0")


def identity_prototype(seed: int, identity: int, size: int) -> np.ndarray:
    """Blob parameters (N_BLOBS, 4) as rows of (center_y, center_x, width, amplitude)."""
    rng = np.random.default_rng(mix64(seed, identity))
    centers = rng.uniform(0.1 * size, 0.9 * size, size=(N_BLOBS, 2))
    widths = rng.uniform(size / 16, size / 6, size=N_BLOBS)
    amps = rng.uniform(0.4, 1.0, size=N_BLOBS)
    return np.column_stack([centers, widths, amps])


def render(blobs: np.ndarray, size: int, shift=(0, 0)) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for cy, cx, width, amp in blobs:
        d2 = (yy - cy - shift[0]) ** 2 + (xx - cx - shift[1]) ** 2
        img += amp * np.exp(-d2 / (2.0 * width * width))
    return np.clip(img, 0.0, 1.0)


def gen_dataset(cfg: SynthConfig) -> Dataset:
    n = cfg.n_ids * cfg.imgs_per_id
    pixels = np.empty((n, cfg.size, cfg.size, 1), dtype=np.float32)
    labels = np.repeat(np.arange(cfg.n_ids), cfg.imgs_per_id)
    for ident in range(cfg.n_ids):
        id_seed = mix64(cfg.seed, ident)
        blobs = identity_prototype(cfg.seed, ident, cfg.size)
        for k in range(cfg.imgs_per_id):
            rng = np.random.default_rng(mix64(id_seed, cfg.image_offset + k))
            shift = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
            img = render(blobs, cfg.size, shift)
            if cfg.intra_noise > 0:
                img = img + rng.normal(0.0, cfg.intra_noise, size=img.shape)
            pixels[ident * cfg.imgs_per_id + k, :, :, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(pixels, labels)
