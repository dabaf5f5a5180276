"""Frozen feature extractor: average pool -> fixed projection -> tanh.

The default projection is random Gaussian. Any FMPR file holding
``embedder.w`` / ``embedder.pool_grid`` (and optionally ``embedder.b``) can
stand in, e.g. the hidden layer of a trained recognizer.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensorio import Dataset, InvariantViolation, read_params, write_params

_TENSORS = ("embedder.w", "embedder.pool_grid")


class IndivisiblePool(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderSpec:
    pool_grid: int
    w: np.ndarray  # (dim, pool_grid * pool_grid * channels)
    b: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise InvariantViolation("embedder projection must be a finite 2-D matrix")
        if w.shape[1] % (self.pool_grid * self.pool_grid):
            raise InvariantViolation("projection width must be a multiple of pool_grid**2")
        b = np.zeros(w.shape[0]) if self.b is None else np.array(self.b, dtype=np.float64)
        if b.shape != (w.shape[0],) or not np.all(np.isfinite(b)):
            raise InvariantViolation("embedder bias must be a finite vector of length dim")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def channels(self) -> int:
        return self.w.shape[1] // (self.pool_grid * self.pool_grid)

    def checksum(self) -> str:
        return hashlib.sha256(self.w.tobytes() + self.b.tobytes()).hexdigest()


def make_embedder(g: int = 8, d: int = 64, seed: int = 0, channels: int = 1) -> EmbedderSpec:
    if g < 2 or d < 2:
        raise InvariantViolation("pool grid and dim must both be >= 2")
    fan_in = g * g * channels
    rng = np.random.default_rng(seed)
    return EmbedderSpec(g, rng.standard_normal((d, fan_in)) / math.sqrt(fan_in), seed=seed)


def avgpool(images: np.ndarray, g: int) -> np.ndarray:
    """(B, H, W, C) -> (B, g*g*C) cell means, row-major over (cell_row, cell_col, channel)."""
    b, h, w, c = images.shape
    if h % g or w % g:
        raise IndivisiblePool(f"{h}x{w} image cannot be pooled into a {g}x{g} grid")
    cells = images.reshape(b, g, h // g, g, w // g, c).mean(axis=(2, 4))
    return cells.reshape(b, g * g * c)


def avgpool_vjp(d_pooled: np.ndarray, shape, g: int) -> np.ndarray:
    b, h, w, c = shape
    ch, cw = h // g, w // g
    d = d_pooled.reshape(b, g, 1, g, 1, c) / (ch * cw)
    return np.broadcast_to(d, (b, g, ch, g, cw, c)).reshape(shape)


def _batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None, ..., None]
    elif images.ndim == 3:
        images = images[None]
    return images


def embed_images(spec: EmbedderSpec, images) -> np.ndarray:
    """phi for a batch (B, H, W, C) -> (B, dim)."""
    images = _batch(images)
    return np.tanh(avgpool(images, spec.pool_grid) @ spec.w.T + spec.b)


def embed(spec: EmbedderSpec, image) -> np.ndarray:
    return embed_images(spec, _batch(image))[0]


def embed_batch(spec: EmbedderSpec, ds: Dataset, batch_size: int = 512) -> np.ndarray:
    out = np.empty((ds.n_images, spec.dim))
    for start in range(0, ds.n_images, batch_size):
        out[start:start + batch_size] = embed_images(spec, ds.pixels[start:start + batch_size])
    return out


def embed_vjp(spec: EmbedderSpec, images, features: np.ndarray, d_features: np.ndarray) -> np.ndarray:
    """Pull dLoss/dFeatures back to dLoss/dImages; ``features`` is the forward output."""
    images = _batch(images)
    d_pre = d_features * (1.0 - features * features)
    return avgpool_vjp(d_pre @ spec.w, images.shape, spec.pool_grid)


def save_embedder(spec: EmbedderSpec, path) -> None:
    write_params({"embedder.w": spec.w, "embedder.b": spec.b,
                  "embedder.pool_grid": np.array(float(spec.pool_grid))}, path)


def load_external_embedder(path) -> EmbedderSpec:
    raw = read_params(path)
    missing = [name for name in _TENSORS if name not in raw]
    if missing:
        raise InvariantViolation(f"embedder file lacks tensors {missing}")
    return EmbedderSpec(int(raw["embedder.pool_grid"]), raw["embedder.w"], raw.get("embedder.b"))
