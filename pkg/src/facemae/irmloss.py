"""Instance/relation matching loss and the reconstruction training loop.

``delta`` is the row-wise Euclidean distance averaged over rows. Instance
matching applies it to the feature matrices, relation matching to their
Gram matrices (each Gram row treated as a vector).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autoenc
from .autoenc import ModelConfig, ModelParams
from .embedder import EmbedderSpec, embed_images, embed_vjp, make_embedder
from .patchmask import PatchGrid, ShapeMismatch, make_mask
from .seeding import mix64
from .tensorio import Dataset, InvariantViolation

log = logging.getLogger(__name__)

MODES = ("im", "rm", "irm", "mse", "irm+mse")


class NumericFailure(FloatingPointError):
    pass


@dataclass(frozen=True)
class IrmConfig:
    beta: float = 1.0
    mode: str = "irm"
    mse_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvariantViolation(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        if not (np.isfinite(self.beta) and self.beta >= 0):
            raise InvariantViolation("beta must be finite and >= 0")

    @property
    def uses_features(self) -> bool:
        return self.mode != "mse"

    @property
    def uses_mse(self) -> bool:
        return self.mode in ("mse", "irm+mse")


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeMismatch(f"expected two equal 2-D shapes, got {x.shape} and {y.shape}")
    if x.shape[0] < 1:
        raise ShapeMismatch("need at least one row")
    return x, y


def delta(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.linalg.norm(x - y, axis=1).mean())


def gram(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f @ f.T


def _delta_grad(x, y) -> np.ndarray:
    """d delta(x, y) / d y, with subgradient 0 on rows where x_i == y_i."""
    diff = y - x
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, diff / (safe * x.shape[0]), 0.0)


def loss_terms(f, f_hat) -> tuple[float, float]:
    """(instance matching, relation matching) for one batch."""
    f, f_hat = _check_pair(f, f_hat)
    return delta(f, f_hat), delta(gram(f), gram(f_hat))


def dc_loss(f, f_hat, cfg: IrmConfig = IrmConfig()) -> float:
    """Feature-space part of the objective; 0 for the pure pixel-MSE mode."""
    f, f_hat = _check_pair(f, f_hat)
    if cfg.mode == "mse":
        return 0.0
    im = delta(f, f_hat) if cfg.mode != "rm" else 0.0
    if cfg.mode == "im":
        return im
    rm = delta(gram(f), gram(f_hat))
    if cfg.mode == "rm":
        return rm
    return im + cfg.beta * rm


def dc_loss_grad(f, f_hat, cfg: IrmConfig = IrmConfig()) -> np.ndarray:
    f, f_hat = _check_pair(f, f_hat)
    grad = np.zeros_like(f_hat)
    if cfg.mode == "mse":
        return grad
    if cfg.mode != "rm":
        grad += _delta_grad(f, f_hat)
    if cfg.mode != "im":
        weight = 1.0 if cfg.mode == "rm" else cfg.beta
        if weight:
            d_gram = _delta_grad(gram(f), gram(f_hat))
            grad += weight * (d_gram + d_gram.T) @ f_hat
    return grad


def objective(params: ModelParams, images, patterns, spec: EmbedderSpec, cfg: IrmConfig,
              f_orig=None, need_grad: bool = True):
    """Full training loss for one batch; returns (loss, grads or None, reconstruction).

    ``f_orig`` lets callers reuse precomputed features of the original images.
    """
    s = params.cfg.patch_size
    images = np.asarray(images, dtype=np.float64)
    recon, trace = autoenc.forward_batch(params, images, patterns)
    loss = 0.0
    d_recon = np.zeros_like(recon)
    if cfg.uses_features:
        if f_orig is None:
            f_orig = embed_images(spec, images)
        f_hat = embed_images(spec, recon)
        loss += dc_loss(f_orig, f_hat, cfg)
        if need_grad:
            d_recon += embed_vjp(spec, recon, f_hat, dc_loss_grad(f_orig, f_hat, cfg))
    if cfg.uses_mse:
        loss += cfg.mse_weight * autoenc.mse_loss(recon, images, patterns, s)
        if need_grad:
            d_recon += cfg.mse_weight * autoenc.mse_loss_grad(recon, images, patterns, s)
    grads = autoenc.backward(params, trace, d_recon) if need_grad else None
    return loss, grads, recon


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_epochs: float | None = None  # None -> 20% of epochs
    mask_ratio: float = 0.75
    mask_strategy: str = "random"
    seed: int = 0

    @property
    def warmup(self) -> float:
        return 0.2 * self.epochs if self.warmup_epochs is None else self.warmup_epochs


@dataclass
class TrainHistory:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["step,loss,lr"]
        lines += [f"{s},{l:.10g},{r:.10g}" for s, l, r in zip(self.step, self.loss, self.lr)]
        return "\n".join(lines) + "\n"


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(mix64(seed, 0xE90C, epoch)).permutation(n)


def step_masks(grid: PatchGrid, cfg: TrainConfig, epoch: int, step: int, index) -> list:
    """Fresh masks for one step; seeds derive from (seed, epoch, step, image index)."""
    return [make_mask(grid, cfg.mask_strategy, cfg.mask_ratio, mix64(cfg.seed, epoch, step, int(i)))
            for i in index]


def train_facemae(ds: Dataset, model_cfg: ModelConfig = ModelConfig(), irm_cfg: IrmConfig = IrmConfig(),
                  train_cfg: TrainConfig = TrainConfig(), embedder: EmbedderSpec | None = None,
                  params: ModelParams | None = None):
    """Train the reconstruction model; returns (params, TrainHistory)."""
    spec = embedder if embedder is not None else make_embedder()
    params = autoenc.init_params(model_cfg) if params is None else params.copy()
    images = ds.pixels.astype(np.float64)
    grid = PatchGrid.for_image(ds.height, ds.width, model_cfg.patch_size)
    f_all = embed_images(spec, images) if irm_cfg.uses_features else None
    n = ds.n_images
    steps_per_epoch = max(1, -(-n // train_cfg.batch_size))
    opt = autoenc.init_optim(params, base_lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay,
                             warmup_epochs=train_cfg.warmup, total_epochs=train_cfg.epochs)
    history = TrainHistory()
    checksum = spec.checksum()
    for epoch in range(train_cfg.epochs):
        order = epoch_order(n, train_cfg.seed, epoch)
        for step in range(steps_per_epoch):
            index = order[step * train_cfg.batch_size:(step + 1) * train_cfg.batch_size]
            if len(index) == 0:
                continue
            patterns = step_masks(grid, train_cfg, epoch, step, index)
            loss, grads, _ = objective(params, images[index], patterns, spec, irm_cfg,
                                       None if f_all is None else f_all[index])
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch} step {step}")
            t = epoch + (step + 1) / steps_per_epoch
            history.step.append(opt.step)
            history.loss.append(loss)
            history.lr.append(autoenc.lr_at(opt, t))
            autoenc.opt_step(params, grads, opt, t)
        log.debug("epoch %d loss %.5f", epoch, history.loss[-1] if history.loss else float("nan"))
    if spec.checksum() != checksum:
        raise RuntimeError("embedder weights changed during training")
    return params, history
