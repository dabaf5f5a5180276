"""Downstream utility: a small trainable recognizer and 10-fold pair verification.

The recognizer is pool -> linear -> tanh -> linear (embedding), followed by
a linear identity classifier trained with softmax cross-entropy and the same
AdamW machinery as the autoencoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autoenc
from .embedder import EmbedderSpec, avgpool
from .seeding import mix64, rng_for
from .tensorio import Dataset, InvariantViolation


class InsufficientData(ValueError):
    pass


@dataclass
class PairSet:
    a: np.ndarray
    b: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        self.same = np.asarray(self.same, dtype=bool)
        if np.any(self.a == self.b):
            raise InvariantViolation("a pair must join two distinct images")

    def __len__(self):
        return len(self.same)

    @property
    def n_pos(self) -> int:
        return int(self.same.sum())

    @property
    def n_neg(self) -> int:
        return int((~self.same).sum())


def gen_pairs(ds: Dataset, n_pos: int, n_neg: int, seed: int) -> PairSet:
    """Sample distinct positive and negative pairs without replacement."""
    labels = ds.labels
    n = len(labels)
    ii, jj = np.triu_indices(n, k=1)
    same = labels[ii] == labels[jj]
    pos = np.flatnonzero(same)
    if n_pos > len(pos):
        raise InsufficientData(f"requested {n_pos} positive pairs, only {len(pos)} exist")
    n_neg_total = len(same) - len(pos)
    if n_neg > n_neg_total:
        raise InsufficientData(f"requested {n_neg} negative pairs, only {n_neg_total} exist")
    rng = rng_for(seed, 0x9A12)
    pos_pick = rng.choice(pos, size=n_pos, replace=False)
    neg_pick = rng.choice(np.flatnonzero(~same), size=n_neg, replace=False)
    pick = np.concatenate([pos_pick, neg_pick])
    return PairSet(ii[pick], jj[pick], same[pick])


def _best_threshold(sims: np.ndarray, same: np.ndarray) -> tuple[float, float]:
    """Threshold maximizing accuracy of ``sim > t``, scanning every midpoint.

    Candidates include one point below the minimum and one above the maximum
    so that all-same and all-different decisions are both reachable. Ties go
    to the smallest threshold.
    """
    u = np.unique(sims)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    pos = np.sort(sims[same])
    neg = np.sort(sims[~same])
    tp = len(pos) - np.searchsorted(pos, cands, side="right")
    tn = np.searchsorted(neg, cands, side="right")
    acc = (tp + tn) / len(sims)
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best])


def accuracy_at(sims, same, threshold: float) -> float:
    return float(((np.asarray(sims) > threshold) == np.asarray(same)).mean())


def cosine(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    return (x[a] * x[b]).sum(axis=1) / (norms[a] * norms[b])


@dataclass
class VerificationResult:
    accuracy: float
    thresholds: list = field(default_factory=list)
    fold_accuracy: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["fold,threshold,accuracy"]
        lines += [f"{i},{t:.10g},{a:.6f}" for i, (t, a) in enumerate(zip(self.thresholds, self.fold_accuracy))]
        lines.append(f"mean,,{self.accuracy:.6f}")
        return "\n".join(lines) + "\n"


def verification_accuracy(embed_fn, ds: Dataset, pairs: PairSet, folds: int = 10, seed: int = 0) -> VerificationResult:
    """Mean held-out accuracy of per-fold best thresholds on cosine similarity."""
    if folds < 2:
        raise InsufficientData("need at least two folds")
    if len(pairs) < folds:
        raise InsufficientData(f"{len(pairs)} pairs cannot fill {folds} folds")
    feats = embed_fn(ds.pixels)
    sims = cosine(feats, pairs.a, pairs.b)
    order = rng_for(seed, 0xF01D).permutation(len(pairs))
    shards = np.array_split(order, folds)
    result = VerificationResult(0.0)
    for k, test in enumerate(shards):
        train = np.concatenate([s for j, s in enumerate(shards) if j != k])
        thr, _ = _best_threshold(sims[train], pairs.same[train])
        result.thresholds.append(thr)
        result.fold_accuracy.append(accuracy_at(sims[test], pairs.same[test], thr))
    result.accuracy = float(np.mean(result.fold_accuracy))
    return result


# --- recognizer ---------------------------------------------------------

@dataclass(frozen=True)
class RecognizerConfig:
    pool_grid: int = 8
    hidden: int = 128
    dim: int = 64
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_epochs: float | None = None  # None -> 20% of epochs


@dataclass
class RecognizerParams:
    cfg: RecognizerConfig
    tensors: dict
    history: list = field(default_factory=list)

    def embed(self, images) -> np.ndarray:
        return _embed_forward(self.tensors, self.cfg, images)[0]

    def as_embedder(self) -> EmbedderSpec:
        """Hidden tanh layer as a frozen feature extractor."""
        t = self.tensors
        return EmbedderSpec(self.cfg.pool_grid, t["rec.l1.w"].T, t["rec.l1.b"])


def _images(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 3 else x


def _embed_forward(t: dict, cfg: RecognizerConfig, images):
    p = avgpool(_images(images), cfg.pool_grid)
    h = np.tanh(p @ t["rec.l1.w"] + t["rec.l1.b"])
    e = h @ t["rec.l2.w"] + t["rec.l2.b"]
    return e, (p, h)


def init_recognizer(cfg: RecognizerConfig, n_classes: int, channels: int, seed: int) -> RecognizerParams:
    rng = rng_for(seed, 0x2EC0)
    fan = cfg.pool_grid * cfg.pool_grid * channels
    t = {
        "rec.l1.w": rng.standard_normal((fan, cfg.hidden)) / math.sqrt(fan),
        "rec.l1.b": np.zeros(cfg.hidden),
        "rec.l2.w": rng.standard_normal((cfg.hidden, cfg.dim)) / math.sqrt(cfg.hidden),
        "rec.l2.b": np.zeros(cfg.dim),
        "cls.w": rng.standard_normal((cfg.dim, n_classes)) / math.sqrt(cfg.dim),
        "cls.b": np.zeros(n_classes),
    }
    return RecognizerParams(cfg, t)


def recognizer_loss(t: dict, cfg: RecognizerConfig, images, targets, need_grad: bool = True):
    """Softmax cross-entropy; returns (loss, grads, logits)."""
    e, (p, h) = _embed_forward(t, cfg, images)
    logits = e @ t["cls.w"] + t["cls.b"]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(targets)
    loss = float(-logp[np.arange(n), targets].mean())
    if not need_grad:
        return loss, None, logits
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    g = {"cls.w": e.T @ dlogits, "cls.b": dlogits.sum(axis=0)}
    de = dlogits @ t["cls.w"].T
    g["rec.l2.w"] = h.T @ de
    g["rec.l2.b"] = de.sum(axis=0)
    dpre = (de @ t["rec.l2.w"].T) * (1.0 - h * h)
    g["rec.l1.w"] = p.T @ dpre
    g["rec.l1.b"] = dpre.sum(axis=0)
    return loss, g, logits


def train_recognizer(ds: Dataset, cfg: RecognizerConfig = RecognizerConfig(), seed: int = 0) -> RecognizerParams:
    classes, targets = np.unique(ds.labels, return_inverse=True)
    if len(classes) < 2:
        raise InsufficientData("recognizer training needs at least two identities")
    rec = init_recognizer(cfg, len(classes), ds.channels, seed)
    images = ds.pixels.astype(np.float64)
    n = ds.n_images
    steps = max(1, -(-n // cfg.batch_size))
    warmup = 0.2 * cfg.epochs if cfg.warmup_epochs is None else cfg.warmup_epochs
    opt = autoenc.init_optim(rec.tensors, base_lr=cfg.base_lr, weight_decay=cfg.weight_decay,
                             warmup_epochs=warmup, total_epochs=cfg.epochs)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(mix64(seed, 0x2EC1, epoch)).permutation(n)
        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            loss, grads, _ = recognizer_loss(rec.tensors, cfg, images[idx], targets[idx])
            rec.history.append(loss)
            autoenc.opt_step(rec.tensors, grads, opt, epoch + (step + 1) / steps)
    return rec


def training_accuracy(rec: RecognizerParams, ds: Dataset) -> float:
    _, targets = np.unique(ds.labels, return_inverse=True)
    _, _, logits = recognizer_loss(rec.tensors, rec.cfg, ds.pixels, targets, need_grad=False)
    return float((logits.argmax(axis=1) == targets).mean())
