"""End-to-end training/deployment runs and their CSV reports.

A run builds three synthetic datasets: a training population, a disjoint
deployment population, and fresh clean instances of the deployment
identities used as verification pairs and audit queries. The model is
trained on the first and applied once, without further training, to
masked images of the second.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autoenc, irmloss, privaudit, veriface
from .autoenc import ModelConfig, ModelParams
from .config import PipelineConfig
from .embedder import EmbedderSpec, embed_batch, make_embedder
from .patchmask import PatchGrid, make_mask, mask_image
from .seeding import mix64
from .synthfaces import SynthConfig, gen_dataset
from .tensorio import Dataset, EmbeddingSet, MaskPattern, read_dataset

log = logging.getLogger(__name__)


def synth_config(cfg: PipelineConfig, which: str) -> SynthConfig:
    seed = cfg.train_seed if which == "train" else cfg.deploy_seed
    per = cfg.eval_imgs_per_id if which == "eval" else cfg.imgs_per_id
    offset = cfg.imgs_per_id if which == "eval" else 0
    return SynthConfig(cfg.n_ids, per, cfg.size, seed, cfg.intra_noise, cfg.jitter, offset)


def load_or_generate(cfg: PipelineConfig, which: str) -> Dataset:
    path = getattr(cfg, f"{which}_data")
    return read_dataset(path) if path else gen_dataset(synth_config(cfg, which))


def model_config(cfg: PipelineConfig, channels: int = 1) -> ModelConfig:
    return ModelConfig(cfg.patch_size, cfg.d_enc, cfg.d_dec, cfg.enc_depth, cfg.dec_depth,
                       cfg.mlp_ratio, channels, cfg.seed)


def train_config(cfg: PipelineConfig, ratio: float | None = None) -> irmloss.TrainConfig:
    return irmloss.TrainConfig(cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.weight_decay, cfg.warmup_epochs,
                               cfg.mask_ratio if ratio is None else ratio, cfg.mask_strategy, cfg.seed)


def recognizer_config(cfg: PipelineConfig) -> veriface.RecognizerConfig:
    return veriface.RecognizerConfig(cfg.rec_pool_grid, cfg.rec_hidden, cfg.rec_dim, cfg.rec_epochs,
                                     cfg.rec_batch_size, cfg.rec_lr, cfg.weight_decay)


def loss_embedder(cfg: PipelineConfig, train: Dataset) -> EmbedderSpec:
    """Frozen phi for the feature-space loss.

    "recognizer" pre-trains an identity classifier on the training
    population only and freezes its hidden layer; "random" is the plain
    random-projection extractor.
    """
    if cfg.embedder == "random":
        return make_embedder(cfg.embed_grid, cfg.embed_dim, cfg.embed_seed, train.channels)
    if cfg.embedder == "recognizer":
        rcfg = recognizer_config(cfg)
        rcfg = veriface.RecognizerConfig(cfg.embed_grid, rcfg.hidden, rcfg.dim, rcfg.epochs,
                                         rcfg.batch_size, rcfg.base_lr, rcfg.weight_decay)
        return veriface.train_recognizer(train, rcfg, seed=cfg.embed_seed).as_embedder()
    raise ValueError(f"unknown embedder kind {cfg.embedder!r}")


def audit_embedder(cfg: PipelineConfig, channels: int = 1) -> EmbedderSpec:
    return make_embedder(cfg.audit_grid, cfg.audit_dim, cfg.embed_seed, channels)


def deploy_masks(cfg: PipelineConfig, ds: Dataset, ratio: float | None = None) -> list[MaskPattern]:
    """One mask per deployment image, seeded by (deployment seed, image index)."""
    grid = PatchGrid.for_image(ds.height, ds.width, cfg.patch_size)
    ratio = cfg.mask_ratio if ratio is None else ratio
    return [make_mask(grid, cfg.mask_strategy, ratio, mix64(cfg.deploy_mask_seed, i)) for i in range(ds.n_images)]


def reconstruct(params: ModelParams, ds: Dataset, patterns, batch_size: int = 256) -> Dataset:
    out = np.empty(ds.pixels.shape, dtype=np.float32)
    for start in range(0, ds.n_images, batch_size):
        sl = slice(start, start + batch_size)
        recon, _ = autoenc.forward_batch(params, ds.pixels[sl], patterns[sl])
        out[sl] = np.clip(recon, 0.0, 1.0)
    return Dataset(out, ds.labels)


def masked_dataset(ds: Dataset, patterns, s: int) -> Dataset:
    return Dataset(np.stack([mask_image(ds.pixels[i], patterns[i], s) for i in range(ds.n_images)]), ds.labels)


def verify(cfg: PipelineConfig, train_ds: Dataset, eval_ds: Dataset, pairs: veriface.PairSet):
    """Mean verification accuracy over the configured recognizer seeds."""
    rcfg = recognizer_config(cfg)
    results = []
    for seed in PipelineConfig.int_list(cfg.rec_seeds):
        rec = veriface.train_recognizer(train_ds, rcfg, seed=seed)
        results.append(veriface.verification_accuracy(rec.embed, eval_ds, pairs, cfg.folds, cfg.seed))
    return float(np.mean([r.accuracy for r in results])), results


def embed_set(spec: EmbedderSpec, ds: Dataset) -> EmbeddingSet:
    return EmbeddingSet(embed_batch(spec, ds), ds.labels)


def audit(cfg: PipelineConfig, queries: EmbeddingSet, gallery: EmbeddingSet):
    """(risk at all shared identities, risk curve) for one query/gallery pair."""
    report = privaudit.leakage_risk(queries, privaudit.build_index(gallery), cfg.k, cfg.threads)
    curve = privaudit.risk_curve(queries, gallery, cfg.k, PipelineConfig.int_list(cfg.curve), cfg.seed, cfg.threads)
    return report.risk, curve


@dataclass
class RunReport:
    accuracy: dict = field(default_factory=dict)  # dataset name -> mean verification accuracy
    risk: dict = field(default_factory=dict)  # gallery name -> risk at all identities
    curves: dict = field(default_factory=dict)  # gallery name -> [(n_ids, risk)]
    histories: dict = field(default_factory=dict)  # loss mode -> TrainHistory

    def utility_csv(self) -> str:
        lines = ["dataset,verification_accuracy"] + [f"{k},{v:.6f}" for k, v in self.accuracy.items()]
        return "\n".join(lines) + "\n"

    def privacy_csv(self, k: int) -> str:
        lines = ["gallery,n_ids,k,risk"]
        for name, points in self.curves.items():
            lines += [f"{name},{n},{k},{r:.6f}" for n, r in points]
        return "\n".join(lines) + "\n"


def run_pipeline(cfg: PipelineConfig, modes=("irm", "mse")) -> RunReport:
    """Train one model per loss mode, deploy once, then verify and audit every variant."""
    train, deploy, held = (load_or_generate(cfg, w) for w in ("train", "deploy", "eval"))
    patterns = deploy_masks(cfg, deploy)
    spec = loss_embedder(cfg, train)
    variants = {"original": deploy, "masked": masked_dataset(deploy, patterns, cfg.patch_size)}
    report = RunReport()
    for mode in modes:
        irm_cfg = irmloss.IrmConfig(cfg.beta, mode, cfg.mse_weight)
        params, hist = irmloss.train_facemae(train, model_config(cfg, train.channels), irm_cfg, train_config(cfg), spec)
        report.histories[mode] = hist
        variants[mode] = reconstruct(params, deploy, patterns)
    pairs = veriface.gen_pairs(held, cfg.n_pos, cfg.n_neg, cfg.seed)
    aspec = audit_embedder(cfg, deploy.channels)
    queries = embed_set(aspec, held)
    for name, ds in variants.items():
        report.accuracy[name], _ = verify(cfg, ds, held, pairs)
        report.risk[name], report.curves[name] = audit(cfg, queries, embed_set(aspec, ds))
        log.info("%s: accuracy %.4f risk %.4f", name, report.accuracy[name], report.risk[name])
    return report


def run_sweep(cfg: PipelineConfig, ratios) -> list[tuple[float, float, float]]:
    """(ratio, verification accuracy, leakage risk) with model and deployment both at each ratio."""
    train, deploy, held = (load_or_generate(cfg, w) for w in ("train", "deploy", "eval"))
    spec = loss_embedder(cfg, train)
    irm_cfg = irmloss.IrmConfig(cfg.beta, cfg.loss, cfg.mse_weight)
    pairs = veriface.gen_pairs(held, cfg.n_pos, cfg.n_neg, cfg.seed)
    aspec = audit_embedder(cfg, deploy.channels)
    queries = embed_set(aspec, held)
    rows = []
    for ratio in ratios:
        ratio = float(ratio)
        params, _ = irmloss.train_facemae(train, model_config(cfg, train.channels), irm_cfg,
                                          train_config(cfg, ratio), spec)
        recon = reconstruct(params, deploy, deploy_masks(cfg, deploy, ratio))
        acc, _ = verify(cfg, recon, held, pairs)
        risk, _ = audit(cfg, queries, embed_set(aspec, recon))
        rows.append((ratio, acc, risk))
        log.info("ratio %.2f: accuracy %.4f risk %.4f", ratio, acc, risk)
    return rows


def sweep_csv(rows) -> str:
    lines = ["ratio,verification_accuracy,leakage_risk"] + [f"{r:g},{a:.6f},{k:.6f}" for r, a, k in rows]
    return "\n".join(lines) + "\n"
