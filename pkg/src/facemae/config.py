"""Flat ``key = value`` pipeline configuration with '#' comments.

Every key has a typed default; unknown keys and unparsable values raise
``ConfigError`` naming the offending key and line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # data
    train_data: str = ""
    deploy_data: str = ""
    eval_data: str = ""
    n_ids: int = 50
    imgs_per_id: int = 20
    eval_imgs_per_id: int = 20
    size: int = 32
    train_seed: int = 1
    deploy_seed: int = 2
    intra_noise: float = 0.05
    jitter: int = 2
    # masking
    mask_ratio: float = 0.75
    mask_strategy: str = "random"
    deploy_mask_seed: int = 99
    # autoencoder
    patch_size: int = 8
    d_enc: int = 64
    d_dec: int = 32
    enc_depth: int = 2
    dec_depth: int = 1
    mlp_ratio: int = 2
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: float = 6.0
    # loss
    loss: str = "irm"
    beta: float = 1.0
    mse_weight: float = 1.0
    # feature extractor used by the loss: "random" or "recognizer"
    embedder: str = "recognizer"
    embed_grid: int = 8
    embed_dim: int = 64
    embed_seed: int = 0
    # privacy audit
    k: int = 2
    curve: str = "10,20,50"
    audit_grid: int = 8
    audit_dim: int = 64
    # verification
    n_pos: int = 3000
    n_neg: int = 3000
    folds: int = 10
    rec_pool_grid: int = 8
    rec_hidden: int = 128
    rec_dim: int = 64
    rec_epochs: int = 30
    rec_batch_size: int = 64
    rec_lr: float = 2e-3
    rec_seeds: str = "0,1,2"
    # sweep
    sweep_ratios: str = "0.3,0.5,0.75,0.9"
    threads: int = 1

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    @staticmethod
    def int_list(text: str) -> list[int]:
        return [int(t) for t in text.split(",") if t.strip()]

    @staticmethod
    def float_list(text: str) -> list[float]:
        return [float(t) for t in text.split(",") if t.strip()]


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def parse_config(text: str, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _CASTS[_TYPES[key]](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for key {key!r}") from None
    return base.replace(**values)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
