"""Command-line front end for the training/deployment pipeline.

Settings resolve as built-in defaults, then ``--config`` file, then flags.
Exit codes: 0 success, 2 argument/config error, 3 file-format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import irmloss, pipeline, privaudit, veriface
from .autoenc import ModelParams
from .config import ConfigError, PipelineConfig, load_config
from .embedder import load_external_embedder, save_embedder
from .irmloss import NumericFailure
from .patchmask import PatchGrid, make_mask
from .seeding import mix64
from .synthfaces import SynthConfig, gen_dataset
from .tensorio import (
    EmbeddingSet,
    FormatError,
    InvariantViolation,
    read_dataset,
    read_embeddings,
    read_masks,
    write_dataset,
    write_embeddings,
    write_masks,
)

log = logging.getLogger("facemae")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4

# flag dest -> config key, for flags that override the config file
_OVERRIDES = {
    "n_ids": "n_ids", "imgs_per_id": "imgs_per_id", "size": "size", "noise": "intra_noise", "jitter": "jitter",
    "ratio": "mask_ratio", "strategy": "mask_strategy", "patch_size": "patch_size",
    "loss": "loss", "beta": "beta", "epochs": "epochs", "batch_size": "batch_size", "lr": "base_lr",
    "k": "k", "curve": "curve", "folds": "folds", "threads": "threads", "rec_seeds": "rec_seeds",
    "ratios": "sweep_ratios",
}


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _same_file(a, b) -> bool:
    try:
        return os.path.samefile(a, b)
    except OSError:
        return False


def _resolve(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            updates[key] = value
    key = getattr(args, "seed_key", None)
    if key and getattr(args, "seed", None) is not None:
        updates[key] = args.seed
    return cfg.replace(**updates)


def _model_embedder(args, cfg: PipelineConfig, train):
    if getattr(args, "embedder", None):
        return load_external_embedder(args.embedder)
    return pipeline.loss_embedder(cfg, train)


# --- subcommands ---------------------------------------------------------

def cmd_synth(args, cfg):
    which = args.population
    sc = pipeline.synth_config(cfg, which)
    seed = sc.seed if args.seed is None else args.seed
    offset = sc.image_offset if args.offset is None else args.offset
    sc = SynthConfig(sc.n_ids, sc.imgs_per_id, sc.size, seed, sc.intra_noise, sc.jitter, offset)
    ds = gen_dataset(sc)
    write_dataset(ds, args.out)
    log.info("wrote %d images of %d identities to %s", ds.n_images, sc.n_ids, args.out)


def cmd_mask(args, cfg):
    ds = read_dataset(args.data)
    grid = PatchGrid.for_image(ds.height, ds.width, cfg.patch_size)
    pats = [make_mask(grid, cfg.mask_strategy, cfg.mask_ratio, mix64(cfg.deploy_mask_seed, i))
            for i in range(ds.n_images)]
    write_masks(pats, args.out)


def cmd_train(args, cfg):
    train = read_dataset(args.data)
    spec = _model_embedder(args, cfg, train)
    irm_cfg = irmloss.IrmConfig(cfg.beta, cfg.loss, cfg.mse_weight)
    params, hist = irmloss.train_facemae(train, pipeline.model_config(cfg, train.channels), irm_cfg,
                                         pipeline.train_config(cfg), spec)
    params.save(args.out)
    if args.history:
        _write_text(args.history, hist.to_csv())
    if args.save_embedder:
        save_embedder(spec, args.save_embedder)


def cmd_reconstruct(args, cfg):
    if args.train_data and _same_file(args.train_data, args.data):
        log.warning("deployment data %s is the training data; deployment should use unseen identities", args.data)
    params = ModelParams.load(args.model)
    ds = read_dataset(args.data)
    if args.masks:
        pats = read_masks(args.masks)
    else:
        cfg = cfg.replace(patch_size=params.cfg.patch_size)
        pats = pipeline.deploy_masks(cfg, ds)
    if len(pats) != ds.n_images:
        raise InvariantViolation(f"{len(pats)} masks for {ds.n_images} images")
    write_dataset(pipeline.reconstruct(params, ds, pats), args.out)


def cmd_embed(args, cfg):
    ds = read_dataset(args.data)
    spec = load_external_embedder(args.embedder) if args.embedder else pipeline.audit_embedder(cfg, ds.channels)
    write_embeddings(pipeline.embed_set(spec, ds), args.out)


def cmd_audit(args, cfg):
    if not args.allow_self and _same_file(args.queries, args.gallery):
        raise ConfigError("queries and gallery are the same file; pass --allow-self to audit a gallery against itself")
    queries, gallery = read_embeddings(args.queries), read_embeddings(args.gallery)
    if not args.allow_self and queries == gallery:
        raise ConfigError("queries and gallery hold identical embeddings; pass --allow-self to audit anyway")
    ids = PipelineConfig.int_list(cfg.curve)
    if ids:
        points = privaudit.risk_curve(queries, gallery, cfg.k, ids, cfg.seed, cfg.threads)
    else:
        shared = len(np.intersect1d(queries.labels, gallery.labels))
        rep = privaudit.leakage_risk(queries, privaudit.build_index(gallery), cfg.k, cfg.threads)
        points = [(shared, rep.risk)]
    _write_text(args.out_csv, privaudit.curve_csv(points, cfg.k))


def cmd_verify(args, cfg):
    held, train = read_dataset(args.data), read_dataset(args.train_data)
    n_pos = n_neg = args.pairs // 2 if args.pairs else None
    pairs = veriface.gen_pairs(held, n_pos or cfg.n_pos, n_neg or cfg.n_neg, cfg.seed)
    mean, results = pipeline.verify(cfg, train, held, pairs)
    text = results[0].to_csv() if len(results) == 1 else _multi_seed_csv(cfg, results, mean)
    _write_text(args.out_csv, text)


def _multi_seed_csv(cfg, results, mean) -> str:
    lines = ["fold,threshold,accuracy"]
    for seed, res in zip(PipelineConfig.int_list(cfg.rec_seeds), results):
        lines += [f"{seed}:{i},{t:.10g},{a:.6f}" for i, (t, a) in enumerate(zip(res.thresholds, res.fold_accuracy))]
    lines.append(f"mean,,{mean:.6f}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args, cfg):
    ratios = PipelineConfig.float_list(cfg.sweep_ratios)
    for r in ratios:
        if not 0 <= r < 1:
            raise ConfigError(f"sweep ratio {r} outside [0, 1)")
    _write_text(args.out_csv, pipeline.sweep_csv(pipeline.run_sweep(cfg, ratios)))


def cmd_run(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = pipeline.run_pipeline(cfg)
    (out / "utility.csv").write_text(report.utility_csv(), encoding="utf-8")
    (out / "privacy.csv").write_text(report.privacy_csv(cfg.k), encoding="utf-8")
    for mode, hist in report.histories.items():
        (out / f"history_{mode}.csv").write_text(hist.to_csv(), encoding="utf-8")


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--threads", type=int, help="worker cap for parallel sections")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="facemae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic identity dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--population", choices=("train", "deploy", "eval"), default="train")
    s.add_argument("--n-ids", type=int)
    s.add_argument("--imgs-per-id", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--jitter", type=int)
    s.add_argument("--offset", type=int, help="first per-identity image index")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth, seed_key=None)

    s = sub.add_parser("mask", parents=[common], help="sample one mask per image")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratio", type=float)
    s.add_argument("--strategy", choices=("random", "eye", "mouth"))
    s.add_argument("--patch-size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_mask, seed_key="deploy_mask_seed")

    s = sub.add_parser("train", parents=[common], help="train the reconstruction model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss", choices=irmloss.MODES)
    s.add_argument("--beta", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--ratio", type=float)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--embedder", help="FMPR file holding a frozen feature extractor")
    s.add_argument("--save-embedder", help="write the feature extractor used for the loss")
    s.add_argument("--history", help="loss history CSV (step,loss,lr)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train, seed_key="seed")

    s = sub.add_parser("reconstruct", parents=[common], help="deploy a trained model on masked images")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--masks", help="FMMK file; default samples one mask per image")
    s.add_argument("--train-data", help="training dataset, used to warn on train/deploy overlap")
    s.add_argument("--ratio", type=float)
    s.add_argument("--strategy", choices=("random", "eye", "mouth"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_reconstruct, seed_key="deploy_mask_seed")

    s = sub.add_parser("embed", parents=[common], help="embed a dataset with a frozen extractor")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--embedder", help="FMPR feature extractor; default is the random audit extractor")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("audit", parents=[common], help="membership leakage risk")
    s.add_argument("--queries", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--curve", help="comma-separated identity counts; empty for a single row")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-csv")
    s.add_argument("--allow-self", action="store_true")
    s.set_defaults(func=cmd_audit, seed_key="seed")

    s = sub.add_parser("verify", parents=[common], help="10-fold pair verification of a trained recognizer")
    s.add_argument("--data", required=True, help="clean evaluation images the pairs are drawn from")
    s.add_argument("--train-data", required=True, help="dataset the recognizer is trained on")
    s.add_argument("--pairs", type=int, help="total pair count, split evenly into positives and negatives")
    s.add_argument("--folds", type=int)
    s.add_argument("--rec-seeds", help="comma-separated recognizer seeds")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_verify, seed_key="seed")

    s = sub.add_parser("sweep", parents=[common], help="mask-ratio sweep")
    s.add_argument("--ratios", help="comma-separated mask ratios")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("run", parents=[common], help="full pinned pipeline: utility and privacy reports")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        with threadpool_limits(limits=max(1, cfg.threads)):
            args.func(args, cfg)
    except (ConfigError, InvariantViolation, FileNotFoundError) as exc:
        print(f"facemae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"facemae: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericFailure, FloatingPointError) as exc:
        print(f"facemae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"facemae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
