"""Command-line entry point: ``pixalign {train,sample,analyze,verify,make-dataset}``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, InvalidInputError, PixAlignError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
RUN_ROOT_ENV = "PIXALIGN_RUN_ROOT"
ANALYZE_MODES = ("centroids", "denoise-probe", "metrics", "ablate-mask")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from .config import RunConfig
    from .data import make_dataset
    from .sampler import sample, write_samples
    from .trainer import Trainer

    cfg = RunConfig.from_file(args.config, args.set)
    text = cfg.canonical_text()
    if args.dry_run:
        print(text, end="")
        print(f"# config_hash = {cfg.config_hash}")
        return EXIT_OK
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / cfg.config_hash[:12]
    for sub in ("checkpoints", "samples", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.canonical").write_text(text)
    data = make_dataset(cfg.data)
    trainer = Trainer(cfg.model, cfg.train, cfg.alignment, config_hash=cfg.config_hash)
    every = max(1, cfg.train.steps // 10)
    trainer.fit(data, run_dir=run_dir,
                log=lambda m: m["step"] % every == 0 and _log(f"step {m['step']:6d}  total {m['total']:.5f}"))
    if args.sample:
        classes = torch.arange(cfg.model.num_classes)
        gen = torch.Generator().manual_seed(cfg.train.seed)
        imgs = sample(trainer.eval_model(cfg.sampler.ema), cfg.sampler, classes, gen)
        write_samples(imgs, run_dir / "samples", "final", cfg.train.seed, cfg.sampler.to_dict())
    _log(f"run directory: {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- sample

def _parse_interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--interval expects 'lo,hi', got {text!r}") from None
    return lo, hi


def _parse_classes(text: str | None, num_classes: int) -> list[int]:
    if not text:
        return list(range(num_classes))
    try:
        ids = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--classes expects comma-separated integers, got {text!r}") from None
    bad = [c for c in ids if not 0 <= c < num_classes]
    if bad:
        raise UsageError(f"class ids {bad} outside [0, {num_classes})")
    return ids


def cmd_sample(args) -> int:
    from .sampler import SamplerConfig, sample, write_samples
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    ema = None if args.ema in ("none", "raw") else args.ema
    scfg = SamplerConfig(steps=args.steps, guidance_scale=args.w, guidance_interval=_parse_interval(args.interval),
                         ema=args.ema)
    model = ckpt.backbone(ema)
    classes = _parse_classes(args.classes, model.cfg.num_classes)
    gen = torch.Generator().manual_seed(args.seed)
    imgs = sample(model, scfg, torch.tensor(classes), gen)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "samples"
    stem = f"samples_seed{args.seed}"
    write_samples(imgs, out, stem, args.seed, {**scfg.to_dict(), "classes": classes,
                                               "checkpoint_hash": ckpt.config_hash, "step": ckpt.step})
    print(out / f"{stem}.png")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def _feature_set(data_dir: Path, encoder=None):
    """Pooled features for a dataset directory: its feature store if present, else ``encoder``."""
    from .alignment import LossyPoolEncoder
    from .analysis import FeatureSet
    from .data import load_dataset
    from .features import FeatureStore

    ds = load_dataset(data_dir)
    if (data_dir / "features").exists() and encoder is None:
        feats = FeatureStore.open(data_dir / "features").read_many(ds.ids)
    else:
        enc = encoder or LossyPoolEncoder(ds.images.shape[-1], ds.images.shape[1]).freeze()
        with torch.no_grad():
            feats = enc.features(ds.images).numpy()
    return ds, FeatureSet.from_patch_features(ds.ids, feats, ds.labels.numpy())


def _analyze_centroids(args, out: Path) -> None:
    from .analysis import subset_reports, write_subset_csv

    _, fs = _feature_set(Path(args.input))
    reports = subset_reports(fs, args.k)
    path = write_subset_csv(reports, out / "subsets.csv")
    print(f"{len(reports)} subset reports -> {path}")


def _analyze_denoise_probe(args, out: Path) -> None:
    from .analysis import AnalysisConfig, denoise_from_t, diversity_score, subset_reports, write_csv
    from .sampler import SamplerConfig
    from .trainer import load_checkpoint

    if not args.data:
        raise UsageError("denoise-probe needs --data DATASET_DIR")
    acfg = AnalysisConfig()
    ckpt = load_checkpoint(args.input)
    model = ckpt.backbone(None if args.ema in ("none", "raw") else args.ema)
    ds, fs = _feature_set(Path(args.data))
    pos = {sid: i for i, sid in enumerate(ds.ids)}
    scfg = SamplerConfig(steps=acfg.probe_steps, guidance_scale=acfg.probe_w)
    rows = []
    for rep in subset_reports(fs, args.k):
        for name, members in (("most", rep.most_k), ("least", rep.least_k)):
            idx = torch.tensor([pos[s] for s in members])
            gen = torch.Generator().manual_seed(args.seed * 1000 + rep.class_id)
            den = denoise_from_t(model, ds.images[idx], ds.labels[idx], args.t0, scfg, gen)
            rows.append({"class_id": rep.class_id, "subset": name, "t0": args.t0,
                         "input_diversity": diversity_score(ds.images[idx].reshape(len(idx), -1).numpy()),
                         "output_diversity": diversity_score(den.reshape(len(idx), -1).numpy())})
    header = f"denoise probe from t0={args.t0}; diversity = mean pairwise pixel distance within the subset"
    print(write_csv(rows, out / "denoise_probe.csv", header))


def _analyze_metrics(args, out: Path) -> None:
    from .alignment import LossyPoolEncoder
    from .analysis import diversity_score, frechet_distance, pooled_features, write_csv
    from .data import load_dataset
    from .sampler import read_samples

    if not args.data:
        raise UsageError("metrics needs --data DATASET_DIR as the reference set")
    samples = read_samples(args.input)
    ref = load_dataset(args.data)
    enc = LossyPoolEncoder(ref.images.shape[-1], ref.images.shape[1]).freeze()
    fa, fb = pooled_features(enc, samples), pooled_features(enc, ref.images)
    rows = [{"n_samples": samples.shape[0], "n_reference": ref.images.shape[0],
             "frechet": frechet_distance(fa, fb), "feature_diversity": diversity_score(fa),
             "pixel_diversity": diversity_score(samples.reshape(samples.shape[0], -1).numpy())}]
    header = ("Fréchet distance between pooled lossy-pool encoder features of the samples and the reference "
              "dataset (all images); diversity = mean pairwise Euclidean distance")
    print(write_csv(rows, out / "metrics.csv", header))


def _analyze_ablate_mask(args, out: Path) -> None:
    from .analysis import run_mask_ablation, table_as_columns, write_csv
    from .config import RunConfig
    from .data import make_dataset

    cfg = RunConfig.from_file(args.input, args.set)
    data = make_dataset(cfg.data)
    table = run_mask_ablation(cfg.model, cfg.train, cfg.alignment, data, cfg.analysis.ratios, cfg.analysis.seeds,
                              sampler_cfg=cfg.sampler, samples_per_class=cfg.analysis.samples_per_class,
                              out_dir=out, ema=cfg.sampler.ema)
    wide = [{"metric": key, **table_as_columns(table, key)} for key in ("frechet_mean", "l_denoise_mean")]
    print(write_csv(wide, out / "ablation_wide.csv", "rows: metric; columns: mask ratio"))


def cmd_analyze(args) -> int:
    if args.mode not in ANALYZE_MODES:
        raise UsageError(f"unknown mode {args.mode!r}; choose from {', '.join(ANALYZE_MODES)}")
    if not Path(args.input).exists():
        raise InvalidInputError(f"input not found: {args.input}")
    out = Path(args.out) if args.out else run_root() / "reports"
    out.mkdir(parents=True, exist_ok=True)
    {"centroids": _analyze_centroids, "denoise-probe": _analyze_denoise_probe, "metrics": _analyze_metrics,
     "ablate-mask": _analyze_ablate_mask}[args.mode](args, out)
    return EXIT_OK


# ---------------------------------------------------------------- verify / make-dataset

def cmd_verify(args) -> int:
    from .verify import format_table, run_checks

    results = run_checks()
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_make_dataset(args) -> int:
    from .alignment import LossyPoolEncoder
    from .data import DATASET_KINDS, make_shapes, make_tightmode, write_dataset

    if args.kind not in DATASET_KINDS:
        raise UsageError(f"unknown dataset kind {args.kind!r}; choose from {', '.join(DATASET_KINDS)}")
    if args.kind == "shapes":
        ds = make_shapes(args.num_classes or 10, args.per_class, args.image_size, args.seed)
    else:
        ds = make_tightmode(args.num_classes or 4, args.per_class, args.image_size, args.seed)
    enc = LossyPoolEncoder(args.image_size, 3).freeze() if args.features else None
    out = write_dataset(ds, args.out_dir, args.kind, args.seed, encoder=enc)
    print(f"{len(ds)} images -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pixalign", description="Pixel-space flow matching with masked representation alignment.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one run from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--run-dir", default=None, help=f"defaults to ${RUN_ROOT_ENV}/<config hash>")
    t.add_argument("--dry-run", action="store_true", help="validate and print the canonical config")
    t.add_argument("--no-sample", dest="sample", action="store_false", help="skip the end-of-run sample grid")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--w", type=float, default=1.5, help="guidance scale")
    s.add_argument("--interval", default="0.1,1.0", help="guidance interval lo,hi")
    s.add_argument("--ema", default="0.9999", help="EMA decay, or 'none' for raw parameters")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", default=None, help="comma-separated class ids (default: all)")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="centroid subsets, denoise probes, metrics, mask ablation")
    a.add_argument("input", help="dataset dir (centroids), checkpoint (denoise-probe), sample file (metrics), "
                                 "or config (ablate-mask)")
    a.add_argument("--mode", required=True)
    a.add_argument("--data", default=None, help="dataset directory for denoise-probe and metrics")
    a.add_argument("--k", type=int, default=16)
    a.add_argument("--t0", type=float, default=0.2)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--ema", default="0.9999")
    a.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="gradient, integrator and invariant self-checks")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("make-dataset", help="write a synthetic dataset to disk")
    m.add_argument("kind")
    m.add_argument("out_dir")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--num-classes", type=int, default=None)
    m.add_argument("--per-class", type=int, default=64)
    m.add_argument("--image-size", type=int, default=32)
    m.add_argument("--features", action="store_true", help="also write lossy-pool feature shards")
    m.set_defaults(func=cmd_make_dataset)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except PixAlignError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
