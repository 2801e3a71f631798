"""Diagnostics for feature-space collapse: centroid subsets, denoise probes, metrics, ablations."""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import pdist
from torch import Tensor

from .errors import DegenerateClassError, InvalidInputError, NumericalError
from .flow import T_EPS, interpolate
from .sampler import SamplerConfig, VelocityField, integrate

FRECHET_REG = 1e-6


@dataclass
class AnalysisConfig:
    k: int = 16
    t0: float = 0.2
    ratios: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    seeds: tuple[int, ...] = (0, 1, 2)
    samples_per_class: int = 16
    probe_steps: int = 20
    probe_w: float = 1.0

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.seeds = tuple(int(s) for s in self.seeds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["seeds"] = list(self.seeds)
        return d


# ---------------------------------------------------------------- centroid subsets

@dataclass
class FeatureSet:
    ids: list
    pooled: np.ndarray  # [n, d], unit rows
    labels: np.ndarray

    def __post_init__(self):
        self.pooled = np.asarray(self.pooled, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.ids) < 1 or self.pooled.shape[0] != len(self.ids) or self.labels.shape[0] != len(self.ids):
            raise InvalidInputError("FeatureSet needs >= 1 row and matching ids/labels")

    @classmethod
    def from_patch_features(cls, ids, feats, labels) -> "FeatureSet":
        """Mean over the patch grid, then L2-normalise."""
        f = np.asarray(feats, dtype=np.float64)
        pooled = f.reshape(f.shape[0], -1, f.shape[-1]).mean(axis=1)
        norms = np.linalg.norm(pooled, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateClassError("zero pooled feature vector")
        return cls(list(ids), pooled / norms, np.asarray(labels))

    def members(self, class_id) -> tuple[list, np.ndarray]:
        idx = [i for i in np.flatnonzero(self.labels == class_id)]
        idx.sort(key=lambda i: self.ids[i])
        return [self.ids[i] for i in idx], self.pooled[idx]


@dataclass
class SubsetReport:
    class_id: int
    centroid: np.ndarray
    most_k: list
    least_k: list
    similarity: dict = field(default_factory=dict)


def class_centroid(feats: FeatureSet, class_id) -> np.ndarray:
    ids, rows = feats.members(class_id)
    if not ids:
        raise InvalidInputError(f"class {class_id} has no members")
    mean = rows.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateClassError(f"class {class_id} has a zero mean feature")
    return mean / norm


def select_subsets(feats: FeatureSet, centroid: np.ndarray, k: int, class_id) -> SubsetReport:
    """Top-k and bottom-k members by cosine similarity to ``centroid``; ties go to the smaller id."""
    ids, rows = feats.members(class_id)
    if k > len(ids):
        raise InvalidInputError(f"k={k} exceeds class size {len(ids)}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    sims = rows @ (centroid / np.linalg.norm(centroid))
    sim = {i: float(s) for i, s in zip(ids, sims)}
    most = sorted(ids, key=lambda i: (-sim[i], i))[:k]
    least = sorted(ids, key=lambda i: (sim[i], i))[:k]
    return SubsetReport(int(class_id), centroid, most, least, sim)


def subset_reports(feats: FeatureSet, k: int) -> list[SubsetReport]:
    return [select_subsets(feats, class_centroid(feats, c), k, c) for c in sorted(set(feats.labels.tolist()))]


def write_subset_csv(reports: list[SubsetReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "subset", "rank", "sample_id", "similarity"])
        for rep in reports:
            for name, lst in (("most", rep.most_k), ("least", rep.least_k)):
                for rank, sid in enumerate(lst):
                    w.writerow([rep.class_id, name, rank, sid, f"{rep.similarity[sid]:.8f}"])
    return path


# ---------------------------------------------------------------- denoise probe

def remaining_grid(t0: float, steps: int) -> Tensor:
    """``t0`` followed by the points of the ``steps``-step linear grid that lie after it."""
    grid = torch.linspace(0.0, 1.0, steps + 1, dtype=torch.float64)
    rest = grid[grid > t0 + 1e-9]
    return torch.cat([torch.tensor([t0], dtype=torch.float64), rest])


@torch.no_grad()
def denoise_from_t(model, images: Tensor, class_ids, t0: float, cfg: SamplerConfig,
                   generator: torch.Generator) -> Tensor:
    """Noise clean images to ``t0`` and integrate the flow from there to t=1."""
    if not 0 < t0 < 1:
        raise InvalidInputError("t0 must lie in (0, 1)")
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    x = interpolate(images, eps, t0)
    field = VelocityField(model, torch.as_tensor(class_ids), cfg.guidance_scale, cfg.guidance_interval)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        out, _ = integrate(field, x, remaining_grid(t0, cfg.steps))
    finally:
        if hasattr(model, "train"):
            model.train(was_training)
    return out.clamp(-1, 1) if cfg.clamp else out


# ---------------------------------------------------------------- metrics

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise NumericalError("covariance is not positive semi-definite")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_stats(mu_a, sigma_a, mu_b, sigma_b, reg: float = FRECHET_REG) -> float:
    d = mu_a.shape[0]
    sa = sigma_a + reg * np.eye(d)
    sb = sigma_b + reg * np.eye(d)
    root_a = _sqrtm_psd(sa)
    # tr sqrt(Sa Sb) = tr sqrt(Sa^1/2 Sb Sa^1/2), the latter symmetric PSD
    inner = root_a @ sb @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise NumericalError("product covariance is not positive semi-definite")
    tr_sqrt = float(np.sqrt(np.clip(w, 0, None)).sum())
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt)


def gaussian_stats(feats) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise InvalidInputError("need a [n >= 2, d] feature matrix")
    return f.mean(axis=0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])


def frechet_distance(feats_a, feats_b, reg: float = FRECHET_REG) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets."""
    mu_a, s_a = gaussian_stats(feats_a)
    mu_b, s_b = gaussian_stats(feats_b)
    if mu_a.shape != mu_b.shape:
        raise InvalidInputError("feature widths differ")
    return frechet_from_stats(mu_a, s_a, mu_b, s_b, reg)


def diversity_score(feats) -> float:
    """Mean pairwise Euclidean distance between rows."""
    f = np.asarray(feats, dtype=np.float64)
    f = f.reshape(f.shape[0], -1) if f.ndim > 1 else f[:, None]
    if f.shape[0] < 2:
        raise InvalidInputError("diversity needs at least two rows")
    return float(pdist(f).mean())


def pooled_features(encoder, images: Tensor) -> np.ndarray:
    """Unit-norm patch-mean encoder features, one row per image."""
    with torch.no_grad():
        f = encoder.features(images.float())
    pooled = f.reshape(f.shape[0], -1, f.shape[-1]).mean(1).double()
    return (pooled / pooled.norm(dim=1, keepdim=True).clamp_min(1e-12)).numpy()


def write_csv(rows: list[dict], path, header: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


# ---------------------------------------------------------------- experiment runners

def _train_run(model_cfg, train_cfg, branch, data, steps, run_dir=None):
    from .trainer import Trainer

    trainer = Trainer(model_cfg, train_cfg, branch)
    trainer.fit(data, steps, run_dir=run_dir)
    return trainer


def evaluate_generation(trainer, data, cfg: SamplerConfig, encoder, samples_per_class: int, seed: int,
                        ema: str | None = None) -> dict:
    """Sample ``samples_per_class`` images per class and compare them with the data in encoder space."""
    from .sampler import sample

    model = trainer.eval_model(ema)
    classes = sorted(set(data.labels.tolist()))
    ids = torch.tensor([c for c in classes for _ in range(samples_per_class)])
    gen = torch.Generator().manual_seed(seed)
    imgs = sample(model, cfg, ids, gen)
    fd = frechet_distance(pooled_features(encoder, imgs), pooled_features(encoder, data.images))
    return {"frechet": fd, "pixel_diversity": diversity_score(imgs.reshape(imgs.shape[0], -1).numpy())}


def run_mask_ablation(model_cfg, train_cfg, branch, data, ratios, seeds, steps: int | None = None,
                      sampler_cfg: SamplerConfig | None = None, samples_per_class: int = 8, out_dir=None,
                      eval_encoder=None, ema: str | None = None) -> list[dict]:
    """Train one adapter run per (ratio, seed) and tabulate final metrics per ratio.

    Each table row holds the ratio, the mean over seeds of the final training
    losses, and the mean Fréchet distance between generated and real images in
    the evaluation encoder's pooled feature space.
    """
    from .alignment import LossyPoolEncoder

    ratios = list(ratios)
    seeds = list(seeds)
    if not ratios:
        raise InvalidInputError("ratio list is empty")
    if not seeds:
        raise InvalidInputError("seed list is empty")
    if any(not 0 <= r < 1 for r in ratios):
        raise InvalidInputError("ratios must lie in [0, 1)")
    sampler_cfg = sampler_cfg or SamplerConfig(steps=10, guidance_scale=1.0)
    eval_encoder = eval_encoder or LossyPoolEncoder(model_cfg.image_size, model_cfg.channels).freeze()
    runs = []
    for r in ratios:
        for s in seeds:
            b = replace(branch, variant="mta", mask_ratio=r)
            tc = replace(train_cfg, seed=s)
            run_dir = None if out_dir is None else Path(out_dir) / f"ratio_{r:.2f}_seed_{s}"
            trainer = _train_run(model_cfg, tc, b, data, steps, run_dir)
            last = trainer_history_tail(run_dir)
            ev = evaluate_generation(trainer, data, sampler_cfg, eval_encoder, samples_per_class, seed=s, ema=ema)
            runs.append({"ratio": r, "seed": s, **last, **ev})
    table = []
    for r in ratios:
        rs = [x for x in runs if x["ratio"] == r]
        row = {"ratio": r, "n_seeds": len(rs)}
        for key in ("l_denoise", "l_align", "frechet"):
            vals = [x[key] for x in rs if x.get(key) is not None]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else float("nan")
        table.append(row)
    if out_dir is not None:
        header = ("mask-ratio ablation on a synthetic set; frechet = Fréchet distance between pooled "
                  "lossy-pool encoder features of generated and training images (lower is better)")
        write_csv(runs, Path(out_dir) / "ablation_runs.csv", header)
        write_csv(table, Path(out_dir) / "ablation_table.csv", header)
        plot_xy([r["ratio"] for r in table], [r["frechet_mean"] for r in table], "mask ratio",
                "Fréchet distance (features)", Path(out_dir) / "ablation_frechet.png")
    return table


def trainer_history_tail(run_dir, window: int = 20) -> dict:
    """Mean of the last ``window`` logged losses for a run directory (empty without one)."""
    if run_dir is None:
        return {}
    lines = Path(run_dir, "metrics.jsonl").read_text().splitlines()[-window:]
    recs = [json.loads(l) for l in lines]
    out = {"l_denoise": statistics.fmean(r["l_denoise"] for r in recs)}
    if "l_align" in recs[0]:
        out["l_align"] = statistics.fmean(r["l_align"] for r in recs)
    return out


def table_as_columns(table: list[dict], key: str = "frechet_mean") -> dict:
    """Ratio-per-column view: ``{"0.10": value, ...}``."""
    return {f"{row['ratio']:.2f}": row[key] for row in table}


def plot_xy(xs, ys, xlabel, ylabel, path, labels=None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    if labels is None:
        ax.plot(xs, ys, marker="o")
    else:
        ax.bar(range(len(ys)), ys)
        ax.set_xticks(range(len(ys)), labels)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def tight_mode_diversity(trainer, data, t0: float, cfg: SamplerConfig, seed: int, ema: str | None = None) -> dict:
    """Denoise every tight-mode image from ``t0`` and measure per-class pixel diversity of the results."""
    model = trainer.eval_model(ema)
    out = {}
    for c in sorted(set(data.labels.tolist())):
        sel = (data.labels == c) & data.tight
        imgs = data.images[sel]
        gen = torch.Generator().manual_seed(seed * 1000 + c)
        den = denoise_from_t(model, imgs, data.labels[sel], t0, cfg, gen)
        out[c] = diversity_score(den.reshape(den.shape[0], -1).numpy())
    return out


def run_feature_hacking(model_cfg, train_cfg, branch, data, seeds, steps: int, t0: float = 0.2,
                        sampler_cfg: SamplerConfig | None = None, out_dir=None, ema: str | None = None) -> dict:
    """Train none / mlp / mta arms per seed and compare tight-mode output diversity.

    Returns per-arm lists of the class-averaged diversity (one per seed), their
    medians, and the two direction checks.
    """
    if data.tight is None:
        raise InvalidInputError("feature-hacking check needs a dataset with a tight-mode split")
    sampler_cfg = sampler_cfg or SamplerConfig(steps=20, guidance_scale=1.0)
    arms = {"jit": "none", "repa": "mlp", "mta": "mta"}
    per_arm: dict[str, list[float]] = {a: [] for a in arms}
    rows = []
    for s in seeds:
        for arm, variant in arms.items():
            b = replace(branch, variant=variant)
            tc = replace(train_cfg, seed=s)
            run_dir = None if out_dir is None else Path(out_dir) / f"{arm}_seed_{s}"
            trainer = _train_run(model_cfg, tc, b, data, steps, run_dir)
            div = tight_mode_diversity(trainer, data, t0, sampler_cfg, seed=s, ema=ema)
            score = float(np.mean(list(div.values())))
            per_arm[arm].append(score)
            rows.append({"arm": arm, "seed": s, "tight_diversity": score})
    ref = {c: diversity_score(data.images[(data.labels == c) & data.tight].reshape(-1, data.images[0].numel()).numpy())
           for c in sorted(set(data.labels.tolist()))}
    medians = {a: statistics.median(v) for a, v in per_arm.items()}
    result = {
        "per_seed": per_arm,
        "median": medians,
        "data_tight_diversity": float(np.mean(list(ref.values()))),
        "mta_ge_repa": medians["mta"] >= medians["repa"],
        "jit_ge_repa": medians["jit"] >= medians["repa"],
    }
    if out_dir is not None:
        header = (f"tight-mode diversity after denoising from t0={t0}; mean pairwise pixel distance, "
                  f"averaged over classes; {len(seeds)} seeds; {steps} steps per run")
        write_csv(rows, Path(out_dir) / "feature_hacking_runs.csv", header)
        Path(out_dir, "feature_hacking.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        plot_xy(None, [medians[a] for a in arms], "arm", "tight-mode diversity",
                Path(out_dir) / "feature_hacking.png", labels=list(arms))
    return result
