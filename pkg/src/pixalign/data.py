"""Procedural class-conditional image sets and their on-disk layout.

``shapes``
    One geometric shape per class with random colour, position and size.
``tightmode``
    Each class mixes a *tight mode* (one fixed layout and colour, each image
    carrying its own fine-grained texture) with *off-mode* images whose layout
    varies freely. A blur-and-pool encoder maps the tight mode to nearly one
    point while the pixels stay distinct.

A dataset directory holds ``images/<id>.png``, ``labels.json`` (id -> class,
in id order) and, for ``tightmode``, ``manifest.json`` listing the split.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, InvalidInputError, UsageError

DATASET_KINDS = ("shapes", "tightmode")
SHAPES = ("disk", "square", "triangle", "cross", "ring", "hstripes", "vstripes", "checker", "diamond", "plus",
          "halfplane", "dots")


@dataclass
class DataConfig:
    kind: str = "shapes"
    path: str = ""
    num_classes: int = 10
    per_class: int = 64
    image_size: int = 32
    seed: int = 0
    tight_fraction: float = 0.5
    texture_amplitude: float = 0.35

    def __post_init__(self):
        if self.kind not in DATASET_KINDS + ("dir",):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must lie in [1, {len(SHAPES)}]")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageDataset:
    images: Tensor  # [n, C, H, W] in [-1, 1]
    labels: Tensor  # [n] long
    ids: list[str]
    tight: Tensor | None = None  # [n] bool, tight-mode membership

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, idx: Tensor):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.images[idx], self.labels[idx], [self.ids[i] for i in idx.tolist()]

    def subset(self, mask) -> "ImageDataset":
        idx = torch.nonzero(torch.as_tensor(mask)).flatten()
        tight = None if self.tight is None else self.tight[idx]
        return ImageDataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx.tolist()], tight)

    def to(self, dtype) -> "ImageDataset":
        return ImageDataset(self.images.to(dtype), self.labels, self.ids, self.tight)


def _coords(size: int):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def shape_mask(kind: str, size: int, cx: float, cy: float, r: float, phase: float = 0.0) -> np.ndarray:
    """Binary mask of one shape on a ``size x size`` canvas in unit coordinates."""
    yy, xx = _coords(size)
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif kind == "square":
        m = (abs(dx) <= r * 0.85) & (abs(dy) <= r * 0.85)
    elif kind == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (abs(dx) <= (dy + r) * 0.6)
    elif kind == "cross":
        m = ((abs(dx - dy) <= r * 0.35) | (abs(dx + dy) <= r * 0.35)) & (abs(dx) <= r) & (abs(dy) <= r)
    elif kind == "ring":
        d = np.sqrt(dx ** 2 + dy ** 2)
        m = (d <= r) & (d >= r * 0.55)
    elif kind == "hstripes":
        m = (np.sin((yy * 6 + phase) * np.pi) > 0) & (abs(dx) <= r * 1.2) & (abs(dy) <= r * 1.2)
    elif kind == "vstripes":
        m = (np.sin((xx * 6 + phase) * np.pi) > 0) & (abs(dx) <= r * 1.2) & (abs(dy) <= r * 1.2)
    elif kind == "checker":
        m = ((np.floor(xx * 4 + phase) + np.floor(yy * 4)) % 2 == 0) & (abs(dx) <= r * 1.2) & (abs(dy) <= r * 1.2)
    elif kind == "diamond":
        m = abs(dx) + abs(dy) <= r
    elif kind == "plus":
        m = ((abs(dx) <= r * 0.28) | (abs(dy) <= r * 0.28)) & (abs(dx) <= r) & (abs(dy) <= r)
    elif kind == "halfplane":
        m = (dx * np.cos(phase * np.pi) + dy * np.sin(phase * np.pi)) > 0
    elif kind == "dots":
        m = (np.sin(xx * 3 * np.pi * 2) * np.sin(yy * 3 * np.pi * 2) > 0.3) & (dx ** 2 + dy ** 2 <= (1.3 * r) ** 2)
    else:
        raise InvalidInputError(f"unknown shape {kind!r}")
    return m.astype(np.float32)


def _render(kind, size, cx, cy, r, fg, bg, phase=0.0) -> np.ndarray:
    m = shape_mask(kind, size, cx, cy, r, phase)[None]
    fg = np.asarray(fg, dtype=np.float32)[:, None, None]
    bg = np.asarray(bg, dtype=np.float32)[:, None, None]
    return m * fg + (1 - m) * bg


def make_shapes(num_classes: int = 10, per_class: int = 64, image_size: int = 32, seed: int = 0) -> ImageDataset:
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for c in range(num_classes):
        for j in range(per_class):
            cx, cy = rng.uniform(0.3, 0.7, size=2)
            r = rng.uniform(0.18, 0.3)
            fg = rng.uniform(-0.2, 1.0, size=3)
            bg = rng.uniform(-1.0, -0.4, size=3)
            images.append(_render(SHAPES[c], image_size, cx, cy, r, fg, bg, rng.uniform(0, 2)))
            labels.append(c)
            ids.append(f"c{c:02d}_{j:05d}")
    return ImageDataset(torch.from_numpy(np.clip(np.stack(images), -1, 1)), torch.tensor(labels), ids)


def make_tightmode(num_classes: int = 4, per_class: int = 64, image_size: int = 32, seed: int = 0,
                   tight_fraction: float = 0.5, texture_amplitude: float = 0.35) -> ImageDataset:
    rng = np.random.default_rng(seed)
    images, labels, ids, tight = [], [], [], []
    n_tight = int(round(per_class * tight_fraction))
    for c in range(num_classes):
        mode_fg = rng.uniform(0.0, 0.8, size=3)
        mode_bg = rng.uniform(-0.9, -0.5, size=3)
        mode_geom = (0.5, 0.5, 0.27, rng.uniform(0, 2))
        for j in range(per_class):
            if j < n_tight:
                cx, cy, r, phase = mode_geom
                base = _render(SHAPES[c], image_size, cx, cy, r, mode_fg, mode_bg, phase)
                # per-image texture at 2-pixel scale: erased by blur + pooling
                cells = rng.choice([-1.0, 1.0], size=(1, image_size // 2, image_size // 2)).astype(np.float32)
                tex = np.repeat(np.repeat(cells, 2, axis=1), 2, axis=2) * texture_amplitude
                img = base + tex
            else:
                cx, cy = rng.uniform(0.25, 0.75, size=2)
                r = rng.uniform(0.12, 0.34)
                fg = rng.uniform(-0.3, 1.0, size=3)
                bg = rng.uniform(-1.0, 0.2, size=3)
                img = _render(SHAPES[c], image_size, cx, cy, r, fg, bg, rng.uniform(0, 2))
            images.append(img)
            labels.append(c)
            ids.append(f"c{c:02d}_{j:05d}")
            tight.append(j < n_tight)
    return ImageDataset(torch.from_numpy(np.clip(np.stack(images), -1, 1).astype(np.float32)), torch.tensor(labels),
                        ids, torch.tensor(tight))


def make_dataset(cfg: DataConfig) -> ImageDataset:
    if cfg.kind == "shapes":
        return make_shapes(cfg.num_classes, cfg.per_class, cfg.image_size, cfg.seed)
    if cfg.kind == "tightmode":
        return make_tightmode(cfg.num_classes, cfg.per_class, cfg.image_size, cfg.seed, cfg.tight_fraction,
                              cfg.texture_amplitude)
    if cfg.kind == "dir":
        if not cfg.path:
            raise ConfigError("data.kind = 'dir' needs data.path")
        return load_dataset(cfg.path)
    raise UsageError(f"unknown dataset kind {cfg.kind!r}")


def to_uint8(images: Tensor) -> np.ndarray:
    return ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()


def write_dataset(ds: ImageDataset, out_dir, kind: str, seed: int, encoder=None) -> Path:
    """PNG per image plus ``labels.json``; ``manifest.json`` when a tight split exists.

    With ``encoder`` given, per-image feature grids are also written under ``features/``.
    """
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    arr = to_uint8(ds.images)
    for i, sid in enumerate(ds.ids):
        Image.fromarray(arr[i]).save(out / "images" / f"{sid}.png", optimize=False)
    labels = {sid: int(l) for sid, l in zip(ds.ids, ds.labels.tolist())}
    (out / "labels.json").write_text(json.dumps({"kind": kind, "seed": seed, "labels": labels}, indent=1) + "\n")
    if ds.tight is not None:
        manifest = {
            "tight_mode": [s for s, t in zip(ds.ids, ds.tight.tolist()) if t],
            "off_mode": [s for s, t in zip(ds.ids, ds.tight.tolist()) if not t],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    if encoder is not None:
        from .features import write_store

        with torch.no_grad():
            feats = encoder.features(ds.images.float())
        write_store(out / "features", ds.ids, feats.numpy())
    return out


def load_dataset(path) -> ImageDataset:
    from PIL import Image

    root = Path(path)
    try:
        meta = json.loads((root / "labels.json").read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"{root} is not a dataset directory (no labels.json)") from None
    ids = list(meta["labels"])
    imgs = np.stack([np.asarray(Image.open(root / "images" / f"{i}.png").convert("RGB")) for i in ids])
    images = torch.from_numpy(imgs).permute(0, 3, 1, 2).float() / 127.5 - 1.0
    labels = torch.tensor([meta["labels"][i] for i in ids])
    tight = None
    if (root / "manifest.json").exists():
        tm = set(json.loads((root / "manifest.json").read_text())["tight_mode"])
        tight = torch.tensor([i in tm for i in ids])
    return ImageDataset(images, labels, ids, tight)
