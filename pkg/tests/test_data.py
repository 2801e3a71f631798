import json

import numpy as np
import pytest
import torch

from pixalign.alignment import LossyPoolEncoder
from pixalign.data import (DataConfig, ImageDataset, load_dataset, make_dataset, make_shapes, make_tightmode,
                           write_dataset)
from pixalign.errors import ConfigError, InvalidInputError, UsageError
from pixalign.features import FeatureStore


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generators_are_seeded_and_in_range():
    a, b = make_shapes(4, 5, 16, seed=3), make_shapes(4, 5, 16, seed=3)
    assert torch.equal(a.images, b.images) and a.ids == b.ids
    assert not torch.equal(a.images, make_shapes(4, 5, 16, seed=4).images)
    assert a.images.min() >= -1 and a.images.max() <= 1 and a.images.shape == (20, 3, 16, 16)
    assert a.labels.tolist() == [c for c in range(4) for _ in range(5)]


def test_same_seed_gives_byte_identical_dataset(tmp_path):
    for name in ("a", "b"):
        write_dataset(make_tightmode(3, 6, 16, seed=1), tmp_path / name, "tightmode", 1,
                      encoder=LossyPoolEncoder(16, 3, 8))
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_tightmode_manifest_and_structure(tmp_path):
    ds = make_tightmode(4, 8, 32, seed=0)
    out = write_dataset(ds, tmp_path, "tightmode", 0)
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["tight_mode"]) == 16 and len(man["off_mode"]) == 16
    assert not set(man["tight_mode"]) & set(man["off_mode"])
    # the lossy encoder sees the tight mode as a tight cluster
    enc = LossyPoolEncoder(32, 3)
    f = enc.features(ds.images).reshape(len(ds), -1)
    for c in range(4):
        tight = f[(ds.labels == c) & ds.tight]
        off = f[(ds.labels == c) & ~ds.tight]
        assert torch.pdist(tight).mean() < 0.5 * torch.pdist(off).mean()
    # yet the tight-mode images still differ in pixel space
    px = ds.images[(ds.labels == 0) & ds.tight].reshape(8, -1)
    assert torch.pdist(px).min() > 0


def test_shapes_counting(tmp_path):
    ds = make_shapes(10, 256, 16, seed=0)
    out = write_dataset(ds, tmp_path, "shapes", 0)
    assert len(list((out / "images").glob("*.png"))) == 2560
    labels = json.loads((out / "labels.json").read_text())["labels"]
    assert len(labels) == 2560 and not (out / "manifest.json").exists()


def test_load_roundtrip_quantised(tmp_path):
    ds = make_tightmode(2, 4, 16, seed=2)
    write_dataset(ds, tmp_path, "tightmode", 2, encoder=LossyPoolEncoder(16, 3, 8))
    back = load_dataset(tmp_path)
    assert back.ids == ds.ids and torch.equal(back.labels, ds.labels) and torch.equal(back.tight, ds.tight)
    assert (back.images - ds.images).abs().max() <= 1 / 127.5 + 1e-6
    store = FeatureStore.open(tmp_path / "features")
    assert store.ids() == sorted(ds.ids) or set(store.ids()) == set(ds.ids)
    with pytest.raises(InvalidInputError):
        load_dataset(tmp_path / "images")


def test_make_dataset_dispatch(tmp_path):
    assert len(make_dataset(DataConfig(kind="shapes", num_classes=2, per_class=3, image_size=8))) == 6
    with pytest.raises(ConfigError):
        make_dataset(DataConfig(kind="dir"))
    with pytest.raises((ConfigError, UsageError)):
        make_dataset(DataConfig(kind="blobs"))


def test_dataset_batch_and_subset():
    ds = make_shapes(2, 3, 8)
    imgs, labels, ids = ds.batch(torch.tensor([4, 0]))
    assert ids == [ds.ids[4], ds.ids[0]] and torch.equal(labels, ds.labels[[4, 0]])
    sub = ds.subset(ds.labels == 1)
    assert len(sub) == 3 and all(i.startswith("c01") for i in sub.ids)
