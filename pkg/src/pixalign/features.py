"""On-disk store of per-sample feature grids.

Layout of a store directory::

    index.json          {"version": 1, "grid": [r, c], "feature_dim": D,
                         "samples": {id: [shard_name, byte_offset], ...}}
    shard_00000.bin     header + contiguous float32 grids

Shard header (little-endian): 4-byte magic ``PXFT``, then uint32 version,
sample count, grid rows, grid cols, feature_dim. Each record is
``rows * cols * feature_dim`` float32 values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MAGIC = b"PXFT"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")


class FeatureStoreError(InvalidInputError):
    pass


def write_store(path, ids, feats: np.ndarray, shard_size: int = 1024) -> Path:
    """Write ``feats`` of shape ``[n, rows, cols, D]`` keyed by ``ids``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 4 or len(ids) != feats.shape[0]:
        raise FeatureStoreError("features must be [n, rows, cols, dim] with one id per row")
    if len(set(map(str, ids))) != len(ids):
        raise FeatureStoreError("duplicate sample ids")
    n, rows, cols, dim = feats.shape
    samples = {}
    for s, start in enumerate(range(0, n, shard_size)):
        chunk = feats[start:start + shard_size]
        name = f"shard_{s:05d}.bin"
        with open(path / name, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, chunk.shape[0], rows, cols, dim))
            fh.write(chunk.tobytes())
        rec = rows * cols * dim * 4
        for j in range(chunk.shape[0]):
            samples[str(ids[start + j])] = [name, HEADER.size + j * rec]
    index = {"version": VERSION, "grid": [rows, cols], "feature_dim": dim, "samples": samples}
    (path / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return path


class FeatureStore:
    def __init__(self, root: Path, index: dict):
        self.root = root
        self.grid = tuple(index["grid"])
        self.feature_dim = int(index["feature_dim"])
        self.samples = index["samples"]
        self._shards: dict[str, np.ndarray] = {}

    @classmethod
    def open(cls, path) -> "FeatureStore":
        root = Path(path)
        try:
            index = json.loads((root / "index.json").read_text())
        except FileNotFoundError:
            raise FeatureStoreError(f"no index.json in {root}") from None
        if index.get("version") != VERSION:
            raise FeatureStoreError(f"unsupported feature store version {index.get('version')}")
        return cls(root, index)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return list(self.samples)

    def _shard(self, name: str) -> np.ndarray:
        if name not in self._shards:
            raw = (self.root / name).read_bytes()
            if len(raw) < HEADER.size:
                raise FeatureStoreError(f"{name}: truncated header")
            magic, version, count, rows, cols, dim = HEADER.unpack_from(raw)
            if magic != MAGIC or version != VERSION:
                raise FeatureStoreError(f"{name}: bad magic or version")
            if (rows, cols) != self.grid or dim != self.feature_dim:
                raise FeatureStoreError(f"{name}: header disagrees with index")
            expected = HEADER.size + count * rows * cols * dim * 4
            if len(raw) != expected:
                raise FeatureStoreError(f"{name}: expected {expected} bytes, found {len(raw)}")
            self._shards[name] = np.frombuffer(raw, dtype="<f4")
        return self._shards[name]

    def read(self, sample_id) -> np.ndarray:
        try:
            name, offset = self.samples[str(sample_id)]
        except KeyError:
            raise FeatureStoreError(f"unknown sample id {sample_id!r}") from None
        data = self._shard(name)
        rows, cols = self.grid
        size = rows * cols * self.feature_dim
        start = offset // 4  # the cached array still holds the header
        return data[start:start + size].reshape(rows, cols, self.feature_dim)

    def read_many(self, ids) -> np.ndarray:
        return np.stack([self.read(i) for i in ids]).astype(np.float32)
