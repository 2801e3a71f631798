import json

import pytest
import torch

from pixalign.alignment import AlignmentBranch, LossyPoolEncoder
from pixalign.data import ImageDataset
from pixalign.errors import CheckpointError, ConfigError, CorruptCheckpointError, InvalidInputError, StateError
from pixalign.trainer import (TrainConfig, Trainer, TrainingDiverged, ema_key, ema_update, load_checkpoint,
                              save_checkpoint, trainer_from_checkpoint)

from conftest import images


@pytest.fixture
def data():
    return ImageDataset(images(12, seed=5), torch.arange(12) % 3, [f"i{k:02d}" for k in range(12)])


def _trainer(cfg, variant="mta", seed=0, **kw):
    return Trainer(cfg, TrainConfig(seed=seed, batch_size=4, **kw), AlignmentBranch(variant=variant, feature_dim=6),
                   encoder=LossyPoolEncoder(8, 3, 6, grid=2) if variant != "none" else None)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr, c.betas, c.ema_decays, c.grad_clip) == (2e-4, (0.9, 0.95), (0.9996, 0.9998, 0.9999), 1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(ema_decays=(1.5,))


def test_ema_update_examples():
    p = {"w": torch.ones(3)}
    s = {"w": torch.zeros(3)}
    assert torch.equal(ema_update({"w": torch.zeros(3)}, p, 1.0)["w"], torch.zeros(3))
    assert torch.equal(ema_update({"w": torch.zeros(3)}, p, 0.0)["w"], torch.ones(3))
    assert torch.allclose(ema_update(s, p, 0.9999)["w"], torch.full((3,), 1e-4), rtol=1e-6)
    with pytest.raises(StateError):
        ema_update({"v": torch.zeros(3)}, p, 0.5)
    with pytest.raises(StateError):
        ema_update({"w": torch.zeros(2)}, p, 0.5)
    assert ema_key(0.9999) == "0.9999"


def test_ema_shadows_cover_every_parameter(tiny_cfg):
    tr = _trainer(tiny_cfg)
    names = set(tr.named_params())
    assert any(n.startswith("head.") for n in names)
    assert sorted(tr.ema) == ["0.9996", "0.9998", "0.9999"]
    assert all(set(s) == names for s in tr.ema.values())


def test_branch_none_metrics(tiny_cfg, data):
    tr = _trainer(tiny_cfg, "none")
    m = tr.train_step(*data.batch(torch.arange(4)))
    assert "l_align" not in m and m["total"] == m["l_denoise"]
    assert set(m) == {"step", "l_denoise", "total", "grad_norm"}


def test_metrics_stream_is_deterministic(tiny_cfg, data, tmp_path):
    a = _trainer(tiny_cfg).fit(data, 5, run_dir=tmp_path / "a")
    b = _trainer(tiny_cfg).fit(data, 5, run_dir=tmp_path / "b")
    assert a == b
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert [m["step"] for m in a] == [1, 2, 3, 4, 5]
    assert set(json.loads((tmp_path / "a/timing.jsonl").read_text().splitlines()[0])) == {"step", "wall_time"}


def test_backbone_init_shared_across_variants(tiny_cfg):
    ps = [_trainer(tiny_cfg, v).model.state_dict() for v in ("none", "mlp", "mta")]
    assert all(torch.equal(ps[0][k], p[k]) for p in ps[1:] for k in ps[0])


def test_ema_stays_in_parameter_envelope(tiny_cfg, data):
    tr = Trainer(tiny_cfg, TrainConfig(seed=0, batch_size=4, lr=1e-2, ema_decays=(0.5, 0.9)),
                 AlignmentBranch(variant="mlp", feature_dim=6), encoder=LossyPoolEncoder(8, 3, 6, grid=2))
    hist = {k: [v.detach().clone()] for k, v in tr.named_params().items()}
    for _ in range(6):
        tr.train_step(*data.batch(torch.arange(4)))
        for k, v in tr.named_params().items():
            hist[k].append(v.detach().clone())
    for shadow in tr.ema.values():
        for k, s in shadow.items():
            stack = torch.stack(hist[k])
            assert bool((s >= stack.min(0).values - 1e-6).all()) and bool((s <= stack.max(0).values + 1e-6).all())


def test_zero_lambda_leaves_adapter_untouched(tiny_cfg, data):
    tr = _trainer(tiny_cfg)
    before = {k: v.detach().clone() for k, v in tr.head.named_parameters()}
    imgs, labels, ids = data.batch(torch.arange(4))
    l_d, l_a, _, _ = tr.losses(imgs, labels, ids)
    tr.optimizer.zero_grad()
    (l_d + 0.0 * l_a).backward()
    tr.optimizer.step()
    assert all(torch.equal(before[k], v) for k, v in tr.head.named_parameters())
    assert not torch.equal(before["proj.weight"] * 0, before["proj.weight"])  # sanity: non-trivial params


def test_divergence_aborts_with_snapshot(tiny_cfg, tmp_path):
    bad = ImageDataset(torch.full((4, 3, 8, 8), float("nan")), torch.arange(4) % 3, list("abcd"))
    tr = _trainer(tiny_cfg)
    with pytest.raises(TrainingDiverged) as info:
        tr.fit(bad, 2, run_dir=tmp_path)
    assert info.value.snapshot["step"] == 1
    assert json.loads((tmp_path / "diverged.json").read_text())["step"] == 1


def test_empty_batch_rejected(tiny_cfg):
    with pytest.raises(InvalidInputError):
        _trainer(tiny_cfg).train_step(torch.zeros(0, 3, 8, 8), torch.zeros(0, dtype=torch.long))


def test_checkpoint_roundtrip_continues_identically(tiny_cfg, data, tmp_path):
    tr = _trainer(tiny_cfg)
    tr.config_hash = "abc123"
    tr.fit(data, 3)
    path = save_checkpoint(tr, tmp_path / "c.ckpt")
    ck = load_checkpoint(path, expected_hash="abc123")
    resumed = trainer_from_checkpoint(ck, encoder=LossyPoolEncoder(8, 3, 6, grid=2))
    assert resumed.step == 3
    for k, v in tr.named_params().items():
        assert torch.equal(v, resumed.named_params()[k])
    for key in tr.ema:
        assert all(torch.equal(tr.ema[key][k], resumed.ema[key][k]) for k in tr.ema[key])
    assert tr.fit(data, 2) == resumed.fit(data, 2)


def test_checkpoint_errors(tiny_cfg, data, tmp_path):
    tr = _trainer(tiny_cfg)
    tr.config_hash = "h1"
    tr.fit(data, 1)
    path = save_checkpoint(tr, tmp_path / "c.ckpt")
    raw = path.read_bytes()
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, expected_hash="h2")
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptCheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_ema_views(tiny_cfg, data):
    tr = _trainer(tiny_cfg)
    tr.fit(data, 2)
    raw = tr.eval_model(None)
    ema = tr.eval_model("0.9999")
    assert torch.equal(raw.patch_embed.proj.weight, tr.model.patch_embed.proj.weight)
    assert not torch.equal(ema.patch_embed.proj.weight, raw.patch_embed.proj.weight)
    with pytest.raises(ConfigError):
        tr.eval_model("0.5")
