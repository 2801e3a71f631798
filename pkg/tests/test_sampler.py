import json
import math

import numpy as np
import pytest
import torch

from pixalign.alignment import AlignmentBranch
from pixalign.backbone import DenoiserOutput, build_backbone
from pixalign.errors import ConfigError, SamplerError, SingularityError
from pixalign.gradcheck import perturb_zero_inits
from pixalign.sampler import (SamplerConfig, VelocityField, guided_velocity, heun_step, integrate, read_samples,
                              sample, velocity_field, write_samples)
from pixalign.trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint
from pixalign.verify import heun_order


def test_config_defaults_and_validation():
    cfg = SamplerConfig()
    assert (cfg.steps, cfg.guidance_interval, cfg.guidance_scale) == (50, (0.1, 1.0), 1.5)
    grid = cfg.t_grid()
    assert grid[0] == 0 and grid[-1] == 1 and len(grid) == 51 and bool((grid.diff() > 0).all())
    for bad in (dict(steps=0), dict(guidance_interval=(0.5, 0.5)), dict(guidance_interval=(-0.1, 1.0)),
                dict(guidance_interval=(0.1, 1.2))):
        with pytest.raises(ConfigError):
            SamplerConfig(**bad)


def test_heun_step_examples():
    x = torch.tensor([0.5, -2.0], dtype=torch.float64)
    c = torch.tensor([1.5, 0.25], dtype=torch.float64)
    assert torch.equal(heun_step(lambda y, t: c, x, 0.3, 0.125), x + 0.125 * c)
    for dt in (0.1, 0.01, 0.5):
        out = heun_step(lambda y, t: y, torch.tensor([1.0], dtype=torch.float64), 0.0, dt)
        assert out.item() == pytest.approx(1 + dt + dt * dt / 2, rel=1e-15)


def test_heun_global_error_ratio_and_slope():
    slope, errs = heun_order()
    assert 1.9 <= slope <= 2.1
    for a, b in zip(errs, errs[1:]):
        assert 3.5 <= a / b <= 4.5


def test_heun_nonfinite_field_raises():
    with pytest.raises(SamplerError):
        heun_step(lambda y, t: y * float("nan"), torch.ones(2), 0.0, 0.1)


def test_guided_velocity_examples():
    vc, vu = torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
    for t in (0.0, 0.05, 0.5, 1.0):
        assert torch.equal(guided_velocity(vc, vu, 1.0, t, (0.1, 1.0)), vc)
    assert torch.allclose(guided_velocity(vc, vu, 2.0, 0.5, (0.1, 1.0)), 2 * vc - vu, atol=1e-15)
    assert torch.equal(guided_velocity(vc, vu, 2.0, 0.05, (0.1, 1.0)), vc)
    # both interval ends are inside
    assert not torch.equal(guided_velocity(vc, vu, 2.0, 0.1, (0.1, 1.0)), vc)
    assert not torch.equal(guided_velocity(vc, vu, 2.0, 1.0, (0.1, 1.0)), vc)


@pytest.fixture
def model(tiny_cfg):
    m = build_backbone(tiny_cfg, seed=0)
    perturb_zero_inits(m, torch.Generator().manual_seed(9), scale=0.02)
    return m


def test_velocity_field_evaluation_counts(model):
    x = torch.randn(2, 3, 8, 8)
    f = velocity_field(model, torch.tensor([0, 1]), w=1.0)
    f(x, 0.5)
    assert f.calls == 1
    g = velocity_field(model, torch.tensor([0, 1]), w=2.0)
    g(x, 0.5)
    g(x, 0.05)
    assert g.calls == 3 and g.dual_times == [0.5]
    with pytest.raises(SingularityError):
        g(x, 1.0)


def test_terminal_step_uses_x_prediction(model):
    x = torch.randn(2, 3, 8, 8)
    f = VelocityField(model, torch.tensor([0, 2]), w=1.0)
    out, steps = integrate(f, x, torch.tensor([0.98, 1.0], dtype=torch.float64))
    ref = model(x, torch.full((2,), 0.98), torch.tensor([0, 2])).x_pred
    assert steps == 1 and torch.equal(out, ref)


def test_sample_shape_determinism_and_finiteness(tiny_cfg):
    fresh = build_backbone(tiny_cfg, seed=0)
    cfg = SamplerConfig(steps=6)
    a = sample(fresh, cfg, [0, 1, 2], torch.Generator().manual_seed(3))
    b = sample(fresh, cfg, [0, 1, 2], torch.Generator().manual_seed(3))
    assert a.shape == (3, 3, 8, 8) and torch.equal(a, b) and bool(torch.isfinite(a).all())
    assert a.min() >= -1 and a.max() <= 1


def test_fifty_steps_and_dual_evaluations_only_inside_interval(model):
    cfg = SamplerConfig(steps=50, guidance_scale=2.0)
    _, field = sample(model, cfg, [0, 1], torch.Generator().manual_seed(0), return_field=True)
    grid = cfg.t_grid().tolist()
    # Heun evaluates at t_i and t_{i+1} for the first 49 steps, the terminal step only at t_49
    evals = [t for i in range(49) for t in (grid[i], grid[i + 1])] + [grid[49]]
    expected_dual = [t for t in evals if 0.1 <= t <= 1.0]
    assert field.dual_times == expected_dual
    assert field.calls == len(evals) + len(expected_dual)
    assert all(t in grid for t in field.dual_times)


def test_integrate_counts_steps(model):
    f = VelocityField(model, torch.tensor([0]), w=1.0)
    _, steps = integrate(f, torch.randn(1, 3, 8, 8), SamplerConfig(steps=50).t_grid())
    assert steps == 50


def test_w_one_equals_guidance_disabled(model):
    cfg = SamplerConfig(steps=8, guidance_scale=1.0)
    a = sample(model, cfg, [0, 1], torch.Generator().manual_seed(1))
    b = sample(model, cfg, [0, 1], torch.Generator().manual_seed(1), guide=lambda vc, vu, w, t, iv: vc)
    assert torch.equal(a, b)


def test_nonfinite_trajectory_reports_step(tiny_cfg):
    class Exploding(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.cfg = tiny_cfg
            self.w = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x, t, y):
            bad = float("inf") if float(t[0]) > 0.3 else 0.0
            return DenoiserOutput(x + bad, None, None)

    with pytest.raises(SamplerError) as info:
        sample(Exploding(), SamplerConfig(steps=10, guidance_scale=1.0), [0], torch.Generator().manual_seed(0))
    assert "t=" in str(info.value) or info.value.step is not None


def test_sampling_ignores_alignment_head(tiny_cfg, tmp_path):
    tr = Trainer(tiny_cfg, TrainConfig(seed=0, batch_size=4), AlignmentBranch(variant="mta", feature_dim=8))
    from pixalign.data import ImageDataset
    from conftest import images
    tr.fit(ImageDataset(images(8), torch.arange(8) % 3, [f"i{k}" for k in range(8)]), 3)
    path = save_checkpoint(tr, tmp_path / "c.ckpt")
    ck = load_checkpoint(path)
    cfg = SamplerConfig(steps=5)
    a = sample(ck.backbone(None), cfg, [0, 1, 2], torch.Generator().manual_seed(4))
    stripped = ck.strip_head()
    assert not any("head." in k for k in stripped.tensors)
    b = sample(stripped.backbone(None), cfg, [0, 1, 2], torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


def test_write_samples_files_and_sidecar(tmp_path, tiny_cfg):
    imgs = sample(build_backbone(tiny_cfg), SamplerConfig(steps=3), [0, 1], torch.Generator().manual_seed(0))
    meta = write_samples(imgs, tmp_path, "s", 0, SamplerConfig(steps=3).to_dict())
    assert {p.name for p in tmp_path.iterdir()} == {"s.png", "s.f32", "s.json"}
    side = json.loads((tmp_path / "s.json").read_text())
    assert side["shape"] == [2, 3, 8, 8] and side["seed"] == 0 and len(side["config_hash"]) == 64
    assert meta == side
    assert torch.equal(read_samples(tmp_path / "s.f32"), imgs.float())
    from PIL import Image
    assert Image.open(tmp_path / "s.png").size == (2 * 9 + 1, 9 + 1)
