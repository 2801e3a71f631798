"""Self-check suite behind ``pixalign verify``: gradients, integrator order, invariants."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import sampler as sampler_mod
from .alignment import AlignmentBranch, LossyPoolEncoder, alignment_loss, num_masked, sample_mask
from .analysis import diversity_score, frechet_distance
from .backbone import ModelConfig, build_backbone
from .flow import interpolate, target_velocity, xpred_to_velocity
from .gradcheck import finite_difference_check, perturb_zero_inits, roundoff_floor, sample_entries
from .trainer import TrainConfig, Trainer

TINY = dict(image_size=8, patch_size=2, depth=3, hidden_dim=16, heads=2, num_classes=3, in_context_tokens=2,
            in_context_start_block=2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_flow_identities(cases: int = 1000, seed: int = 0) -> tuple[bool, str]:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(cases):
        shape = (int(torch.randint(1, 4, (1,), generator=g)), 5)
        x = torch.randn(shape, generator=g, dtype=torch.float64)
        eps = torch.randn(shape, generator=g, dtype=torch.float64)
        if not (torch.equal(interpolate(x, eps, 0.0), eps) and torch.equal(interpolate(x, eps, 1.0), x)):
            return False, "endpoint property violated"
        t = float(torch.rand(1, generator=g, dtype=torch.float64)) * 0.999
        v = xpred_to_velocity(x, interpolate(x, eps, t), t)
        ref = target_velocity(x, eps)
        worst = max(worst, float(((v - ref).abs() / ref.abs().clamp_min(1.0)).max()))
    return worst <= 1e-10, f"max rel err {worst:.2e} over {cases} cases"


def heun_order(dts=(1 / 10, 1 / 20, 1 / 40, 1 / 80)) -> tuple[float, list[float]]:
    """Least-squares slope of log(global error) vs log(dt) for x' = x on [0, 1]."""
    errs = []
    for dt in dts:
        n = round(1 / dt)
        x = torch.tensor([1.0], dtype=torch.float64)
        for i in range(n):
            x = sampler_mod.heun_step(lambda y, t: y, x, i * dt, dt)
        errs.append(abs(float(x) - math.e))
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    return slope, errs


def check_integrator() -> tuple[bool, str]:
    slope, _ = heun_order()
    x = torch.tensor([0.3, -1.2], dtype=torch.float64)
    c = torch.tensor([2.0, -0.5], dtype=torch.float64)
    exact = torch.equal(sampler_mod.heun_step(lambda y, t: c, x, 0.0, 0.25), x + 0.25 * c)
    return (1.9 <= slope <= 2.1) and exact, f"order slope {slope:.4f}, constant field exact={exact}"


def check_guidance(guide: Callable | None = None) -> tuple[bool, str]:
    guide = guide or sampler_mod.guided_velocity
    g = torch.Generator().manual_seed(3)
    vc = torch.randn(4, generator=g, dtype=torch.float64)
    vu = torch.randn(4, generator=g, dtype=torch.float64)
    inside = torch.allclose(guide(vc, vu, 2.0, 0.5, (0.1, 1.0)), 2 * vc - vu, atol=1e-12)
    outside = torch.equal(guide(vc, vu, 2.0, 0.05, (0.1, 1.0)), vc)
    identity = torch.allclose(guide(vc, vu, 1.0, 0.5, (0.1, 1.0)), vc, atol=1e-12)
    ok = inside and outside and identity
    return ok, f"inside={inside} outside={outside} w1={identity}"


def check_alignment_semantics(seed: int = 0) -> tuple[bool, str]:
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(2000, 16, generator=g)
    b = torch.randn(2000, 16, generator=g)
    loss = alignment_loss(a, b).item()
    aligned = alignment_loss(a, a).item()
    anti = alignment_loss(a, -a).item()
    ortho_a = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    ortho = alignment_loss(ortho_a, torch.tensor([[0.0, 3.0], [-1.0, 0.0]])).item()
    masks_ok = all(int(sample_mask(3, n, r, g).bits.sum(1).unique().item()) == num_masked(n, r)
                   for n in (1, 7, 16, 64) for r in (0.0, 0.1, 0.2, 0.5, 0.9))
    ok = -1 <= loss <= 1 and abs(aligned + 1) < 1e-6 and abs(anti - 1) < 1e-6 and abs(ortho) < 1e-7 and masks_ok
    return ok, f"aligned={aligned:.6f} anti={anti:.6f} ortho={ortho:.1e} mask counts ok={masks_ok}"


def check_identity_at_init() -> tuple[bool, str]:
    model = build_backbone(ModelConfig(**TINY), seed=0, dtype=torch.float64)
    x = torch.randn(2, 16, 16, dtype=torch.float64)
    cond = torch.randn(2, 16, dtype=torch.float64)
    with torch.no_grad():
        dev = max(float((blk(x, cond) - x).abs().max()) for blk in model.blocks)
    return dev < 1e-6, f"max block deviation {dev:.1e}"


def total_loss_closure(trainer: Trainer, images, labels):
    """Deterministic total-loss function of the trainer's parameters (noise and masks frozen)."""
    states = (trainer.noise_gen.get_state(), trainer.mask_gen.get_state())

    def fn():
        trainer.noise_gen.set_state(states[0])
        trainer.mask_gen.set_state(states[1])
        return trainer.losses(images, labels)[2]

    return fn


def gradient_check(variant: str, n_params: int = 20, seed: int = 0, rtol: float = 1e-4, step: float = 1e-3):
    cfg = ModelConfig(**TINY)
    branch = AlignmentBranch(variant=variant, mask_ratio=0.25, lam=0.5, feature_dim=6)
    enc = LossyPoolEncoder(cfg.image_size, 3, 6, grid=2, blur_sigma=0.8) if branch.active else None
    trainer = Trainer(cfg, TrainConfig(seed=seed, batch_size=3), branch, encoder=enc, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 100)
    perturb_zero_inits(trainer.model, g)
    if trainer.head is not None:
        perturb_zero_inits(trainer.head, g)
    images = torch.rand(3, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    labels = torch.tensor([0, 1, 2])
    params = trainer.named_params()
    loss_fn = total_loss_closure(trainer, images, labels)
    probes = finite_difference_check(loss_fn, params, sample_entries(params, n_params, g), step)
    atol = roundoff_floor(loss_fn().item(), step)
    worst = max(p.abs_err / p.tolerance(rtol, atol) for p in probes)
    return probes, worst <= 1.0, worst


def check_gradients() -> tuple[bool, str]:
    parts, ok = [], True
    for v in ("none", "mlp", "mta"):
        probes, passed, worst = gradient_check(v)
        parts.append(f"{v}: {'ok' if passed else 'FAIL'} (worst err/tol {worst:.2f})")
        ok &= passed
    return ok, "; ".join(parts)


def check_branch_isolation() -> tuple[bool, str]:
    cfg = ModelConfig(**TINY)
    outs = []
    for v in ("none", "mlp", "mta"):
        tr = Trainer(cfg, TrainConfig(seed=5), AlignmentBranch(variant=v, feature_dim=4), dtype=torch.float64)
        x = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        outs.append(tr.model(x, torch.tensor([0.3, 0.6], dtype=torch.float64), torch.tensor([0, 1])).x_pred)
    same = all(torch.equal(outs[0], o) for o in outs[1:])
    return same, f"x_pred identical across variants={same}"


def check_metrics() -> tuple[bool, str]:
    g = np.random.default_rng(0)
    a = g.normal(size=(40, 3))
    fd_self = frechet_distance(a, a)
    d = np.array([1.0, -2.0, 0.5])
    fd_shift = frechet_distance(a, a + d)
    div = diversity_score(np.array([[0.0, 0.0], [3.0, 0.0]]))
    ok = abs(fd_self) < 1e-6 and abs(fd_shift - d @ d) < 1e-6 and abs(div - 3.0) < 1e-12
    return ok, f"FD(A,A)={fd_self:.1e} FD shift err={abs(fd_shift - d @ d):.1e} diversity={div}"


def run_checks(guide: Callable | None = None) -> list[CheckResult]:
    checks = [
        ("flow identities", check_flow_identities),
        ("gradients (none/mlp/mta)", check_gradients),
        ("heun integrator", check_integrator),
        ("cfg interval", lambda: check_guidance(guide)),
        ("alignment loss + masking", check_alignment_semantics),
        ("adaln-zero identity", check_identity_at_init),
        ("branch isolation", check_branch_isolation),
        ("frechet + diversity", check_metrics),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
