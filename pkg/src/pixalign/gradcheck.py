"""Central finite-difference checks of autograd gradients at sampled parameter entries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor


@dataclass
class GradProbe:
    name: str
    index: tuple
    autograd: float
    finite_diff: float

    @property
    def abs_err(self) -> float:
        return abs(self.autograd - self.finite_diff)

    def tolerance(self, rtol: float, atol: float) -> float:
        return rtol * max(abs(self.autograd), abs(self.finite_diff)) + atol

    def ok(self, rtol: float, atol: float) -> bool:
        return self.abs_err <= self.tolerance(rtol, atol)


def sample_entries(params: dict[str, Tensor], n: int, generator: torch.Generator) -> list[tuple[str, tuple]]:
    """Pick ``n`` (name, index) pairs: a tensor uniformly at random, then an entry within it."""
    names = sorted(params)
    out = []
    for _ in range(n):
        name = names[int(torch.randint(len(names), (1,), generator=generator))]
        shape = params[name].shape
        flat = int(torch.randint(params[name].numel(), (1,), generator=generator))
        out.append((name, tuple(int(i) for i in torch.unravel_index(torch.tensor(flat), shape))))
    return out


def finite_difference_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], entries,
                            step: float = 1e-3) -> list[GradProbe]:
    """Compare ``d loss_fn() / d params[name][index]`` from autograd with a central difference.

    Uses the fourth-order central stencil so a step large enough to keep roundoff
    small (losses near t -> 1 reach the hundreds) still has negligible truncation
    error. ``loss_fn`` must be deterministic (fix its noise before calling).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grad_of = {name: g for name, g in zip(params, grads)}
    probes = []
    with torch.no_grad():
        for name, idx in entries:
            p = params[name]
            orig = p[idx].item()
            vals = {}
            for k in (-2, -1, 1, 2):
                p[idx] = orig + k * step
                vals[k] = loss_fn().item()
            p[idx] = orig
            fd = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * step)
            g = grad_of[name]
            probes.append(GradProbe(name, idx, 0.0 if g is None else g[idx].item(), fd))
    return probes


def roundoff_floor(loss_value: float, step: float, dtype=torch.float64) -> float:
    """Bound on the stencil's cancellation error: a few ulps of the loss divided by the step."""
    return 4 * torch.finfo(dtype).eps * abs(loss_value) / step


def perturb_zero_inits(module: torch.nn.Module, generator: torch.Generator, scale: float = 0.05) -> None:
    """Move exactly-zero parameters (AdaLN-Zero gates, biases) to a non-degenerate point."""
    with torch.no_grad():
        for p in module.parameters():
            if p.numel() and bool((p == 0).all()):
                p.add_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))
