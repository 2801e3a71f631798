"""Linear-interpolant flow matching with x-prediction.

Noisy samples are ``x_t = t * x + (1 - t) * eps`` so ``t = 0`` is pure noise and
``t = 1`` is data. The target velocity is ``x - eps`` and a clean-image
prediction is turned into a velocity by ``(x_pred - x_t) / (1 - t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import DomainError, InvalidInputError, SingularityError

# Training timesteps stay below 1 - T_EPS so the (1 - t) division is bounded.
T_EPS = 1e-3


@dataclass(frozen=True)
class LinearSchedule:
    """a(t) = t scales the data, b(t) = 1 - t scales the noise."""

    def a(self, t):
        return t

    def b(self, t):
        return 1 - t


@dataclass
class InterpolantState:
    x: Tensor
    eps: Tensor
    t: Tensor
    x_t: Tensor
    v: Tensor

    @classmethod
    def build(cls, x: Tensor, eps: Tensor, t) -> "InterpolantState":
        return cls(x, eps, _as_time(t, x), interpolate(x, eps, t), target_velocity(x, eps))


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_time(t, ref: Tensor) -> Tensor:
    """Broadcast a scalar or per-sample timestep against ``ref``."""
    t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
    if t.ndim == 0:
        return t
    if t.ndim == 1 and t.shape[0] == ref.shape[0]:
        return t.reshape(-1, *([1] * (ref.ndim - 1)))
    if t.shape == ref.shape or t.ndim == ref.ndim:
        return t
    raise InvalidInputError(f"timestep shape {tuple(t.shape)} incompatible with {tuple(ref.shape)}")


def interpolate(x: Tensor, eps: Tensor, t) -> Tensor:
    _check_same_shape(x, eps, "interpolate")
    tt = _as_time(t, x)
    if bool((tt < 0).any()) or bool((tt > 1).any()):
        raise DomainError("timestep outside [0, 1]")
    return tt * x + (1 - tt) * eps


def target_velocity(x: Tensor, eps: Tensor) -> Tensor:
    _check_same_shape(x, eps, "target_velocity")
    return x - eps


def xpred_to_velocity(x_pred: Tensor, x_t: Tensor, t, t_eps: float = T_EPS) -> Tensor:
    """Velocity implied by a clean-image prediction.

    Raises SingularityError when any ``t > 1 - t_eps``; callers near the data
    end should consume ``x_pred`` directly.
    """
    _check_same_shape(x_pred, x_t, "xpred_to_velocity")
    tt = _as_time(t, x_t)
    if bool((tt > 1 - t_eps).any()):
        raise SingularityError(f"t exceeds 1 - {t_eps}; use the x-prediction directly")
    return (x_pred - x_t) / (1 - tt)


def denoising_loss(x_pred: Tensor, x_t: Tensor, x: Tensor, eps: Tensor, t_batch: Tensor,
                   t_eps: float = T_EPS) -> Tensor:
    """Mean squared error between the implied and the target velocity."""
    _check_same_shape(x_pred, x, "denoising_loss")
    v_tilde = xpred_to_velocity(x_pred, x_t, t_batch, t_eps)
    return (v_tilde - target_velocity(x, eps)).pow(2).mean()


def sample_timesteps(batch_size: int, generator: torch.Generator | None = None,
                     distribution: str = "uniform", t_eps: float = T_EPS,
                     dtype=torch.float32, logit_mean: float = -0.8, logit_std: float = 0.8) -> Tensor:
    """Draw per-sample training timesteps in ``[0, 1 - t_eps]``."""
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    if distribution == "uniform":
        u = torch.rand(batch_size, generator=generator, dtype=torch.float64)
        t = u * (1 - t_eps)
    elif distribution == "logit_normal":
        z = torch.randn(batch_size, generator=generator, dtype=torch.float64)
        t = torch.sigmoid(z * logit_std + logit_mean).clamp(0, 1 - t_eps)
    else:
        raise DomainError(f"unknown timestep distribution {distribution!r}")
    return t.to(dtype)
