"""Deterministic Heun sampling of the learned flow, noise (t=0) to data (t=1).

Classifier-free guidance is applied only for grid times inside the guidance
interval; elsewhere the conditional velocity is used on its own and the
unconditional pass is skipped. The last step, which ends on the ``t = 1``
pole of the velocity conversion, returns the (guided) x-prediction directly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, SamplerError, SingularityError
from .flow import T_EPS, xpred_to_velocity


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 1.5
    guidance_interval: tuple[float, float] = (0.1, 1.0)
    ema: str = "0.9999"
    clamp: bool = True

    def __post_init__(self):
        self.guidance_interval = tuple(float(v) for v in self.guidance_interval)
        self.validate()

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        lo, hi = self.guidance_interval
        if not 0 <= lo < hi <= 1:
            raise ConfigError("guidance interval must satisfy 0 <= lo < hi <= 1")

    def t_grid(self, dtype=torch.float64) -> Tensor:
        return torch.linspace(0.0, 1.0, self.steps + 1, dtype=dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance_interval"] = list(self.guidance_interval)
        return d


def heun_step(field: Callable[[Tensor, float], Tensor], x: Tensor, t: float, dt: float) -> Tensor:
    """Explicit trapezoidal (Heun) step of ``dx/dt = field(x, t)``."""
    k1 = field(x, t)
    if not bool(torch.isfinite(k1).all()):
        raise SamplerError(f"non-finite velocity at t={t:.4f}")
    x_euler = x + dt * k1
    k2 = field(x_euler, t + dt)
    if not bool(torch.isfinite(k2).all()):
        raise SamplerError(f"non-finite velocity at t={t + dt:.4f}")
    return x + (dt / 2) * (k1 + k2)


def guidance_active(t: float, interval: tuple[float, float], w: float) -> bool:
    lo, hi = interval
    return w != 1.0 and lo <= t <= hi


def guided_velocity(v_cond: Tensor, v_uncond: Tensor | None, w: float, t: float,
                    interval: tuple[float, float]) -> Tensor:
    if not guidance_active(t, interval, w) or v_uncond is None:
        return v_cond
    return v_uncond + w * (v_cond - v_uncond)


class VelocityField:
    """Wraps a denoiser as ``(x, t) -> velocity`` with interval guidance.

    ``calls`` counts backbone evaluations (one per conditional or
    unconditional pass).
    """

    def __init__(self, model, class_ids: Tensor, w: float = 1.0, interval=(0.1, 1.0), t_eps: float = T_EPS,
                 guide: Callable = guided_velocity):
        self.model = model
        self.class_ids = torch.as_tensor(class_ids, dtype=torch.long)
        self.null_ids = torch.full_like(self.class_ids, model.cfg.null_class)
        self.w = float(w)
        self.interval = tuple(interval)
        self.t_eps = t_eps
        self.guide = guide
        self.calls = 0
        self.dual_times: list[float] = []

    def _predict(self, x: Tensor, t: float, ids: Tensor) -> Tensor:
        self.calls += 1
        tt = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        return self.model(x, tt, ids).x_pred

    def predict_x(self, x: Tensor, t: float) -> Tensor:
        """Guided clean-image estimate at time ``t`` (valid up to and including t=1)."""
        x_c = self._predict(x, t, self.class_ids)
        if not guidance_active(t, self.interval, self.w):
            return x_c
        self.dual_times.append(float(t))
        x_u = self._predict(x, t, self.null_ids)
        return self.guide(x_c, x_u, self.w, t, self.interval)

    def __call__(self, x: Tensor, t: float) -> Tensor:
        if t > 1 - self.t_eps:
            raise SingularityError("velocity undefined near t=1; use predict_x")
        x_c = self._predict(x, t, self.class_ids)
        v_c = xpred_to_velocity(x_c, x, t, self.t_eps)
        if not guidance_active(t, self.interval, self.w):
            return self.guide(v_c, None, self.w, t, self.interval)
        self.dual_times.append(float(t))
        v_u = xpred_to_velocity(self._predict(x, t, self.null_ids), x, t, self.t_eps)
        return self.guide(v_c, v_u, self.w, t, self.interval)


def velocity_field(model, class_ids, w: float = 1.0, interval=(0.1, 1.0), **kw) -> VelocityField:
    return VelocityField(model, class_ids, w, interval, **kw)


def integrate(field: VelocityField, x: Tensor, times: Tensor) -> tuple[Tensor, int]:
    """Heun over ``times``; a step ending within ``t_eps`` of 1 takes the x-prediction instead.

    Returns the final state and the number of integrator steps taken.
    """
    steps = 0
    for i in range(len(times) - 1):
        t, t_next = float(times[i]), float(times[i + 1])
        if t_next > 1 - field.t_eps:
            x = field.predict_x(x, t)
        else:
            x = heun_step(field, x, t, t_next - t)
        steps += 1
        if not bool(torch.isfinite(x).all()):
            raise SamplerError("non-finite state", step=i)
    return x, steps


@torch.no_grad()
def sample(model, cfg: SamplerConfig, class_ids, generator: torch.Generator, image_shape=None,
           guide: Callable = guided_velocity, return_field: bool = False):
    """Integrate standard-normal noise to images for ``class_ids``."""
    class_ids = torch.as_tensor(class_ids, dtype=torch.long)
    mcfg = model.cfg
    shape = image_shape or (mcfg.channels, mcfg.image_size, mcfg.image_size)
    dtype = next(model.parameters()).dtype
    x = torch.randn((class_ids.shape[0], *shape), generator=generator, dtype=dtype)
    was_training = model.training
    model.eval()
    try:
        field = VelocityField(model, class_ids, cfg.guidance_scale, cfg.guidance_interval, guide=guide)
        x, _ = integrate(field, x, cfg.t_grid())
    finally:
        model.train(was_training)
    if cfg.clamp:
        x = x.clamp(-1.0, 1.0)
    return (x, field) if return_field else x


def to_uint8(images: Tensor) -> np.ndarray:
    """``[B, C, H, W]`` in [-1, 1] -> ``[B, H, W, C]`` uint8."""
    x = ((images.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def image_grid(images: Tensor, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    arr = to_uint8(images)
    b, h, w, c = arr.shape
    ncols = ncols or int(np.ceil(np.sqrt(b)))
    nrows = int(np.ceil(b / ncols))
    out = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i in range(b):
        r, q = divmod(i, ncols)
        out[pad + r * (h + pad): pad + r * (h + pad) + h, pad + q * (w + pad): pad + q * (w + pad) + w] = arr[i]
    return out


def write_samples(images: Tensor, out_dir, stem: str, seed: int, config: dict) -> dict:
    """Write ``<stem>.png`` (grid), ``<stem>.f32`` (raw LE float32) and ``<stem>.json`` (sidecar)."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_grid(images)).save(out / f"{stem}.png", optimize=False)
    raw = images.detach().cpu().numpy().astype("<f4")
    (out / f"{stem}.f32").write_bytes(raw.tobytes())
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    sidecar = {
        "shape": list(raw.shape),
        "dtype": "float32-le",
        "seed": seed,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "config": config,
    }
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar


def read_samples(path) -> Tensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4").reshape(meta["shape"])
    return torch.from_numpy(arr.copy())
