"""Training loop: noising, backbone, alignment branch, Adam, EMA shadows, checkpoints."""
from __future__ import annotations

import base64
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .alignment import (AlignmentBranch, alignment_loss, branch_predictions, build_encoder, build_head,
                        encode_target, total_loss)
from .backbone import JiT, ModelConfig, build_backbone
from .errors import (CheckpointError, ConfigError, CorruptCheckpointError, InvalidInputError, NumericalError,
                     StateError)
from .flow import T_EPS, denoising_loss, interpolate, sample_timesteps


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 64
    steps: int = 1000
    ema_decays: tuple[float, ...] = (0.9996, 0.9998, 0.9999)
    seed: int = 0
    grad_clip: float = 1.0
    t_distribution: str = "uniform"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.ema_decays = tuple(float(d) for d in self.ema_decays)
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if any(not 0 <= d <= 1 for d in self.ema_decays):
            raise ConfigError("every EMA decay must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size >= 1 and steps >= 0 required")
        if len(self.betas) != 2 or any(not 0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["ema_decays"] = list(self.ema_decays)
        return d


def ema_key(decay: float) -> str:
    return repr(float(decay))


def ema_update(shadow: dict[str, Tensor], params: dict[str, Tensor], decay: float) -> dict[str, Tensor]:
    """In place: ``shadow = decay * shadow + (1 - decay) * params``."""
    if shadow.keys() != params.keys():
        missing = set(params) ^ set(shadow)
        raise StateError(f"EMA shadow and parameters disagree on names: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            s = shadow[name]
            if s.shape != p.shape:
                raise StateError(f"EMA shape mismatch for {name}")
            s.mul_(decay).add_(p.detach(), alpha=1 - decay)
    return shadow


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class Trainer:
    """Owns the backbone, the optional alignment head, the optimizer and EMA shadows."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, branch: AlignmentBranch,
                 encoder=None, dtype=torch.float32, config_hash: str = ""):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.branch = branch
        self.dtype = dtype
        self.config_hash = config_hash
        if branch.active:
            self.encoder = encoder if encoder is not None else build_encoder(branch, model_cfg.image_size,
                                                                             model_cfg.channels)
            branch.feature_dim = self.encoder.feature_dim
        else:
            self.encoder = encoder
        seed = train_cfg.seed
        self.model: JiT = build_backbone(model_cfg, seed, dtype)
        self.head = build_head(branch, model_cfg.hidden_dim, model_cfg.heads, model_cfg.mlp_ratio,
                               seed=seed + 7919, dtype=dtype)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=train_cfg.lr, betas=train_cfg.betas,
                                          eps=train_cfg.adam_eps, weight_decay=train_cfg.weight_decay,
                                          foreach=False)
        self.step = 0
        self.ema = {ema_key(d): {k: v.detach().clone() for k, v in self.named_params().items()}
                    for d in train_cfg.ema_decays}
        # separate streams keep noise/timesteps identical across branch variants
        self.noise_gen = torch.Generator().manual_seed(seed)
        self.mask_gen = torch.Generator().manual_seed(seed + 1)
        self.data_gen = torch.Generator().manual_seed(seed + 2)

    # -- parameter views

    def named_params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.model.named_parameters()}
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.named_parameters()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    # -- one optimisation step

    def losses(self, images: Tensor, labels: Tensor, ids=None, drop_labels: bool = True):
        """Forward pass; returns (l_denoise, l_align or None, total, aux)."""
        cfg = self.model_cfg
        b = images.shape[0]
        gen = self.noise_gen
        t = sample_timesteps(b, gen, self.train_cfg.t_distribution, T_EPS, images.dtype)
        eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
        labels = labels.clone()
        if drop_labels and cfg.class_dropout > 0:
            drop = torch.rand(b, generator=gen) < cfg.class_dropout
            labels[drop] = cfg.null_class
        x_t = interpolate(images, eps, t)
        out = self.model(x_t, t, labels)
        l_denoise = denoising_loss(out.x_pred, x_t, images, eps, t)
        l_align = None
        if self.branch.active:
            target = encode_target(images, self.encoder, out.h_align.grid, ids)
            preds, _ = branch_predictions(self.head, self.branch, out.h_align, out.cond, self.mask_gen)
            l_align = alignment_loss(target, preds)
        total = total_loss(l_denoise, l_align, self.branch.lam, self.branch.variant)
        return l_denoise, l_align, total, {"t": t}

    def train_step(self, images: Tensor, labels: Tensor, ids=None) -> dict:
        if images.shape[0] == 0:
            raise InvalidInputError("empty batch")
        self.model.train()
        l_denoise, l_align, total, aux = self.losses(images, labels, ids)
        if not math.isfinite(total.item()):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step + 1}",
                {"step": self.step + 1, "l_denoise": l_denoise.item(),
                 "l_align": None if l_align is None else l_align.item(), "t": aux["t"].tolist()})
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        params = [p for p in self.parameters() if p.grad is not None]
        if self.train_cfg.grad_clip and self.train_cfg.grad_clip > 0:
            grad_norm = torch.nn.utils.clip_grad_norm_(params, self.train_cfg.grad_clip, foreach=False)
        else:
            grad_norm = torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params]))
        self.optimizer.step()
        self.step += 1
        named = self.named_params()
        for d in self.train_cfg.ema_decays:
            ema_update(self.ema[ema_key(d)], named, d)
        metrics = {"step": self.step, "l_denoise": l_denoise.item()}
        if l_align is not None:
            metrics["l_align"] = l_align.item()
        metrics["total"] = total.item()
        metrics["grad_norm"] = float(grad_norm)
        return metrics

    def next_batch(self, data) -> tuple[Tensor, Tensor, list | None]:
        n = len(data)
        b = min(self.train_cfg.batch_size, n)
        idx = torch.randperm(n, generator=self.data_gen)[:b]
        return data.batch(idx)

    def fit(self, data, steps: int | None = None, run_dir=None, log=None) -> list[dict]:
        """Run ``steps`` optimisation steps, streaming metrics to ``run_dir/metrics.jsonl``."""
        steps = self.train_cfg.steps if steps is None else steps
        history = []
        metrics_fh = timing_fh = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            mode = "a" if self.step else "w"
            metrics_fh = open(run_dir / "metrics.jsonl", mode)
            timing_fh = open(run_dir / "timing.jsonl", mode)
        try:
            for _ in range(steps):
                images, labels, ids = self.next_batch(data)
                t0 = time.perf_counter()
                try:
                    m = self.train_step(images, labels, ids)
                except TrainingDiverged as exc:
                    if run_dir is not None:
                        (run_dir / "diverged.json").write_text(json.dumps(exc.snapshot, indent=2))
                    raise
                history.append(m)
                if metrics_fh:
                    metrics_fh.write(json.dumps(m) + "\n")
                    timing_fh.write(json.dumps({"step": m["step"], "wall_time": time.perf_counter() - t0}) + "\n")
                if log is not None:
                    log(m)
                every = self.train_cfg.checkpoint_every
                if run_dir is not None and every and self.step % every == 0:
                    save_checkpoint(self, run_dir / "checkpoints" / f"step_{self.step:07d}.ckpt")
        finally:
            if metrics_fh:
                metrics_fh.close()
                timing_fh.close()
        if run_dir is not None:
            save_checkpoint(self, run_dir / "checkpoints" / "last.ckpt")
        return history

    # -- views for evaluation

    def params_for(self, ema: str | None) -> dict[str, Tensor]:
        if ema in (None, "none", "raw"):
            return self.named_params()
        key = ema_key(float(ema))
        if key not in self.ema:
            raise ConfigError(f"no EMA shadow with decay {ema}; have {sorted(self.ema)}")
        return self.ema[key]

    def eval_model(self, ema: str | None = None) -> JiT:
        """A detached copy of the backbone carrying raw or EMA weights."""
        return backbone_from_tensors(self.model_cfg, self.params_for(ema), self.dtype)

    def config_dict(self) -> dict:
        return {"model": self.model_cfg.to_dict(), "train": self.train_cfg.to_dict(),
                "alignment": self.branch.to_dict()}


def backbone_from_tensors(cfg: ModelConfig, tensors: dict[str, Tensor], dtype=torch.float32) -> JiT:
    model = JiT(cfg).to(dtype)
    state = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()}, strict=True)
    return model.eval()


# ---------------------------------------------------------------- checkpoint container
#
#   b"PXCK" | u32 version | u32 len + config hash (ascii) | u32 n_tensors
#   per tensor: u32 len + name | u32 ndim | u64 dims... | u64 nbytes | float32 LE data
#   u64 len + JSON trailer | b"KCXP"

CKPT_MAGIC = b"PXCK"
CKPT_END = b"KCXP"
CKPT_VERSION = 1


def _gen_state(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode()


def _set_gen_state(g: torch.Generator, s: str) -> None:
    g.set_state(torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy()))


def _write_tensor(fh, name: str, t: Tensor) -> None:
    arr = t.detach().cpu().numpy().astype("<f4")
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)) + nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    data = arr.tobytes()
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def save_checkpoint(trainer: Trainer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, Tensor] = dict(trainer.named_params())
    adam_steps = {}
    for name, p in trainer.named_params().items():
        st = trainer.optimizer.state.get(p)
        if st:
            tensors[f"adam_m/{name}"] = st["exp_avg"]
            tensors[f"adam_v/{name}"] = st["exp_avg_sq"]
            adam_steps[name] = float(st["step"])
    for key, shadow in trainer.ema.items():
        for name, t in shadow.items():
            tensors[f"ema/{key}/{name}"] = t
    trailer = {
        "step": trainer.step,
        "adam_steps": adam_steps,
        "rng": {"noise": _gen_state(trainer.noise_gen), "mask": _gen_state(trainer.mask_gen),
                "data": _gen_state(trainer.data_gen)},
        "config": trainer.config_dict(),
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    h = trainer.config_hash.encode()
    buf.write(struct.pack("<I", len(h)) + h)
    buf.write(struct.pack("<I", len(tensors)))
    for name in tensors:
        _write_tensor(buf, name, tensors[name])
    tb = json.dumps(trailer, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(tb)) + tb + CKPT_END)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    config_hash: str
    tensors: dict[str, Tensor]
    trailer: dict
    version: int = CKPT_VERSION

    @property
    def step(self) -> int:
        return self.trailer["step"]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.trailer["config"]["model"])

    def strip_head(self) -> "Checkpoint":
        keep = {k: v for k, v in self.tensors.items() if "head." not in k}
        return Checkpoint(self.config_hash, keep, self.trailer, self.version)

    def params(self, ema: str | None = None) -> dict[str, Tensor]:
        if ema in (None, "none", "raw"):
            prefix = ""
            names = [k for k in self.tensors if k.startswith(("backbone.", "head."))]
        else:
            prefix = f"ema/{ema_key(float(ema))}/"
            names = [k for k in self.tensors if k.startswith(prefix)]
            if not names:
                raise CheckpointError(f"checkpoint has no EMA shadow for decay {ema}")
        return {k[len(prefix):]: self.tensors[k] for k in names}

    def backbone(self, ema: str | None = None) -> JiT:
        return backbone_from_tensors(self.model_config(), self.params(ema))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    r = _Reader(raw, path)
    if r.take(4) != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {CKPT_VERSION}")
    (hlen,) = r.unpack("<I")
    chash = r.take(hlen).decode()
    if expected_hash is not None and chash != expected_hash:
        raise CheckpointError(f"{path}: config hash {chash[:12]} does not match the run config {expected_hash[:12]}")
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"{path}: tensor {name} size disagrees with its shape")
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    (tlen,) = r.unpack("<Q")
    try:
        trailer = json.loads(r.take(tlen))
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable trailer ({exc})") from None
    if r.take(4) != CKPT_END:
        raise CorruptCheckpointError(f"{path}: missing end marker")
    return Checkpoint(chash, tensors, trailer, version)


def trainer_from_checkpoint(ckpt: Checkpoint, encoder=None) -> Trainer:
    """Rebuild a trainer that continues exactly where the checkpoint left off."""
    cfg = ckpt.trailer["config"]
    trainer = Trainer(ModelConfig(**cfg["model"]), TrainConfig(**cfg["train"]), AlignmentBranch(**cfg["alignment"]),
                      encoder=encoder, config_hash=ckpt.config_hash)
    named = trainer.named_params()
    missing = [k for k in named if k not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for k, p in named.items():
            p.copy_(ckpt.tensors[k])
        for key, shadow in trainer.ema.items():
            for k in shadow:
                shadow[k].copy_(ckpt.tensors[f"ema/{key}/{k}"])
    for k, p in named.items():
        if k in ckpt.trailer["adam_steps"]:
            trainer.optimizer.state[p] = {
                "step": torch.tensor(ckpt.trailer["adam_steps"][k]),
                "exp_avg": ckpt.tensors[f"adam_m/{k}"].clone(),
                "exp_avg_sq": ckpt.tensors[f"adam_v/{k}"].clone(),
            }
    trainer.step = ckpt.step
    _set_gen_state(trainer.noise_gen, ckpt.trailer["rng"]["noise"])
    _set_gen_state(trainer.mask_gen, ckpt.trailer["rng"]["mask"])
    _set_gen_state(trainer.data_gen, ckpt.trailer["rng"]["data"])
    return trainer
