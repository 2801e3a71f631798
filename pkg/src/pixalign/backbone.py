"""Plain ViT denoiser with AdaLN-Zero blocks and in-context class tokens.

The network predicts the clean image. Blocks are numbered from 1; class tokens
are appended to the sequence right before block ``in_context_start_block`` and
the feature used for representation alignment is the output of block
``alignment_depth`` (always before the class tokens join).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, InternalInvariantError, InvalidInputError


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    depth: int = 6
    hidden_dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    in_context_tokens: int = 8
    in_context_start_block: int = 3
    alignment_depth: int | None = None
    class_dropout: float = 0.1

    def __post_init__(self):
        if self.alignment_depth is None:
            self.alignment_depth = self.in_context_start_block - 1
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.in_context_start_block <= self.depth:
            raise ConfigError("in_context_start_block must lie in [1, depth]")
        if not 0 <= self.alignment_depth < self.in_context_start_block:
            raise ConfigError("alignment_depth must precede in_context_start_block")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")
        if self.in_context_tokens < 0 or self.num_classes < 1:
            raise ConfigError("in_context_tokens >= 0 and num_classes >= 1 required")
        if not 0 <= self.class_dropout < 1:
            raise ConfigError("class_dropout must lie in [0, 1)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


# Appendix-scale reference shapes, for documentation and config checks only.
REFERENCE_CONFIGS = {
    "B": dict(image_size=256, patch_size=16, depth=12, hidden_dim=768, heads=12, num_classes=1000,
              in_context_tokens=32, in_context_start_block=4),
    "L": dict(image_size=256, patch_size=16, depth=24, hidden_dim=1024, heads=16, num_classes=1000,
              in_context_tokens=32, in_context_start_block=8),
    "H": dict(image_size=256, patch_size=16, depth=32, hidden_dim=1280, heads=16, num_classes=1000,
              in_context_tokens=32, in_context_start_block=10),
}


@dataclass
class TokenGrid:
    """Hidden tokens ``[B, N, D]``; the first ``rows * cols`` are image tokens."""

    tokens: Tensor
    grid: tuple[int, int]
    n_ctx: int = 0

    def __post_init__(self):
        if self.tokens.shape[1] != self.n_patch + self.n_ctx:
            raise InvalidInputError(
                f"token count {self.tokens.shape[1]} != {self.n_patch} patches + {self.n_ctx} context")

    @property
    def n_patch(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n(self) -> int:
        return self.tokens.shape[1]

    def image_tokens(self) -> Tensor:
        return self.tokens[:, : self.n_patch]

    def replace(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.grid, self.n_ctx)


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, (H/p)*(W/p), p*p*C]``, row-major over the grid."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, patch_size: int, channels: int, grid: tuple[int, int]) -> Tensor:
    b = tokens.shape[0]
    p = patch_size
    gh, gw = grid
    x = tokens.reshape(b, gh, gw, p, p, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, gh * p, gw * p)


def in_context_concat(grid: TokenGrid, class_tokens: Tensor) -> TokenGrid:
    """Append ``K`` class tokens after the image tokens."""
    if grid.n_ctx:
        raise InternalInvariantError("class tokens were already concatenated")
    if class_tokens.shape[1] == 0:
        return grid
    if class_tokens.shape[0] != grid.tokens.shape[0] or class_tokens.shape[2] != grid.tokens.shape[2]:
        raise InvalidInputError("class token batch/width does not match the token grid")
    tokens = torch.cat([grid.tokens, class_tokens], dim=1)
    return TokenGrid(tokens, grid.grid, class_tokens.shape[1])


def strip_context(grid: TokenGrid) -> TokenGrid:
    return TokenGrid(grid.image_tokens(), grid.grid, 0)


@contextlib.contextmanager
def seeded(seed: int):
    """Run parameter initialisation under a fixed global seed without leaking RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.grid = (cfg.grid_size, cfg.grid_size)
        self.proj = nn.Linear(cfg.patch_size ** 2 * cfg.channels, cfg.hidden_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, cfg.hidden_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, images: Tensor) -> TokenGrid:
        tokens = self.proj(patchify(images, self.patch_size)) + self.pos_embed
        return TokenGrid(tokens, self.grid, 0)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden_dim: int, freq_dim: int = 256, max_period: float = 10000.0):
        super().__init__()
        self.freq_dim = freq_dim
        self.max_period = max_period
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden_dim), nn.SiLU(), nn.Linear(hidden_dim, hidden_dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def sinusoidal(self, t: Tensor) -> Tensor:
        # t lives in [0, 1]; scale so the frequencies cover a useful range
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(self.max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = (t * 1000.0)[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(self.sinusoidal(t))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class AdaLNZeroBlock(nn.Module):
    """Pre-norm attention + MLP block whose shift/scale/gate come from the conditioning vector.

    The modulation layer is zero-initialised, so a fresh block is the identity.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        for m in [self.attn.qkv, self.attn.proj, self.mlp[0], self.mlp[2]]:
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        if cond.shape[0] != x.shape[0]:
            raise InvalidInputError("token and conditioning batch sizes differ")
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(cond).chunk(6, dim=-1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


def adaln_zero_block(grid: TokenGrid, cond: Tensor, block: AdaLNZeroBlock) -> TokenGrid:
    return grid.replace(block(grid.tokens, cond))


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, out_dim)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        nn.init.xavier_uniform_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.adaLN_modulation(cond).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class DenoiserOutput(NamedTuple):
    x_pred: Tensor
    h_align: TokenGrid
    cond: Tensor


class JiT(nn.Module):
    """x-prediction transformer over non-overlapping pixel patches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_embed = PatchEmbed(cfg)
        self.t_embedder = TimestepEmbedder(d)
        # one extra row for the null (unconditional) class
        self.y_embedder = nn.Embedding(cfg.num_classes + 1, d)
        self.context_embedder = nn.Embedding(cfg.num_classes + 1, d)
        self.context_slots = nn.Parameter(torch.zeros(1, cfg.in_context_tokens, d))
        self.blocks = nn.ModuleList([AdaLNZeroBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.final_layer = FinalLayer(d, cfg.patch_size ** 2 * cfg.channels)
        nn.init.normal_(self.y_embedder.weight, std=0.02)
        nn.init.normal_(self.context_embedder.weight, std=0.02)
        nn.init.normal_(self.context_slots, std=0.02)

    def condition(self, t: Tensor, class_ids: Tensor) -> Tensor:
        return self.t_embedder(t) + self.y_embedder(class_ids)

    def class_tokens(self, class_ids: Tensor) -> Tensor:
        k = self.cfg.in_context_tokens
        tok = self.context_embedder(class_ids).unsqueeze(1).expand(-1, k, -1)
        return tok + self.context_slots

    def _check_inputs(self, x_t: Tensor, t: Tensor, class_ids: Tensor) -> Tensor:
        cfg = self.cfg
        if x_t.ndim != 4 or x_t.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise InvalidInputError(f"expected images [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}]")
        class_ids = torch.as_tensor(class_ids, dtype=torch.long, device=x_t.device)
        if class_ids.shape != (x_t.shape[0],):
            raise InvalidInputError("need one class id per image")
        if bool((class_ids < 0).any()) or bool((class_ids > cfg.num_classes).any()):
            raise InvalidInputError(f"class ids must lie in [0, {cfg.num_classes}]")
        return class_ids

    def forward(self, x_t: Tensor, t: Tensor, class_ids: Tensor) -> DenoiserOutput:
        cfg = self.cfg
        class_ids = self._check_inputs(x_t, t, class_ids)
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1).expand(x_t.shape[0])
        cond = self.condition(t, class_ids)
        grid = self.patch_embed(x_t)
        h_align = grid if cfg.alignment_depth == 0 else None
        for i, block in enumerate(self.blocks, start=1):
            if i == cfg.in_context_start_block:
                grid = in_context_concat(grid, self.class_tokens(class_ids))
            grid = adaln_zero_block(grid, cond, block)
            if i == cfg.alignment_depth:
                h_align = grid
        tokens = self.final_layer(strip_context(grid).tokens, cond)
        x_pred = unpatchify(tokens, cfg.patch_size, cfg.channels, grid.grid)
        return DenoiserOutput(x_pred, h_align, cond)


def build_backbone(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> JiT:
    with seeded(seed):
        model = JiT(cfg)
    return model.to(dtype)
