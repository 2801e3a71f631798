"""Representation-alignment branches attached to an intermediate backbone feature.

Three variants are supported:

* ``none`` - plain denoising training;
* ``mlp``  - a token-wise projection head regressed onto frozen encoder features;
* ``mta``  - a masked transformer adapter: a random subset of tokens is zeroed,
  two AdaLN-Zero blocks aggregate context, and a linear layer maps to the
  encoder feature width.

Alignment is scored with the negative mean per-patch cosine similarity, taken
over every patch position including the masked ones.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .backbone import AdaLNZeroBlock, TokenGrid, seeded
from .errors import ConfigError, DomainError, InvalidInputError, UsageError

VARIANTS = ("none", "mlp", "mta")
COS_EPS = 1e-8


@dataclass
class AlignmentBranch:
    variant: str = "mta"
    mask_ratio: float = 0.2
    lam: float = 0.1
    encoder: str = "lossy-pool"
    feature_dim: int = 32
    mask_token: bool = False
    mlp_hidden: int = 0
    features_path: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown alignment variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.active and self.lam <= 0:
            raise ConfigError("lambda must be > 0 when an alignment branch is active")
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; expected one of {ENCODER_KINDS}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")

    @property
    def active(self) -> bool:
        return self.variant != "none"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- encoders

ENCODER_KINDS = ("frozen-random-vit", "precomputed-file", "lossy-pool")


class SemanticEncoder(nn.Module):
    """Frozen feature extractor producing ``[B, rows, cols, feature_dim]`` grids."""

    kind = "abstract"

    def __init__(self, feature_dim: int, grid: tuple[int, int]):
        super().__init__()
        self.feature_dim = feature_dim
        self.grid = grid

    def freeze(self) -> "SemanticEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # always stays in eval mode
        return super().train(False)

    def features(self, images: Tensor, ids=None) -> Tensor:
        raise NotImplementedError


class LossyPoolEncoder(SemanticEncoder):
    """Blur, average-pool to a coarse grid, then a fixed random projection.

    Deliberately many-to-one: anything finer than the pooling cells (texture,
    per-pixel noise) is invisible to it.
    """

    kind = "lossy-pool"

    def __init__(self, image_size: int = 32, channels: int = 3, feature_dim: int = 32, grid: int = 4,
                 blur_sigma: float = 1.5, seed: int = 1234):
        super().__init__(feature_dim, (grid, grid))
        if image_size % grid:
            raise ConfigError("lossy-pool grid must divide the image size")
        radius = max(1, int(math.ceil(2 * blur_sigma)))
        xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
        k = torch.exp(-0.5 * (xs / blur_sigma) ** 2)
        self.register_buffer("blur_kernel", (k / k.sum()).float())
        gen = torch.Generator().manual_seed(seed)
        in_dim = 9 * channels
        self.register_buffer("proj", (torch.randn(in_dim, feature_dim, generator=gen) / math.sqrt(in_dim)).float())
        self.register_buffer("proj_bias", (0.1 * torch.randn(feature_dim, generator=gen)).float())
        self.channels = channels
        self.pool = image_size // grid

    def features(self, images: Tensor, ids=None) -> Tensor:
        c = images.shape[1]
        k = self.blur_kernel.to(images.dtype)
        r = k.numel() // 2
        x = F.pad(images, (r, r, r, r), mode="replicate")
        x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
        x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
        x = F.avg_pool2d(x, self.pool)
        # 3x3 neighbourhood of pooled cells, replicate-padded so constant images stay constant
        x = F.unfold(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3)
        b = images.shape[0]
        x = x.transpose(1, 2).reshape(b, self.grid[0], self.grid[1], -1)
        return torch.tanh(x @ self.proj.to(images.dtype) + self.proj_bias.to(images.dtype))


class FrozenRandomViT(SemanticEncoder):
    """Small transformer with seed-fixed weights, never trained."""

    kind = "frozen-random-vit"

    def __init__(self, image_size: int = 32, channels: int = 3, feature_dim: int = 32, patch_size: int = 8,
                 width: int = 64, depth: int = 2, heads: int = 4, seed: int = 1234):
        grid = image_size // patch_size
        super().__init__(feature_dim, (grid, grid))
        self.patch_size = patch_size
        with seeded(seed):
            self.embed = nn.Conv2d(channels, width, patch_size, stride=patch_size)
            self.pos = nn.Parameter(0.02 * torch.randn(1, grid * grid, width))
            layer = nn.TransformerEncoderLayer(width, heads, 2 * width, dropout=0.0, batch_first=True,
                                               norm_first=True)
            self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
            self.norm = nn.LayerNorm(width)
            self.head = nn.Linear(width, feature_dim)
        self.freeze()

    def features(self, images: Tensor, ids=None) -> Tensor:
        x = self.embed(images).flatten(2).transpose(1, 2) + self.pos
        x = self.head(self.norm(self.encoder(x)))
        return x.reshape(images.shape[0], self.grid[0], self.grid[1], self.feature_dim)


class PrecomputedEncoder(SemanticEncoder):
    """Looks features up by sample id in a precomputed feature store."""

    kind = "precomputed-file"

    def __init__(self, store):
        super().__init__(store.feature_dim, store.grid)
        self.store = store

    def features(self, images: Tensor, ids=None) -> Tensor:
        if ids is None:
            raise UsageError("precomputed-file encoder needs sample ids")
        feats = self.store.read_many(list(ids))
        return torch.from_numpy(feats).to(images.dtype)


def build_encoder(branch: AlignmentBranch, image_size: int, channels: int = 3) -> SemanticEncoder:
    if branch.encoder == "lossy-pool":
        return LossyPoolEncoder(image_size, channels, branch.feature_dim).freeze()
    if branch.encoder == "frozen-random-vit":
        return FrozenRandomViT(image_size, channels, branch.feature_dim)
    from .features import FeatureStore

    if not branch.features_path:
        raise ConfigError("precomputed-file encoder requires alignment.features_path")
    enc = PrecomputedEncoder(FeatureStore.open(branch.features_path)).freeze()
    branch.feature_dim = enc.feature_dim
    return enc


def resample_grid(feats: Tensor, grid: tuple[int, int]) -> Tensor:
    """Bilinear (half-pixel centres) resampling of ``[B, r, c, D]`` to ``grid``."""
    b, r, c, d = feats.shape
    if r == 0 or c == 0:
        raise ConfigError("cannot resample an empty feature grid")
    if (r, c) == tuple(grid):
        return feats
    x = feats.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=tuple(grid), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1)


def encode_target(images: Tensor, encoder: SemanticEncoder, grid: tuple[int, int], ids=None) -> Tensor:
    """Per-patch target features of the *clean* images, ``[B, rows*cols, D]``."""
    with torch.no_grad():
        feats = resample_grid(encoder.features(images, ids), grid)
    return feats.reshape(feats.shape[0], grid[0] * grid[1], -1).detach()


# ---------------------------------------------------------------- masking

@dataclass
class PatchMask:
    bits: Tensor  # [B, N] bool, True = masked
    ratio: float

    @property
    def keep(self) -> Tensor:
        return ~self.bits


def num_masked(n_patch: int, r: float) -> int:
    # guard against r * n landing a hair below an integer
    return int(math.floor(r * n_patch + 1e-9))


def sample_mask(batch: int, n_patch: int, r: float, generator: torch.Generator | None = None) -> PatchMask:
    """Mask exactly ``floor(r * n_patch)`` positions per sample, uniformly without replacement."""
    if not 0 <= r < 1:
        raise DomainError("mask ratio must lie in [0, 1)")
    k = num_masked(n_patch, r)
    bits = torch.zeros(batch, n_patch, dtype=torch.bool)
    if k:
        idx = torch.rand(batch, n_patch, generator=generator).argsort(dim=1)[:, :k]
        bits.scatter_(1, idx, True)
    return PatchMask(bits, r)


def apply_mask(h: TokenGrid, mask: PatchMask, mask_token: Tensor | None = None) -> TokenGrid:
    """Zero (or replace with ``mask_token``) the masked positions; length and order unchanged."""
    if h.n_ctx:
        raise InvalidInputError("apply_mask expects image tokens only")
    if mask.bits.shape != h.tokens.shape[:2]:
        raise InvalidInputError(f"mask shape {tuple(mask.bits.shape)} != tokens {tuple(h.tokens.shape[:2])}")
    keep = mask.keep.to(h.tokens.dtype).unsqueeze(-1)
    tokens = h.tokens * keep
    if mask_token is not None:
        tokens = tokens + (1 - keep) * mask_token
    return h.replace(tokens)


# ---------------------------------------------------------------- heads

class MLPHead(nn.Module):
    """Token-wise three-layer projection (the REPA baseline)."""

    variant = "mlp"

    def __init__(self, in_dim: int, feature_dim: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, feature_dim),
        )

    def forward(self, h: TokenGrid, cond: Tensor | None = None) -> Tensor:
        return self.net(h.image_tokens())


class MaskedTransformerAdapter(nn.Module):
    """Two AdaLN-Zero blocks sharing the backbone conditioning, then a linear map."""

    variant = "mta"
    num_blocks = 2

    def __init__(self, dim: int, heads: int, feature_dim: int, mlp_ratio: float = 4.0, mask_token: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList([AdaLNZeroBlock(dim, heads, mlp_ratio) for _ in range(self.num_blocks)])
        self.proj = nn.Linear(dim, feature_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim)) if mask_token else None

    def forward(self, h: TokenGrid, cond: Tensor) -> Tensor:
        x = h.image_tokens()
        for block in self.blocks:
            x = block(x, cond)
        return self.proj(x)


def mta_forward(h_masked: TokenGrid, cond: Tensor, head: nn.Module) -> Tensor:
    if getattr(head, "variant", None) != "mta":
        raise UsageError("mta_forward needs a MaskedTransformerAdapter")
    return head(h_masked, cond)


def mlp_forward(h: TokenGrid, head: nn.Module) -> Tensor:
    if getattr(head, "variant", None) != "mlp":
        raise UsageError("mlp_forward needs an MLPHead")
    return head(h)


def build_head(branch: AlignmentBranch, hidden_dim: int, heads: int, mlp_ratio: float = 4.0,
               seed: int = 1, dtype=torch.float32) -> nn.Module | None:
    if not branch.active:
        return None
    with seeded(seed):
        if branch.variant == "mlp":
            head = MLPHead(hidden_dim, branch.feature_dim, branch.mlp_hidden)
        else:
            head = MaskedTransformerAdapter(hidden_dim, heads, branch.feature_dim, mlp_ratio, branch.mask_token)
    return head.to(dtype)


# ---------------------------------------------------------------- losses

def cosine_similarity(a: Tensor, b: Tensor, eps: float = COS_EPS) -> Tensor:
    na = torch.sqrt((a * a).sum(-1) + eps * eps)
    nb = torch.sqrt((b * b).sum(-1) + eps * eps)
    return ((a * b).sum(-1) / (na * nb)).clamp(-1.0, 1.0)


def alignment_loss(targets: Tensor, preds: Tensor) -> Tensor:
    """Negative mean cosine similarity over batch and all patch positions."""
    if targets.shape != preds.shape:
        raise InvalidInputError(f"target/pred shape mismatch {tuple(targets.shape)} vs {tuple(preds.shape)}")
    return -cosine_similarity(targets, preds).mean()


def total_loss(l_denoise: Tensor, l_align: Tensor | None, lam: float, variant: str = "mta") -> Tensor:
    if variant == "none" or l_align is None:
        return l_denoise
    if lam <= 0:
        raise ConfigError("lambda must be > 0 when an alignment branch is active")
    return l_denoise + lam * l_align


def branch_predictions(head: nn.Module, branch: AlignmentBranch, h_align: TokenGrid, cond: Tensor,
                       generator: torch.Generator | None = None) -> tuple[Tensor, PatchMask | None]:
    """Run the configured head on the alignment feature, masking first for ``mta``."""
    if branch.variant == "mlp":
        return mlp_forward(h_align, head), None
    mask = sample_mask(h_align.tokens.shape[0], h_align.n_patch, branch.mask_ratio, generator)
    h = apply_mask(h_align, mask, head.mask_token)
    return mta_forward(h, cond, head), mask
