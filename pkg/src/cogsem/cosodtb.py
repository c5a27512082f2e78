"""
Transformer CoSOD branch (CoSOD-TB) and the fusion decoder.

The branch embeds patches at stride 16, runs a small transformer backbone, then propagates a
group token (shared by the whole group) and a specific token (one per image) through further
transformer layers. The fusion decoder concatenates the branch features F with the LVGB
features V, decodes them with transformer layers and upsamples to a saliency map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BranchConfig
from .datamodel import ImageGroup, SaliencyMap
from .errors import ShapeError
from .gsem import FeatureSequence
from .lvgb import UncertaintyFeatures
from .smart_logger import SmartLogger

LOG_CATEGORY = "COSODTB"

PATCH_STRIDE = 16
BCE_EPS = 1e-7


@dataclass(frozen=True)
class TokenState:
    patch_tokens: torch.Tensor  # [N, h*w, c]
    group_token: torch.Tensor  # [N, 1, c]
    specific_token: torch.Tensor  # [N, 1, c]

    def concatenated(self) -> torch.Tensor:
        return torch.cat([self.group_token, self.specific_token, self.patch_tokens], dim=1)


@dataclass(frozen=True)
class BranchFeatures:
    values: torch.Tensor  # [N, h, w, c]

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeError(f"branch features must be [N, h, w, c], got {list(self.values.shape)}")


def _layer(width: int, heads: int, mlp_ratio: float) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d_model=width,
        nhead=heads,
        dim_feedforward=int(width * mlp_ratio),
        dropout=0.0,
        activation="gelu",
        batch_first=True,
        norm_first=True,
    )


class PatchEmbed(nn.Module):
    """Two stride-4 convolutions (effective stride 16) plus learned position embeddings."""

    def __init__(self, image_size: int, width: int):
        super().__init__()
        self.grid = image_size // PATCH_STRIDE
        self.soft_split = nn.Sequential(
            nn.Conv2d(3, width // 2, 7, stride=4, padding=3),
            nn.GELU(),
            nn.Conv2d(width // 2, width, 3, stride=4, padding=1),
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.soft_split(images.permute(0, 3, 1, 2))
        if tokens.shape[-2:] != (self.grid, self.grid):
            raise ShapeError(
                f"patch grid {tuple(tokens.shape[-2:])} does not match configured {self.grid}x{self.grid}"
            )
        return tokens.flatten(2).transpose(1, 2) + self.pos_embed


class CoSODBranch(nn.Module):
    def __init__(self, config: BranchConfig, image_size: int):
        super().__init__()
        width = config.embed_dim
        self.grid = image_size // PATCH_STRIDE
        self.patch_embed = PatchEmbed(image_size, width)
        self.backbone = nn.ModuleList(
            [_layer(width, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.token_layers = nn.ModuleList(
            [_layer(width, config.heads, config.mlp_ratio) for _ in range(config.token_depth)]
        )
        self.group_mlps = nn.ModuleList(
            [
                nn.Sequential(
                    nn.LayerNorm(width),
                    nn.Linear(width, int(width * config.mlp_ratio)),
                    nn.GELU(),
                    nn.Linear(int(width * config.mlp_ratio), width),
                )
                for _ in range(config.token_depth)
            ]
        )
        self.group_token = nn.Parameter(torch.zeros(1, 1, width))
        self.specific_token = nn.Parameter(torch.zeros(1, 1, width))
        nn.init.trunc_normal_(self.group_token, std=0.02)
        nn.init.trunc_normal_(self.specific_token, std=0.02)
        self.norm = nn.LayerNorm(width)

    @staticmethod
    def _pixels(images: Union[ImageGroup, torch.Tensor]) -> torch.Tensor:
        pixels = images.images if isinstance(images, ImageGroup) else images
        if pixels.dim() != 4 or pixels.shape[-1] != 3:
            raise ShapeError(f"images must be [N, H, W, 3], got {list(pixels.shape)}")
        return pixels

    def _backbone_tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(pixels)
        for layer in self.backbone:
            tokens = layer(tokens)
        return tokens

    def backbone_features(self, images: Union[ImageGroup, torch.Tensor]) -> FeatureSequence:
        """Backbone token grid [N, h, w, c], the feature space of difficulty scoring."""
        tokens = self._backbone_tokens(self._pixels(images))
        n, _, c = tokens.shape
        return FeatureSequence(tokens.reshape(n, self.grid, self.grid, c))

    def tokens(self, images: Union[ImageGroup, torch.Tensor]) -> TokenState:
        pixels = self._pixels(images)
        n = pixels.shape[0]
        if n < 2:
            SmartLogger.log(
                "WARNING",
                "Group of fewer than 2 images; group consensus degenerates",
                category=LOG_CATEGORY,
                params={"n": n},
            )
        patches = self._backbone_tokens(pixels)
        group = self.group_token.expand(n, -1, -1)
        specific = self.specific_token.expand(n, -1, -1)
        for layer, mlp in zip(self.token_layers, self.group_mlps):
            sequence = layer(torch.cat([group, specific, patches], dim=1))
            group_out, specific, patches = sequence[:, :1], sequence[:, 1:2], sequence[:, 2:]
            group_out = group_out + mlp(group_out)
            # shared across the group; the mean keeps the branch permutation-equivariant
            group = group_out.mean(dim=0, keepdim=True).expand(n, -1, -1)
        return TokenState(patch_tokens=patches, group_token=group, specific_token=specific)

    def forward(self, images: Union[ImageGroup, torch.Tensor]) -> BranchFeatures:
        state = self.tokens(images)
        n, _, c = state.patch_tokens.shape
        values = self.norm(state.patch_tokens).reshape(n, self.grid, self.grid, c)
        return BranchFeatures(values)


def branch_forward(branch: CoSODBranch, images: Union[ImageGroup, torch.Tensor]) -> BranchFeatures:
    return branch(images)


class FusionDecoder(nn.Module):
    """[F ; V] -> linear -> transformer layers + MLP head -> four x2 upsampling stages -> sigmoid."""

    def __init__(self, config: BranchConfig, v_channels: int):
        super().__init__()
        width = config.embed_dim
        self.fuse = nn.Linear(width + v_channels, width)
        self.layers = nn.ModuleList(
            [_layer(width, config.heads, config.mlp_ratio) for _ in range(config.decoder_depth)]
        )
        self.head = nn.Sequential(
            nn.LayerNorm(width), nn.Linear(width, width), nn.GELU(), nn.Linear(width, width)
        )
        widths = [width] + [max(width // 2 ** (i + 1), 8) for i in range(4)]
        self.up_projections = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 1) for i in range(4)]
        )
        self.out = nn.Conv2d(widths[-1], 1, 3, padding=1)

    def forward(self, f: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if f.shape[:3] != v.shape[:3]:
            raise ShapeError(
                f"branch features {list(f.shape)} and uncertainty features {list(v.shape)} differ spatially"
            )
        n, h, w, _ = f.shape
        tokens = self.fuse(torch.cat([f, v.to(f.dtype)], dim=-1)).reshape(n, h * w, -1)
        for layer in self.layers:
            tokens = layer(tokens)
        tokens = self.head(tokens)
        x = tokens.transpose(1, 2).reshape(n, -1, h, w)
        for projection in self.up_projections:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.gelu(projection(x))
        return torch.sigmoid(self.out(x)).squeeze(1)


def fuse_and_decode(
    decoder: FusionDecoder,
    f: BranchFeatures,
    v: Union[UncertaintyFeatures, torch.Tensor],
    ids: Sequence[str],
) -> List[SaliencyMap]:
    values = v.values if isinstance(v, UncertaintyFeatures) else v
    maps = decoder(f.values, values)
    return [SaliencyMap(maps[i].detach(), item_id) for i, item_id in enumerate(ids)]


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Pixel-averaged BCE per image, averaged over the 2N images of a pair."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {list(pred.shape)} and target {list(target.shape)} differ")
    p = pred.clamp(eps, 1.0 - eps)
    target = target.to(p.dtype)
    per_pixel = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    return per_pixel.flatten(1).mean(dim=1).mean()
