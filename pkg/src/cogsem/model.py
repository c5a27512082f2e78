"""
CoGSEM: LVGB + CoSOD-TB + fusion decoder wired together.

The two groups of a training pair pass through the same modules one after the other.
"""

from __future__ import annotations

from typing import List, Optional, Union

import torch
import torch.nn as nn

from .config import ModelConfig
from .cosodtb import CoSODBranch, FusionDecoder
from .datamodel import ImageGroup, SaliencyMap
from .errors import ContractError
from .lvgb import LVGB, UncertaintyFeatures, VSource

# parameter-name prefixes owned by each part
PART_PREFIXES = {
    "vqvae": ("lvgb.encoder.", "lvgb.codebook.", "lvgb.decoder."),
    "prior": ("lvgb.prior.",),
    "v_proj": ("lvgb.v_proj.",),
    "branch": ("branch.",),
    "decoder": ("decoder.",),
}


class CoGSEM(nn.Module):
    def __init__(self, config: ModelConfig, image_size: int):
        super().__init__()
        self.config = config
        self.image_size = image_size
        self.lvgb = LVGB(config.vq, config.prior)
        self.branch = CoSODBranch(config.branch, image_size)
        self.decoder = FusionDecoder(config.branch, config.vq.v_channels)

    def parameters_of(self, part: str):
        if part not in PART_PREFIXES:
            raise ContractError(f"unknown model part {part!r}")
        prefixes = PART_PREFIXES[part]
        return [p for name, p in self.named_parameters() if name.startswith(prefixes)]

    def uncertainty(
        self,
        pixels: torch.Tensor,
        v_source: Optional[VSource] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        branch = self.config.branch
        if not branch.use_lvgb:
            grid = self.image_size // 16
            return pixels.new_zeros(pixels.shape[0], grid, grid, self.config.vq.v_channels)
        if v_source is None:
            v_source = branch.train_v_source if self.training else branch.test_v_source
        features: UncertaintyFeatures = self.lvgb.uncertainty(pixels, v_source, generator=generator)
        return features.values

    def forward(
        self,
        images: Union[ImageGroup, torch.Tensor],
        v_source: Optional[VSource] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Saliency maps [N, H, W] in [0, 1] for one group."""
        pixels = images.images if isinstance(images, ImageGroup) else images
        f = self.branch(pixels)
        v = self.uncertainty(pixels, v_source, generator)
        return self.decoder(f.values, v)

    @torch.no_grad()
    def predict(
        self,
        group: ImageGroup,
        v_source: Optional[VSource] = None,
        generator: Optional[torch.Generator] = None,
    ) -> List[SaliencyMap]:
        maps = self(group, v_source=v_source, generator=generator)
        return [SaliencyMap(maps[i].cpu(), item_id) for i, item_id in enumerate(group.ids)]
