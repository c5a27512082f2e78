"""
Latent variable generator branch (LVGB).

Key features:
- VQ-VAE: convolutional encoder (4x downsampling), nearest-neighbour codebook with a
  straight-through estimator, decoder whose first upsampling block is tapped for V
- VQ-VAE loss with stop-gradient routing of the codebook and commitment terms
- Autoregressive prior over code indices (masked gated convolutions, optional causal attention)
- Ancestral raster sampling and one-pass conditional resampling of an image's own codes
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Literal, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PriorConfig, VQConfig
from .datamodel import ImageGroup
from .errors import ContractError, NumericError, ShapeError
from .smart_logger import SmartLogger

LOG_CATEGORY = "LVGB"

DOWNSAMPLE = 4
V_STRIDE = 16

VSource = Literal["reconstruction", "resampled"]


@dataclass(frozen=True)
class LatentGrid:
    continuous: torch.Tensor  # ze [N, hz, wz, D]
    quantized: torch.Tensor  # zq [N, hz, wz, D], rows of the codebook
    indices: torch.Tensor  # z [N, hz, wz]

    @property
    def straight_through(self) -> torch.Tensor:
        """zq in the forward pass, identity to ze in the backward pass."""
        return self.quantized.detach() + (self.continuous - self.continuous.detach())


@dataclass(frozen=True)
class UncertaintyFeatures:
    values: torch.Tensor  # [N, h, w, c_v]

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeError(f"uncertainty features must be [N, h, w, c], got {list(self.values.shape)}")


class Codebook(nn.Module):
    def __init__(self, num_embeddings: int = 128, embedding_dim: int = 384):
        super().__init__()
        if num_embeddings < 2:
            raise ContractError(f"a codebook needs K >= 2 entries, got {num_embeddings}")
        self.embeddings = nn.Parameter(
            torch.empty(num_embeddings, embedding_dim).uniform_(
                -1.0 / num_embeddings, 1.0 / num_embeddings
            )
        )

    @property
    def num_embeddings(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @torch.no_grad()
    def reinit_dead_codes(self, ze: torch.Tensor, indices: torch.Tensor, generator=None) -> int:
        """Move entries unused in ``indices`` onto randomly chosen encoder outputs."""
        usage = torch.bincount(indices.reshape(-1), minlength=self.num_embeddings)
        dead = torch.nonzero(usage == 0).flatten()
        if dead.numel() == 0:
            return 0
        flat = ze.detach().reshape(-1, self.embedding_dim)
        picks = torch.randint(0, flat.shape[0], (dead.numel(),), generator=generator)
        self.embeddings[dead] = flat[picks.to(flat.device)].to(self.embeddings.dtype)
        return int(dead.numel())


def quantize(ze: torch.Tensor, codebook: Union[Codebook, torch.Tensor]) -> LatentGrid:
    """Nearest codebook entry per position; the lowest index wins ties."""
    embeddings = codebook.embeddings if isinstance(codebook, Codebook) else codebook
    if embeddings.dim() != 2 or embeddings.shape[0] == 0:
        raise ContractError("quantize needs a non-empty [K, D] codebook")
    if ze.shape[-1] != embeddings.shape[1]:
        raise ShapeError(f"latent dim {ze.shape[-1]} does not match codebook dim {embeddings.shape[1]}")
    flat = ze.detach().reshape(-1, embeddings.shape[1])
    distances = torch.cdist(
        flat, embeddings.detach().to(flat.dtype), compute_mode="donot_use_mm_for_euclid_dist"
    )
    # argmin returns the first minimal index
    indices = distances.argmin(dim=1)
    quantized = F.embedding(indices, embeddings).reshape(ze.shape)
    return LatentGrid(continuous=ze, quantized=quantized, indices=indices.reshape(ze.shape[:-1]))


def vqvae_loss(
    x: torch.Tensor,
    x_rec: torch.Tensor,
    ze: torch.Tensor,
    zq: torch.Tensor,
    lambda0: float = 0.25,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    MSE(x, x_rec) + MSE(sg[ze], zq) + lambda0 * MSE(sg[zq], ze).

    The codebook term only reaches the codebook, the commitment term only the encoder.
    """
    if lambda0 < 0:
        raise ContractError(f"commitment weight must be >= 0, got {lambda0}")
    if x.shape != x_rec.shape or ze.shape != zq.shape:
        raise ShapeError("vqvae_loss needs aligned reconstruction and latent shapes")
    reconstruction = F.mse_loss(x_rec, x)
    codebook = F.mse_loss(zq, ze.detach())
    components = {"reconstruction": reconstruction, "codebook": codebook}
    total = reconstruction + codebook
    if lambda0 > 0:
        commitment = F.mse_loss(ze, zq.detach())
        components["commitment"] = commitment
        total = total + lambda0 * commitment
    else:
        components["commitment"] = torch.zeros_like(codebook)
    return total, components


# ---------------------------------------------------------------------------
# VQ-VAE
# ---------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, hidden: int, embedding_dim: int, n_residual_blocks: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden // 2, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden // 2, hidden, 4, stride=2, padding=1),
            *[ResidualBlock(hidden) for _ in range(n_residual_blocks)],
            nn.ReLU(),
            nn.Conv2d(hidden, embedding_dim, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # [N, H, W, 3] -> [N, H/4, W/4, D]
        return self.net(images.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class Decoder(nn.Module):
    def __init__(self, hidden: int, embedding_dim: int, n_residual_blocks: int = 2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(embedding_dim, hidden, 3, padding=1),
            *[ResidualBlock(hidden) for _ in range(n_residual_blocks)],
            nn.ReLU(),
        )
        self.up1 = nn.Sequential(nn.ConvTranspose2d(hidden, hidden // 2, 4, stride=2, padding=1), nn.ReLU())
        self.up2 = nn.ConvTranspose2d(hidden // 2, 3, 4, stride=2, padding=1)

    @property
    def tap_channels(self) -> int:
        return self.up1[0].out_channels

    def forward(self, zq: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """[N, hz, wz, D] -> (reconstruction [N, H, W, 3], first upsampling block output)."""
        tap = self.up1(self.stem(zq.permute(0, 3, 1, 2)))
        reconstruction = torch.sigmoid(self.up2(tap)).permute(0, 2, 3, 1)
        return reconstruction, tap


# ---------------------------------------------------------------------------
# Autoregressive prior
# ---------------------------------------------------------------------------


class MaskedConv2d(nn.Conv2d):
    """Raster-causal convolution; type A hides the centre position, type B shows it."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, mask_type: str):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        if mask_type not in ("A", "B"):
            raise ContractError(f"mask type must be A or B, got {mask_type!r}")
        mask = torch.ones(kernel_size, kernel_size)
        center = kernel_size // 2
        mask[center, center + (mask_type == "B"):] = 0
        mask[center + 1:, :] = 0
        self.register_buffer("mask", mask[None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.mask, self.bias, padding=self.padding)


class GatedResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        self.conv = MaskedConv2d(channels, 2 * channels, kernel_size, "B")
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, b = self.conv(x).chunk(2, dim=1)
        return x + self.out(torch.tanh(a) * torch.sigmoid(b))


class CausalSelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        causal = torch.triu(torch.ones(h * w, h * w, dtype=torch.bool, device=x.device), diagonal=1)
        normed = self.norm(seq)
        attended, _ = self.attn(normed, normed, normed, attn_mask=causal, need_weights=False)
        return (seq + attended).transpose(1, 2).reshape(n, c, h, w)


class CodePrior(nn.Module):
    """Logits over the next code index at every position of a [N, hz, wz] index grid."""

    def __init__(
        self,
        num_embeddings: int,
        hidden: int = 64,
        n_layers: int = 4,
        kernel_size: int = 3,
        use_attention: bool = False,
        heads: int = 4,
    ):
        super().__init__()
        self.num_embeddings = num_embeddings
        self.embed = nn.Embedding(num_embeddings, hidden)
        self.first = MaskedConv2d(hidden, hidden, kernel_size, "A")
        layers = []
        for i in range(n_layers):
            layers.append(GatedResidualBlock(hidden, kernel_size))
            if use_attention and i == n_layers - 1:
                layers.append(CausalSelfAttention(hidden, heads))
        self.layers = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReLU(), nn.Conv2d(hidden, num_embeddings, 1))

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        x = self.embed(indices).permute(0, 3, 1, 2)
        return self.head(self.layers(self.first(x)))


PriorModel = Callable[[torch.Tensor], torch.Tensor]


def _check_indices(indices: torch.Tensor, num_embeddings: int) -> None:
    if indices.dtype not in (torch.int64, torch.int32):
        raise ContractError(f"code indices must be integers, got {indices.dtype}")
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= num_embeddings):
        raise ContractError(f"code indices leave [0, {num_embeddings})")


def prior_nll(indices: torch.Tensor, prior_model: PriorModel) -> torch.Tensor:
    """Mean next-index cross-entropy over all positions of the raster order."""
    num_embeddings = getattr(prior_model, "num_embeddings", None)
    if num_embeddings is not None:
        _check_indices(indices, num_embeddings)
    logits = prior_model(indices)
    _check_indices(indices, logits.shape[1])
    return F.cross_entropy(logits, indices.long())


def prior_sample(
    prior_model: PriorModel,
    shape: Tuple[int, int],
    temperature: float = 1.0,
    num_samples: int = 1,
    generator: Optional[torch.Generator] = None,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Raster-scan ancestral sampling of [num_samples, hz, wz] index grids."""
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    hz, wz = shape
    indices = torch.zeros(num_samples, hz, wz, dtype=torch.long, device=device)
    with torch.no_grad():
        for i in range(hz):
            for j in range(wz):
                logits = prior_model(indices)[:, :, i, j].double() / temperature
                probs = torch.softmax(logits, dim=-1)
                draw = torch.multinomial(probs.cpu(), 1, generator=generator).squeeze(1)
                indices[:, i, j] = draw.to(indices.device)
    return indices


def prior_resample(
    prior_model: PriorModel,
    indices: torch.Tensor,
    temperature: float = 1.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Redraw every code from the prior given the image's own preceding codes, in one pass."""
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    with torch.no_grad():
        logits = prior_model(indices)
        _check_indices(indices, logits.shape[1])
        k = logits.shape[1]
        probs = torch.softmax(logits.double() / temperature, dim=1)
        flat = probs.permute(0, 2, 3, 1).reshape(-1, k)
        draws = torch.multinomial(flat.cpu(), 1, generator=generator).squeeze(1)
    return draws.reshape(indices.shape).to(indices.device)


# ---------------------------------------------------------------------------
# Branch
# ---------------------------------------------------------------------------


class LVGB(nn.Module):
    """VQ-VAE + code prior + projection of the decoder tap to the uncertainty features V."""

    def __init__(self, vq: VQConfig, prior: PriorConfig):
        super().__init__()
        self.vq_config = vq
        self.prior_config = prior
        self.encoder = Encoder(vq.hidden_channels, vq.embedding_dim, vq.n_residual_blocks)
        self.codebook = Codebook(vq.num_embeddings, vq.embedding_dim)
        self.decoder = Decoder(vq.hidden_channels, vq.embedding_dim, vq.n_residual_blocks)
        self.v_proj = nn.Linear(self.decoder.tap_channels, vq.v_channels)
        self.prior = CodePrior(
            vq.num_embeddings,
            hidden=prior.hidden_channels,
            n_layers=prior.n_layers,
            kernel_size=prior.kernel_size,
            use_attention=prior.use_attention,
            heads=prior.attention_heads,
        )

    @staticmethod
    def _pixels(images: Union[ImageGroup, torch.Tensor]) -> torch.Tensor:
        pixels = images.images if isinstance(images, ImageGroup) else images
        if pixels.dim() != 4 or pixels.shape[-1] != 3:
            raise ShapeError(f"images must be [N, H, W, 3], got {list(pixels.shape)}")
        if pixels.shape[1] % V_STRIDE or pixels.shape[2] % V_STRIDE:
            raise ShapeError(f"image size must be a multiple of {V_STRIDE}, got {list(pixels.shape[1:3])}")
        return pixels

    def encode(self, images: Union[ImageGroup, torch.Tensor]) -> torch.Tensor:
        return self.encoder(self._pixels(images))

    def quantize(self, ze: torch.Tensor) -> LatentGrid:
        return quantize(ze, self.codebook)

    def project_tap(self, tap: torch.Tensor) -> UncertaintyFeatures:
        # tap is at H/2; V lives on the H/16 token grid
        h, w = tap.shape[-2] * 2 // V_STRIDE, tap.shape[-1] * 2 // V_STRIDE
        values = self.v_proj(tap.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return UncertaintyFeatures(F.adaptive_avg_pool2d(values, (h, w)).permute(0, 2, 3, 1))

    def decode(self, zq: torch.Tensor) -> Tuple[torch.Tensor, UncertaintyFeatures]:
        reconstruction, tap = self.decoder(zq)
        return reconstruction, self.project_tap(tap)

    def decode_indices(self, indices: torch.Tensor) -> Tuple[torch.Tensor, UncertaintyFeatures]:
        return self.decode(F.embedding(indices, self.codebook.embeddings))

    def forward(self, images: Union[ImageGroup, torch.Tensor]):
        """Full VQ-VAE pass: (reconstruction, latent grid, V)."""
        ze = self.encode(images)
        grid = self.quantize(ze)
        reconstruction, v = self.decode(grid.straight_through)
        return reconstruction, grid, v

    def loss(self, images: Union[ImageGroup, torch.Tensor]):
        pixels = self._pixels(images)
        reconstruction, grid, _ = self(pixels)
        total, components = vqvae_loss(
            pixels, reconstruction, grid.continuous, grid.quantized, self.vq_config.commitment
        )
        if not bool(torch.isfinite(total)):
            raise NumericError("VQ-VAE loss is not finite")
        return total, components, grid

    def uncertainty(
        self,
        images: Union[ImageGroup, torch.Tensor],
        v_source: VSource = "reconstruction",
        temperature: Optional[float] = None,
        generator: Optional[torch.Generator] = None,
    ) -> UncertaintyFeatures:
        """
        V for a group of images.

        ``reconstruction`` decodes the image's own codes; ``resampled`` first redraws every
        code from the prior conditioned on the image's preceding codes.
        """
        grid = self.quantize(self.encode(images))
        if v_source == "reconstruction":
            _, v = self.decode(grid.quantized)
            return v
        if v_source == "resampled":
            temperature = self.prior_config.temperature if temperature is None else temperature
            indices = prior_resample(self.prior, grid.indices, temperature, generator)
            _, v = self.decode_indices(indices)
            return v
        raise ContractError(f"unknown V source {v_source!r}")

    def sample(
        self,
        num_samples: int,
        latent_shape: Tuple[int, int],
        temperature: Optional[float] = None,
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Ancestral prior samples and their decoded images."""
        temperature = self.prior_config.temperature if temperature is None else temperature
        device = self.codebook.embeddings.device
        indices = prior_sample(
            self.prior, latent_shape, temperature, num_samples, generator=generator, device=device
        )
        with torch.no_grad():
            images, _ = self.decode_indices(indices)
        SmartLogger.log(
            "INFO",
            "Prior samples drawn",
            category=LOG_CATEGORY,
            params={"count": num_samples, "shape": list(latent_shape), "temperature": temperature},
        )
        return indices, images


def latent_shape(image_size: int) -> Tuple[int, int]:
    return image_size // DOWNSAMPLE, image_size // DOWNSAMPLE
