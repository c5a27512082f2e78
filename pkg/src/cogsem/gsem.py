"""
Group selective exchange-masking (GSEM).

Each image of a group is scored twice:
- BDC score: Brownian distance covariance between the group consensus feature and the
  image's backbone feature, both read as c channel observations of length h*w
- binary score: overlap between the channel-reduced feature map and the downsampled mask

The two scores are min-max normalised per group and mixed with weight mu. The k hardest
images of two groups are then swapped and their masks replaced by all-zero maps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .datamodel import ImageGroup, MaskGroup, check_aligned
from .errors import ContractError, NumericError, ShapeError
from .smart_logger import SmartLogger

LOG_CATEGORY = "GSEM"

HardnessOrder = Literal["low", "high"]
Selection = Literal["difficulty", "random"]
Group = Tuple[ImageGroup, MaskGroup]


class FeatureSource(str, Enum):
    BACKBONE = "backbone"
    BINARY_REDUCED = "binary_reduced"


@dataclass(frozen=True)
class FeatureSequence:
    """Spatial feature grid of a group, ``values`` is [N, h, w, c]."""

    values: torch.Tensor
    source: FeatureSource = FeatureSource.BACKBONE

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeError(f"feature sequence must be [N, h, w, c], got {list(self.values.shape)}")
        if not bool(torch.isfinite(self.values).all()):
            raise NumericError("feature sequence holds non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class GroupConsensusFeature:
    values: torch.Tensor  # [1, h, w, c]


@dataclass(frozen=True)
class DifficultyReport:
    bdc_scores: torch.Tensor
    bin_scores: torch.Tensor
    mixed: torch.Tensor
    mu: float
    normalized: bool = True

    def __len__(self) -> int:
        return self.mixed.shape[0]

    def to_sidecar(self, ids: Sequence[str]) -> Dict[str, object]:
        if len(ids) != len(self):
            raise ContractError(f"{len(ids)} ids for a report over {len(self)} images")
        return {
            "mu": self.mu,
            "normalized": self.normalized,
            "scores": {
                item_id: {
                    "bdc": float(self.bdc_scores[n]),
                    "bin": float(self.bin_scores[n]),
                    "mixed": float(self.mixed[n]),
                }
                for n, item_id in enumerate(ids)
            },
        }


@dataclass(frozen=True)
class ExchangeResult:
    group1: Group
    group2: Group
    exchanged_ids: List[Tuple[str, str]]
    # positions of the transplanted (noise) images inside each output group
    noise_positions1: List[int] = field(default_factory=list)
    noise_positions2: List[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Brownian distance covariance
# ---------------------------------------------------------------------------


def channels_of(values: torch.Tensor) -> torch.Tensor:
    """[..., h, w, c] -> [..., c, h*w]: one observation per channel."""
    return values.flatten(-3, -2).transpose(-1, -2)


def _double_centered(observations: torch.Tensor) -> torch.Tensor:
    distances = torch.cdist(
        observations, observations, compute_mode="donot_use_mm_for_euclid_dist"
    )
    row_mean = distances.mean(dim=-1, keepdim=True)
    col_mean = distances.mean(dim=-2, keepdim=True)
    grand_mean = distances.mean(dim=(-2, -1), keepdim=True)
    return distances - row_mean - col_mean + grand_mean


def _vectorize(centered: torch.Tensor) -> torch.Tensor:
    # off-diagonals carry sqrt(2) so that <vec(A), vec(B)> == tr(A^T B)
    c = centered.shape[-1]
    rows, cols = torch.triu_indices(c, c, device=centered.device)
    weights = torch.full(rows.shape, math.sqrt(2.0), dtype=centered.dtype, device=centered.device)
    weights[rows == cols] = 1.0
    return centered[..., rows, cols] * weights


def _check_observations(observations: torch.Tensor) -> torch.Tensor:
    if observations.dim() != 2:
        raise ShapeError(f"observations must be [c, p], got {list(observations.shape)}")
    if observations.shape[0] < 2:
        raise ContractError(f"BDC needs at least 2 observations, got {observations.shape[0]}")
    if not bool(torch.isfinite(observations).all()):
        raise NumericError("BDC observations hold non-finite values")
    if not observations.is_floating_point():
        observations = observations.to(torch.get_default_dtype())
    return observations


def bdc_matrix(observations: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Double-centred distance matrix of c observations and its weighted upper-triangle vector.

    Args:
        observations: [c, p], one p-vector per observation.

    Returns:
        (A [c, c], vec(A) [c(c+1)/2])
    """
    observations = _check_observations(observations)
    centered = _double_centered(observations)
    return centered, _vectorize(centered)


def bdc(
    value_x: torch.Tensor,
    value_y: torch.Tensor,
    form: Literal["vector", "trace"] = "vector",
) -> torch.Tensor:
    """rho(X, Y) = tr(A^T B) = <vec(A), vec(B)>, returned as a 0-d tensor."""
    if value_x.dim() != 2 or value_y.dim() != 2 or value_x.shape[0] != value_y.shape[0]:
        raise ShapeError(
            f"BDC needs matching observation counts, got {list(value_x.shape)} and {list(value_y.shape)}"
        )
    centered_x, vec_x = bdc_matrix(value_x)
    centered_y, vec_y = bdc_matrix(value_y)
    if form == "trace":
        return torch.trace(centered_x.transpose(0, 1) @ centered_y)
    if form == "vector":
        return torch.dot(vec_x, vec_y)
    raise ContractError(f"unknown BDC form {form!r}")


# ---------------------------------------------------------------------------
# Difficulty scores
# ---------------------------------------------------------------------------


def group_consensus(features: FeatureSequence) -> GroupConsensusFeature:
    if len(features) < 1:
        raise ContractError("group consensus needs at least one feature map")
    return GroupConsensusFeature(features.values.mean(dim=0, keepdim=True))


@torch.no_grad()
def bdc_scores(features: FeatureSequence, consensus: GroupConsensusFeature) -> torch.Tensor:
    values = features.values
    if tuple(consensus.values.shape) != (1, *values.shape[1:]):
        raise ShapeError(
            f"consensus {list(consensus.values.shape)} does not match features {list(values.shape)}"
        )
    if values.shape[-1] < 2:
        raise ContractError("BDC scoring needs at least 2 channels")
    consensus_vec = _vectorize(_double_centered(channels_of(consensus.values[0])))
    image_vecs = _vectorize(_double_centered(channels_of(values)))
    return image_vecs @ consensus_vec


def minmax_normalize(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Min-max to [0, 1] along ``dim``; a constant slice maps to all zeros."""
    low = values.amin(dim=dim, keepdim=True)
    high = values.amax(dim=dim, keepdim=True)
    span = high - low
    safe_span = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (values - low) / safe_span, torch.zeros_like(values))


def reduce_channels(features: FeatureSequence, normalize: bool = True) -> torch.Tensor:
    """[N, h, w, c] -> [N, h, w]: channel mean, then per-image min-max unless disabled."""
    reduced = features.values.mean(dim=-1)
    if not normalize:
        return reduced
    n, h, w = reduced.shape
    return minmax_normalize(reduced.reshape(n, h * w)).reshape(n, h, w)


def pool_masks(masks: Union[MaskGroup, torch.Tensor], size: Tuple[int, int]) -> torch.Tensor:
    """Average-pool [N, H, W] masks to soft coverage fractions at ``size``."""
    values = masks.masks if isinstance(masks, MaskGroup) else masks
    values = values.to(torch.get_default_dtype() if not values.is_floating_point() else values.dtype)
    return F.adaptive_avg_pool2d(values.unsqueeze(1), size).squeeze(1)


def binary_measure(reduced: torch.Tensor, pooled_masks: torch.Tensor) -> torch.Tensor:
    if reduced.shape != pooled_masks.shape:
        raise ShapeError(
            f"reduced features {list(reduced.shape)} and masks {list(pooled_masks.shape)} differ"
        )
    return (reduced * pooled_masks).sum(dim=(-2, -1))


@torch.no_grad()
def binary_scores(
    features: FeatureSequence,
    masks: Union[MaskGroup, torch.Tensor],
    normalize: bool = True,
) -> torch.Tensor:
    values = masks.masks if isinstance(masks, MaskGroup) else masks
    if values.shape[0] != len(features):
        raise ShapeError(f"{values.shape[0]} masks for {len(features)} feature maps")
    reduced = reduce_channels(features, normalize=normalize)
    pooled = pool_masks(values, tuple(reduced.shape[-2:])).to(reduced.dtype)
    return binary_measure(reduced, pooled)


def mixed_difficulty(
    bdc_scores: torch.Tensor,
    bin_scores: torch.Tensor,
    mu: float,
    normalize: bool = True,
) -> DifficultyReport:
    if bdc_scores.shape != bin_scores.shape or bdc_scores.dim() != 1:
        raise ShapeError(
            f"score vectors must share one length, got {list(bdc_scores.shape)} and {list(bin_scores.shape)}"
        )
    if bdc_scores.numel() == 0:
        raise ContractError("cannot mix difficulty scores of an empty group")
    if not (bool(torch.isfinite(bdc_scores).all()) and bool(torch.isfinite(bin_scores).all())):
        raise NumericError("difficulty scores hold non-finite values")
    bdc_part = minmax_normalize(bdc_scores) if normalize else bdc_scores
    bin_part = minmax_normalize(bin_scores) if normalize else bin_scores
    return DifficultyReport(
        bdc_scores=bdc_scores,
        bin_scores=bin_scores,
        mixed=bdc_part + mu * bin_part,
        mu=float(mu),
        normalized=normalize,
    )


def score_group(
    features: FeatureSequence,
    masks: Union[MaskGroup, torch.Tensor],
    mu: float = 0.5,
    normalize: bool = True,
) -> DifficultyReport:
    consensus = group_consensus(features)
    return mixed_difficulty(
        bdc_scores(features, consensus), binary_scores(features, masks), mu, normalize=normalize
    )


def write_difficulty_sidecar(report: DifficultyReport, ids: Sequence[str], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_sidecar(ids), indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Exchange-masking
# ---------------------------------------------------------------------------


def select_hardest(mixed: torch.Tensor, k: int, hardness_order: HardnessOrder = "low") -> List[int]:
    """Indices of the k hardest images, hardest first; ties go to the lower index."""
    if hardness_order == "low":
        keys = mixed
    elif hardness_order == "high":
        keys = -mixed
    else:
        raise ContractError(f"unknown hardness order {hardness_order!r}")
    order = torch.argsort(keys, stable=True)
    return [int(i) for i in order[:k]]


def select_exchange_mask(
    g1: Group,
    g2: Group,
    reports: Optional[Tuple[DifficultyReport, DifficultyReport]],
    k: int,
    hardness_order: HardnessOrder = "low",
    selection: Selection = "difficulty",
    generator: Optional[torch.Generator] = None,
) -> ExchangeResult:
    """
    Swap the k hardest images of two groups and zero their masks.

    ``selection="random"`` swaps k uniformly chosen images instead (reports are ignored).
    Inputs are never mutated.
    """
    (images1, masks1), (images2, masks2) = g1, g2
    check_aligned(images1, masks1)
    check_aligned(images2, masks2)
    if images1.category == images2.category:
        raise ContractError(f"both groups belong to category {images1.category!r}")
    n1, n2 = len(images1), len(images2)
    if k < 1 or 2 * k >= min(n1, n2):
        raise ContractError(f"k={k} must satisfy 1 <= k < N/2 for groups of {n1} and {n2}")
    if images1.images.shape[1:] != images2.images.shape[1:]:
        raise ShapeError("groups to exchange must share the image size")

    if selection == "difficulty":
        if reports is None:
            raise ContractError("difficulty selection needs a report per group")
        report1, report2 = reports
        if len(report1) != n1 or len(report2) != n2:
            raise ShapeError("difficulty reports do not match group sizes")
        picks1 = select_hardest(report1.mixed, k, hardness_order)
        picks2 = select_hardest(report2.mixed, k, hardness_order)
    elif selection == "random":
        picks1 = [int(i) for i in torch.randperm(n1, generator=generator)[:k]]
        picks2 = [int(i) for i in torch.randperm(n2, generator=generator)[:k]]
    else:
        raise ContractError(f"unknown selection {selection!r}")

    out_images1, out_masks1, out_ids1 = images1.images.clone(), masks1.masks.clone(), list(images1.ids)
    out_images2, out_masks2, out_ids2 = images2.images.clone(), masks2.masks.clone(), list(images2.ids)
    exchanged: List[Tuple[str, str]] = []
    for a, b in zip(picks1, picks2):
        out_images1[a] = images2.images[b]
        out_images2[b] = images1.images[a]
        out_masks1[a] = 0
        out_masks2[b] = 0
        out_ids1[a] = images2.ids[b]
        out_ids2[b] = images1.ids[a]
        exchanged.append((images1.ids[a], images2.ids[b]))

    SmartLogger.log(
        "DEBUG",
        "Group exchange-masking applied",
        category=LOG_CATEGORY,
        params={
            "categories": [images1.category, images2.category],
            "k": k,
            "selection": selection,
            "exchanged": exchanged,
        },
    )
    return ExchangeResult(
        group1=(
            ImageGroup(out_images1, images1.category, tuple(out_ids1)),
            MaskGroup(out_masks1, tuple(out_ids1)),
        ),
        group2=(
            ImageGroup(out_images2, images2.category, tuple(out_ids2)),
            MaskGroup(out_masks2, tuple(out_ids2)),
        ),
        exchanged_ids=exchanged,
        noise_positions1=sorted(picks1),
        noise_positions2=sorted(picks2),
    )
