"""
Open-world dataset construction.

Noise images are copied into each group from other categories of the same base dataset and
receive all-zero masks. Per-group noise counts come from a ratio sampler (noise / base count
of the group), are capped by integer bounds, and can be rescaled to hit an exact total.

Key features:
- ratio samplers: concentrated, bimodal, uniform, fixed (truncated normals via scipy)
- presets mirroring the OWCoSal / OWCoSOD / OWCoCA construction
- single- or multi-foreign-category noise
- largest-remainder apportionment of a target total under the per-group caps
- validation report: noise totals, ratios, zero masks, foreign-category histogram
"""

from __future__ import annotations

import math
import shutil
from collections import Counter
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import truncnorm

from .datamodel import (
    DatasetManifest,
    GroupEntry,
    ManifestItem,
    load_image,
    load_mask,
    make_item_id,
    resolve_path,
    save_mask_png,
)
from .errors import ContractError, ManifestValidationError
from .smart_logger import SmartLogger

LOG_CATEGORY = "OWDATA"

MAX_RATIO = 0.5


class RatioSampler(BaseModel):
    """Distribution of the per-group noise ratio, truncated to ``bounds``."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["concentrated", "bimodal", "uniform", "fixed"] = "concentrated"
    center: float = 0.18
    centers: Tuple[float, float] = (0.05, 0.40)
    sigma: float = Field(0.07, gt=0.0)
    bounds: Tuple[float, float] = (0.024, 0.375)

    @model_validator(mode="after")
    def _check_bounds(self):
        low, high = self.bounds
        if not 0.0 <= low <= high < MAX_RATIO:
            raise ValueError(f"ratio bounds {self.bounds} must satisfy 0 <= low <= high < {MAX_RATIO}")
        return self

    def _component(self, mean: float):
        low, high = self.bounds
        return truncnorm((low - mean) / self.sigma, (high - mean) / self.sigma, loc=mean, scale=self.sigma)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        low, high = self.bounds
        if self.kind == "fixed":
            return np.full(size, float(np.clip(self.center, low, high)))
        if self.kind == "uniform":
            return rng.uniform(low, high, size=size)
        if self.kind == "concentrated":
            return self._component(self.center).rvs(size=size, random_state=rng)
        picks = rng.random(size) < 0.5
        first = self._component(self.centers[0]).rvs(size=size, random_state=rng)
        second = self._component(self.centers[1]).rvs(size=size, random_state=rng)
        return np.where(picks, first, second)

    def cdf(self, x: Union[float, np.ndarray]) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        low, high = self.bounds
        if self.kind == "fixed":
            return (x >= np.clip(self.center, low, high)).astype(np.float64)
        if self.kind == "uniform":
            if high > low:
                return np.clip((x - low) / (high - low), 0.0, 1.0)
            return (x >= low).astype(np.float64)
        if self.kind == "concentrated":
            return self._component(self.center).cdf(x)
        return 0.5 * self._component(self.centers[0]).cdf(x) + 0.5 * self._component(self.centers[1]).cdf(x)


class NoisePolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    mode: Literal["single_foreign", "multi_foreign"] = "single_foreign"
    # inclusive range of foreign categories per group
    foreign_category_count: Tuple[int, int] = (1, 1)
    ratio_sampler: RatioSampler = Field(default_factory=RatioSampler)
    seed: int = 0

    @model_validator(mode="after")
    def _check_counts(self):
        low, high = self.foreign_category_count
        if not 1 <= low <= high:
            raise ValueError(
                f"foreign_category_count {self.foreign_category_count} must satisfy 1 <= low <= high"
            )
        if self.mode == "single_foreign" and high != 1:
            raise ValueError("single_foreign draws exactly one foreign category")
        return self


PRESETS: Dict[str, NoisePolicy] = {
    "owcosal": NoisePolicy(
        name="owcosal",
        ratio_sampler=RatioSampler(kind="concentrated", center=0.18, sigma=0.07, bounds=(0.024, 0.375)),
    ),
    "owcosod": NoisePolicy(
        name="owcosod",
        ratio_sampler=RatioSampler(kind="bimodal", centers=(0.05, 0.40), sigma=0.03, bounds=(0.032, 0.471)),
    ),
    "owcoca": NoisePolicy(
        name="owcoca",
        mode="multi_foreign",
        foreign_category_count=(1, 3),
        ratio_sampler=RatioSampler(kind="uniform", bounds=(0.05, 0.40)),
    ),
}


def preset(name: str, seed: int = 0) -> NoisePolicy:
    if name not in PRESETS:
        raise ContractError(f"unknown open-world preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].model_copy(update={"seed": seed})


# ---------------------------------------------------------------------------
# Counts
# ---------------------------------------------------------------------------


def count_caps(base_size: int, bounds: Tuple[float, float]) -> Tuple[int, int]:
    low, high = bounds
    upper = math.floor(high * base_size + 1e-9)
    lower = min(math.ceil(low * base_size - 1e-9), upper)
    return lower, upper


def apportion(raw: Sequence[float], lower: Sequence[int], upper: Sequence[int], total: int) -> List[int]:
    """
    Integer counts summing to ``total`` with lower[i] <= count[i] <= upper[i].

    Counts are proportional to ``raw`` up to a common scale (found by bisection), clipped to the
    caps, floored, and the leftover units go to the largest fractional remainders.
    """
    raw = np.maximum(np.asarray(raw, dtype=np.float64), 1e-9)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if not lower.sum() <= total <= upper.sum():
        raise ContractError(
            f"target total {total} is unreachable within the per-group caps "
            f"[{int(lower.sum())}, {int(upper.sum())}]"
        )

    def filled(scale: float) -> np.ndarray:
        return np.clip(scale * raw, lower, upper)

    lo, hi = 0.0, 1.0
    while filled(hi).sum() < total:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if filled(mid).sum() < total:
            lo = mid
        else:
            hi = mid
    values = filled(hi)
    counts = np.floor(values + 1e-9).astype(np.int64)
    counts = np.minimum(np.maximum(counts, lower.astype(np.int64)), upper.astype(np.int64))
    remainders = values - counts
    deficit = total - int(counts.sum())
    order = sorted(range(len(counts)), key=lambda i: (-remainders[i], i))
    for i in order:
        if deficit <= 0:
            break
        if counts[i] < upper[i]:
            counts[i] += 1
            deficit -= 1
    while deficit < 0:
        for i in reversed(order):
            if deficit >= 0:
                break
            if counts[i] > lower[i]:
                counts[i] -= 1
                deficit += 1
    return [int(c) for c in counts]


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


def _split(count: int, parts: int, rng: np.random.Generator) -> List[int]:
    """``count`` units over ``parts`` bins, at least one each."""
    shares = [1] * parts
    for pick in rng.integers(0, parts, size=count - parts):
        shares[int(pick)] += 1
    return shares


def build_ow_dataset(
    base: DatasetManifest,
    policy: NoisePolicy,
    base_root: Path,
    out_dir: Path,
    target_total: Optional[int] = None,
) -> DatasetManifest:
    """
    Inject noise items into every group of ``base``.

    Noise images are copied to ``{out_dir}/noise/{category}/`` with generated all-zero masks;
    the output manifest's ``root`` points at ``base_root`` and noise paths are absolute.
    """
    base_root = Path(base_root).resolve()
    out_dir = Path(out_dir).resolve()
    categories = base.categories
    low_count, high_count = policy.foreign_category_count
    if len(categories) < high_count + 1:
        raise ContractError(
            f"policy {policy.name!r} needs at least {high_count + 1} categories, got {len(categories)}"
        )

    rng = np.random.default_rng(policy.seed)
    sizes = [sum(not item.is_noise for item in group.items) for group in base.groups]
    ratios = policy.ratio_sampler.sample(rng, len(base.groups))
    caps = [count_caps(n, policy.ratio_sampler.bounds) for n in sizes]
    raw = [float(r) * n for r, n in zip(ratios, sizes)]
    if target_total is None:
        counts = [int(min(max(round(value), lo), hi)) for value, (lo, hi) in zip(raw, caps)]
    else:
        counts = apportion(raw, [c[0] for c in caps], [c[1] for c in caps], target_total)

    pools = {
        group.category: [item for item in group.items if not item.is_noise] for group in base.groups
    }
    groups = []
    for group, count in zip(base.groups, counts):
        others = [c for c in categories if c != group.category]
        wanted = int(rng.integers(low_count, high_count + 1))
        foreign = [others[int(i)] for i in rng.choice(len(others), size=wanted, replace=False)]
        foreign = foreign[: max(count, 0)] if count < len(foreign) else foreign
        shares = _split(count, len(foreign), rng) if count else []

        noise_items = []
        for source, share in zip(foreign, shares):
            pool = pools[source]
            if share > len(pool):
                raise ManifestValidationError(
                    f"group {group.category!r} needs {share} noise images from {source!r}, "
                    f"which has {len(pool)}",
                    items=[group.category],
                )
            for pick in sorted(rng.choice(len(pool), size=share, replace=False)):
                item = pool[int(pick)]
                src_image = resolve_path(base_root, item.image_path)
                stem = f"{source}__{Path(item.image_path).stem}"
                noise_dir = out_dir / "noise" / group.category
                noise_dir.mkdir(parents=True, exist_ok=True)
                image_path = noise_dir / f"{stem}{src_image.suffix}"
                mask_path = noise_dir / f"{stem}_mask.png"
                shutil.copyfile(src_image, image_path)
                height, width = load_image(image_path, size=None).shape[:2]
                save_mask_png(np.zeros((height, width), dtype=np.uint8), mask_path)
                noise_items.append(
                    ManifestItem(
                        image_path=str(image_path),
                        mask_path=str(mask_path),
                        is_noise=True,
                        source_category=source,
                    )
                )
        groups.append(GroupEntry(category=group.category, items=list(group.items) + noise_items))

    manifest = DatasetManifest(
        source_dataset=f"{base.source_dataset}/{policy.name}" if base.source_dataset else policy.name,
        seed=policy.seed,
        root=str(base_root),
        groups=groups,
    )
    SmartLogger.log(
        "INFO",
        "Open-world dataset built",
        category=LOG_CATEGORY,
        params={
            "policy": policy.name,
            "groups": len(groups),
            "noise_total": int(sum(counts)),
            "target_total": target_total,
        },
    )
    return manifest


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class GroupNoiseStats(BaseModel):
    base: int
    noise: int
    ratio: float
    fraction: float
    foreign_categories: List[str]


class OWReport(BaseModel):
    passed: bool
    total_noise: int
    groups: Dict[str, GroupNoiseStats]
    foreign_histogram: Dict[str, int]
    zero_masks_verified: bool
    violations: List[str] = Field(default_factory=list)


def validate_ow_dataset(manifest: DatasetManifest, root: Path, check_masks: bool = True) -> OWReport:
    """Noise statistics of ``manifest``; raises ManifestValidationError on any violation."""
    stats: Dict[str, GroupNoiseStats] = {}
    histogram: Counter = Counter()
    violations: List[str] = []
    for group in manifest.groups:
        noise = [item for item in group.items if item.is_noise]
        base_count = len(group.items) - len(noise)
        for item in noise:
            item_id = make_item_id(group.category, item)
            histogram[item.source_category] += 1
            if item.source_category == group.category:
                violations.append(item_id)
            elif check_masks and bool(load_mask(resolve_path(root, item.mask_path)).any()):
                violations.append(item_id)
        fraction = len(noise) / len(group.items) if group.items else 0.0
        if fraction >= MAX_RATIO:
            violations.append(group.category)
        stats[group.category] = GroupNoiseStats(
            base=base_count,
            noise=len(noise),
            ratio=len(noise) / base_count if base_count else 0.0,
            fraction=fraction,
            foreign_categories=sorted({item.source_category for item in noise}),
        )
    report = OWReport(
        passed=not violations,
        total_noise=sum(s.noise for s in stats.values()),
        groups=stats,
        foreign_histogram=dict(sorted(histogram.items())),
        zero_masks_verified=check_masks and not violations,
        violations=violations,
    )
    if violations:
        SmartLogger.log(
            "ERROR",
            "Open-world dataset failed validation",
            category=LOG_CATEGORY,
            params={"violations": violations},
        )
        raise ManifestValidationError(f"open-world invariants violated by {violations}", items=violations)
    return report
