"""
Grouped image/mask datasets.

Key features:
- ImageGroup / MaskGroup / SaliencyMap: immutable in-memory groups and predictions
- DatasetManifest: the JSON manifest describing a (possibly open-world) grouped dataset
- PNG/JPEG decoding with mask binarisation, PNG writers for masks and saliency maps
- load_dataset: deterministic group stream (train drops remainders, eval pads them)
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ContractError, LoadError, ManifestValidationError, ShapeError
from .smart_logger import SmartLogger

LOG_CATEGORY = "DATAMODEL"

DEFAULT_IMAGE_SIZE = 224
PAD_SUFFIX = "#pad"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ImageGroup:
    """N RGB images of one category, ``images`` is [N, H, W, 3] in [0, 1].

    ``padded`` holds the ids of evaluation padding duplicates.
    """

    images: torch.Tensor
    category: str
    ids: Tuple[str, ...]
    padded: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "padded", frozenset(self.padded))
        if not self.padded <= set(self.ids):
            stray = sorted(self.padded - set(self.ids))
            raise ContractError(f"padding ids {stray} are not in group {self.category!r}")
        images = self.images
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ShapeError(f"images must be [N, H, W, 3], got {list(images.shape)}")
        n, h, w, _ = images.shape
        if n < 2:
            raise ContractError(f"a group needs at least 2 images, got {n}")
        if h != w:
            raise ShapeError(f"images must be square, got {h}x{w}")
        if len(self.ids) != n or len(set(self.ids)) != n:
            raise ContractError(f"group {self.category!r} needs {n} unique ids, got {self.ids}")
        if images.min() < 0 or images.max() > 1:
            raise ContractError(f"pixel values of group {self.category!r} leave [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def is_padding(self, item_id: str) -> bool:
        return item_id in self.padded

    @property
    def size(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class MaskGroup:
    """Binary masks aligned with an ImageGroup, ``masks`` is [N, H, W] in {0, 1}."""

    masks: torch.Tensor
    ids: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.masks.dim() != 3:
            raise ShapeError(f"masks must be [N, H, W], got {list(self.masks.shape)}")
        if len(self.ids) != self.masks.shape[0]:
            raise ContractError(f"{len(self.ids)} ids for {self.masks.shape[0]} masks")
        if not bool(((self.masks == 0) | (self.masks == 1)).all()):
            raise ContractError("masks must be strictly binary")

    def __len__(self) -> int:
        return self.masks.shape[0]


@dataclass(frozen=True)
class SaliencyMap:
    values: torch.Tensor
    id: str

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeError(f"saliency map must be [H, W], got {list(self.values.shape)}")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ContractError(f"saliency map {self.id!r} leaves [0, 1]")


def check_aligned(images: ImageGroup, masks: MaskGroup) -> None:
    if images.ids != masks.ids:
        raise ContractError(f"mask ids {masks.ids} do not match image ids {images.ids}")
    if tuple(images.images.shape[:3]) != tuple(masks.masks.shape):
        raise ShapeError(
            f"masks {list(masks.masks.shape)} do not match images {list(images.images.shape)}"
        )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class ManifestItem(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_path: str
    mask_path: str
    is_noise: bool = False
    source_category: str


class GroupEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    category: str
    items: List[ManifestItem] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_items(self):
        seen = set()
        for item in self.items:
            if item.is_noise and item.source_category == self.category:
                raise ValueError(
                    f"noise item {item.image_path!r} comes from its own category {self.category!r}"
                )
            item_id = make_item_id(self.category, item)
            if item_id in seen:
                raise ValueError(f"duplicate item id {item_id!r}")
            seen.add(item_id)
        return self


class DatasetManifest(BaseModel):
    """
    Declarative grouped dataset. Relative paths resolve against ``root`` when set,
    otherwise against the directory holding the manifest file.
    """

    model_config = ConfigDict(extra="forbid")

    source_dataset: str = ""
    seed: int = 0
    root: Optional[str] = None
    groups: List[GroupEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_categories(self):
        categories = [group.category for group in self.groups]
        duplicates = sorted({c for c in categories if categories.count(c) > 1})
        if duplicates:
            raise ValueError(f"duplicate categories {duplicates}")
        return self

    @property
    def categories(self) -> List[str]:
        return [group.category for group in self.groups]

    def group(self, category: str) -> GroupEntry:
        for group in self.groups:
            if group.category == category:
                return group
        raise KeyError(category)

    def item_count(self) -> int:
        return sum(len(group.items) for group in self.groups)


def make_item_id(category: str, item: ManifestItem) -> str:
    return f"{category}/{Path(item.image_path).stem}"


def resolve_root(manifest: DatasetManifest, manifest_path: Optional[PathLike] = None) -> Path:
    if manifest.root:
        return Path(manifest.root)
    if manifest_path is not None:
        return Path(manifest_path).resolve().parent
    return Path.cwd()


def resolve_path(root: Path, path: str) -> Path:
    candidate = Path(path)
    return candidate if candidate.is_absolute() else root / candidate


def read_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}", path=str(path))
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ManifestValidationError(f"invalid manifest {path}: {e}") from e


def serialize_manifest(manifest: DatasetManifest) -> str:
    return manifest.model_dump_json(indent=2, exclude_none=True) + "\n"


def write_manifest(
    manifest: DatasetManifest, out_path: PathLike, check_masks: bool = True
) -> Path:
    """Validate ``manifest`` and write it as UTF-8 JSON; the file round-trips through read_manifest."""
    out_path = Path(out_path)
    try:
        manifest = DatasetManifest.model_validate(manifest.model_dump())
    except ValidationError as e:
        raise ManifestValidationError(f"refusing to write invalid manifest: {e}") from e
    validate_manifest(manifest, resolve_root(manifest, out_path), check_masks=check_masks)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(serialize_manifest(manifest), encoding="utf-8")
    SmartLogger.log(
        "INFO",
        "Manifest written",
        category=LOG_CATEGORY,
        params={"path": str(out_path), "groups": len(manifest.groups), "items": manifest.item_count()},
    )
    return out_path


def validate_manifest(manifest: DatasetManifest, root: Path, check_masks: bool = True) -> None:
    """Noise items must be foreign and their masks must decode to all zeros."""
    offending: List[str] = []
    for group in manifest.groups:
        for item in group.items:
            if not item.is_noise:
                continue
            item_id = make_item_id(group.category, item)
            if item.source_category == group.category:
                offending.append(item_id)
                continue
            if check_masks:
                mask = load_mask(resolve_path(root, item.mask_path))
                if bool(mask.any()):
                    offending.append(item_id)
    if offending:
        raise ManifestValidationError(
            f"noise items violate manifest invariants: {offending}", items=offending
        )


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise LoadError(f"file not found: {path}", path=str(path))
    try:
        image = Image.open(path)
        image.load()
        return image
    except OSError as e:
        raise LoadError(f"cannot decode {path}: {e}", path=str(path)) from e


def load_image(path: PathLike, size: Optional[int] = DEFAULT_IMAGE_SIZE) -> torch.Tensor:
    """8-bit RGB decoded to [H, W, 3] float32 in [0, 1], bilinear-resized to size x size."""
    image = _open(Path(path)).convert("RGB")
    if size is not None and image.size != (size, size):
        image = image.resize((size, size), Image.BILINEAR)
    return torch.from_numpy(np.asarray(image, dtype=np.float32) / 255.0)


def load_mask(path: PathLike, size: Optional[int] = None) -> torch.Tensor:
    """Single-channel mask, nearest-resized, thresholded at 0.5 to a {0, 1} float32 tensor."""
    image = _open(Path(path)).convert("L")
    if size is not None and image.size != (size, size):
        image = image.resize((size, size), Image.NEAREST)
    values = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy((values >= 0.5).astype(np.float32))


def save_mask_png(mask: Union[torch.Tensor, np.ndarray], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    Image.fromarray(np.where(values >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path)
    return path


def save_saliency_png(values: Union[torch.Tensor, np.ndarray], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else np.asarray(values)
    array = np.clip(np.round(255.0 * array.astype(np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(array, mode="L").save(path)
    return path


# ---------------------------------------------------------------------------
# Group loader
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _GroupPlan:
    category: str
    members: Tuple[Tuple[ManifestItem, str, bool], ...]  # (item, id, is padding)


def plan_groups(
    manifest: DatasetManifest,
    group_size: Optional[int],
    mode: Literal["train", "eval"] = "train",
    seed: int = 0,
) -> List[_GroupPlan]:
    """Partition every category into groups. Train drops the partial tail, eval pads it."""
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown loader mode {mode!r}")
    if mode == "train":
        if group_size is None or group_size < 2:
            raise ContractError("training needs a fixed group_size >= 2")
        sizes = [len(group.items) for group in manifest.groups if group.items]
        if sizes and group_size > min(sizes):
            raise ContractError(
                f"group_size {group_size} exceeds the smallest category size {min(sizes)}"
            )

    rng = np.random.default_rng(seed)
    plans: List[_GroupPlan] = []
    for group in manifest.groups:
        members = [(item, make_item_id(group.category, item), False) for item in group.items]
        if not members:
            continue
        if mode == "train":
            full = len(members) // group_size
            dropped = len(members) - full * group_size
            if dropped:
                SmartLogger.log(
                    "DEBUG",
                    "Dropping partial training group",
                    category=LOG_CATEGORY,
                    params={"category": group.category, "dropped": dropped},
                )
            for g in range(full):
                chunk = members[g * group_size:(g + 1) * group_size]
                plans.append(_GroupPlan(group.category, tuple(chunk)))
            continue

        size = len(members) if group_size is None else group_size
        size = max(size, 2)
        for start in range(0, len(members), size):
            chunk = list(members[start:start + size])
            pad = size - len(chunk)
            for j, pick in enumerate(rng.integers(0, len(members), size=pad)):
                item, item_id, _ = members[int(pick)]
                chunk.append((item, f"{item_id}{PAD_SUFFIX}{j}", True))
            plans.append(_GroupPlan(group.category, tuple(chunk)))
    return plans


def _build_group(plan: _GroupPlan, root: Path, image_size: int) -> Tuple[ImageGroup, MaskGroup]:
    images, masks, ids = [], [], []
    padded = {item_id for _, item_id, is_pad in plan.members if is_pad}
    for item, item_id, _ in plan.members:
        images.append(load_image(resolve_path(root, item.image_path), image_size))
        masks.append(load_mask(resolve_path(root, item.mask_path), image_size))
        ids.append(item_id)
    image_group = ImageGroup(torch.stack(images), plan.category, tuple(ids), frozenset(padded))
    mask_group = MaskGroup(torch.stack(masks), tuple(ids))
    return image_group, mask_group


def load_dataset(
    manifest_path: PathLike,
    group_size: Optional[int],
    image_size: int = DEFAULT_IMAGE_SIZE,
    mode: Literal["train", "eval"] = "train",
    seed: int = 0,
    workers: int = 0,
) -> Iterator[Tuple[ImageGroup, MaskGroup]]:
    """
    Stream (ImageGroup, MaskGroup) pairs category by category.

    ``workers > 0`` decodes groups on a thread pool; yield order is unchanged.
    With ``mode="eval"`` and ``group_size=None`` each category is one group.
    """
    manifest = read_manifest(manifest_path)
    root = resolve_root(manifest, manifest_path)
    validate_manifest(manifest, root, check_masks=True)
    plans = plan_groups(manifest, group_size, mode=mode, seed=seed)

    SmartLogger.log(
        "INFO",
        "Dataset loading started",
        category=LOG_CATEGORY,
        params={
            "manifest": str(manifest_path),
            "mode": mode,
            "groups": len(plans),
            "group_size": group_size,
            "image_size": image_size,
        },
    )
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(lambda plan: _build_group(plan, root, image_size), plans)
    else:
        for plan in plans:
            yield _build_group(plan, root, image_size)


def load_groups(
    manifest_path: PathLike,
    group_size: Optional[int],
    image_size: int = DEFAULT_IMAGE_SIZE,
    mode: Literal["train", "eval"] = "train",
    seed: int = 0,
    workers: int = 0,
) -> List[Tuple[ImageGroup, MaskGroup]]:
    return list(
        load_dataset(manifest_path, group_size, image_size, mode=mode, seed=seed, workers=workers)
    )


def item_ids(manifest: DatasetManifest) -> Sequence[str]:
    return [make_item_id(group.category, item) for group in manifest.groups for item in group.items]
