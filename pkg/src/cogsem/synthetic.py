"""
Toy co-saliency datasets: each category is one coloured shape on cluttered backgrounds.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image, ImageColor, ImageDraw

from .datamodel import DatasetManifest, GroupEntry, ManifestItem, write_manifest
from .smart_logger import SmartLogger

LOG_CATEGORY = "SYNTHETIC"

SHAPES = ("square", "circle", "triangle", "diamond")


def category_style(index: int) -> Tuple[str, Tuple[int, int, int]]:
    shape = SHAPES[index % len(SHAPES)]
    hue = (index * 137) % 360
    return shape, ImageColor.getrgb(f"hsv({hue},90%,95%)")


def _clutter(draw: ImageDraw.ImageDraw, size: int, rng: np.random.Generator) -> None:
    for _ in range(int(rng.integers(4, 9))):
        x0, y0 = (int(v) for v in rng.integers(0, size, size=2))
        w, h = (int(v) for v in rng.integers(size // 16 + 1, size // 4 + 1, size=2))
        gray = int(rng.integers(60, 180))
        tint = tuple(int(np.clip(gray + rng.integers(-20, 21), 0, 255)) for _ in range(3))
        draw.rectangle([x0, y0, x0 + w, y0 + h], fill=tint)


def _shape_outline(shape: str, box: Tuple[int, int, int, int]):
    x0, y0, x1, y1 = box
    if shape == "triangle":
        return [((x0 + x1) // 2, y0), (x1, y1), (x0, y1)]
    if shape == "diamond":
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        return [(cx, y0), (x1, cy), (cx, y1), (x0, cy)]
    return None


def render_sample(
    shape: str, color: Tuple[int, int, int], size: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """One (image [size, size, 3] uint8, mask [size, size] uint8 in {0, 255}) sample."""
    background = tuple(int(v) for v in rng.integers(90, 150, size=3))
    image = Image.new("RGB", (size, size), background)
    mask = Image.new("L", (size, size), 0)
    _clutter(ImageDraw.Draw(image), size, rng)

    extent = int(rng.integers(size // 3, size // 2 + 1))
    x0 = int(rng.integers(0, size - extent))
    y0 = int(rng.integers(0, size - extent))
    box = (x0, y0, x0 + extent - 1, y0 + extent - 1)
    for canvas, fill in ((ImageDraw.Draw(image), color), (ImageDraw.Draw(mask), 255)):
        if shape == "square":
            canvas.rectangle(box, fill=fill)
        elif shape == "circle":
            canvas.ellipse(box, fill=fill)
        else:
            canvas.polygon(_shape_outline(shape, box), fill=fill)

    pixels = np.asarray(image, dtype=np.int16)
    noise = rng.integers(-8, 9, size=pixels.shape)
    pixels = np.clip(pixels + noise, 0, 255).astype(np.uint8)
    return pixels, np.asarray(mask, dtype=np.uint8)


def make_toy_dataset(
    out_dir: Path,
    categories: int = 2,
    per_category: int = 20,
    image_size: int = 64,
    seed: int = 0,
    name: Optional[str] = None,
) -> Path:
    """Write PNG images, masks and ``manifest.json`` under ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    groups = []
    for c in range(categories):
        shape, color = category_style(c)
        category = f"{shape}-{c:02d}"
        items = []
        for i in range(per_category):
            pixels, mask = render_sample(shape, color, image_size, rng)
            image_rel = f"{category}/{i:03d}.png"
            mask_rel = f"{category}/{i:03d}_mask.png"
            (out_dir / category).mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(out_dir / image_rel)
            Image.fromarray(mask).save(out_dir / mask_rel)
            items.append(ManifestItem(image_path=image_rel, mask_path=mask_rel, source_category=category))
        groups.append(GroupEntry(category=category, items=items))

    manifest = DatasetManifest(source_dataset=name or "toy", seed=seed, groups=groups)
    path = write_manifest(manifest, out_dir / "manifest.json")
    SmartLogger.log(
        "INFO",
        "Toy dataset written",
        category=LOG_CATEGORY,
        params={"out_dir": str(out_dir), "categories": categories, "per_category": per_category},
    )
    return path
