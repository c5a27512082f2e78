import numpy as np
import pytest

from cogsem.datamodel import load_groups, read_manifest
from cogsem.synthetic import SHAPES, category_style, make_toy_dataset, render_sample


class TestRenderSample:
    """Single toy images"""

    @pytest.mark.parametrize("shape", SHAPES)
    def test_mask_is_binary_and_covers_the_shape(self, shape):
        """Mask values are 0/255 with a non-trivial foreground"""
        _, color = category_style(0)
        image, mask = render_sample(shape, color, 32, np.random.default_rng(0))
        assert image.shape == (32, 32, 3) and image.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 255}
        assert 0 < (mask == 255).mean() < 0.5

    def test_foreground_carries_the_category_colour(self):
        """Shape pixels sit within the jitter of the category colour"""
        _, color = category_style(1)
        image, mask = render_sample("square", color, 32, np.random.default_rng(1))
        inside = image[mask == 255].astype(np.int16)
        assert np.abs(inside - np.array(color)).max() <= 8

    def test_categories_differ_in_style(self):
        """Neighbouring categories get different shapes and colours"""
        assert category_style(0) != category_style(1)
        assert category_style(0)[0] == category_style(len(SHAPES))[0]


class TestToyDataset:
    """On-disk toy datasets"""

    def test_manifest_loads_into_groups(self, tmp_path):
        """Every category becomes loadable groups of the requested size"""
        path = make_toy_dataset(tmp_path, categories=3, per_category=4, image_size=16, seed=2)
        manifest = read_manifest(path)
        assert manifest.source_dataset == "toy"
        assert manifest.categories == ["square-00", "circle-01", "triangle-02"]
        groups = load_groups(path, 2, image_size=16)
        assert len(groups) == 6
        images, masks = groups[0]
        assert tuple(images.images.shape) == (2, 16, 16, 3)
        assert bool(masks.masks.any())

    def test_same_seed_same_pixels(self, tmp_path):
        """Toy rendering is deterministic under the seed"""
        a = make_toy_dataset(tmp_path / "a", categories=2, per_category=2, image_size=16, seed=3)
        b = make_toy_dataset(tmp_path / "b", categories=2, per_category=2, image_size=16, seed=3)
        assert (a.parent / "square-00" / "001.png").read_bytes() == (
            b.parent / "square-00" / "001.png"
        ).read_bytes()
