import math

import pytest
import torch

from cogsem.config import BranchConfig
from cogsem.cosodtb import CoSODBranch, FusionDecoder, bce_loss, branch_forward, fuse_and_decode
from cogsem.errors import ShapeError
from cogsem.lvgb import UncertaintyFeatures
from cogsem.smart_logger import SmartLogger

CONFIG = BranchConfig(embed_dim=32, depth=2, token_depth=2, heads=4, mlp_ratio=2.0, decoder_depth=1)


def _branch(image_size=64):
    torch.manual_seed(0)
    return CoSODBranch(CONFIG, image_size).eval()


class TestBranch:
    """Patch embedding, backbone and group/specific tokens"""

    def test_feature_grid_is_stride_16(self):
        """H=64, c=32 gives F of shape [N, 4, 4, 32]"""
        with torch.no_grad():
            features = branch_forward(_branch(), torch.rand(3, 64, 64, 3))
        assert tuple(features.values.shape) == (3, 4, 4, 32)
        assert bool(torch.isfinite(features.values).all())

    def test_backbone_features_share_the_grid(self):
        """Difficulty features come on the same token grid"""
        with torch.no_grad():
            sequence = _branch().backbone_features(torch.rand(2, 64, 64, 3))
        assert tuple(sequence.values.shape) == (2, 4, 4, 32)

    def test_permuting_images_permutes_features(self):
        """The group token mean keeps the branch permutation-equivariant"""
        branch = _branch()
        images = torch.rand(5, 64, 64, 3, generator=torch.Generator().manual_seed(1))
        order = torch.tensor([3, 0, 4, 1, 2])
        with torch.no_grad():
            base = branch(images).values
            permuted = branch(images[order]).values
        torch.testing.assert_close(permuted, base[order])

    def test_identical_images_give_identical_rows(self):
        """Two copies of one image map to the same features"""
        image = torch.rand(1, 64, 64, 3)
        with torch.no_grad():
            values = _branch()(torch.cat([image, image])).values
        torch.testing.assert_close(values[0], values[1])

    def test_single_image_group_only_warns(self, capsys):
        """N < 2 degrades the group token but still runs"""
        SmartLogger.configure(console_output=True, file_output=False, min_level="INFO")
        with torch.no_grad():
            values = _branch()(torch.rand(1, 64, 64, 3)).values
        assert tuple(values.shape) == (1, 4, 4, 32)
        assert "[WARNING][COSODTB]" in capsys.readouterr().err

    def test_off_grid_size_is_rejected(self):
        """The patch grid must match the configured image size"""
        with pytest.raises(ShapeError):
            _branch(64)(torch.rand(2, 32, 32, 3))


class TestFusionDecoder:
    """Fusing F with V and decoding to saliency maps"""

    def _decoder(self):
        torch.manual_seed(0)
        return FusionDecoder(CONFIG, v_channels=8).eval()

    def test_output_is_full_size_and_bounded(self):
        """Arbitrary finite inputs give [N, H, W] maps in [0, 1]"""
        decoder = self._decoder()
        with torch.no_grad():
            maps = decoder(100 * torch.randn(2, 4, 4, 32), -100 * torch.randn(2, 4, 4, 8))
        assert tuple(maps.shape) == (2, 64, 64)
        assert float(maps.min()) >= 0.0 and float(maps.max()) <= 1.0

    def test_zero_uncertainty_features_are_valid(self):
        """V = 0 still decodes to finite maps"""
        with torch.no_grad():
            maps = self._decoder()(torch.randn(2, 4, 4, 32), torch.zeros(2, 4, 4, 8))
        assert bool(torch.isfinite(maps).all())

    def test_spatial_mismatch_is_rejected(self):
        """F and V must share the token grid"""
        with pytest.raises(ShapeError):
            self._decoder()(torch.randn(2, 4, 4, 32), torch.zeros(2, 2, 2, 8))

    def test_maps_carry_their_ids(self):
        """fuse_and_decode labels each map with its image id"""
        branch = _branch()
        images = torch.rand(2, 64, 64, 3)
        with torch.no_grad():
            maps = fuse_and_decode(
                self._decoder(), branch(images), UncertaintyFeatures(torch.zeros(2, 4, 4, 8)), ["a/0", "a/1"]
            )
        assert [m.id for m in maps] == ["a/0", "a/1"]
        assert tuple(maps[0].values.shape) == (64, 64)


class TestBCELoss:
    """Pixel-averaged binary cross-entropy"""

    def test_perfect_prediction_is_epsilon_level(self):
        """pred = target gives a loss below 1e-6"""
        target = (torch.rand(4, 8, 8) > 0.5).float()
        assert bce_loss(target.clone(), target).item() < 1e-6

    def test_half_prediction_costs_log_two(self):
        """pred = 0.5 gives ln 2 whatever the target"""
        target = (torch.rand(4, 8, 8) > 0.5).float()
        assert bce_loss(torch.full((4, 8, 8), 0.5), target).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_hand_computed_case(self):
        """Two 2x1 images evaluated by hand"""
        pred = torch.tensor([[[0.9], [0.2]], [[0.6], [0.3]]], dtype=torch.float64)
        target = torch.tensor([[[1.0], [0.0]], [[0.0], [1.0]]], dtype=torch.float64)
        first = -(math.log(0.9) + math.log(0.8)) / 2
        second = -(math.log(0.4) + math.log(0.3)) / 2
        assert bce_loss(pred, target).item() == pytest.approx((first + second) / 2, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        """Analytic and numeric gradients agree at 64-bit"""
        pred = (0.1 + 0.8 * torch.rand(2, 3, 3, dtype=torch.float64)).requires_grad_()
        target = (torch.rand(2, 3, 3) > 0.5).double()
        assert torch.autograd.gradcheck(
            lambda p: bce_loss(p, target), (pred,), eps=1e-6, atol=1e-8, rtol=1e-4
        )

    def test_shape_mismatch_is_rejected(self):
        """pred and target must align"""
        with pytest.raises(ShapeError):
            bce_loss(torch.rand(2, 4, 4), torch.rand(2, 4, 5))
