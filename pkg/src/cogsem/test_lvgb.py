import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cogsem.config import PriorConfig, VQConfig
from cogsem.datamodel import ImageGroup
from cogsem.errors import ContractError, ShapeError
from cogsem.lvgb import (
    LVGB,
    Codebook,
    CodePrior,
    Decoder,
    latent_shape,
    prior_nll,
    prior_resample,
    prior_sample,
    quantize,
    vqvae_loss,
)


def _tiny_lvgb(use_attention=False):
    torch.manual_seed(0)
    vq = VQConfig(num_embeddings=8, embedding_dim=4, hidden_channels=8, n_residual_blocks=1, v_channels=4)
    prior = PriorConfig(hidden_channels=8, n_layers=2, use_attention=use_attention, attention_heads=2)
    return LVGB(vq, prior)


def _fixed_prior(pattern, k, scale=1e3):
    """Prior whose logits put all mass on ``pattern`` regardless of context."""

    def model(indices):
        onehot = F.one_hot(pattern, k).permute(2, 0, 1).to(torch.float32)
        return (scale * onehot)[None].expand(indices.shape[0], -1, -1, -1)

    return model


def _uniform_prior(k):
    def model(indices):
        return torch.zeros(indices.shape[0], k, *indices.shape[1:])

    return model


class TestQuantize:
    """Nearest-neighbour lookup against the codebook"""

    def test_codebook_row_maps_to_its_index(self):
        """A latent equal to row 3 gets index 3 and zero error"""
        codebook = torch.randn(8, 4, generator=torch.Generator().manual_seed(1))
        grid = quantize(codebook[3].reshape(1, 1, 1, 4).clone(), codebook)
        assert int(grid.indices.flatten()[0]) == 3
        assert torch.equal(grid.quantized.flatten(), codebook[3])

    def test_equidistant_rows_pick_the_lowest_index(self):
        """Ties resolve to the lower codebook index"""
        codebook = torch.tensor([[5.0, 5.0], [1.0, 0.0], [9.0, 9.0], [8.0, 8.0], [-1.0, 0.0]])
        grid = quantize(torch.zeros(1, 1, 1, 2), codebook)
        assert int(grid.indices.flatten()[0]) == 1

    def test_matches_brute_force_with_ties(self):
        """Integer-valued instances agree exactly with an exhaustive first-minimum search"""
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(2, 17))
            d = int(rng.integers(1, 9))
            codebook = rng.integers(-2, 3, size=(k, d)).astype(np.float32)
            queries = rng.integers(-2, 3, size=(10, d)).astype(np.float32)
            grid = quantize(torch.from_numpy(queries).reshape(1, 10, 1, d), torch.from_numpy(codebook))
            expected = ((queries[:, None, :] - codebook[None]) ** 2).sum(-1).argmin(axis=1)
            assert grid.indices.flatten().tolist() == expected.tolist()

    def test_quantized_rows_equal_codebook_rows(self):
        """quantized[n, i, j] is exactly the codebook row at indices[n, i, j]"""
        codebook = Codebook(16, 3)
        ze = torch.randn(2, 4, 4, 3)
        grid = quantize(ze, codebook)
        assert torch.equal(grid.quantized, codebook.embeddings[grid.indices].detach())

    def test_empty_codebook_is_rejected(self):
        """A codebook with no rows cannot quantize"""
        with pytest.raises(ContractError):
            quantize(torch.zeros(1, 2, 2, 4), torch.empty(0, 4))

    def test_dimension_mismatch_is_rejected(self):
        """The latent width must equal the codebook width"""
        with pytest.raises(ShapeError):
            quantize(torch.zeros(1, 2, 2, 3), torch.zeros(4, 4))

    def test_codebook_needs_two_entries(self):
        """K >= 2"""
        with pytest.raises(ContractError):
            Codebook(1, 4)

    def test_dead_codes_move_onto_encoder_outputs(self):
        """Unused entries are re-seeded from the encoder outputs"""
        codebook = Codebook(4, 2)
        ze = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        moved = codebook.reinit_dead_codes(ze, torch.zeros(1, 1, 2, dtype=torch.long))
        assert moved == 3
        rows = {tuple(r) for r in ze.reshape(-1, 2).tolist()}
        for row in codebook.embeddings[1:].tolist():
            assert tuple(row) in rows


class TestStraightThrough:
    """Identity backward through the quantizer"""

    def test_gradient_passes_unchanged(self):
        """d/dze of <w, st(ze)> is w"""
        ze = torch.randn(1, 2, 2, 3, dtype=torch.float64, requires_grad=True)
        grid = quantize(ze, torch.randn(5, 3, dtype=torch.float64))
        weights = torch.randn(1, 2, 2, 3, dtype=torch.float64)
        (grid.straight_through * weights).sum().backward()
        assert torch.equal(ze.grad, weights)
        assert torch.equal(grid.straight_through.detach(), grid.quantized)

    def test_decoder_gradient_matches_finite_differences(self):
        """The gradient reaching ze equals the decoder's gradient at zq"""
        torch.manual_seed(0)
        decoder = Decoder(8, 4, 1).double()
        codebook = torch.randn(6, 4, dtype=torch.float64)
        ze = torch.randn(1, 2, 2, 4, dtype=torch.float64, requires_grad=True)
        grid = quantize(ze, codebook)

        def objective(z):
            reconstruction, _ = decoder(z)
            return (reconstruction ** 2).sum()

        objective(grid.straight_through).backward()
        zq = grid.quantized.detach()
        eps = 1e-6
        for index in [(0, 0, 0, 0), (0, 1, 0, 2), (0, 1, 1, 3)]:
            bump = torch.zeros_like(zq)
            bump[index] = eps
            numeric = (objective(zq + bump) - objective(zq - bump)).item() / (2 * eps)
            analytic = ze.grad[index].item()
            assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric))


class TestVQVAELoss:
    """Three-term objective and its gradient routing"""

    def test_scalar_case(self):
        """x=0, x_rec=0.5, ze=1, zq=0, lambda0=0.25 gives 1.5"""
        total, parts = vqvae_loss(
            torch.zeros(1), torch.full((1,), 0.5), torch.ones(1), torch.zeros(1), lambda0=0.25
        )
        assert total.item() == pytest.approx(1.5)
        assert parts["reconstruction"].item() == pytest.approx(0.25)
        assert parts["codebook"].item() == pytest.approx(1.0)
        assert parts["commitment"].item() == pytest.approx(1.0)

    def test_perfect_reconstruction_is_zero(self):
        """x_rec = x and zq = ze give zero loss"""
        x = torch.rand(2, 8, 8, 3)
        z = torch.randn(2, 2, 2, 4)
        total, _ = vqvae_loss(x, x.clone(), z, z.clone())
        assert total.item() == 0.0

    def test_negative_commitment_is_rejected(self):
        """lambda0 must be >= 0"""
        with pytest.raises(ContractError):
            vqvae_loss(torch.zeros(1), torch.zeros(1), torch.zeros(1), torch.zeros(1), lambda0=-0.1)

    def test_zero_commitment_adds_no_encoder_gradient(self):
        """With lambda0=0 only the codebook side sees the latent terms"""
        ze = torch.randn(3, requires_grad=True)
        zq = torch.randn(3, requires_grad=True)
        total, parts = vqvae_loss(torch.zeros(3), torch.zeros(3), ze, zq, lambda0=0.0)
        total.backward()
        assert parts["commitment"].item() == 0.0
        assert ze.grad is None or torch.all(ze.grad == 0)
        assert torch.any(zq.grad != 0)

    def test_terms_reach_only_their_owners(self):
        """Codebook term skips the encoder, commitment term skips the codebook"""
        lvgb = _tiny_lvgb()
        _, parts, _ = lvgb.loss(torch.rand(2, 16, 16, 3))
        encoder_params = list(lvgb.encoder.parameters())
        grads = torch.autograd.grad(parts["codebook"], encoder_params, allow_unused=True, retain_graph=True)
        assert all(g is None or torch.all(g == 0) for g in grads)
        (grad,) = torch.autograd.grad(
            parts["commitment"], [lvgb.codebook.embeddings], allow_unused=True, retain_graph=True
        )
        assert grad is None or torch.all(grad == 0)
        (grad,) = torch.autograd.grad(parts["codebook"], [lvgb.codebook.embeddings])
        assert torch.any(grad != 0)


class TestBranchShapes:
    """Encoder, decoder and V shape contracts"""

    def test_latent_grid_is_quarter_size(self):
        """H=32 gives an 8x8 latent grid"""
        lvgb = _tiny_lvgb()
        ze = lvgb.encode(torch.rand(2, 32, 32, 3))
        assert tuple(ze.shape) == (2, 8, 8, 4)
        assert latent_shape(224) == (56, 56)

    def test_decode_round_trips_shape(self):
        """Reconstruction keeps the input size and V sits on the H/16 grid"""
        lvgb = _tiny_lvgb()
        images = torch.rand(2, 32, 32, 3)
        reconstruction, grid, v = lvgb(images)
        assert reconstruction.shape == images.shape
        assert float(reconstruction.min()) >= 0.0 and float(reconstruction.max()) <= 1.0
        assert tuple(v.values.shape) == (2, 2, 2, 4)
        assert tuple(grid.indices.shape) == (2, 8, 8)

    def test_identical_images_encode_identically(self):
        """Encoding is deterministic"""
        lvgb = _tiny_lvgb()
        image = torch.rand(1, 16, 16, 3)
        ze = lvgb.encode(torch.cat([image, image]))
        assert torch.equal(ze[0], ze[1])

    def test_accepts_image_groups(self):
        """ImageGroup and raw tensors encode the same"""
        lvgb = _tiny_lvgb()
        pixels = torch.rand(2, 16, 16, 3)
        group = ImageGroup(pixels, "a", ("a/0", "a/1"))
        assert torch.equal(lvgb.encode(group), lvgb.encode(pixels))

    def test_rejects_sizes_off_the_token_grid(self):
        """H must be a multiple of 16"""
        with pytest.raises(ShapeError):
            _tiny_lvgb().encode(torch.rand(2, 24, 24, 3))

    def test_resampled_v_is_seeded(self):
        """The sampled V path is reproducible under a fixed generator"""
        lvgb = _tiny_lvgb()
        images = torch.rand(2, 16, 16, 3)
        with torch.no_grad():
            a = lvgb.uncertainty(images, "resampled", generator=torch.Generator().manual_seed(3))
            b = lvgb.uncertainty(images, "resampled", generator=torch.Generator().manual_seed(3))
        assert torch.equal(a.values, b.values)
        with pytest.raises(ContractError):
            lvgb.uncertainty(images, "nowhere")

    def test_samples_decode_to_images(self):
        """Prior samples come with decoded images of the configured size"""
        lvgb = _tiny_lvgb()
        indices, images = lvgb.sample(3, latent_shape(16), generator=torch.Generator().manual_seed(0))
        assert tuple(indices.shape) == (3, 4, 4)
        assert int(indices.min()) >= 0 and int(indices.max()) < 8
        assert tuple(images.shape) == (3, 16, 16, 3)


class TestPrior:
    """Autoregressive prior over code indices"""

    @pytest.mark.parametrize("use_attention", [False, True])
    def test_logits_ignore_current_and_later_codes(self, use_attention):
        """Changing the code at p leaves logits at p and earlier positions unchanged"""
        torch.manual_seed(0)
        prior = CodePrior(6, hidden=8, n_layers=3, use_attention=use_attention, heads=2).eval()
        indices = torch.randint(0, 6, (1, 5, 5))
        changed = indices.clone()
        i, j = 2, 3
        changed[0, i, j] = (changed[0, i, j] + 1) % 6
        with torch.no_grad():
            a = prior(indices).flatten(2)
            b = prior(changed).flatten(2)
        p = i * 5 + j
        torch.testing.assert_close(a[..., : p + 1], b[..., : p + 1], rtol=0, atol=1e-6)
        assert not torch.allclose(a[..., p + 1:], b[..., p + 1:])

    def test_predicted_distributions_are_normalised(self):
        """Softmax over the logits sums to one at every position"""
        prior = CodePrior(5, hidden=8, n_layers=2)
        with torch.no_grad():
            probs = torch.softmax(prior(torch.randint(0, 5, (2, 4, 4))).double(), dim=1)
        ones = torch.ones(2, 4, 4, dtype=torch.float64)
        torch.testing.assert_close(probs.sum(dim=1), ones, atol=1e-6, rtol=0)

    def test_uniform_prior_costs_log_k(self):
        """Uniform logits give ln K per position"""
        nll = prior_nll(torch.randint(0, 7, (2, 3, 3)), _uniform_prior(7))
        assert nll.item() == pytest.approx(math.log(7), rel=1e-6)

    def test_certain_prior_costs_nothing(self):
        """All mass on the true index gives zero NLL"""
        pattern = torch.randint(0, 4, (3, 3))
        assert prior_nll(pattern[None], _fixed_prior(pattern, 4)).item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_computed_cross_entropy(self):
        """K=2 over four positions matches the softmax cross-entropy by hand"""
        logits = torch.tensor([[[[2.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [3.0, 0.0]]]])
        indices = torch.tensor([[[0, 1], [1, 1]]])
        expected = 0.0
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            z0, z1 = logits[0, 0, i, j].item(), logits[0, 1, i, j].item()
            chosen = z0 if indices[0, i, j] == 0 else z1
            expected += math.log(math.exp(z0) + math.exp(z1)) - chosen
        nll = prior_nll(indices, lambda idx: logits)
        assert nll.item() == pytest.approx(expected / 4, rel=1e-6)

    def test_out_of_range_indices_are_rejected(self):
        """Indices must lie in [0, K)"""
        prior = CodePrior(4, hidden=8, n_layers=1)
        with pytest.raises(ContractError):
            prior_nll(torch.full((1, 2, 2), 4), prior)
        with pytest.raises(ContractError):
            prior_nll(torch.zeros(1, 2, 2), prior)

    def test_certain_prior_samples_its_pattern(self):
        """One-hot logits give the same grid for any seed"""
        pattern = torch.tensor([[0, 3, 1], [2, 2, 0]])
        for seed in (0, 1, 2):
            generator = torch.Generator().manual_seed(seed)
            drawn = prior_sample(_fixed_prior(pattern, 4), (2, 3), generator=generator)
            assert torch.equal(drawn[0], pattern)

    def test_sampling_is_seeded(self):
        """Same seed, same samples"""
        prior = CodePrior(5, hidden=8, n_layers=1)
        a = prior_sample(prior, (3, 3), num_samples=2, generator=torch.Generator().manual_seed(7))
        b = prior_sample(prior, (3, 3), num_samples=2, generator=torch.Generator().manual_seed(7))
        assert torch.equal(a, b)

    def test_uniform_prior_frequencies(self):
        """10^4 uniform draws over K=4 stay near 1/4"""
        generator = torch.Generator().manual_seed(0)
        drawn = prior_sample(_uniform_prior(4), (20, 20), num_samples=25, generator=generator)
        counts = torch.bincount(drawn.flatten(), minlength=4).double() / drawn.numel()
        sigma = math.sqrt(0.25 * 0.75 / drawn.numel())
        assert torch.all((counts - 0.25).abs() <= 4 * sigma)

    def test_non_positive_temperature_is_rejected(self):
        """temperature > 0"""
        with pytest.raises(ContractError):
            prior_sample(_uniform_prior(3), (2, 2), temperature=0.0)
        with pytest.raises(ContractError):
            prior_resample(_uniform_prior(3), torch.zeros(1, 2, 2, dtype=torch.long), temperature=-1.0)

    def test_resampling_follows_a_certain_prior(self):
        """One-pass resampling returns the prior's pattern and keeps the grid shape"""
        pattern = torch.tensor([[1, 0], [3, 2]])
        resampled = prior_resample(_fixed_prior(pattern, 4), torch.zeros(2, 2, 2, dtype=torch.long))
        assert torch.equal(resampled, pattern.expand(2, -1, -1))
