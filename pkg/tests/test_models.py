import numpy as np
import pytest
import torch

from ctdenoise.models import (DiscriminatorSpec, Generator, GeneratorSpec,
                              GlobalDiscriminator, PatchDiscriminator,
                              PixelDiscriminator, SpectralNorm,
                              UNetDiscriminator, build_discriminator,
                              he_initialize, spectral_power_iteration)

SMALL_D = DiscriminatorSpec(encoder_filters=(8, 8, 8, 16, 16, 16))


def small_generator(**kw):
    spec = GeneratorSpec(layers_per_side=3, filters=8, skip_connections=3)
    for k, v in kw.items():
        setattr(spec, k, v)
    return Generator(spec)


class TestGenerator:
    def test_patch_batch_shape(self):
        gen = he_initialize(Generator(), 0)
        with torch.no_grad():
            out = gen(torch.rand(4, 1, 64, 64))
        assert out.shape == (4, 1, 64, 64)

    def test_full_slice_shape(self):
        gen = he_initialize(Generator(), 0)
        with torch.no_grad():
            out = gen(torch.rand(1, 1, 512, 512))
        assert out.shape == (1, 1, 512, 512)

    def test_shape_preserving_across_sides(self):
        gen = he_initialize(small_generator(), 1)
        for side in (64, 65, 96, 250, 512):
            with torch.no_grad():
                out = gen(torch.rand(1, 1, side, side))
            assert out.shape == (1, 1, side, side)

    def test_zero_weights_no_skips_zero_output(self):
        gen = small_generator(skip_connections=0)
        for p in gen.parameters():
            torch.nn.init.zeros_(p)
        out = gen(torch.rand(2, 1, 64, 64))
        assert torch.equal(out, torch.zeros_like(out))

    def test_zero_weights_with_skips_is_identity(self):
        # every intermediate feature is zero, so only the input skip at the
        # final decoder layer survives and the last ReLU passes it through
        gen = small_generator(skip_connections=3)
        for p in gen.parameters():
            torch.nn.init.zeros_(p)
        x = torch.rand(2, 1, 64, 64)
        assert torch.equal(gen(x), x)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            Generator(GeneratorSpec(layers_per_side=0))
        with pytest.raises(ValueError):
            Generator(GeneratorSpec(skip_connections=11))


class TestUNetDiscriminator:
    def test_shape_contract_64(self):
        d = he_initialize(UNetDiscriminator(SMALL_D), 0)
        out = d(torch.rand(8, 1, 64, 64))
        assert out.global_score.shape == (8,)
        assert out.pixel_map.shape == (8, 1, 64, 64)

    def test_gradient_branch_two_channels(self):
        spec = DiscriminatorSpec(in_channels=2, encoder_filters=SMALL_D.encoder_filters)
        d = he_initialize(UNetDiscriminator(spec), 0)
        out = d(torch.rand(1, 2, 64, 64))
        assert out.global_score.shape == (1,)
        assert out.pixel_map.shape == (1, 1, 64, 64)

    def test_size_agnostic_128(self):
        d = he_initialize(UNetDiscriminator(SMALL_D), 0)
        out = d(torch.rand(1, 1, 128, 128))
        assert out.pixel_map.shape == (1, 1, 128, 128)

    def test_rejects_small_input(self):
        d = UNetDiscriminator(SMALL_D)
        with pytest.raises(ValueError, match=">= 64"):
            d(torch.rand(1, 1, 32, 32))

    def test_perturbing_a_pixel_moves_both_heads(self):
        d = he_initialize(UNetDiscriminator(SMALL_D), 3)
        d.eval()
        x = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            base = d(x)
            x2 = x.clone()
            x2[0, 0, 20, 30] += 0.5
            moved = d(x2)
        assert not torch.equal(base.pixel_map, moved.pixel_map)
        assert not torch.equal(base.global_score, moved.global_score)

    def test_decoder_disabled(self):
        spec = DiscriminatorSpec(encoder_filters=SMALL_D.encoder_filters,
                                 use_decoder=False)
        d = he_initialize(UNetDiscriminator(spec), 0)
        out = d(torch.rand(2, 1, 64, 64))
        assert out.pixel_map is None and out.global_score.shape == (2,)


class TestVariants:
    def test_global_variant(self):
        d = he_initialize(build_discriminator("global", SMALL_D), 0)
        out = d(torch.rand(2, 1, 64, 64))
        assert out.global_score.shape == (2,) and out.pixel_map is None

    def test_patch_variant(self):
        d = he_initialize(build_discriminator("patch", SMALL_D), 0)
        out = d(torch.rand(2, 1, 64, 64))
        assert out.global_score is None
        assert out.pixel_map.shape[2] < 64  # reduced-resolution score map

    def test_pixel_variant_full_res(self):
        d = he_initialize(build_discriminator("pixel", SMALL_D), 0)
        out = d(torch.rand(2, 1, 64, 64))
        assert out.pixel_map.shape == (2, 1, 64, 64)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            build_discriminator("wavelet")


class TestSpectralNorm:
    def test_power_iteration_diag_matrix(self):
        w = torch.diag(torch.tensor([3.0, 1.0]))
        u = torch.tensor([0.6, 0.8])
        v = torch.tensor([0.8, 0.6])
        for _ in range(100):
            w_n, u, v, sigma = spectral_power_iteration(w, u, v)
        expected = torch.diag(torch.tensor([1.0, 1.0 / 3.0]))
        assert torch.allclose(w_n, expected, atol=1e-3)

    def test_identity_unchanged(self):
        w = torch.eye(4)
        u = torch.full((4,), 0.5)
        v = torch.full((4,), 0.5)
        w_n, u, v, sigma = spectral_power_iteration(w, u, v)
        assert torch.allclose(w_n, torch.eye(4), atol=1e-6)
        assert abs(float(sigma) - 1.0) < 1e-6

    def test_zero_weight_passthrough(self):
        w = torch.zeros(3, 3)
        u = torch.tensor([1.0, 0.0, 0.0])
        v = torch.tensor([1.0, 0.0, 0.0])
        w_n, *_ = spectral_power_iteration(w, u, v)
        assert torch.equal(w_n, torch.zeros(3, 3))

    def test_normalized_sigma_close_to_one(self):
        # oracle: exact SVD of the normalized matrix
        rng = np.random.default_rng(0)
        for _ in range(5):
            w = torch.tensor(rng.normal(size=(64, 64)), dtype=torch.float32)
            u = torch.randn(64)
            v = torch.randn(64)
            u = u / u.norm()
            v = v / v.norm()
            for _ in range(100):
                w_n, u, v, _ = spectral_power_iteration(w, u, v)
            top = np.linalg.svd(w_n.numpy(), compute_uv=False)[0]
            assert top <= 1.05

    def test_module_updates_state_only_in_training(self):
        sn = SpectralNorm(torch.nn.Conv2d(2, 4, 3, padding=1))
        x = torch.rand(1, 2, 8, 8)
        sn.train()
        u_before = sn.weight_u.clone()
        sn(x)
        assert not torch.equal(sn.weight_u, u_before)
        sn.eval()
        u_eval = sn.weight_u.clone()
        y1 = sn(x)
        y2 = sn(x)
        assert torch.equal(sn.weight_u, u_eval)
        assert torch.equal(y1, y2)

    def test_estimate_against_exact_svd(self):
        torch.manual_seed(0)
        sn = SpectralNorm(torch.nn.Conv2d(4, 8, 3))
        sn.refresh_state(200)
        w_n = sn.normalized_weight().reshape(8, -1).numpy()
        exact = np.linalg.svd(w_n, compute_uv=False)[0]
        assert abs(sn.estimate_sigma(200) - exact) < 1e-4
        assert exact <= 1.02


class TestHeInit:
    def test_variance_matches_fan_in(self):
        conv = torch.nn.Conv2d(32, 384, 3)  # fan_in 288, >1e5 weights
        he_initialize(conv, 0)
        w = conv.weight.detach().numpy()
        assert w.size >= 100_000
        target = 2.0 / 288.0
        assert abs(w.var() - target) <= 0.1 * target

    def test_bitwise_deterministic(self):
        a = he_initialize(UNetDiscriminator(SMALL_D), 5)
        b = he_initialize(UNetDiscriminator(SMALL_D), 5)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_biases_zero(self):
        gen = he_initialize(Generator(GeneratorSpec(layers_per_side=2, filters=4,
                                                    skip_connections=2)), 1)
        for name, p in gen.named_parameters():
            if name.endswith("bias"):
                assert torch.equal(p.detach(), torch.zeros_like(p))
