import json

import numpy as np
import pytest
import torch

from audiomanifold.core import ShapeError, grad_check
from audiomanifold.vq import (
    GaussianVAE, LatentMap, Quantizer, TrainConfig, VQVAE, VqConfig, gaussian_kl, load_manifold,
    nearest_codes, save_manifold, straight_through, train_vqvae, vq_loss,
)

from oracles import nearest_code_bruteforce


def tiny_cfg(**kw):
    base = dict(image_size=16, latent_size=4, num_codes=8, code_dim=4, first_features=4, features=6, n_residual=1)
    return VqConfig(**{**base, **kw})


class TestConfig:
    @pytest.mark.parametrize("latent,stages", [(8, 4), (16, 3), (32, 2)])
    def test_supported_latent_sizes(self, latent, stages):
        cfg = VqConfig(latent_size=latent)
        assert cfg.n_stages == stages
        assert cfg.stage_widths() == [64] + [128] * (stages - 1)

    def test_rejects_non_power_ratio(self):
        with pytest.raises(ValueError):
            VqConfig(image_size=96, latent_size=16)

    def test_depth_is_single_channel(self):
        with pytest.raises(ValueError):
            VqConfig(in_channels=3)


class TestShapes:
    def test_encoder_decoder_128_to_16(self):
        torch.manual_seed(0)
        model = VQVAE(VqConfig(latent_size=16, n_residual=1)).eval()
        x = torch.rand(1, 1, 128, 128)
        z = model.encode(x)
        assert z.grid.shape == (1, 64, 16, 16) and not z.quantized
        assert model.decode(model.quantize(z)).shape == (1, 1, 128, 128)

    def test_segmentation_probabilities(self):
        torch.manual_seed(0)
        model = VQVAE(tiny_cfg(modality="segmentation", in_channels=5)).eval()
        out = model.decode(model.quantize(model.encode(torch.rand(2, 5, 16, 16))))
        assert out.shape == (2, 5, 16, 16)
        torch.testing.assert_close(out.sum(1), torch.ones(2, 16, 16))

    def test_depth_output_in_unit_interval(self):
        model = VQVAE(tiny_cfg()).eval()
        out = model.decode(model.encode(torch.rand(3, 1, 16, 16)))
        assert out.min() >= 0 and out.max() <= 1

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            VQVAE(tiny_cfg()).encode(torch.rand(1, 1, 32, 32))

    def test_latent_map_contract(self):
        with pytest.raises(ShapeError):
            LatentMap(torch.zeros(2, 3, 4))
        with pytest.raises(ValueError):
            LatentMap(torch.zeros(1, 2, 2, 2), quantized=True)


class TestQuantizer:
    def test_codebook_init_range(self):
        torch.manual_seed(0)
        q = Quantizer(64, 64)
        assert q.embedding.abs().max() <= 1 / 64
        assert q.embedding.shape == (64, 64)

    def test_matches_bruteforce(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            book = torch.randn(7, 3, generator=g, dtype=torch.float64)
            vecs = torch.randn(11, 3, generator=g, dtype=torch.float64)
            got = nearest_codes(vecs, book).tolist()
            assert got == [nearest_code_bruteforce(v.tolist(), book.tolist()) for v in vecs]

    def test_ties_go_to_lowest_index(self):
        book = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        vecs = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, -1.0]])
        assert nearest_codes(vecs, book).tolist() == [0, 0, 0]

    def test_lookup_returns_codebook_rows(self):
        torch.manual_seed(2)
        q = Quantizer(5, 3)
        z = torch.randn(2, 3, 4, 4)
        zq, idx = q.lookup(z)
        assert idx.shape == (2, 4, 4)
        rows = zq.permute(0, 2, 3, 1).reshape(-1, 3)
        torch.testing.assert_close(rows, q.embedding[idx.reshape(-1)], rtol=0, atol=0)

    def test_idempotent(self):
        torch.manual_seed(3)
        model = VQVAE(tiny_cfg()).eval()
        once = model.quantize(model.encode(torch.rand(2, 1, 16, 16)))
        twice = model.quantize(once.grid)
        assert torch.equal(once.grid, twice.grid) and torch.equal(once.indices, twice.indices)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            Quantizer(4, 3).lookup(torch.zeros(1, 5, 2, 2))


class TestLosses:
    def test_straight_through_gradient(self):
        z_e = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        z_q = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        out = straight_through(z_e, z_q)
        torch.testing.assert_close(out, z_q.detach(), rtol=0, atol=0)
        w = torch.randn_like(out)
        (out * w).sum().backward()
        assert torch.equal(z_e.grad, w)
        assert z_q.grad is None

    def test_codebook_term_moves_only_codebook(self):
        z_e = torch.randn(1, 2, 2, 2, requires_grad=True)
        z_q = torch.randn(1, 2, 2, 2, requires_grad=True)
        x = torch.rand(1, 1, 4, 4)
        loss = vq_loss(x, x.clone(), z_e, z_q)
        g_e, g_q = torch.autograd.grad(loss.codebook, [z_e, z_q], allow_unused=True)
        assert g_e is None and g_q is not None
        g_e, g_q = torch.autograd.grad(loss.commitment, [z_e, z_q], allow_unused=True)
        assert g_q is None and g_e is not None

    def test_total_weights_commitment(self):
        z_e, z_q = torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1)
        x = torch.zeros(1, 1, 2, 2)
        loss = vq_loss(x, x, z_e, z_q, beta=0.25)
        assert float(loss.total) == pytest.approx(1.0 + 0.25)

    def test_recon_gradient_never_reaches_codebook(self):
        torch.manual_seed(4)
        model = VQVAE(tiny_cfg()).train()
        x = torch.rand(4, 1, 16, 16)
        breakdown, _, _ = model.loss(x)
        (g,) = torch.autograd.grad(breakdown.reconstruction, [model.codebook], allow_unused=True)
        assert g is None or torch.count_nonzero(g) == 0

    def test_kl_zero_at_prior(self):
        assert float(gaussian_kl(torch.zeros(3, 4), torch.zeros(3, 4))) == 0.0
        assert float(gaussian_kl(torch.ones(1), torch.zeros(1))) == pytest.approx(0.5)


class TestGradients:
    def test_encoder_decoder_grad_check(self):
        torch.manual_seed(5)
        cfg = tiny_cfg(image_size=8, latent_size=2, first_features=2, features=3, code_dim=2)
        model = VQVAE(cfg)
        x = torch.rand(2, 1, 8, 8)
        assert grad_check(model.encoder, x) < 1e-4
        assert grad_check(model.decoder, torch.randn(2, 2, 2, 2)) < 1e-4

    def test_gaussian_vae_grad_check(self):
        torch.manual_seed(6)
        model = GaussianVAE(tiny_cfg(image_size=8, latent_size=2, first_features=2, features=3, code_dim=2,
                                     variant="vae"))
        assert grad_check(model.encoder, torch.rand(2, 1, 8, 8)) < 1e-4


class TestTraining:
    def test_loss_drops(self):
        torch.manual_seed(7)
        x = torch.zeros(32, 1, 16, 16)
        x[:, :, 8:] = 1.0
        x[::2, :, :, :8] = 0.5
        _, res = train_vqvae(x, tiny_cfg(), TrainConfig(batch_size=8, max_steps=120, lr=3e-3, eval_every=20,
                                                        patience=100))
        assert res.evaluations[-1] < 0.5 * res.evaluations[0]

    def test_vae_variant_trains(self):
        x = torch.rand(16, 1, 16, 16)
        model, res = train_vqvae(x, tiny_cfg(variant="vae"), TrainConfig(batch_size=8, max_steps=10, eval_every=5))
        assert isinstance(model, GaussianVAE) and len(res.evaluations) == 2

    def test_ema_codebook_trains(self):
        torch.manual_seed(8)
        x = torch.rand(16, 1, 16, 16)
        model, _ = train_vqvae(x, tiny_cfg(ema=True, restart_dead_codes=True),
                               TrainConfig(batch_size=8, max_steps=6, eval_every=3))
        assert torch.isfinite(model.codebook).all()

    def test_deterministic(self):
        x = torch.rand(16, 1, 16, 16, generator=torch.Generator().manual_seed(9))

        def run():
            m, _ = train_vqvae(x, tiny_cfg(), TrainConfig(batch_size=4, max_steps=8, seed=3))
            return torch.cat([p.detach().flatten() for p in m.parameters()])

        assert torch.equal(run(), run())


class TestPersistence:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(10)
        model, _ = train_vqvae(torch.rand(8, 1, 16, 16), tiny_cfg(), TrainConfig(batch_size=4, max_steps=3))
        save_manifold(tmp_path / "m", model, bounds=(1.0, 9.0), step=3, seed=0)
        loaded, meta = load_manifold(tmp_path / "m")
        x = torch.rand(2, 1, 16, 16)
        with torch.no_grad():
            assert torch.equal(model.decode(model.quantize(model.encode(x))),
                               loaded.decode(loaded.quantize(loaded.encode(x))))
        info = json.loads((tmp_path / "m" / "manifold-info.json").read_text())
        assert info["latent_h"] == 4 and info["num_codes"] == 8 and info["depth_bounds"] == [1.0, 9.0]
        assert meta["global_step"] == 3

    def test_codebook_saved_bit_exact(self, tmp_path):
        model = VQVAE(tiny_cfg())
        save_manifold(tmp_path / "m", model)
        loaded, _ = load_manifold(tmp_path / "m")
        assert np.array_equal(model.codebook.detach().numpy(), loaded.codebook.detach().numpy())
