import numpy as np
import pytest
import torch
import torch.nn as nn

from audiomanifold.atnet import (
    ATNet, AtNetConfig, CompatibilityError, E2ENet, at_loss, check_compatible, infer, infer_e2e,
    infer_spectrograms, load_atnet, save_atnet, train_atnet, train_e2e,
)
from audiomanifold.core import Dense, Dropout, grad_check
from audiomanifold.dsp import AudioClip
from audiomanifold.vq import LatentMap, TrainConfig, VQVAE, VqConfig

SMALL_VQ = dict(image_size=16, latent_size=4, num_codes=8, code_dim=4, first_features=4, features=6, n_residual=1)


def small_at(**kw):
    base = dict(input_channels=2, input_size=32, latent_size=4, code_dim=4, mlp_widths=[16, 16],
                start_channels=16, encoder_width=4)
    return AtNetConfig(**{**base, **kw})


class TestArchitecture:
    def test_full_scale_sizes(self):
        torch.manual_seed(0)
        net = ATNet(AtNetConfig(input_channels=8, input_size=128, latent_size=16)).eval()
        feat = net.audio_encode(torch.rand(2, 8, 128, 128))
        assert feat.shape == (2, 512)
        denses = [m for m in net.mlp.modules() if isinstance(m, Dense)]
        assert [(d.in_features, d.out_features) for d in denses] == [(512, 512), (512, 1024), (1024, 512)]
        assert all(m.p == 0.2 for m in net.mlp.modules() if isinstance(m, Dropout))
        z = net.manifold_decode(net.domain_transform(feat))
        assert z.grid.shape == (2, 64, 16, 16) and not z.quantized

    def test_decoder_halves_features(self):
        net = ATNet(AtNetConfig(latent_size=8))
        convs = [m for m in net.manifold_decoder.modules() if isinstance(m, nn.ConvTranspose2d)]
        assert [c.out_channels for c in convs] == [256, 128, 64]

    @pytest.mark.parametrize("latent", [8, 16, 32])
    def test_output_grid(self, latent):
        net = ATNet(small_at(latent_size=latent, start_channels=64)).eval()
        assert net(torch.rand(1, 2, 32, 32)).shape == (1, 4, latent, latent)

    def test_bad_latent(self):
        with pytest.raises(ValueError):
            AtNetConfig(latent_size=12)

    def test_bad_trunk_sizes(self):
        with pytest.raises(ValueError, match="multiple of 32"):
            AtNetConfig(input_size=48)
        with pytest.raises(ValueError, match="halved"):
            AtNetConfig(latent_size=32, start_channels=16)


class TestLoss:
    def test_zero_when_equal(self):
        z = torch.randn(2, 4, 3, 3)
        assert float(at_loss(z, LatentMap(z.clone()))) == 0.0

    def test_value(self):
        assert float(at_loss(torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2))) == 1.0

    def test_rejects_quantized_target(self):
        z = torch.zeros(1, 2, 2, 2)
        with pytest.raises(ValueError):
            at_loss(z, LatentMap(z, quantized=True, indices=torch.zeros(1, 2, 2, dtype=torch.long)))


class TestCompatibility:
    def test_latent_mismatch(self):
        with pytest.raises(CompatibilityError):
            check_compatible(AtNetConfig(latent_size=8), VqConfig(latent_size=16))

    def test_code_dim_mismatch(self):
        with pytest.raises(CompatibilityError):
            check_compatible(AtNetConfig(latent_size=16, code_dim=32), VqConfig(latent_size=16))

    def test_train_refuses_mismatch(self):
        manifold = VQVAE(VqConfig(**SMALL_VQ))
        with pytest.raises(CompatibilityError):
            train_atnet(torch.rand(4, 2, 32, 32), torch.rand(4, 1, 16, 16), manifold, small_at(latent_size=8))


def test_grad_check_reduced_atnet():
    torch.manual_seed(1)
    net = ATNet(small_at(latent_size=2, mlp_widths=[6, 6], start_channels=4, encoder_width=2))
    assert grad_check(net, torch.rand(3, 2, 32, 32), max_checks=200) < 1e-4


class TestTraining:
    @pytest.fixture
    def toy(self):
        g = torch.Generator().manual_seed(2)
        specs = torch.rand(24, 2, 32, 32, generator=g)
        visuals = (specs[:, :1, ::2, ::2] > 0.5).float()
        torch.manual_seed(3)
        manifold = VQVAE(VqConfig(**SMALL_VQ)).eval()
        return specs, visuals, manifold

    def test_manifold_stays_frozen(self, toy):
        specs, visuals, manifold = toy
        before = [p.detach().clone() for p in manifold.parameters()]
        train_atnet(specs, visuals, manifold, small_at(), TrainConfig(batch_size=8, max_steps=5))
        assert all(torch.equal(a, b) for a, b in zip(before, manifold.parameters()))

    def test_loss_drops_on_fixed_batch(self, toy):
        specs, visuals, manifold = toy
        _, res = train_atnet(specs[:8], visuals[:8], manifold, small_at(dropout_p=0.0),
                             TrainConfig(batch_size=8, max_steps=60, lr=3e-3, eval_every=10, patience=100))
        assert res.evaluations[-1] < 0.5 * res.evaluations[0]

    def test_infer_depth_within_bounds(self, toy):
        specs, visuals, manifold = toy
        net, _ = train_atnet(specs, visuals, manifold, small_at(), TrainConfig(batch_size=8, max_steps=2))
        out = infer_spectrograms(net, manifold, specs[:3], bounds=(1.0, 10.0))
        assert out.shape == (3, 16, 16) and out.min() >= 1.0 and out.max() <= 10.0

    def test_infer_from_audio(self, toy):
        _, _, manifold = toy
        net = ATNet(small_at()).eval()
        clip = AudioClip(np.random.default_rng(0).uniform(-0.1, 0.1, (2, 22050)), 22050)
        out = infer(clip, net, manifold, bounds=(1.0, 10.0))
        assert out.shape == (16, 16)
        with pytest.raises(CompatibilityError):
            infer(AudioClip(clip.samples[:1], 22050), net, manifold)

    def test_segmentation_ids(self):
        torch.manual_seed(4)
        manifold = VQVAE(VqConfig(**{**SMALL_VQ, "modality": "segmentation", "in_channels": 3})).eval()
        net = ATNet(small_at()).eval()
        out = infer_spectrograms(net, manifold, torch.rand(2, 2, 32, 32))
        assert out.dtype == np.int64 and out.shape == (2, 16, 16) and set(np.unique(out)) <= {0, 1, 2}

    def test_e2e(self, toy):
        specs, visuals, _ = toy
        model, res = train_e2e(specs, visuals, small_at(), VqConfig(**SMALL_VQ),
                               TrainConfig(batch_size=8, max_steps=4, eval_every=2))
        assert isinstance(model, E2ENet) and len(res.evaluations) == 2
        assert infer_e2e(model, specs[:2], bounds=(0.0, 1.0)).shape == (2, 16, 16)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(5)
    net = ATNet(small_at()).eval()
    save_atnet(tmp_path / "at", net, {"manifold_info": {"latent_h": 4}}, step=7, seed=1, dsp_params={"size": 32})
    loaded, meta = load_atnet(tmp_path / "at")
    x = torch.rand(2, 2, 32, 32)
    with torch.no_grad():
        assert torch.equal(net(x), loaded(x))
    assert meta["global_step"] == 7 and meta["dsp"] == {"size": 32} and meta["kind"] == "atnet"
