import numpy as np
import pytest
import torch

from musit.gradcheck import check_gradients, randomize
from musit.vae import (LatentError, MelVAE, VaeConfig, kl_divergence, latent_length, latent_mask, reparameterize,
                       vae_decode, vae_encode, vae_loss)


def small(r=4, **kw):
    torch.manual_seed(0)
    return MelVAE(VaeConfig(r=r, **kw)).double()


def test_shapes():
    vae = small(r=4)
    mel = torch.randn(59, 64, dtype=torch.float64)
    mean, logvar, z = vae_encode(mel, vae, torch.Generator().manual_seed(0))
    assert mean.shape == logvar.shape == z.shape == (15, 16)
    assert vae_decode(mean, vae, 59).shape == (59, 64)
    assert latent_length(59, 16) == 4
    with pytest.raises(LatentError):
        vae_decode(mean, vae, 61)


def test_config_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        VaeConfig(r=6)


def test_reproducible_sample_and_clamped_floor():
    vae = small()
    mel = torch.randn(20, 64, dtype=torch.float64)
    a = vae_encode(mel, vae, torch.Generator().manual_seed(1))[2]
    b = vae_encode(mel, vae, torch.Generator().manual_seed(1))[2]
    assert torch.equal(a, b)
    mean = torch.randn(5, 3)
    z = reparameterize(mean, torch.full((5, 3), -1e4).clamp(-10, 10) - 1e3, torch.Generator().manual_seed(0))
    assert torch.allclose(z, mean)


def test_non_finite_inputs_rejected():
    vae = small()
    with pytest.raises(LatentError):
        vae.encode(torch.full((1, 8, 64), float("nan"), dtype=torch.float64))
    with pytest.raises(LatentError):
        vae.decode(torch.full((1, 2, 16), float("inf"), dtype=torch.float64), 8)


def test_zero_latent_is_finite():
    assert torch.isfinite(vae_decode(torch.zeros(15, 16, dtype=torch.float64), small(), 59)).all()


def test_kl_closed_forms():
    assert float(kl_divergence(torch.zeros(3, 4), torch.zeros(3, 4))) == 0.0
    assert float(kl_divergence(torch.ones(1), torch.zeros(1))) == 0.5
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        assert float(kl_divergence(torch.randn(4, 3, generator=gen), torch.randn(4, 3, generator=gen))) >= 0


def test_loss_composition_and_perfect_recon():
    vae = small()
    mel = torch.randn(1, 16, 64, dtype=torch.float64)
    total, recon, kl = vae_loss(mel, vae, 0.3, torch.Generator().manual_seed(0))
    assert torch.allclose(total, recon + 0.3 * kl)
    with pytest.raises(ValueError):
        vae_loss(mel, vae, -1.0)
    # a decoder that always returns its target
    vae.decode = lambda z, frames, latent_mask=None: mel
    assert float(vae_loss(mel, vae, 0.0)[1]) == 0.0


def test_padding_invariance():
    vae = small(r=16)
    gen = torch.Generator().manual_seed(0)
    mel = torch.randn(2, 100, 64, dtype=torch.float64, generator=gen)
    fm = torch.ones(2, 100, dtype=torch.bool)
    fm[1, 59:] = False
    mean, _ = vae.encode(mel, fm)
    alone, _ = vae.encode(mel[1:2, :59])
    assert torch.equal(mean[1, :4], alone[0]) and mean[1, 4:].abs().max() == 0
    lm = latent_mask(fm, 16)
    assert torch.equal(vae.decode(mean, 100, lm)[1, :59], vae.decode(alone, 59)[0])
    padded = vae_loss(torch.nn.functional.pad(mel[1:2, :59], (0, 0, 0, 41)), vae, 0.1,
                      torch.Generator().manual_seed(4), fm[1:2])
    plain = vae_loss(mel[1:2, :59], vae, 0.1, torch.Generator().manual_seed(4))
    assert all(torch.allclose(a, b, rtol=0, atol=1e-12) for a, b in zip(padded, plain))


def test_gradients_on_two_frame_input():
    vae = randomize(MelVAE(VaeConfig(bins=4, d_lat=2, r=2, hidden=4, blocks=1)).double(), 1)
    mel = torch.randn(1, 2, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    errs = check_gradients(vae, lambda: vae_loss(mel, vae, 0.1, torch.Generator().manual_seed(3))[0])
    assert max(errs.values()) < 1e-4


def test_training_reduces_reconstruction(corpus8):
    from musit.audio import MelConfig
    from musit.pipeline import TrainConfig, songs_from_entries, train_vae
    songs = songs_from_entries(corpus8[:2])
    _, rows = train_vae(songs, VaeConfig(), MelConfig(), TrainConfig(phase="vae", steps=60, lr=2e-3, batch_size=4))
    first = np.mean([r["recon"] for r in rows[:10]])
    last = np.mean([r["recon"] for r in rows[-10:]])
    assert last < 0.5 * first
