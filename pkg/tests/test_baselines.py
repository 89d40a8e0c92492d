import math

import numpy as np
import pytest
import torch
from torch import nn

from guidedgan.baselines import (Pix2PixModel, Pix2pixConfig, VaeConfig, VaeModel, kl_divergence,
                                 pix2pix_losses, pix2pix_step, reparameterize, slerp, vae_loss)
from guidedgan.losses import adv_g_loss


def test_reparameterize_examples():
    mu, eps = torch.randn(4, 8), torch.randn(4, 8)
    assert torch.allclose(reparameterize(mu, torch.full_like(mu, 1e-8), eps), mu, atol=1e-6)
    assert torch.equal(reparameterize(torch.zeros(4, 8), torch.ones(4, 8), eps), eps)
    with pytest.raises(ValueError):
        reparameterize(mu, torch.zeros_like(mu), eps)


def test_reparameterize_moments():
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(100_000, 1, generator=g, dtype=torch.float64)
    z = reparameterize(torch.full_like(eps, 2.0), torch.full_like(eps, 3.0), eps)
    assert float(z.mean()) == pytest.approx(2.0, abs=0.03)
    assert float(z.std()) == pytest.approx(3.0, abs=0.03)


def test_kl_closed_form(rng):
    assert float(kl_divergence(torch.zeros(1, 5), torch.ones(1, 5))[0]) == 0.0
    assert float(kl_divergence(torch.ones(1, 1), torch.ones(1, 1))[0]) == pytest.approx(0.5)
    mu, sig = rng.normal(size=(3, 4)), rng.uniform(0.2, 2, size=(3, 4))
    want = [0.5 * sum(m * m + s * s - 1 - 2 * math.log(s) for m, s in zip(mu[i], sig[i])) for i in range(3)]
    got = kl_divergence(torch.from_numpy(mu), torch.from_numpy(sig))
    assert np.allclose(got.numpy(), want, rtol=1e-12)
    assert (got > 0).all()
    with pytest.raises(ValueError):
        kl_divergence(torch.zeros(1, 1), -torch.ones(1, 1))


def test_vae_loss_examples(rng):
    x = torch.rand(2, 3, 4, 4)
    assert float(vae_loss(x, x, torch.zeros(2, 8), torch.ones(2, 8))) == 0.0
    assert float(vae_loss(x[:1], x[:1], torch.ones(1, 1), torch.ones(1, 1))) == pytest.approx(0.5)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    mu, sig = rng.normal(size=(2, 3)), rng.uniform(0.5, 1.5, size=(2, 3))
    per = [((a[i] - b[i]) ** 2).sum() + 0.5 * 0.5 * (mu[i] ** 2 + sig[i] ** 2 - 1 - 2 * np.log(sig[i])).sum()
           for i in range(2)]
    got = vae_loss(*(torch.from_numpy(v) for v in (a, b, mu, sig)), beta=0.5)
    assert float(got) == pytest.approx(np.mean(per), rel=1e-12)
    with pytest.raises(ValueError):
        vae_loss(x, x[:1], torch.zeros(2, 8), torch.ones(2, 8))


def test_vae_config_validation():
    with pytest.raises(ValueError):
        VaeConfig(latent_dim=0)
    with pytest.raises(ValueError):
        VaeConfig(beta=-1)


def test_vae_model_step_and_interface():
    m = VaeModel(VaeConfig(latent_dim=8, base_channels=8, resolution=64), seed=0)
    batch = {"images": torch.rand(4, 3, 64, 64) * 2 - 1}
    rep = m.train_step(batch, 0)
    assert rep.total == pytest.approx(rep.components["recon"] + rep.components["kl"], rel=1e-6)
    out = m.translator()(batch["images"])
    assert out.shape == batch["images"].shape
    grid = m.interpolate(batch["images"][:1], batch["images"][1:2], steps=4)
    assert grid.shape == (1, 4, 3, 64, 64)
    m2 = VaeModel(VaeConfig(latent_dim=8, base_channels=8, resolution=64), seed=5)
    m2.load_state_dict(m.state_dict())
    assert torch.equal(m2.translator()(batch["images"]), out)


def test_slerp_endpoints_and_norm():
    a, b = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    assert torch.allclose(slerp(a, b, 0.0), a, atol=1e-7)
    assert torch.allclose(slerp(a, b, 1.0), b, atol=1e-7)
    mid = slerp(a, b, 0.5)
    assert torch.allclose(mid, torch.tensor([[math.sqrt(0.5), math.sqrt(0.5)]]), atol=1e-6)
    assert torch.allclose(slerp(a, a, 0.3), a)


class ZeroD(nn.Module):
    """Discriminator stub that always outputs zero logits."""

    def forward(self, x):
        return torch.zeros(x.shape[0], 1, 4, 4) + 0 * x.mean()


def test_pix2pix_losses_examples(rng):
    x, y = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    adv, l1, total = pix2pix_losses(x, y, y.clone(), ZeroD(), 100.0)
    assert float(l1) == 0.0
    adv, l1, total = pix2pix_losses(x, y, torch.rand(2, 3, 8, 8), ZeroD(), 0.0)
    assert float(adv) == pytest.approx(math.log(2)) and float(total) == pytest.approx(math.log(2))
    assert float(adv) == pytest.approx(float(adv_g_loss(torch.zeros(1, 1, 2, 2))))
    a, b = rng.uniform(-1, 1, size=(2, 3, 8, 8)), rng.uniform(-1, 1, size=(2, 3, 8, 8))
    _, l1, _ = pix2pix_losses(torch.from_numpy(a), torch.from_numpy(b), torch.from_numpy(a), ZeroD(), 1.0)
    assert float(l1) == pytest.approx(np.abs(a - b).mean(), rel=1e-12)


def _p2p():
    return Pix2PixModel(Pix2pixConfig(base_channels=8), seed=0, depth=6)


def test_pix2pix_requires_pairs():
    m = _p2p()
    bx = {"ids": ["a", "b"], "images": torch.rand(2, 3, 64, 64)}
    by = {"ids": ["a", "c"], "images": torch.rand(2, 3, 64, 64)}
    with pytest.raises(ValueError, match="pix2pix requires pairs"):
        pix2pix_step(bx, by, m)
    with pytest.raises(ValueError, match="pix2pix requires pairs"):
        pix2pix_step({"images": torch.rand(2, 3, 64, 64)}, {"images": torch.rand(3, 3, 64, 64)}, m)


def test_pix2pix_step_and_interface():
    m = _p2p()
    bx = {"ids": ["a", "b"], "images": torch.rand(2, 3, 64, 64) * 2 - 1}
    by = {"ids": ["a", "b"], "images": torch.rand(2, 3, 64, 64) * 2 - 1}
    rep = m.train_step(bx, by, 0)
    assert set(rep.components) == {"gan_G", "l1", "gan_D"}
    assert rep.total == pytest.approx(rep.components["gan_G"] + 100 * rep.components["l1"], rel=1e-5)
    assert m.translator("XY")(bx["images"]).shape == bx["images"].shape
    with pytest.raises(ValueError):
        m.translator("YX")
