"""Comparison baselines: a convolutional VAE and paired pix2pix.

Both expose ``translator(direction)`` and ``state_dict()`` like
:class:`~guidedgan.train_engine.GuidedCycleGAN`, so evaluation treats the
three models uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core_types import LossReport
from .losses import adv_d_loss, adv_g_loss
from .networks import DiscriminatorConfig, MultiScaleDiscriminator, PatchDiscriminator
from .train_engine import clip_grads_


@dataclass
class VaeConfig:
    latent_dim: int = 128
    lr: float = 1e-4
    beta: float = 1.0
    base_channels: int = 32
    resolution: int = 64
    batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class Pix2pixConfig:
    lr: float = 2e-4
    lambda_l1: float = 100.0
    base_channels: int = 64
    use_sn: bool = False
    n_layers: int = 4
    clip_max_norm: float = 10.0


def reparameterize(mu, sigma, eps):
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    return mu + sigma * eps


def kl_divergence(mu, sigma):
    """Per-sample ``KL(N(mu, sigma^2) || N(0, I))`` summed over latent dims."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    return 0.5 * (mu ** 2 + sigma ** 2 - 1 - 2 * torch.log(sigma)).sum(-1)


def vae_loss(x, x_recon, mu, sigma, beta: float = 1.0):
    """Squared-error reconstruction (summed per image) plus ``beta`` times the KL, batch mean.

    The squared error is the negative log-likelihood of a unit-variance
    Gaussian decoder up to an additive constant.
    """
    if x.shape != x_recon.shape:
        raise ValueError("vae_loss: shape mismatch")
    recon = ((x_recon - x) ** 2).reshape(x.shape[0], -1).sum(1) if x.ndim > 1 else (x_recon - x) ** 2
    return (recon + beta * kl_divergence(mu, sigma)).mean()


def slerp(a, b, t: float):
    an, bn = F.normalize(a, dim=-1), F.normalize(b, dim=-1)
    omega = torch.acos((an * bn).sum(-1).clamp(-1, 1))[..., None]
    so = torch.sin(omega)
    lerp = (1 - t) * a + t * b
    out = torch.sin((1 - t) * omega) / so * a + torch.sin(t * omega) / so * b
    return torch.where(so.abs() < 1e-6, lerp, out)


class ConvVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        c = cfg.base_channels
        self.cfg = cfg
        chans = [3, c, 2 * c, 4 * c, 4 * c]
        enc = []
        for i in range(4):
            enc += [nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1), nn.LeakyReLU(0.2, True)]
        self.encoder = nn.Sequential(*enc)
        self.spatial = cfg.resolution // 16
        flat = chans[-1] * self.spatial ** 2
        self.fc_mu = nn.Linear(flat, cfg.latent_dim)
        self.fc_logsig = nn.Linear(flat, cfg.latent_dim)
        self.fc_dec = nn.Linear(cfg.latent_dim, flat)
        dec = []
        for i in reversed(range(1, 4)):
            dec += [nn.ConvTranspose2d(chans[i + 1], chans[i], 4, 2, 1), nn.ReLU(True)]
        dec += [nn.ConvTranspose2d(chans[1], 3, 4, 2, 1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)
        self.top = chans[-1]

    def encode(self, x):
        h = self.encoder(x).flatten(1)
        mu = self.fc_mu(h)
        sigma = F.softplus(self.fc_logsig(h)) + 1e-4
        return mu, sigma

    def decode(self, z):
        h = self.fc_dec(z).view(-1, self.top, self.spatial, self.spatial)
        return self.decoder(h)

    def forward(self, x, eps=None):
        mu, sigma = self.encode(x)
        if eps is None:
            eps = torch.randn_like(mu)
        return self.decode(reparameterize(mu, sigma, eps)), mu, sigma


class _Reconstructor(nn.Module):
    def __init__(self, vae):
        super().__init__()
        self.vae = vae

    def forward(self, x):
        mu, _ = self.vae.encode(x)
        return self.vae.decode(mu)


class VaeModel:
    kind = "vae"

    def __init__(self, cfg: VaeConfig | None = None, seed: int = 0, device="cpu"):
        self.cfg = cfg or VaeConfig()
        self.seed = seed
        self.device = torch.device(device)
        torch.manual_seed(seed)
        self.vae = ConvVAE(self.cfg).to(self.device)
        self.opt = torch.optim.Adam(self.vae.parameters(), lr=self.cfg.lr)
        self.steps = 0
        self._noise = torch.Generator().manual_seed(seed + 99)

    def train_step(self, batch: dict, it: int) -> LossReport:
        self.vae.train()
        x = batch["images"].to(self.device)
        mu, sigma = self.vae.encode(x)
        eps = torch.randn(mu.shape, generator=self._noise).to(self.device)
        x_rec = self.vae.decode(reparameterize(mu, sigma, eps))
        loss = vae_loss(x, x_rec, mu, sigma, self.cfg.beta)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.steps += 1
        with torch.no_grad():
            kl = float(kl_divergence(mu, sigma).mean())
        total = float(loss.detach())
        return LossReport({"recon": total - self.cfg.beta * kl, "kl": kl},
                          {"recon": 1.0, "kl": self.cfg.beta}, total, it)

    def translator(self, direction: str = "XY", use_ema: bool = True):
        r = _Reconstructor(self.vae)
        r.eval()
        return r

    @torch.no_grad()
    def interpolate(self, xa, xb, steps: int = 8):
        self.vae.eval()
        ma, _ = self.vae.encode(xa)
        mb, _ = self.vae.encode(xb)
        return torch.stack([self.vae.decode(slerp(ma, mb, t))
                            for t in torch.linspace(0, 1, steps).tolist()], 1)

    def state_dict(self):
        return {"vae": self.vae.state_dict(), "opt": self.opt.state_dict(), "steps": self.steps}

    def load_state_dict(self, sd):
        self.vae.load_state_dict(sd["vae"])
        self.opt.load_state_dict(sd["opt"])
        self.steps = sd["steps"]


class UNetBlock(nn.Module):
    def __init__(self, outer, inner, sub=None, outermost=False, innermost=False):
        super().__init__()
        self.outermost = outermost
        down = [nn.Conv2d(outer if not outermost else 3, inner, 4, 2, 1)]
        if not outermost:
            down = [nn.LeakyReLU(0.2, True)] + down
            if not innermost:
                down.append(nn.InstanceNorm2d(inner, affine=True))
        up_in = inner if innermost else inner * 2
        up = [nn.ReLU(True), nn.ConvTranspose2d(up_in, outer if not outermost else 3, 4, 2, 1)]
        if outermost:
            up.append(nn.Tanh())
        else:
            up.append(nn.InstanceNorm2d(outer, affine=True))
        self.model = nn.Sequential(*down, *([sub] if sub is not None else []), *up)

    def forward(self, x):
        out = self.model(x)
        return out if self.outermost else torch.cat([x, out], 1)


class UNetGenerator(nn.Module):
    def __init__(self, base: int = 64, depth: int = 6):
        super().__init__()
        mult = lambda i: min(2 ** i, 8)
        block = UNetBlock(base * mult(depth - 2), base * mult(depth - 1), innermost=True)
        for i in reversed(range(1, depth - 1)):
            block = UNetBlock(base * mult(i - 1), base * mult(i), block)
        self.model = UNetBlock(3, base, block, outermost=True)

    def forward(self, x):
        return self.model(x)


class Pix2PixModel:
    kind = "pix2pix"

    def __init__(self, cfg: Pix2pixConfig | None = None, seed: int = 0, device="cpu", depth: int = 6):
        self.cfg = cfg or Pix2pixConfig()
        self.seed = seed
        self.device = torch.device(device)
        torch.manual_seed(seed)
        self.g = UNetGenerator(self.cfg.base_channels, depth).to(self.device)
        dcfg = DiscriminatorConfig(n_layers=self.cfg.n_layers, scales=(1.0,),
                                   base_channels=self.cfg.base_channels,
                                   spectral_norm=self.cfg.use_sn, in_channels=6)
        self.d = MultiScaleDiscriminator(dcfg).to(self.device)
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=self.cfg.lr, betas=(0.5, 0.999))
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=self.cfg.lr, betas=(0.5, 0.999))

    def translator(self, direction: str = "XY", use_ema: bool = True):
        if direction != "XY":
            raise ValueError("pix2pix only translates X -> Y")
        self.g.eval()
        return self.g

    def state_dict(self):
        return {"g": self.g.state_dict(), "d": self.d.state_dict(),
                "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict()}

    def load_state_dict(self, sd):
        self.g.load_state_dict(sd["g"])
        self.d.load_state_dict(sd["d"])
        self.opt_g.load_state_dict(sd["opt_g"])
        self.opt_d.load_state_dict(sd["opt_d"])

    def train_step(self, batch_x: dict, batch_y: dict, it: int) -> LossReport:
        return pix2pix_step(batch_x, batch_y, self, it=it)


def pix2pix_losses(x, y_truth, fake, d, lambda_l1):
    """Generator-side terms ``(adv, l1, total)`` for one paired batch."""
    adv = adv_g_loss(d(torch.cat([x, fake], 1)))
    l1 = (fake - y_truth).abs().mean()
    return adv, l1, adv + lambda_l1 * l1


def pix2pix_step(batch_x, batch_y, model: Pix2PixModel, it: int = 0) -> LossReport:
    """One alternating D/G update on an aligned batch."""
    ids_x, ids_y = batch_x.get("ids"), batch_y.get("ids")
    if ids_x is not None and ids_y is not None and list(ids_x) != list(ids_y):
        raise ValueError("pix2pix requires pairs: batch ids are not aligned")
    x = batch_x["images"].to(model.device)
    y = batch_y["images"].to(model.device)
    if x.shape != y.shape:
        raise ValueError("pix2pix requires pairs: shape mismatch")
    model.g.train()
    model.d.train()
    with torch.no_grad():
        fake = model.g(x)
    d_loss = adv_d_loss(model.d(torch.cat([x, y], 1)), model.d(torch.cat([x, fake], 1)))
    model.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    clip_grads_(model.d.parameters(), model.cfg.clip_max_norm, "pix2pix_d")
    model.opt_d.step()

    for p in model.d.parameters():
        p.requires_grad_(False)
    fake = model.g(x)
    adv, l1, total = pix2pix_losses(x, y, fake, model.d, model.cfg.lambda_l1)
    model.opt_g.zero_grad(set_to_none=True)
    total.backward()
    for p in model.d.parameters():
        p.requires_grad_(True)
    clip_grads_(model.g.parameters(), model.cfg.clip_max_norm, "pix2pix_g")
    model.opt_g.step()
    return LossReport({"gan_G": float(adv.detach()), "l1": float(l1.detach()), "gan_D": float(d_loss.detach())},
                      {"gan_G": 1.0, "l1": model.cfg.lambda_l1}, float(total.detach()), it)
