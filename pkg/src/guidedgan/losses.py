"""Objective terms and their weighted aggregation.

All functions are pure: tensors in, scalar tensor out. Adversarial terms
use the non-saturating logistic form; the saturating generator loss is kept
behind a flag for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .core_types import LossReport, batch_cosine, GENERATOR_TERMS


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_id: float = 1.0
    lambda_perc: float = 0.5
    lambda_sem: float = 2.0
    lambda_lmk: float = 1.0
    lambda_con: float = 0.5
    lambda_paired: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"{k} must be a finite value >= 0, got {v}")

    def term_weights(self, paired: bool = False) -> dict:
        w = {"gan_G_xy": 1.0, "gan_G_yx": 1.0, "cyc": self.lambda_cyc, "id": self.lambda_id,
             "perc": self.lambda_perc, "sem_cyc": self.lambda_sem, "lmk": self.lambda_lmk,
             "con": self.lambda_con}
        if paired:
            w["paired"] = self.lambda_paired
            w["gan_G_cond"] = 1.0 if self.lambda_paired > 0 else 0.0
        return w


@dataclass
class PatchSampleSpec:
    n_patches: int = 256
    tap_scales: tuple = (1 / 4, 1 / 8)
    temperature: float = 0.07
    projection_dim: int = 256
    batch_negatives: bool = False

    def __post_init__(self):
        self.tap_scales = tuple(self.tap_scales)
        if self.n_patches < 1:
            raise ValueError("n_patches must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def _as_list(maps):
    return list(maps) if isinstance(maps, (list, tuple)) else [maps]


def _check_finite(maps, what):
    for i, m in enumerate(maps):
        if not torch.isfinite(m).all():
            raise FloatingPointError(f"non-finite {what} logits at scale {i}")


def adv_d_loss(real_logits, fake_logits):
    """Discriminator loss: mean over scales of ``softplus(-real) + softplus(fake)``."""
    real, fake = _as_list(real_logits), _as_list(fake_logits)
    _check_finite(real, "real")
    _check_finite(fake, "fake")
    per_scale = [F.softplus(-r).mean() + F.softplus(f).mean() for r, f in zip(real, fake)]
    return torch.stack(per_scale).mean()


def adv_g_loss(fake_logits, saturating: bool = False):
    fake = _as_list(fake_logits)
    _check_finite(fake, "fake")
    if saturating:
        # minimizes log(1 - D(G(x))); negative-valued, ablation only
        per_scale = [-F.softplus(f).mean() for f in fake]
    else:
        per_scale = [F.softplus(-f).mean() for f in fake]
    return torch.stack(per_scale).mean()


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_loss(x, x_rec, y, y_rec):
    _same_shape(x, x_rec, "cycle_loss")
    _same_shape(y, y_rec, "cycle_loss")
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def identity_loss(e_x, e_gx, e_y, e_gy):
    """``mean(1 - cos(e_gx, e_x)) + mean(1 - cos(e_gy, e_y))``; range ``[0, 4]``."""
    return (1 - batch_cosine(e_gx, e_x)).mean() + (1 - batch_cosine(e_gy, e_y)).mean()


def perceptual_loss(feat_gx, feat_ystar, feat_gy, feat_xstar):
    feat_gx, feat_ystar = _as_list(feat_gx), _as_list(feat_ystar)
    feat_gy, feat_xstar = _as_list(feat_gy), _as_list(feat_xstar)
    if not (len(feat_gx) == len(feat_ystar) == len(feat_gy) == len(feat_xstar)):
        raise ValueError("perceptual_loss: tap count mismatch")
    total = 0
    for a, b in zip(feat_gx, feat_ystar):
        _same_shape(a, b, "perceptual_loss")
        total = total + (a - b.detach()).abs().mean()
    for a, b in zip(feat_gy, feat_xstar):
        _same_shape(a, b, "perceptual_loss")
        total = total + (a - b.detach()).abs().mean()
    return total


def _mask4(mask, ref):
    m = mask.detach()
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.shape[-2:] != ref.shape[-2:]:
        raise ValueError(f"semantic_cycle_loss: mask shape {tuple(mask.shape)} does not match "
                         f"images {tuple(ref.shape)}")
    return m


def semantic_cycle_loss(x, x_rec, mask_x, y, y_rec, mask_y):
    _same_shape(x, x_rec, "semantic_cycle_loss")
    _same_shape(y, y_rec, "semantic_cycle_loss")
    mx, my = _mask4(mask_x, x), _mask4(mask_y, y)
    return (mx * (x_rec - x)).abs().mean() + (my * (y_rec - y)).abs().mean()


def landmark_loss(l_x, l_gx, l_y, l_gy, valid_x=None, valid_y=None):
    """Frobenius norm of the ``K x 2`` landmark displacement, averaged over the batch.

    Source landmarks ``l_x``/``l_y`` are constants. ``valid_*`` masks out
    samples whose sidecar landmarks are missing.
    """
    if l_x.shape[-2] != l_gx.shape[-2] or l_y.shape[-2] != l_gy.shape[-2]:
        raise ValueError("landmark_loss: landmark count mismatch")

    def term(ref, pred, valid):
        d = (pred - ref.detach()).reshape(*pred.shape[:-2], -1).norm(dim=-1)
        if d.ndim == 0:
            return d
        if valid is None:
            return d.mean()
        v = valid.to(d.dtype)
        return (d * v).sum() / v.sum().clamp_min(1)

    return term(l_x, l_gx, valid_x) + term(l_y, l_gy, valid_y)


class PatchProjection(nn.Module):
    """Shared two-layer projection head, one MLP per feature tap."""

    def __init__(self, in_channels, projection_dim: int = 256):
        super().__init__()
        self.mlps = nn.ModuleList([
            nn.Sequential(nn.Linear(c, projection_dim), nn.ReLU(), nn.Linear(projection_dim, projection_dim))
            for c in in_channels])

    def forward(self, tap: int, x):
        return self.mlps[tap](x)


def sample_locations(n_locations: int, n_patches: int, generator: torch.Generator):
    if n_patches > n_locations:
        raise ValueError(f"n_patches={n_patches} exceeds available locations (max {n_locations})")
    return torch.randperm(n_locations, generator=generator)[:n_patches]


def patch_nce_loss(feat_src, feat_out, spec: PatchSampleSpec, sampler_seed: int = 0,
                   head: PatchProjection | None = None):
    """Patchwise InfoNCE between source and output features.

    Anchors are projected source patches; the positive is the output patch at
    the same location, negatives are the other sampled output locations of the
    same image (or of the whole batch with ``spec.batch_negatives``).
    """
    feat_src, feat_out = _as_list(feat_src), _as_list(feat_out)
    if len(feat_src) != len(feat_out):
        raise ValueError("patch_nce_loss: tap count mismatch")
    g = torch.Generator().manual_seed(int(sampler_seed))
    losses = []
    for t, (fs, fo) in enumerate(zip(feat_src, feat_out)):
        _same_shape(fs, fo, "patch_nce_loss")
        n, c, h, w = fs.shape
        idx = sample_locations(h * w, spec.n_patches, g).to(fs.device)
        q = fs.flatten(2)[:, :, idx].transpose(1, 2)   # n, P, c
        k = fo.flatten(2)[:, :, idx].transpose(1, 2)
        if head is not None:
            q, k = head(t, q), head(t, k)
        q, k = F.normalize(q, dim=-1), F.normalize(k, dim=-1)
        p = q.shape[1]
        if spec.batch_negatives:
            q, k = q.reshape(1, n * p, -1), k.reshape(1, n * p, -1)
        logits = q @ k.transpose(1, 2) / spec.temperature   # b, P, P
        target = torch.arange(logits.shape[1], device=logits.device)
        target = target[None].expand(logits.shape[0], -1)
        losses.append(F.cross_entropy(logits.flatten(0, 1), target.flatten()))
    return torch.stack(losses).mean()


def total_generator_loss(components: dict, weights: LossWeights | dict, paired: bool | None = None,
                         step: int | None = None) -> LossReport:
    """Weighted sum of generator-side terms.

    ``components`` may also carry discriminator terms (``gan_D_x``/``gan_D_y``);
    they are reported but not summed. A term with non-zero weight must be
    present; zero-weight terms may be omitted and are recorded as 0.
    """
    if paired is None:
        paired = "paired" in components
    w = weights.term_weights(paired) if isinstance(weights, LossWeights) else dict(weights)
    total = 0.0
    comps = dict(components)
    for name, lam in w.items():
        if name not in comps:
            if lam != 0:
                raise KeyError(f"missing loss component {name!r} with non-zero weight {lam}")
            comps[name] = 0.0
            continue
        if lam != 0:
            total = total + lam * comps[name]
    return LossReport(comps, {k: float(v) for k, v in w.items()}, total, step)


GENERATOR_COMPONENTS = GENERATOR_TERMS
