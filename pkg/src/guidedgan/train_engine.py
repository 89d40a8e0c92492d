"""Training loop for the guided CycleGAN.

Schedules (TTUR, linear LR decay, progressive resizing), EMA, global-norm
clipping and differentiable augmentation live here as small functions; the
:class:`GuidedCycleGAN` class wires them into discriminator/generator updates
and :func:`fit` drives a full run and writes the run directory.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import math
import random
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import LossReport
from .guidance import (FrozenEncoder, ToyLandmarkDetector, extract_features, embed_identity,
                       retrieve_pseudo_pairs, toy_identity_encoder, toy_perceptual_backbone)
from .losses import (LossWeights, PatchProjection, PatchSampleSpec, adv_d_loss, adv_g_loss,
                     cycle_loss, identity_loss, landmark_loss, patch_nce_loss, perceptual_loss,
                     semantic_cycle_loss, total_generator_loss)
from .networks import (DiscriminatorConfig, Generator, GeneratorConfig, MultiScaleDiscriminator,
                       PatchDiscriminator)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainSchedule:
    total_iters: int = 1000
    ttur_phase_frac: float = 0.25
    ttur_ratio: int = 2
    lr0: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    ema_decay: float = 0.999
    clip_max_norm: float = 10.0
    resize_switch_frac: float = 0.5
    resolutions: tuple = (128, 256)
    batch_size: int = 4
    accum_steps: int = 1
    use_ttur: bool = True
    use_ema: bool = True
    use_diffaug: bool = True
    history_pool_size: int = 0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if not 0 < self.ttur_phase_frac < 1:
            raise ValueError("ttur_phase_frac must lie in (0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.clip_max_norm <= 0:
            raise ValueError("clip_max_norm must be > 0")
        if not self.resolutions:
            raise ValueError("resolutions must not be empty")
        if self.accum_steps < 1 or self.batch_size % self.accum_steps:
            raise ValueError("batch_size must be a positive multiple of accum_steps")


@dataclass
class AugmentPolicy:
    translate_frac: float = 0.125
    brightness: float = 0.2
    saturation: tuple = (0.5, 1.5)
    contrast: tuple = (0.75, 1.25)
    cutout_frac: float = 0.5
    apply_prob: float = 0.8

    def __post_init__(self):
        self.saturation = tuple(self.saturation)
        self.contrast = tuple(self.contrast)

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, (1.0, 1.0), (1.0, 1.0), 0.0, 0.0)


# --- schedules -----------------------------------------------------------

def ttur_steps(it: int, schedule: TrainSchedule):
    """``(d_steps, g_steps)`` for iteration ``it``; the TTUR phase ends at floor(frac * T)."""
    if not 0 <= it < schedule.total_iters:
        raise ValueError(f"iteration {it} outside [0, {schedule.total_iters})")
    if schedule.use_ttur and it < math.floor(schedule.ttur_phase_frac * schedule.total_iters):
        return schedule.ttur_ratio, 1
    return 1, 1


def learning_rate(it: int, schedule: TrainSchedule) -> float:
    """Constant for the first half, then linear to zero at ``total_iters``."""
    T = schedule.total_iters
    half = T / 2
    if it < half:
        return schedule.lr0
    return schedule.lr0 * max(0.0, 1 - (it - half) / half)


def current_resolution(it: int, schedule: TrainSchedule) -> int:
    res = schedule.resolutions
    if len(res) == 1:
        return res[0]
    if it < math.floor(schedule.resize_switch_frac * schedule.total_iters):
        return res[0]
    return res[1]


@torch.no_grad()
def ema_update(shadow, live, decay: float):
    """In place ``shadow <- decay * shadow + (1 - decay) * live``; returns ``shadow``."""
    if not 0 <= decay < 1:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    shadow, live = list(shadow), list(live)
    if len(shadow) != len(live):
        raise ValueError("shadow and live parameter lists differ in length")
    for s, l in zip(shadow, live):
        if s.shape != l.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(l.shape)}")
        s.mul_(decay).add_(l.detach(), alpha=1 - decay)
    return shadow


def clip_global_norm(grads, max_norm: float, names=None):
    """Scale a collection of gradients so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, pre_clip_norm)``. Inputs are not modified.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    if isinstance(grads, dict):
        names, grads = list(grads.keys()), list(grads.values())
    grads = [torch.as_tensor(g) for g in grads]
    names = names or [f"group{i}" for i in range(len(grads))]
    for n, g in zip(names, grads):
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter group {n!r}")
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)) if grads else torch.zeros(())
    if norm <= max_norm:
        return [g.clone() for g in grads], float(norm)
    scale = max_norm / norm
    return [(g.double() * scale).to(g.dtype) for g in grads], float(norm)


def clip_grads_(params, max_norm: float, group: str = "params") -> float:
    """In-place global-norm clipping of ``.grad`` for a parameter iterable."""
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    norm = torch.sqrt(sum((p.grad.double() ** 2).sum() for p in params))
    if not torch.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient in parameter group {group!r}")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad.mul_(scale.to(p.grad.dtype))
    return float(norm)


# --- differentiable augmentation ----------------------------------------

def translate(x, dx, dy):
    """Integer shift per sample with zero fill; ``dx``/``dy`` are sequences of ints."""
    n, c, h, w = x.shape
    out = []
    for i in range(n):
        sx, sy = int(dx[i]), int(dy[i])
        if sx == 0 and sy == 0:
            out.append(x[i])
            continue
        p = max(abs(sx), abs(sy))
        padded = F.pad(x[i], (p, p, p, p))
        out.append(padded[:, p - sy:p - sy + h, p - sx:p - sx + w])
    return torch.stack(out)


def cutout_mask(n, h, w, cx, cy, size_h, size_w, device=None, dtype=torch.float32):
    ys = torch.arange(h, device=device)[None, :, None]
    xs = torch.arange(w, device=device)[None, None, :]
    cx = torch.as_tensor(cx, device=device)[:, None, None]
    cy = torch.as_tensor(cy, device=device)[:, None, None]
    inside = ((xs - cx).abs() < size_w / 2) & ((ys - cy).abs() < size_h / 2)
    return (~inside).to(dtype)[:, None]


@dataclass
class AugmentDraw:
    bright_on: torch.Tensor
    brightness: torch.Tensor
    sat_on: torch.Tensor
    saturation: torch.Tensor
    con_on: torch.Tensor
    contrast: torch.Tensor
    shift_on: torch.Tensor
    dx: torch.Tensor
    dy: torch.Tensor
    cut_on: torch.Tensor
    cx: torch.Tensor
    cy: torch.Tensor
    cut_h: int
    cut_w: int


def draw_augment(n, h, w, policy: AugmentPolicy, seed: int) -> AugmentDraw:
    g = torch.Generator().manual_seed(int(seed))

    def on():
        return torch.rand(n, generator=g) < policy.apply_prob

    def uni(lo, hi):
        return lo + (hi - lo) * torch.rand(n, generator=g)

    bright_on, brightness = on(), uni(-policy.brightness, policy.brightness)
    sat_on, saturation = on(), uni(*policy.saturation)
    con_on, contrast = on(), uni(*policy.contrast)
    mx, my = int(policy.translate_frac * w + 0.5), int(policy.translate_frac * h + 0.5)
    shift_on = on()
    dx = torch.randint(-mx, mx + 1, (n,), generator=g)
    dy = torch.randint(-my, my + 1, (n,), generator=g)
    cut_on = on()
    cx = torch.randint(0, w, (n,), generator=g)
    cy = torch.randint(0, h, (n,), generator=g)
    ch, cw = int(policy.cutout_frac * h + 0.5), int(policy.cutout_frac * w + 0.5)
    return AugmentDraw(bright_on, brightness, sat_on, saturation, con_on, contrast,
                       shift_on, dx * shift_on, dy * shift_on, cut_on, cx, cy, ch, cw)


def apply_augment(x, d: AugmentDraw):
    """Apply a fixed draw. Transforms with identity parameters leave pixels bit-exact."""
    sel = lambda flag: flag.to(x.device)[:, None, None, None]
    b = (d.brightness.to(x) * d.bright_on.to(x))[:, None, None, None]
    x = torch.where(sel(d.bright_on & (d.brightness != 0)), x + b, x)
    m = x.mean(dim=1, keepdim=True)
    s = d.saturation.to(x)[:, None, None, None]
    x = torch.where(sel(d.sat_on & (d.saturation != 1)), (x - m) * s + m, x)
    m = x.mean(dim=(1, 2, 3), keepdim=True)
    c = d.contrast.to(x)[:, None, None, None]
    x = torch.where(sel(d.con_on & (d.contrast != 1)), (x - m) * c + m, x)
    if bool(((d.dx != 0) | (d.dy != 0)).any()):
        x = translate(x, d.dx.tolist(), d.dy.tolist())
    if d.cut_h > 0 and d.cut_w > 0 and bool(d.cut_on.any()):
        n, _, h, w = x.shape
        mask = cutout_mask(n, h, w, d.cx, d.cy, d.cut_h, d.cut_w, x.device, x.dtype)
        x = torch.where(sel(d.cut_on), x * mask, x)
    return x


def diff_augment(real, fake, policy: AugmentPolicy, seed: int):
    """Apply one seeded augmentation draw identically to ``real`` and ``fake``."""
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must share a shape")
    n, _, h, w = real.shape
    d = draw_augment(n, h, w, policy, seed)
    return apply_augment(real, d), apply_augment(fake, d)


class ImagePool:
    """Optional history buffer of generated images for discriminator updates."""

    def __init__(self, size: int, seed: int = 0):
        self.size = size
        self.images = []
        self.rng = random.Random(seed)

    def query(self, images):
        if self.size <= 0:
            return images
        out = []
        for img in images.detach():
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                j = self.rng.randrange(self.size)
                out.append(self.images[j].clone())
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


# --- model ---------------------------------------------------------------

def _seed_for(*parts) -> int:
    h = 1469598103934665603
    for p in parts:
        h = ((h ^ (int(p) & 0xFFFFFFFF)) * 1099511628211) % (2 ** 61 - 1)
    return int(h % (2 ** 31 - 1))


def _autocast(precision: str, device: torch.device):
    if precision != "mixed":
        return contextlib.nullcontext()
    dtype = torch.float16 if device.type == "cuda" else torch.bfloat16
    return torch.autocast(device_type=device.type, dtype=dtype)


def _f32(x):
    if isinstance(x, (list, tuple)):
        return [t.float() for t in x]
    return x.float()


def _chunks(batch: dict, k: int):
    if k == 1:
        return [batch]
    n = len(batch["images"])
    step = n // k
    out = []
    for i in range(k):
        sl = slice(i * step, (i + 1) * step)
        out.append({key: (v[sl] if not isinstance(v, list) else v[sl]) for key, v in batch.items()})
    return out


class GuidedCycleGAN:
    """Two generators, two multi-scale discriminators, guidance providers, EMA shadows."""

    kind = "cyclegan_guided"

    def __init__(self, gen_cfg: GeneratorConfig | None = None, disc_cfg: DiscriminatorConfig | None = None,
                 weights: LossWeights | None = None, patch_spec: PatchSampleSpec | None = None,
                 schedule: TrainSchedule | None = None, augment: AugmentPolicy | None = None,
                 seed: int = 0, precision: str = "fp32", device="cpu",
                 identity_encoder: FrozenEncoder | None = None,
                 perceptual: FrozenEncoder | None = None, landmark_detector: nn.Module | None = None,
                 saturating: bool = False, retrieval_metric: str = "cosine",
                 hybrid: bool = False):
        self.gen_cfg = gen_cfg or GeneratorConfig()
        self.disc_cfg = disc_cfg or DiscriminatorConfig()
        self.weights = weights or LossWeights()
        self.patch_spec = patch_spec or PatchSampleSpec()
        self.schedule = schedule or TrainSchedule()
        self.augment = augment or AugmentPolicy()
        self.seed = seed
        self.precision = precision
        self.device = torch.device(device)
        self.saturating = saturating
        self.retrieval_metric = retrieval_metric
        self.hybrid = hybrid and self.weights.lambda_paired > 0

        torch.manual_seed(seed)
        self.g_xy = Generator(self.gen_cfg).to(self.device)
        self.g_yx = Generator(self.gen_cfg).to(self.device)
        self.d_x = MultiScaleDiscriminator(self.disc_cfg).to(self.device)
        self.d_y = MultiScaleDiscriminator(self.disc_cfg).to(self.device)
        tap_levels = [int(round(1 / float(s))).bit_length() - 1 for s in self.patch_spec.tap_scales]
        self.nce_head = PatchProjection([self.g_xy.channels[l] for l in tap_levels],
                                        self.patch_spec.projection_dim).to(self.device)
        self.d_cond = None
        if self.hybrid:
            cond_cfg = DiscriminatorConfig(**{**self.disc_cfg.to_dict(), "in_channels": 6})
            self.d_cond = MultiScaleDiscriminator(cond_cfg).to(self.device)

        self.identity_encoder = identity_encoder or toy_identity_encoder()
        self.perceptual = perceptual or toy_perceptual_backbone()
        self.landmark_detector = landmark_detector or ToyLandmarkDetector()
        for m in (self.identity_encoder, self.perceptual, self.landmark_detector):
            m.to(self.device)

        s = self.schedule
        betas = (s.adam_beta1, s.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator_parameters(), lr=s.lr0, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator_parameters(), lr=s.lr0, betas=betas)
        self.ema_xy = self._shadow(self.g_xy)
        self.ema_yx = self._shadow(self.g_yx)
        self.pool_x = ImagePool(s.history_pool_size, seed + 1)
        self.pool_y = ImagePool(s.history_pool_size, seed + 2)
        self.d_updates = 0
        self.g_updates = 0
        self.iteration = 0
        self.last_d = {}
        self.scaler = torch.amp.GradScaler(self.device.type,
                                           enabled=precision == "mixed" and self.device.type == "cuda")

    # -- parameter groups
    def generator_parameters(self):
        return list(self.g_xy.parameters()) + list(self.g_yx.parameters()) + \
            list(self.nce_head.parameters())

    def discriminator_parameters(self):
        ps = list(self.d_x.parameters()) + list(self.d_y.parameters())
        if self.d_cond is not None:
            ps += list(self.d_cond.parameters())
        return ps

    @staticmethod
    def _shadow(net):
        sh = copy.deepcopy(net)
        for p in sh.parameters():
            p.requires_grad_(False)
        sh.eval()
        return sh

    def train_mode(self):
        for n in (self.g_xy, self.g_yx, self.d_x, self.d_y, self.nce_head):
            n.train()
        if self.d_cond is not None:
            self.d_cond.train()

    def translator(self, direction: str = "XY", use_ema: bool = True) -> nn.Module:
        if direction not in ("XY", "YX"):
            raise ValueError("direction must be 'XY' or 'YX'")
        if use_ema and self.schedule.use_ema:
            net = self.ema_xy if direction == "XY" else self.ema_yx
        else:
            net = self.g_xy if direction == "XY" else self.g_yx
        net.eval()
        return net

    def _set_lr(self, lr):
        for opt in (self.opt_g, self.opt_d):
            for grp in opt.param_groups:
                grp["lr"] = lr

    def _requires_grad(self, nets, flag):
        for n in nets:
            if n is not None:
                for p in n.parameters():
                    p.requires_grad_(flag)

    def _step(self, opt, params, group):
        self.scaler.unscale_(opt)
        clip_grads_(params, self.schedule.clip_max_norm, group)
        self.scaler.step(opt)
        self.scaler.update()

    # -- discriminator
    def _d_update(self, bx, by, it, k, paired):
        w = self.weights
        accum = self.schedule.accum_steps
        self.opt_d.zero_grad(set_to_none=True)
        tot_x = tot_y = tot_c = 0.0
        for ci, (cx, cy) in enumerate(zip(_chunks(bx, accum), _chunks(by, accum))):
            x, y = cx["images"], cy["images"]
            with torch.no_grad(), _autocast(self.precision, self.device):
                fake_y = self.g_xy(x).float()
                fake_x = self.g_yx(y).float()
            fake_y = self.pool_y.query(fake_y)
            fake_x = self.pool_x.query(fake_x)
            if self.schedule.use_diffaug:
                ry, fy = diff_augment(y, fake_y, self.augment, _seed_for(self.seed, it, k, ci, 1))
                rx, fx = diff_augment(x, fake_x, self.augment, _seed_for(self.seed, it, k, ci, 2))
            else:
                ry, fy, rx, fx = y, fake_y, x, fake_x
            with _autocast(self.precision, self.device):
                ly = adv_d_loss(_f32(self.d_y(ry)), _f32(self.d_y(fy)))
                lx = adv_d_loss(_f32(self.d_x(rx)), _f32(self.d_x(fx)))
                loss = lx + ly
                if paired and self.hybrid:
                    real_pair = torch.cat([x, y], 1)
                    fake_pair = torch.cat([x, fake_y], 1)
                    lc = adv_d_loss(_f32(self.d_cond(real_pair)), _f32(self.d_cond(fake_pair)))
                    loss = loss + lc
                    tot_c += float(lc.detach()) / accum
            self.scaler.scale(loss / accum).backward()
            tot_x += float(lx.detach()) / accum
            tot_y += float(ly.detach()) / accum
        self._step(self.opt_d, self.discriminator_parameters(), "discriminators")
        self.d_updates += 1
        self.last_d = {"gan_D_x": tot_x, "gan_D_y": tot_y}
        if paired and self.hybrid:
            self.last_d["gan_D_cond"] = tot_c

    # -- generator
    def generator_losses(self, bx, by, it, paired=False, chunk=0):
        """Forward both cycles and return the dict of generator-side loss terms."""
        w = self.weights
        x, y = bx["images"], by["images"]
        with _autocast(self.precision, self.device):
            fake_y = self.g_xy(x)
            fake_x = self.g_yx(y)
            rec_x = self.g_yx(fake_y)
            rec_y = self.g_xy(fake_x)
            fy_logits = _f32(self.d_y(fake_y))
            fx_logits = _f32(self.d_x(fake_x))
        fake_y, fake_x, rec_x, rec_y = _f32([fake_y, fake_x, rec_x, rec_y])
        comps = {
            "gan_G_xy": adv_g_loss(fy_logits, self.saturating),
            "gan_G_yx": adv_g_loss(fx_logits, self.saturating),
        }
        if w.lambda_cyc:
            comps["cyc"] = cycle_loss(x, rec_x, y, rec_y)
        if w.lambda_sem:
            comps["sem_cyc"] = semantic_cycle_loss(x, rec_x, bx["masks"], y, rec_y, by["masks"])
        if w.lambda_id:
            with torch.no_grad():
                e_x = embed_identity(x, self.identity_encoder)
                e_y = embed_identity(y, self.identity_encoder)
            comps["id"] = identity_loss(e_x, embed_identity(fake_y, self.identity_encoder),
                                        e_y, embed_identity(fake_x, self.identity_encoder))
        if w.lambda_perc:
            idx_x, idx_y = retrieve_pseudo_pairs(x, y, self.perceptual, self.retrieval_metric)
            with torch.no_grad():
                f_ystar = extract_features(y[idx_x], self.perceptual)
                f_xstar = extract_features(x[idx_y], self.perceptual)
            comps["perc"] = perceptual_loss(extract_features(fake_y, self.perceptual), f_ystar,
                                            extract_features(fake_x, self.perceptual), f_xstar)
        if w.lambda_lmk:
            comps["lmk"] = landmark_loss(bx["landmarks"], self.landmark_detector(fake_y),
                                         by["landmarks"], self.landmark_detector(fake_x),
                                         bx.get("landmark_valid"), by.get("landmark_valid"))
        if w.lambda_con:
            taps = self.patch_spec.tap_scales
            with _autocast(self.precision, self.device):
                f_src = self.g_xy.encode_features(x, taps)
                f_out = self.g_xy.encode_features(fake_y, taps)
            comps["con"] = patch_nce_loss(_f32(f_src), _f32(f_out), self.patch_spec,
                                          _seed_for(self.seed, it, chunk, 3), self.nce_head)
        if paired and self.hybrid:
            with _autocast(self.precision, self.device):
                cond_logits = _f32(self.d_cond(torch.cat([x, fake_y.to(x.dtype)], 1)))
            comps["gan_G_cond"] = adv_g_loss(cond_logits, self.saturating)
            comps["paired"] = (fake_y - y).abs().mean()
        return comps

    def _g_update(self, bx, by, it, paired):
        accum = self.schedule.accum_steps
        self._requires_grad([self.d_x, self.d_y, self.d_cond], False)
        self.opt_g.zero_grad(set_to_none=True)
        sums = {}
        total_sum = 0.0
        for ci, (cx, cy) in enumerate(zip(_chunks(bx, accum), _chunks(by, accum))):
            comps = self.generator_losses(cx, cy, it, paired and self.hybrid, ci)
            report = total_generator_loss(comps, self.weights, paired=paired and self.hybrid)
            if not report.is_finite():
                self._dump_diagnostics(report, it)
                self._requires_grad([self.d_x, self.d_y, self.d_cond], True)
                raise NonFiniteLossError(f"non-finite generator loss at iteration {it}")
            self.scaler.scale(report.total / accum).backward()
            for k, v in report.detached().components.items():
                sums[k] = sums.get(k, 0.0) + v / accum
            total_sum += float(report.total.detach() if torch.is_tensor(report.total) else report.total) / accum
        self._requires_grad([self.d_x, self.d_y, self.d_cond], True)
        self._step(self.opt_g, self.generator_parameters(), "generators")
        self.g_updates += 1
        if self.schedule.use_ema:
            decay = self.schedule.ema_decay
            ema_update(self.ema_xy.parameters(), self.g_xy.parameters(), decay)
            ema_update(self.ema_yx.parameters(), self.g_yx.parameters(), decay)
            for sh, live in ((self.ema_xy, self.g_xy), (self.ema_yx, self.g_yx)):
                for bs, bl in zip(sh.buffers(), live.buffers()):
                    bs.copy_(bl)
        sums.update(self.last_d)
        weights = self.weights.term_weights(paired and self.hybrid)
        return LossReport(sums, weights, total_sum, it)

    def _dump_diagnostics(self, report, it):
        comps = {k: (float(v) if not isinstance(v, float) else v)
                 for k, v in report.components.items()}
        norms = {}
        for name, net in (("g_xy", self.g_xy), ("g_yx", self.g_yx)):
            norms[name] = float(torch.sqrt(sum((p.detach() ** 2).sum() for p in net.parameters())))
        log.error("non-finite loss at iteration %d: components=%s param_norms=%s", it,
                  json.dumps(comps), json.dumps(norms))

    def train_step(self, batch_x: dict, batch_y: dict, it: int, paired: bool = False) -> LossReport:
        """D updates (``ttur_steps``) then G updates; returns the last G-step report."""
        self.train_mode()
        self.iteration = it
        self._set_lr(learning_rate(it, self.schedule))
        d_steps, g_steps = ttur_steps(it, self.schedule)
        bx = _to_device(batch_x, self.device)
        by = _to_device(batch_y, self.device)
        for k in range(d_steps):
            self._d_update(bx, by, it, k, paired)
        report = None
        for _ in range(g_steps):
            report = self._g_update(bx, by, it, paired)
        report.extras["lr"] = learning_rate(it, self.schedule)
        report.extras["d_steps"] = d_steps
        return report

    def hybrid_paired_step(self, paired_x: dict, paired_y: dict, it: int) -> LossReport:
        """Unpaired objectives on an aligned batch plus conditional-adversarial and L1 terms."""
        if paired_x["images"].shape != paired_y["images"].shape:
            raise ValueError("misaligned pair shapes")
        return self.train_step(paired_x, paired_y, it, paired=True)

    # -- persistence
    def state_dict(self):
        sd = {
            "g_xy": self.g_xy.state_dict(), "g_yx": self.g_yx.state_dict(),
            "d_x": self.d_x.state_dict(), "d_y": self.d_y.state_dict(),
            "nce_head": self.nce_head.state_dict(),
            "ema_xy": self.ema_xy.state_dict(), "ema_yx": self.ema_yx.state_dict(),
            "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
            "counters": {"d_updates": self.d_updates, "g_updates": self.g_updates,
                         "iteration": self.iteration},
        }
        if self.d_cond is not None:
            sd["d_cond"] = self.d_cond.state_dict()
        return sd

    def load_state_dict(self, sd):
        for name in ("g_xy", "g_yx", "d_x", "d_y", "nce_head", "ema_xy", "ema_yx"):
            getattr(self, name).load_state_dict(sd[name])
        if self.d_cond is not None and "d_cond" in sd:
            self.d_cond.load_state_dict(sd["d_cond"])
        self.opt_g.load_state_dict(sd["opt_g"])
        self.opt_d.load_state_dict(sd["opt_d"])
        c = sd["counters"]
        self.d_updates, self.g_updates, self.iteration = c["d_updates"], c["g_updates"], c["iteration"]


def _to_device(batch, device):
    return {k: (v.to(device) if isinstance(v, torch.Tensor) else v) for k, v in batch.items()}


def save_checkpoint(path, model, config: dict | None = None, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": model.kind,
        "config": config or {},
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    return payload


# --- run loop ------------------------------------------------------------

LOSS_COLUMNS = ("step", "d_steps", "lr", "resolution", "gan_G_xy", "gan_G_yx", "cyc", "id", "perc",
                "sem_cyc", "lmk", "con", "gan_D_x", "gan_D_y", "gan_G_cond", "paired", "gan_D_cond",
                "total", "probe_std")


def save_image_grid(path, rows, nrow=None):
    """Write a grid of ``[-1, 1]`` images; ``rows`` is a list of ``[N, 3, H, W]`` tensors."""
    from PIL import Image
    rows = [r.detach().cpu().clamp(-1, 1) for r in rows]
    n = rows[0].shape[0]
    h, w = rows[0].shape[-2:]
    grid = torch.ones(3, len(rows) * h, n * w)
    for i, r in enumerate(rows):
        for j in range(n):
            grid[:, i * h:(i + 1) * h, j * w:(j + 1) * w] = r[j]
    arr = ((grid.permute(1, 2, 0).numpy() + 1) * 127.5).round().clip(0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@torch.no_grad()
def probe_feature_std(generator, probe, extractor) -> float:
    was = generator.training
    generator.eval()
    feats = extractor(generator(probe))
    generator.train(was)
    return float(feats.std(dim=0).mean())


@dataclass
class RunOptions:
    steps_per_epoch: int = 100
    checkpoint_every: int = 0
    sample_every: int = 0
    probe_size: int = 64
    hybrid_every: int = 0


def fit(model: GuidedCycleGAN, train_x, train_y, run_dir, options: RunOptions | None = None,
        paired=None, extractor=None, seed: int | None = None, on_step=None):
    """Run ``schedule.total_iters`` iterations and write the run directory.

    ``train_x``/``train_y`` are :class:`~guidedgan.data_pipeline.LoadedDomain`
    objects at the highest scheduled resolution. ``paired`` optionally holds
    an aligned ``(LoadedDomain, LoadedDomain)`` subset used every
    ``options.hybrid_every`` iterations.
    """
    from .data_pipeline import paired_sampler, unpaired_sampler
    from .metrics import ToyFeatureExtractor

    opts = options or RunOptions()
    sched = model.schedule
    seed = model.seed if seed is None else seed
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "events.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    pkg_log = logging.getLogger("guidedgan")
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO)
    extractor = extractor or ToyFeatureExtractor()
    try:
        by_res = {}

        def domains_at(res):
            if res not in by_res:
                by_res[res] = (train_x.resized(res), train_y.resized(res))
            return by_res[res]

        samplers = {}
        psamplers = {}
        probe_idx = torch.arange(min(opts.probe_size, len(train_x)))
        with open(run_dir / "losses.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LOSS_COLUMNS)
            for it in range(sched.total_iters):
                res = current_resolution(it, sched)
                if res not in samplers:
                    dx, dy = domains_at(res)
                    samplers[res] = unpaired_sampler(dx, dy, sched.batch_size, seed)
                use_pair = paired is not None and opts.hybrid_every and it % opts.hybrid_every == 0
                if use_pair:
                    if res not in psamplers:
                        psamplers[res] = paired_sampler(paired[0].resized(res), paired[1].resized(res),
                                                        sched.batch_size, seed)
                    px, py = next(psamplers[res])
                    report = model.hybrid_paired_step(px, py, it)
                else:
                    bx, by = next(samplers[res])
                    report = model.train_step(bx, by, it)
                report.extras["resolution"] = res
                if (it + 1) % opts.steps_per_epoch == 0 or it == 0:
                    probe = domains_at(res)[0].images[probe_idx].to(model.device)
                    report.extras["probe_std"] = probe_feature_std(model.g_xy, probe, extractor)
                wr.writerow(_fmt_row(report.row(LOSS_COLUMNS)))
                if opts.checkpoint_every and (it + 1) % opts.checkpoint_every == 0:
                    save_checkpoint(run_dir / "checkpoints" / f"iter_{it + 1}.ckpt", model)
                if opts.sample_every and (it + 1) % opts.sample_every == 0:
                    _write_samples(model, domains_at(res), run_dir / "samples" / f"iter_{it + 1}_grid.png")
                if on_step is not None:
                    on_step(it, report)
        log.info("finished %d iterations: %d D updates, %d G updates", sched.total_iters,
                 model.d_updates, model.g_updates)
    finally:
        pkg_log.removeHandler(handler)
        handler.close()
    return run_dir


def _fmt_row(row):
    out = []
    for v in row:
        if isinstance(v, float):
            out.append(repr(v))
        else:
            out.append(v)
    return out


@torch.no_grad()
def _write_samples(model, domains, path):
    dx, dy = domains
    x = dx.images[:4].to(model.device)
    y = dy.images[:4].to(model.device)
    g, f = model.translator("XY"), model.translator("YX")
    gx = g(x)
    save_image_grid(path, [x, gx, f(gx), y])
    model.train_mode()
