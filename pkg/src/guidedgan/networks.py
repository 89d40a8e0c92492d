"""Generators and multi-scale patch discriminators.

The generator encodes through four stride-2 stages down to 1/16 scale, runs
residual blocks there (the last few modulated by AdaIN from a learned style
code), and decodes back with additive skips from the encoder at 1/4 and 1/2.
Self-attention sits on the encoder maps at 1/8 and at the 1/16 bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from fractions import Fraction

import torch
import torch.nn.functional as F
from torch import nn

from .spectral_norm import spectral_norm

MAX_ATTENTION_POSITIONS = 4096
MIN_RESOLUTION = 64
N_DOWN = 4


@dataclass
class GeneratorConfig:
    n_res_blocks: int = 9
    base_channels: int = 64
    max_channel_mult: int = 4
    attention_scales: tuple = (1 / 16, 1 / 8)
    skip_scales: tuple = (1 / 4, 1 / 2)
    adain_in_late_blocks: bool = True
    use_sn_on_g: bool = False
    n_adain_blocks: int = 3
    style_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        reachable = {Fraction(1, 2 ** k) for k in range(N_DOWN + 1)}
        for name in ("attention_scales", "skip_scales"):
            vals = tuple(getattr(self, name))
            for s in vals:
                if Fraction(s).limit_denominator(64) not in reachable:
                    raise ValueError(f"{name}: scale {s} not reachable by the encoder")
            setattr(self, name, vals)
        if self.adain_in_late_blocks and not 0 <= self.n_adain_blocks <= self.n_res_blocks:
            raise ValueError("n_adain_blocks must be within [0, n_res_blocks]")

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    n_layers: int = 4
    scales: tuple = (1.0, 0.5)
    base_channels: int = 64
    spectral_norm: bool = True
    in_channels: int = 3

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")

    def to_dict(self):
        return asdict(self)


def _scale_key(s) -> Fraction:
    return Fraction(s).limit_denominator(64)


class SelfAttention(nn.Module):
    """Residual self-attention over spatial positions, gated by ``gamma`` (init 0)."""

    def __init__(self, channels: int, sn: bool = False):
        super().__init__()
        qk = max(1, channels // 8)
        self.query = spectral_norm(nn.Conv2d(channels, qk, 1), sn)
        self.key = spectral_norm(nn.Conv2d(channels, qk, 1), sn)
        self.value = spectral_norm(nn.Conv2d(channels, channels, 1), sn)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        n, c, h, w = x.shape
        if h * w > MAX_ATTENTION_POSITIONS:
            raise ValueError(
                f"self-attention over {h}x{w} positions exceeds {MAX_ATTENTION_POSITIONS}; "
                "move attention to a coarser scale (GeneratorConfig.attention_scales)"
            )
        q = self.query(x).flatten(2)                      # n, qk, hw
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)                      # n, c, hw
        attn = torch.softmax(q.transpose(1, 2) @ k, dim=-1)  # n, hw(query), hw(key)
        out = (v @ attn.transpose(1, 2)).view(n, c, h, w)
        return x + self.gamma * out


def self_attention(feature_map, module: SelfAttention):
    return module(feature_map)


def adain(x, scale, shift, eps: float = 1e-5):
    """Instance-standardize per sample/channel, then apply ``scale`` and ``shift``.

    ``scale``/``shift`` may be ``[C]`` or ``[N, C]``.
    """
    mu = x.mean(dim=(2, 3), keepdim=True)
    sigma = x.var(dim=(2, 3), keepdim=True, unbiased=False).sqrt()
    normed = (x - mu) / (sigma + eps)
    if scale.ndim == 1:
        scale = scale[None]
    if shift.ndim == 1:
        shift = shift[None]
    return scale[:, :, None, None] * normed + shift[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, ch: int, adaptive: bool = False, sn: bool = False):
        super().__init__()
        self.adaptive = adaptive
        self.conv1 = spectral_norm(nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), sn)
        self.conv2 = spectral_norm(nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), sn)
        if not adaptive:
            self.norm1 = nn.InstanceNorm2d(ch, affine=True)
            self.norm2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x, mod=None):
        h = self.conv1(x)
        if self.adaptive:
            s1, b1, s2, b2 = mod
            h = adain(h, s1, b1)
        else:
            h = self.norm1(h)
        h = F.relu(h)
        h = self.conv2(h)
        h = adain(h, s2, b2) if self.adaptive else self.norm2(h)
        return x + h


class StyleMapping(nn.Module):
    """Two-layer MLP from a style code to per-block AdaIN scale/shift."""

    def __init__(self, style_dim: int, channels: int, n_blocks: int, hidden: int = 128):
        super().__init__()
        self.channels = channels
        self.n_blocks = n_blocks
        self.fc1 = nn.Linear(style_dim, hidden)
        self.fc2 = nn.Linear(hidden, 4 * channels * n_blocks)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, style):
        p = self.fc2(F.relu(self.fc1(style)))
        p = p.view(-1, self.n_blocks, 4, self.channels)
        mods = []
        for b in range(self.n_blocks):
            s1, b1, s2, b2 = p[:, b].unbind(1)
            mods.append((1 + s1, b1, 1 + s2, b2))
        return mods


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        sn = cfg.use_sn_on_g
        c0 = cfg.base_channels
        chans = [c0] + [c0 * min(2 ** (i + 1), cfg.max_channel_mult) for i in range(N_DOWN)]
        self.channels = chans
        self.stem = nn.Sequential(
            spectral_norm(nn.Conv2d(cfg.in_channels, c0, 7, padding=3, padding_mode="reflect"), sn),
            nn.InstanceNorm2d(c0, affine=True), nn.ReLU(True))
        self.down = nn.ModuleList([
            nn.Sequential(spectral_norm(nn.Conv2d(chans[i], chans[i + 1], 3, 2, 1), sn),
                          nn.InstanceNorm2d(chans[i + 1], affine=True), nn.ReLU(True))
            for i in range(N_DOWN)])
        att_keys = {_scale_key(s) for s in cfg.attention_scales}
        self.attention = nn.ModuleDict({
            str(i + 1): SelfAttention(chans[i + 1], sn)
            for i in range(N_DOWN) if Fraction(1, 2 ** (i + 1)) in att_keys})
        n_ada = cfg.n_adain_blocks if cfg.adain_in_late_blocks else 0
        self.n_adain = n_ada
        cb = chans[-1]
        self.blocks = nn.ModuleList([
            ResBlock(cb, adaptive=i >= cfg.n_res_blocks - n_ada, sn=sn)
            for i in range(cfg.n_res_blocks)])
        if n_ada:
            self.style = nn.Parameter(torch.randn(cfg.style_dim) * 0.1)
            self.mapping = StyleMapping(cfg.style_dim, cb, n_ada)
        self.skip_levels = {int(round(1 / float(s))).bit_length() - 1 for s in cfg.skip_scales}
        self.up = nn.ModuleList([
            nn.Sequential(
                spectral_norm(nn.ConvTranspose2d(chans[i + 1], chans[i], 3, 2, 1, output_padding=1), sn),
                nn.InstanceNorm2d(chans[i], affine=True), nn.ReLU(True))
            for i in reversed(range(N_DOWN))])
        self.head = spectral_norm(nn.Conv2d(c0, 3, 7, padding=3, padding_mode="reflect"), sn)

    def encode(self, x, taps=()):
        """Run the encoder; returns bottleneck input and the requested scale taps."""
        _check_resolution(x)
        h = self.stem(x)
        feats = {0: h}
        for i, layer in enumerate(self.down):
            h = layer(h)
            if str(i + 1) in self.attention:
                h = self.attention[str(i + 1)](h)
            feats[i + 1] = h
        tapped = [feats[int(round(1 / float(s))).bit_length() - 1] for s in taps]
        return h, feats, tapped

    def encode_features(self, x, taps=(1 / 4, 1 / 8)):
        return self.encode(x, taps)[2]

    def forward(self, x, style=None):
        h, feats, _ = self.encode(x)
        mods = None
        if self.n_adain:
            s = self.style if style is None else style
            if s.ndim == 1:
                s = s[None].expand(x.shape[0], -1)
            mods = self.mapping(s)
        first_ada = len(self.blocks) - self.n_adain
        for i, block in enumerate(self.blocks):
            h = block(h, mods[i - first_ada] if block.adaptive else None)
        for j, layer in enumerate(self.up):
            h = layer(h)
            level = N_DOWN - 1 - j
            if level in self.skip_levels:
                h = h + feats[level]
        return torch.tanh(self.head(h))


def _check_resolution(x):
    h, w = x.shape[-2:]
    if h < MIN_RESOLUTION or w < MIN_RESOLUTION:
        raise ValueError(f"min resolution {MIN_RESOLUTION}: got {h}x{w}")
    if h % 16 or w % 16:
        raise ValueError("resolution must be divisible by 16")


def generator_forward(x, config: GeneratorConfig | None = None, style=None, net: Generator | None = None):
    net = net or Generator(config)
    return net(x, style)


class PatchDiscriminator(nn.Module):
    """Patch critic: ``n_layers - 1`` stride-2 convs, one stride-1 conv, 1-channel head.

    With ``n_layers=4`` the receptive field is 70x70 and a 256 input yields a
    30x30 logit map.
    """

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = config or DiscriminatorConfig()
        sn = cfg.spectral_norm
        c = cfg.base_channels
        layers = [spectral_norm(nn.Conv2d(cfg.in_channels, c, 4, 2, 1), sn), nn.LeakyReLU(0.2, True)]
        ch = c
        for i in range(1, cfg.n_layers):
            nxt = c * min(2 ** i, 8)
            stride = 2 if i < cfg.n_layers - 1 else 1
            layers += [spectral_norm(nn.Conv2d(ch, nxt, 4, stride, 1), sn), nn.LeakyReLU(0.2, True)]
            ch = nxt
        layers.append(spectral_norm(nn.Conv2d(ch, 1, 4, 1, 1), sn))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = config or DiscriminatorConfig()
        self.config = cfg
        self.scales = cfg.scales
        self.discs = nn.ModuleList([PatchDiscriminator(cfg) for _ in cfg.scales])

    def forward(self, x):
        outs = []
        for s, d in zip(self.scales, self.discs):
            xi = x
            factor = int(round(1 / s))
            if factor > 1:
                xi = F.avg_pool2d(x, factor)
            outs.append(d(xi))
        return outs


def discriminator_forward(x, config: DiscriminatorConfig | None = None, net=None):
    net = net or MultiScaleDiscriminator(config)
    return net(x)


def sn_modules(net: nn.Module):
    from .spectral_norm import SpectralNorm
    return [m for m in net.modules() if isinstance(m, SpectralNorm)]


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
