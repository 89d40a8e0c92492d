"""Spectral normalization via power iteration.

The standalone helpers (:func:`power_iteration_step`, :func:`estimate_sigma`,
:func:`normalize_weight`) work on plain matrices. :class:`SpectralNorm` wraps
a conv/linear module and keeps persistent singular-vector estimates that are
advanced once per training-mode forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class NullSpaceError(RuntimeError):
    pass


@dataclass
class SpectralState:
    u: torch.Tensor
    v: torch.Tensor
    sigma: torch.Tensor
    n_power_iters: int = 1

    def __post_init__(self):
        if self.n_power_iters < 1:
            raise ValueError("n_power_iters must be >= 1")


def power_iteration_step(W: torch.Tensor, v: torch.Tensor):
    """One step ``v <- W^T W v / |W^T W v|``; returns ``(v_next, |W v_next|)``."""
    wtwv = W.T @ (W @ v)
    n = torch.linalg.vector_norm(wtwv)
    if n == 0:
        raise NullSpaceError("v in null space; reinitialize")
    v_next = wtwv / n
    return v_next, torch.linalg.vector_norm(W @ v_next)


def _random_unit(n: int, seed: int, dtype, device) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    v = torch.randn(n, generator=g, dtype=torch.float64).to(dtype=dtype, device=device)
    return v / torch.linalg.vector_norm(v)


def estimate_sigma(W: torch.Tensor, iters: int = 100, seed: int = 0) -> float:
    """Largest singular value of ``W`` by ``iters`` power-iteration steps.

    A start vector that lands in the null space is redrawn once (seed + 1)
    before the error propagates.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    W = torch.as_tensor(W)
    if not W.is_floating_point():
        W = W.double()
    W = W.reshape(W.shape[0], -1)
    last_err = None
    for attempt in range(2):
        v = _random_unit(W.shape[1], seed + attempt, W.dtype, W.device)
        try:
            for _ in range(iters):
                v, sigma = power_iteration_step(W, v)
            return float(sigma)
        except NullSpaceError as err:
            last_err = err
    raise NullSpaceError(f"null space: power iteration failed after reseed ({last_err})")


def normalize_weight(W: torch.Tensor, sigma) -> torch.Tensor:
    if float(sigma) <= 0:
        raise ValueError("sigma must be positive")
    return W / sigma


def sn_layer_forward(weight, state: SpectralState, inp, op, training=True, detach_sigma=False):
    """Functional spectrally normalized forward.

    ``op(inp, w)`` applies the layer with effective weight ``w``. Returns the
    output and the (possibly advanced) state; in eval mode the state is
    returned unchanged.
    """
    w_mat = weight.reshape(weight.shape[0], -1)
    if state.u.shape[0] != w_mat.shape[0] or state.v.shape[0] != w_mat.shape[1]:
        raise ValueError(
            f"spectral state shape (u={tuple(state.u.shape)}, v={tuple(state.v.shape)}) "
            f"does not match reshaped weight {tuple(w_mat.shape)}"
        )
    with torch.autocast(device_type=weight.device.type, enabled=False):
        # half-precision weights are promoted; float64 stays float64
        w32 = w_mat.float() if w_mat.dtype in (torch.float16, torch.bfloat16) else w_mat
        u, v = state.u.to(w32.dtype), state.v.to(w32.dtype)
        if training:
            with torch.no_grad():
                for _ in range(state.n_power_iters):
                    u = F.normalize(w32 @ v, dim=0, eps=1e-12)
                    v = F.normalize(w32.T @ u, dim=0, eps=1e-12)
                u = F.normalize(w32 @ v, dim=0, eps=1e-12)
        sigma = torch.linalg.vector_norm(w32 @ v.detach())
        if detach_sigma:
            sigma = sigma.detach()
    w_eff = weight / sigma.to(weight.dtype)
    out = op(inp, w_eff)
    new_state = SpectralState(u.detach(), v.detach(), sigma.detach(), state.n_power_iters)
    return out, new_state


class SpectralNorm(nn.Module):
    """Wrap a ``Conv2d``/``Linear``/``ConvTranspose2d`` with spectral normalization.

    Conv kernels are reshaped to ``[out_channels, in_channels * kH * kW]``.
    """

    def __init__(self, module: nn.Module, n_power_iters: int = 1, seed: int | None = None,
                 detach_sigma: bool = False):
        super().__init__()
        self.module = module
        self.n_power_iters = n_power_iters
        self.detach_sigma = detach_sigma
        w = module.weight
        rows = w.shape[0]
        cols = w[0].numel()
        g = torch.Generator()
        if seed is None:
            seed = int(torch.randint(0, 2**31 - 1, (1,)).item())
        g.manual_seed(seed)
        u = F.normalize(torch.randn(rows, generator=g), dim=0)
        v = F.normalize(torch.randn(cols, generator=g), dim=0)
        self.register_buffer("u", u)
        self.register_buffer("v", v)
        self.register_buffer("sigma", torch.ones(()))

    @property
    def weight(self):
        return self.module.weight

    @property
    def state(self) -> SpectralState:
        return SpectralState(self.u.clone(), self.v.clone(), self.sigma.clone(), self.n_power_iters)

    def _op(self, x, w):
        m = self.module
        if isinstance(m, nn.Conv2d):
            if m.padding_mode != "zeros":
                x = F.pad(x, m._reversed_padding_repeated_twice, mode=m.padding_mode)
                return F.conv2d(x, w, m.bias, m.stride, 0, m.dilation, m.groups)
            return F.conv2d(x, w, m.bias, m.stride, m.padding, m.dilation, m.groups)
        if isinstance(m, nn.ConvTranspose2d):
            return F.conv_transpose2d(x, w, m.bias, m.stride, m.padding, m.output_padding,
                                      m.groups, m.dilation)
        if isinstance(m, nn.Linear):
            return F.linear(x, w, m.bias)
        raise TypeError(f"unsupported module {type(m).__name__}")

    def effective_weight(self) -> torch.Tensor:
        return self.module.weight.detach() / self.sigma

    def forward(self, x):
        out, new = sn_layer_forward(self.module.weight, self.state, x, self._op,
                                    training=self.training, detach_sigma=self.detach_sigma)
        if self.training:
            with torch.no_grad():
                self.u.copy_(new.u)
                self.v.copy_(new.v)
                self.sigma.copy_(new.sigma)
        return out


def spectral_norm(module: nn.Module, enabled: bool = True, **kwargs) -> nn.Module:
    return SpectralNorm(module, **kwargs) if enabled else module
