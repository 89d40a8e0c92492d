"""Shared data model and small numeric helpers.

Images travel between modules as ``[N, 3, H, W]`` tensors in ``[-1, 1]``;
metrics convert to ``[0, 1]`` with :func:`to_unit_range`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import torch

ALLOWED_RESOLUTIONS = (64, 128, 256)
DEFAULT_LANDMARK_COUNT = 5
DEFAULT_EMBED_DIM = 128


class Domain(str, enum.Enum):
    X = "X"
    Y = "Y"


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBatch:
    """A validated batch of RGB images in ``[-1, 1]``."""

    data: torch.Tensor
    domain_tag: Domain = Domain.X

    def __post_init__(self):
        validate_images(self.data, strict_size=True)

    @property
    def resolution(self) -> int:
        return int(self.data.shape[-1])

    def __len__(self):
        return int(self.data.shape[0])


def validate_images(x: torch.Tensor, strict_size: bool = False) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected [N, 3, H, W] images, got shape {tuple(x.shape)}")
    if strict_size:
        h, w = x.shape[-2:]
        if h not in ALLOWED_RESOLUTIONS or w not in ALLOWED_RESOLUTIONS:
            raise ValueError(f"H and W must be in {ALLOWED_RESOLUTIONS}, got {h}x{w}")
    if x.numel() and (x.detach().min() < -1 or x.detach().max() > 1):
        raise ValueError("image values must lie in [-1, 1]")


@dataclass(frozen=True)
class LandmarkSet:
    """``points`` is ``[K, 2]`` (or ``[N, K, 2]``) in pixel ``(x, y)`` order."""

    points: torch.Tensor
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if self.points.shape[-1] != 2:
            raise ValueError("landmark points must have trailing dimension 2")
        if self.width is not None and self.height is not None:
            p = self.points.detach()
            if (p[..., 0] < 0).any() or (p[..., 0] >= self.width).any() \
                    or (p[..., 1] < 0).any() or (p[..., 1] >= self.height).any():
                raise ValueError("landmark outside image bounds")

    @property
    def count(self) -> int:
        return int(self.points.shape[-2])

    def scaled(self, factor: float) -> "LandmarkSet":
        w = None if self.width is None else max(1, round(self.width * factor))
        h = None if self.height is None else max(1, round(self.height * factor))
        return LandmarkSet(self.points * factor, w, h)


@dataclass(frozen=True)
class ParsingMask:
    weights: torch.Tensor

    def __post_init__(self):
        if self.weights.numel() and (self.weights.min() < 0 or self.weights.max() > 1):
            raise ValueError("parsing mask values must lie in [0, 1]")


@dataclass(frozen=True)
class IdentityEmbedding:
    vector: torch.Tensor


GENERATOR_TERMS = ("gan_G_xy", "gan_G_yx", "cyc", "id", "perc", "sem_cyc", "lmk", "con")
DISCRIMINATOR_TERMS = ("gan_D_x", "gan_D_y")


@dataclass
class LossReport:
    """Named loss components, their weights, and the weighted generator total.

    Components may hold tensors while a step is in flight; call
    :meth:`detached` before logging.
    """

    components: dict[str, Any]
    weights: dict[str, float]
    total: Any
    step: int | None = None
    extras: dict[str, float] = field(default_factory=dict)

    def detached(self) -> "LossReport":
        return LossReport(
            {k: _as_float(v) for k, v in self.components.items()},
            dict(self.weights),
            _as_float(self.total),
            self.step,
            dict(self.extras),
        )

    def is_finite(self) -> bool:
        vals = [_as_float(v) for v in self.components.values()] + [_as_float(self.total)]
        return all(math.isfinite(v) for v in vals)

    def row(self, columns) -> list:
        r = self.detached()
        out = []
        for c in columns:
            if c == "step":
                out.append(r.step)
            elif c == "total":
                out.append(r.total)
            elif c in r.components:
                out.append(r.components[c])
            else:
                out.append(r.extras.get(c, ""))
        return out


def _as_float(v) -> float:
    if isinstance(v, torch.Tensor):
        return float(v.detach().cpu())
    return float(v)


def to_unit_range(x):
    """Map ``[-1, 1]`` data to ``[0, 1]``."""
    if isinstance(x, ImageBatch):
        x = x.data
    return (x + 1) / 2


def from_unit_range(x):
    return x * 2 - 1


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two non-zero vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def batch_cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of ``[N, D]`` tensors, differentiable."""
    su = (u * u).sum(-1)
    sv = (v * v).sum(-1)
    if (su == 0).any() or (sv == 0).any():
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm vector")
    # sqrt(s * s) == s in IEEE arithmetic, so identical rows give exactly 1
    return (u * v).sum(-1) / torch.sqrt(su * sv)


def as_dict(weights: Mapping[str, float]) -> dict[str, float]:
    return {k: float(v) for k, v in weights.items()}
