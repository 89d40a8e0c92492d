"""Frozen guidance providers and cross-domain pseudo-pair retrieval.

Real face encoders are out of reach here, so the default providers are
seeded random conv stacks (identity embedding, perceptual taps) plus an
analytic soft-argmax landmark detector tuned to the toy renderer. Anything
with the same call signature can be dropped in through :class:`FrozenEncoder`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .core_types import DEFAULT_EMBED_DIM, LandmarkSet, ParsingMask

log = logging.getLogger(__name__)

IDENTITY = "identity_E"
PERCEPTUAL = "perceptual_Phi"
MANIFEST_NAME = "sidecar_manifest.json"


class MissingSidecarError(FileNotFoundError):
    pass


class FrozenEncoder(nn.Module):
    """A guidance network whose weights never train.

    ``kind`` is ``identity_E`` or ``perceptual_Phi``. Gradients still flow
    through the computation into the input images.
    """

    def __init__(self, kind: str, net: nn.Module, tap_layers=(), seed: int | None = None):
        super().__init__()
        if kind not in (IDENTITY, PERCEPTUAL):
            raise ValueError(f"unknown encoder kind {kind!r}")
        self.kind = kind
        self.net = net
        self.tap_layers = tuple(tap_layers)
        self.seed = seed
        self.calls = 0
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()

    def train(self, mode: bool = True):
        # frozen networks stay in eval mode
        super().train(mode)
        self.net.eval()
        return self

    def forward(self, x):
        self.calls += 1
        if self.kind == IDENTITY:
            return F.normalize(self.net(x), dim=1)
        n_layers = len(self.net)
        for t in self.tap_layers:
            if not 0 <= t < n_layers:
                raise IndexError(f"tap index {t} out of range for {n_layers}-layer backbone")
        feats = []
        h = x
        last = max(self.tap_layers)
        for i, layer in enumerate(self.net):
            h = layer(h)
            if i in self.tap_layers:
                feats.append(h)
            if i >= last:
                break
        return feats


def _seeded_init(net: nn.Module, seed: int):
    g = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()


def toy_identity_encoder(embed_dim: int = DEFAULT_EMBED_DIM, seed: int = 1234) -> FrozenEncoder:
    net = nn.Sequential(
        nn.Conv2d(3, 16, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(16, 32, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(32, 64, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.AdaptiveAvgPool2d(4), nn.Flatten(),
        nn.Linear(64 * 16, embed_dim))
    _seeded_init(net, seed)
    return FrozenEncoder(IDENTITY, net, seed=seed)


def toy_perceptual_backbone(seed: int = 4321, channels=(16, 32)) -> FrozenEncoder:
    """Seeded conv stack with pre-pool taps at strides 2 and 4 (layers 1 and 3)."""
    c1, c2 = channels
    net = nn.Sequential(
        nn.Conv2d(3, c1, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(c1, c2, 3, 2, 1), nn.LeakyReLU(0.2))
    _seeded_init(net, seed)
    return FrozenEncoder(PERCEPTUAL, net, tap_layers=(1, 3), seed=seed)


def embed_identity(x, encoder: FrozenEncoder):
    if encoder.kind != IDENTITY:
        raise ValueError("embed_identity requires an identity_E encoder")
    return encoder(x)


def extract_features(x, encoder: FrozenEncoder):
    if encoder.kind != PERCEPTUAL:
        raise ValueError("extract_features requires a perceptual_Phi encoder")
    return encoder(x)


def pooled_descriptor(feats) -> torch.Tensor:
    """Spatially average-pool each tap and concatenate: ``[N, sum(C)]``."""
    return torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1)


def nearest_indices(query: torch.Tensor, bank: torch.Tensor, metric: str = "cosine") -> torch.Tensor:
    """Index into ``bank`` of the best match for each ``query`` row; ties go to the lowest index."""
    if metric == "cosine":
        q = F.normalize(query, dim=1)
        b = F.normalize(bank, dim=1)
        return torch.argmax(q @ b.T, dim=1)
    if metric == "l2":
        return torch.argmin(torch.cdist(query, bank), dim=1)
    raise ValueError(f"unknown retrieval metric {metric!r}")


@torch.no_grad()
def retrieve_pseudo_pairs(batch_x, batch_y, encoder: FrozenEncoder, metric: str = "cosine"):
    """Cross-domain nearest neighbours within the current minibatches.

    Returns ``(idx_for_x, idx_for_y)``: for each x the index of its best y,
    and vice versa. No gradient flows through retrieval.
    """
    if len(batch_x) == 0 or len(batch_y) == 0:
        raise ValueError("retrieval needs non-empty batches")
    dx = pooled_descriptor(extract_features(batch_x, encoder))
    dy = pooled_descriptor(extract_features(batch_y, encoder))
    return nearest_indices(dx, dy, metric), nearest_indices(dy, dx, metric)


class ToyLandmarkDetector(nn.Module):
    """Differentiable landmark regressor for the toy faces.

    Facial features are the only dark strokes on a light face and
    background. Each landmark is a soft-argmax of a darkness map restricted
    to a fixed region of the frame; mouth corners additionally favour the
    leftmost/rightmost dark pixels. Output is ``[N, 5, 2]`` pixel ``(x, y)``
    in corner-origin coordinates (pixel ``i`` spans ``[i, i + 1)``):
    left eye, right eye, nose, left mouth corner, right mouth corner.
    """

    # (x0, x1, y0, y1) as fractions of the frame
    REGIONS = (
        (0.12, 0.5, 0.2, 0.48),
        (0.5, 0.88, 0.2, 0.48),
        (0.38, 0.62, 0.48, 0.63),
        (0.15, 0.5, 0.63, 0.88),
        (0.5, 0.85, 0.63, 0.88),
    )
    EXTREMAL = (0, 0, 0, -1, 1)

    def __init__(self, sharpness: float = 12.0, ramp: float = 1.5, threshold: float = 0.35,
                 softness: float = 0.05):
        super().__init__()
        self.sharpness = sharpness
        self.ramp = ramp
        self.threshold = threshold
        self.softness = softness
        self.calls = 0

    def darkness(self, x):
        unit = (x + 1) / 2
        lum = 0.299 * unit[:, 0] + 0.587 * unit[:, 1] + 0.114 * unit[:, 2]
        return torch.sigmoid((self.threshold - lum) / self.softness)

    def forward(self, x):
        self.calls += 1
        n, _, h, w = x.shape
        d = self.darkness(x).flatten(1)  # n, hw
        ys, xs = torch.meshgrid(torch.arange(h, dtype=x.dtype, device=x.device),
                                torch.arange(w, dtype=x.dtype, device=x.device), indexing="ij")
        xs, ys = xs.flatten() + 0.5, ys.flatten() + 0.5
        out = []
        for (x0, x1, y0, y1), ext in zip(self.REGIONS, self.EXTREMAL):
            inside = (xs >= x0 * w) & (xs < x1 * w) & (ys >= y0 * h) & (ys < y1 * h)
            gain = torch.full_like(xs, self.sharpness)
            if ext < 0:
                gain = gain + self.ramp * (x1 * w - xs) * (64.0 / w)
            elif ext > 0:
                gain = gain + self.ramp * (xs - x0 * w) * (64.0 / w)
            score = d * gain
            score = score.masked_fill(~inside, float("-inf"))
            p = torch.softmax(score, dim=1)
            out.append(torch.stack([(p * xs).sum(1), (p * ys).sum(1)], dim=-1))
        return torch.stack(out, dim=1)


@dataclass
class SidecarManifest:
    resolution: int
    landmark_count: int
    eye_indices: tuple = (0, 1)

    @classmethod
    def load(cls, root: Path) -> "SidecarManifest":
        data = json.loads((Path(root) / MANIFEST_NAME).read_text())
        return cls(int(data["resolution"]), int(data["landmark_count"]),
                   tuple(data.get("eye_indices", (0, 1))))

    def save(self, root: Path):
        (Path(root) / MANIFEST_NAME).write_text(json.dumps(
            {"resolution": self.resolution, "landmark_count": self.landmark_count,
             "eye_indices": list(self.eye_indices)}, indent=2))


def mask_path(root, image_id) -> Path:
    return Path(root) / f"{image_id}.mask.png"


def landmarks_path(root, image_id) -> Path:
    return Path(root) / f"{image_id}.landmarks.csv"


def write_sidecars(root, image_id, mask: np.ndarray, landmarks: np.ndarray):
    """Write an 8-bit mask and a ``k,x,y`` landmark CSV for one image."""
    m = np.clip(np.round(np.asarray(mask) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(m, mode="L").save(mask_path(root, image_id))
    with open(landmarks_path(root, image_id), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "x", "y"])
        for k, (px, py) in enumerate(np.asarray(landmarks, dtype=np.float64)):
            wr.writerow([k, repr(float(px)), repr(float(py))])


def read_landmarks_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["k"]))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64)


class SidecarStore:
    """Read-only access to per-image masks and landmarks.

    ``strict=False`` substitutes an all-ones mask and ``None`` landmarks for
    missing files (the caller zeroes that sample's landmark weight).
    """

    def __init__(self, root, strict: bool = True):
        self.root = Path(root)
        self.strict = strict
        self.manifest = SidecarManifest.load(self.root)

    def load(self, image_id, resolution: int | None = None):
        return load_sidecars(image_id, self, resolution)


def load_sidecars(image_id, store: SidecarStore, resolution: int | None = None):
    res = resolution or store.manifest.resolution
    factor = res / store.manifest.resolution
    mp, lp = mask_path(store.root, image_id), landmarks_path(store.root, image_id)
    if not mp.exists() or not lp.exists():
        if store.strict:
            raise MissingSidecarError(f"missing sidecar for {image_id!r} in {store.root}")
        log.warning("missing sidecar for %s; using neutral mask and no landmarks", image_id)
        return ParsingMask(torch.ones(res, res)), None
    m = np.asarray(Image.open(mp).convert("L"), dtype=np.float32) / 255.0
    mt = torch.from_numpy(m)[None, None]
    if mt.shape[-1] != res or mt.shape[-2] != res:
        mt = F.interpolate(mt, size=(res, res), mode="bilinear", align_corners=False)
    mask = ParsingMask(mt[0, 0].clamp(0, 1))
    pts = torch.from_numpy(read_landmarks_csv(lp)) * factor
    return mask, LandmarkSet(pts, res, res)
