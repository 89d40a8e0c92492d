"""Dataset ingestion, preprocessing, identity-held-out splits and samplers.

Also renders the synthetic two-domain toy faces used for desk-scale runs.
Every toy image ships with exact landmarks and a region mask, written in the
sidecar layout that :mod:`guidedgan.guidance` reads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .core_types import Domain
from .guidance import (SidecarManifest, SidecarStore, landmarks_path, load_sidecars,
                       mask_path, write_sidecars, MANIFEST_NAME)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_FILE = "manifest.json"


@dataclass
class DatasetManifest:
    root: str
    domain: str
    ids: list
    has_sidecars: bool = False
    paired_with: dict | None = None
    files: dict = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("manifest ids must be unique")
        if self.paired_with:
            targets = list(self.paired_with.values())
            if len(set(targets)) != len(targets):
                raise ValueError("paired_with map must be injective")

    @property
    def identities(self) -> list:
        return sorted({identity_of(i) for i in self.ids})

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        ordered = [i for i in self.ids if i in keep]
        paired = None
        if self.paired_with:
            paired = {k: v for k, v in self.paired_with.items() if k in keep}
        return DatasetManifest(self.root, self.domain, ordered, self.has_sidecars, paired,
                               {k: self.files[k] for k in ordered if k in self.files})

    def path_of(self, image_id) -> Path:
        return Path(self.root) / self.files.get(image_id, f"{image_id}.png")

    def save(self):
        Path(self.root, MANIFEST_FILE).write_text(json.dumps(asdict(self), indent=2))


@dataclass
class SplitSpec:
    train_frac: float = 0.8
    holdout_key: str = "identity"
    seed: int = 0


def identity_of(image_id: str) -> str:
    return image_id.split("_", 1)[0]


def ingest_directory(root, domain="X") -> DatasetManifest:
    root = Path(root)
    ids, files, skipped = [], {}, 0
    for p in sorted(root.iterdir()) if root.is_dir() else []:
        if p.suffix.lower() not in IMAGE_SUFFIXES or p.name.endswith(".mask.png"):
            continue
        try:
            with Image.open(p) as im:
                im.verify()
        except (UnidentifiedImageError, OSError):
            log.warning("skipping undecodable image %s", p)
            skipped += 1
            continue
        ids.append(p.stem)
        files[p.stem] = p.name
    if not ids:
        raise ValueError(f"no images in {root}")
    has_sidecars = (root / MANIFEST_NAME).exists() and all(
        mask_path(root, i).exists() and landmarks_path(root, i).exists() for i in ids)
    paired = None
    pfile = root / "pairs.json"
    if pfile.exists():
        paired = json.loads(pfile.read_text())
    manifest = DatasetManifest(str(root), Domain(domain).value, ids, has_sidecars, paired, files,
                               skipped)
    return manifest


def _to_float_chw(image) -> torch.Tensor:
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    if isinstance(image, np.ndarray):
        if image.dtype == np.uint8:
            t = torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0)
        else:
            t = torch.from_numpy(np.asarray(image, dtype=np.float32))
        if t.ndim == 2:
            t = t[None].expand(3, -1, -1)
        elif t.shape[-1] in (3, 4) and t.shape[0] not in (3, 4):
            t = t[..., :3].permute(2, 0, 1)
        return t.contiguous()
    t = torch.as_tensor(image, dtype=torch.float32)
    return t[0] if t.ndim == 4 else t


def crop_box(h: int, w: int):
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return top, left, side


def preprocess(image, resolution: int) -> torch.Tensor:
    """Center square crop, bilinear resize, map to ``[-1, 1]``.

    ``uint8`` arrays / PIL images are rescaled from ``[0, 255]``; float input is
    taken to be in ``[-1, 1]`` already, so the op is idempotent.
    """
    t = _to_float_chw(image)
    h, w = t.shape[-2:]
    if min(h, w) < 64:
        raise ValueError(f"image too small: {h}x{w} (min side 64)")
    top, left, side = crop_box(h, w)
    t = t[:, top:top + side, left:left + side]
    if side != resolution:
        t = F.interpolate(t[None], size=(resolution, resolution), mode="bilinear",
                          align_corners=False, antialias=side > resolution)[0]
    return t.clamp(-1, 1)


def preprocess_landmarks(points, h: int, w: int, resolution: int):
    """Apply the crop/resize of :func:`preprocess` to corner-origin landmarks."""
    top, left, side = crop_box(h, w)
    p = torch.as_tensor(points, dtype=torch.float64).clone()
    p[..., 0] -= left
    p[..., 1] -= top
    return p * (resolution / side)


def split(manifest: DatasetManifest, spec: SplitSpec | None = None):
    """Partition identities (not images) into train/test by seeded shuffle."""
    spec = spec or SplitSpec()
    idents = manifest.identities
    if len(idents) < 2:
        raise ValueError("identity holdout impossible: need at least 2 identities, found "
                         f"{len(idents)}")
    rng = np.random.default_rng(spec.seed)
    order = [idents[i] for i in rng.permutation(len(idents))]
    n_train = int(round(spec.train_frac * len(idents)))
    n_train = min(max(n_train, 1), len(idents) - 1)
    train_ids = set(order[:n_train])
    tr = [i for i in manifest.ids if identity_of(i) in train_ids]
    te = [i for i in manifest.ids if identity_of(i) not in train_ids]
    return manifest.subset(tr), manifest.subset(te)


# --- toy domains ---------------------------------------------------------

PALETTES = {
    "X": {"background": (0.80, 0.85, 0.92), "skin": (0.96, 0.80, 0.66),
          "feature": (0.25, 0.12, 0.08), "stroke": 0.025, "eye_scale": 1.0},
    "Y": {"background": (0.95, 0.88, 0.70), "skin": (0.62, 0.80, 0.70),
          "feature": (0.08, 0.10, 0.36), "stroke": 0.045, "eye_scale": 1.2},
}
TOY_LANDMARKS = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")


def _identity_params(rng):
    return {
        "head_rx": rng.uniform(0.30, 0.37), "head_ry": rng.uniform(0.38, 0.44),
        "eye_dx": rng.uniform(0.13, 0.17), "eye_y": rng.uniform(0.36, 0.40),
        "eye_rx": rng.uniform(0.04, 0.055), "eye_ry": rng.uniform(0.025, 0.035),
        "nose_y": rng.uniform(0.53, 0.57), "mouth_y": rng.uniform(0.72, 0.76),
        "mouth_half": rng.uniform(0.09, 0.13), "mouth_curve": rng.uniform(0.02, 0.045),
        "skin_shift": rng.uniform(-0.04, 0.04, size=3),
    }


def _frame_params(base, rng):
    p = dict(base)
    for k in ("head_rx", "head_ry", "eye_dx", "eye_rx", "eye_ry", "mouth_half", "mouth_curve"):
        p[k] = base[k] * rng.uniform(0.95, 1.05)
    p["cx"] = 0.5 + rng.uniform(-0.03, 0.03)
    p["cy"] = 0.5 + rng.uniform(-0.03, 0.03)
    return p


def toy_landmarks(p, resolution: int) -> np.ndarray:
    """Exact landmark positions (corner-origin pixels) of a toy face."""
    R = resolution
    dy = p["cy"] - 0.5
    pts = [
        (p["cx"] - p["eye_dx"], p["eye_y"] + dy),
        (p["cx"] + p["eye_dx"], p["eye_y"] + dy),
        (p["cx"], p["nose_y"] + dy),
        (p["cx"] - p["mouth_half"], p["mouth_y"] + dy),
        (p["cx"] + p["mouth_half"], p["mouth_y"] + dy),
    ]
    return np.array(pts, dtype=np.float64) * R


def render_toy_face(p, domain: str, resolution: int, rng=None, supersample: int = 4,
                    noise: float = 0.01):
    """Render one toy face; returns ``(uint8 HxWx3, mask HxW in [0,1], landmarks Kx2)``."""
    pal = PALETTES[domain]
    R = resolution
    S = R * supersample
    c = (np.arange(S) + 0.5) / S  # normalized coordinates of subpixel centres
    X, Y = np.meshgrid(c, c)
    dy = p["cy"] - 0.5
    head = ((X - p["cx"]) / p["head_rx"]) ** 2 + ((Y - p["cy"]) / p["head_ry"]) ** 2 <= 1
    feat = np.zeros_like(head)
    es = pal["eye_scale"]
    for sx in (-1, 1):
        ex, ey = p["cx"] + sx * p["eye_dx"], p["eye_y"] + dy
        feat |= ((X - ex) / (p["eye_rx"] * es)) ** 2 + ((Y - ey) / (p["eye_ry"] * es)) ** 2 <= 1
    stroke = pal["stroke"]
    feat |= (X - p["cx"]) ** 2 + (Y - p["nose_y"] - dy) ** 2 <= (stroke * 0.9) ** 2
    # mouth: parabola with corners at (cx +- half, mouth_y), lowest at the middle
    t = np.linspace(-1, 1, 121)
    mx = p["cx"] + t * p["mouth_half"]
    my = p["mouth_y"] + dy + p["mouth_curve"] * (1 - t ** 2)
    band = (Y > my.min() - stroke) & (Y < my.max() + stroke) & \
        (X > mx.min() - stroke) & (X < mx.max() + stroke)
    yy, xx = Y[band], X[band]
    d2 = np.min((xx[:, None] - mx[None]) ** 2 + (yy[:, None] - my[None]) ** 2, axis=1)
    mouth = np.zeros_like(head)
    mouth[band] = d2 <= (stroke / 2) ** 2
    feat |= mouth
    skin = np.clip(np.array(pal["skin"]) + p["skin_shift"], 0, 1)
    img = np.empty((S, S, 3))
    img[:] = pal["background"]
    img[head] = skin
    img[feat & head] = pal["feature"]
    img = img.reshape(R, supersample, R, supersample, 3).mean(axis=(1, 3))
    mask = head.reshape(R, supersample, R, supersample).mean(axis=(1, 3))
    if rng is not None and noise > 0:
        img = img + rng.normal(0, noise, img.shape)
    img8 = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img8, mask, toy_landmarks(p, R)


def make_toy_domains(out_dir, n_per_domain: int = 64, resolution: int = 64, seed: int = 0,
                     frames_per_identity: int = 8, n_paired: int = 0):
    """Render domains X and Y (and optionally a paired subset) with sidecars.

    Layout: ``out_dir/X``, ``out_dir/Y`` and, when ``n_paired > 0``,
    ``out_dir/paired_X`` / ``out_dir/paired_Y`` holding the same faces drawn
    in both styles under identical ids. Returns the directory paths.
    """
    if n_per_domain < 8:
        raise ValueError("n_per_domain must be >= 8")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    dirs = {}
    for dom in ("X", "Y"):
        d = out / dom
        d.mkdir(parents=True, exist_ok=True)
        n_ids = max(2, int(np.ceil(n_per_domain / frames_per_identity)))
        bases = [_identity_params(rng) for _ in range(n_ids)]
        for i in range(n_per_domain):
            ident = i % n_ids
            frame = i // n_ids
            p = _frame_params(bases[ident], rng)
            img, mask, lmk = render_toy_face(p, dom, resolution, rng)
            image_id = f"{dom.lower()}id{ident:03d}_{frame:03d}"
            Image.fromarray(img).save(d / f"{image_id}.png")
            write_sidecars(d, image_id, mask, lmk)
        SidecarManifest(resolution, len(TOY_LANDMARKS), (0, 1)).save(d)
        ingest_directory(d, dom).save()
        dirs[dom] = d
    if n_paired:
        px, py = out / "paired_X", out / "paired_Y"
        px.mkdir(parents=True, exist_ok=True)
        py.mkdir(parents=True, exist_ok=True)
        n_ids = max(2, int(np.ceil(n_paired / frames_per_identity)))
        bases = [_identity_params(rng) for _ in range(n_ids)]
        for i in range(n_paired):
            ident, frame = i % n_ids, i // n_ids
            p = _frame_params(bases[ident], rng)
            image_id = f"pid{ident:03d}_{frame:03d}"
            for dom, d in (("X", px), ("Y", py)):
                img, mask, lmk = render_toy_face(p, dom, resolution, rng)
                Image.fromarray(img).save(d / f"{image_id}.png")
                write_sidecars(d, image_id, mask, lmk)
        for dom, d in (("X", px), ("Y", py)):
            SidecarManifest(resolution, len(TOY_LANDMARKS), (0, 1)).save(d)
            m = ingest_directory(d, dom)
            m.paired_with = {i: i for i in m.ids}
            m.save()
            (d / "pairs.json").write_text(json.dumps(m.paired_with))
        dirs["paired_X"], dirs["paired_Y"] = px, py
    return dirs


# --- loading and sampling -----------------------------------------------

@dataclass
class LoadedDomain:
    """A manifest materialized as tensors at one resolution."""

    ids: list
    images: torch.Tensor            # N, 3, R, R in [-1, 1]
    masks: torch.Tensor             # N, R, R
    landmarks: torch.Tensor         # N, K, 2 (zeros where missing)
    landmark_valid: torch.Tensor    # N bool
    domain: str = "X"
    eye_indices: tuple = (0, 1)

    def __len__(self):
        return len(self.ids)

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return {"ids": [self.ids[i] for i in idx.tolist()], "images": self.images[idx],
                "masks": self.masks[idx], "landmarks": self.landmarks[idx],
                "landmark_valid": self.landmark_valid[idx]}

    def resized(self, resolution: int) -> "LoadedDomain":
        r0 = self.images.shape[-1]
        if r0 == resolution:
            return self
        imgs = F.interpolate(self.images, size=(resolution, resolution), mode="bilinear",
                             align_corners=False, antialias=resolution < r0)
        masks = F.interpolate(self.masks[:, None], size=(resolution, resolution),
                              mode="bilinear", align_corners=False)[:, 0].clamp(0, 1)
        return LoadedDomain(self.ids, imgs.clamp(-1, 1), masks,
                            self.landmarks * (resolution / r0), self.landmark_valid,
                            self.domain, self.eye_indices)


def load_domain(manifest: DatasetManifest, resolution: int, strict: bool = True) -> LoadedDomain:
    root = Path(manifest.root)
    store = SidecarStore(root, strict=strict) if (root / MANIFEST_NAME).exists() else None
    imgs, masks, lmks, valid = [], [], [], []
    k = store.manifest.landmark_count if store else 5
    for image_id in manifest.ids:
        with Image.open(manifest.path_of(image_id)) as im:
            arr = np.asarray(im.convert("RGB"))
        h, w = arr.shape[:2]
        imgs.append(preprocess(arr, resolution))
        if store is None:
            masks.append(torch.ones(resolution, resolution))
            lmks.append(torch.zeros(k, 2))
            valid.append(False)
            continue
        mask, lm = load_sidecars(image_id, store, store.manifest.resolution)
        # sidecars are authored on the uncropped frame, long side = manifest resolution
        to_file = max(h, w) / store.manifest.resolution
        mt = mask.weights
        if mt.shape[-1] != h or mt.shape[-2] != w:
            mt = F.interpolate(mt[None, None], size=(h, w), mode="bilinear",
                               align_corners=False)[0, 0]
        top, left, side = crop_box(h, w)
        mt = mt[top:top + side, left:left + side]
        if side != resolution:
            mt = F.interpolate(mt[None, None], size=(resolution, resolution), mode="bilinear",
                               align_corners=False)[0, 0]
        masks.append(mt.clamp(0, 1))
        if lm is None:
            lmks.append(torch.zeros(k, 2))
            valid.append(False)
        else:
            pts = lm.points * to_file
            lmks.append(preprocess_landmarks(pts, h, w, resolution).float())
            valid.append(True)
    eye = store.manifest.eye_indices if store else (0, 1)
    return LoadedDomain(list(manifest.ids), torch.stack(imgs), torch.stack(masks),
                        torch.stack(lmks), torch.tensor(valid), manifest.domain, tuple(eye))


def unpaired_sampler(train_x: LoadedDomain, train_y: LoadedDomain, batch: int,
                     seed: int = 0) -> Iterator[tuple[dict, dict]]:
    """Endless stream of independently shuffled ``(batch_x, batch_y)`` pairs."""
    for name, dom in (("X", train_x), ("Y", train_y)):
        if batch > len(dom):
            raise ValueError(f"batch size {batch} exceeds domain {name} size {len(dom)}")
    gx = torch.Generator().manual_seed(seed)
    gy = torch.Generator().manual_seed(seed + 7919)

    def _stream(dom, g):
        while True:
            perm = torch.randperm(len(dom), generator=g)
            for s in range(0, len(dom) - batch + 1, batch):
                yield perm[s:s + batch]

    for ix, iy in zip(_stream(train_x, gx), _stream(train_y, gy)):
        yield train_x.batch(ix), train_y.batch(iy)


def paired_sampler(px: LoadedDomain, py: LoadedDomain, batch: int, seed: int = 0):
    """Aligned ``(x, y_truth)`` batches; both domains share ids and order."""
    if px.ids != py.ids:
        raise ValueError("paired domains must list identical ids in the same order")
    if batch > len(px):
        raise ValueError(f"batch size {batch} exceeds paired set size {len(px)}")
    g = torch.Generator().manual_seed(seed)
    while True:
        perm = torch.randperm(len(px), generator=g)
        for s in range(0, len(px) - batch + 1, batch):
            idx = perm[s:s + batch]
            yield px.batch(idx), py.batch(idx)
