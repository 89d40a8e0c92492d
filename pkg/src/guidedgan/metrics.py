"""Evaluation protocols and stability indicators.

Every number produced here is tagged with the protocol it was measured
under (``paired``, ``unpaired_cycle`` or ``reconstruction``); cycle
reconstruction PSNR/SSIM must never share a table column with paired scores
without the footnote markers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import to_unit_range
from .guidance import FrozenEncoder, nearest_indices, pooled_descriptor, extract_features

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
PROTOCOLS = ("paired", "unpaired_cycle", "reconstruction")


class ProtocolError(ValueError):
    pass


class ToyFeatureExtractor(nn.Module):
    """Seeded random conv features, pooled to ``dim`` values per image.

    Stands in for Inception pool features at desk scale. Input is ``[-1, 1]``.
    """

    name = "toy_random_conv"

    def __init__(self, dim: int = 16, seed: int = 2024):
        super().__init__()
        self.dim = dim
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList([nn.Conv2d(3, 16, 3, 2, 1), nn.Conv2d(16, 32, 3, 2, 1),
                                    nn.Conv2d(32, 32, 3, 2, 1)])
        self.proj = nn.Linear(32 * 2 + 3 * 2, dim)
        for m in list(self.convs) + [self.proj]:
            with torch.no_grad():
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x):
        color = torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], 1)
        h = x
        for c in self.convs:
            h = F.leaky_relu(c(h), 0.2)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3))], 1)
        return self.proj(torch.cat([pooled, color], 1))


def extract_all(extractor, images, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(extractor(images[s:s + batch_size]).detach().double().cpu().numpy())
    return np.concatenate(out, 0)


# --- distribution distance -------------------------------------------------

def _psd_sqrt(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    w = np.clip(w, 0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = 1e-6) -> float:
    """``|mu1 - mu2|^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^{1/2})``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric ``cov1^{1/2} cov2 cov1^{1/2}``, which shares its spectrum with
    ``cov1 cov2``.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ValueError("frechet_distance: dimension mismatch")
    cov1, cov2 = (cov1 + cov1.T) / 2, (cov2 + cov2.T) / 2

    def tr_sqrt(c1, c2):
        s1 = _psd_sqrt(c1)
        m = s1 @ c2 @ s1
        w = np.linalg.eigvalsh((m + m.T) / 2)
        return float(np.sqrt(np.clip(w, 0, None)).sum())

    try:
        tr_covmean = tr_sqrt(cov1, cov2)
        if not math.isfinite(tr_covmean):
            raise np.linalg.LinAlgError("non-finite")
    except np.linalg.LinAlgError:
        off = eps * np.eye(cov1.shape[0])
        tr_covmean = tr_sqrt(cov1 + off, cov2 + off)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_covmean)


def fit_moments(features):
    f = np.asarray(features, np.float64)
    return f.mean(0), np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])


def fid_protocol(set_a, set_b, extractor, n_splits: int = 10, seed: int = 0):
    """Mean and std of the Frechet distance over ``n_splits`` equal seeded chunks.

    The larger set is truncated to the smaller size by seeded subsampling;
    both sets are then split with the same permutation.
    """
    na, nb = len(set_a), len(set_b)
    rng = np.random.default_rng(seed)
    n = min(na, nb)
    if na > n:
        set_a = set_a[np.sort(rng.choice(na, n, replace=False))]
    if nb > n:
        set_b = set_b[np.sort(rng.choice(nb, n, replace=False))]
    fa, fb = extract_all(extractor, set_a), extract_all(extractor, set_b)
    d = fa.shape[1]
    per = n // n_splits
    if per < d + 1:
        raise ValueError(f"rank-deficient covariance: {per} samples per split for {d}-dim features; "
                         "reduce splits or use toy extractor")
    perm = rng.permutation(n)
    scores = []
    for s in range(n_splits):
        idx = perm[s * per:(s + 1) * per]
        scores.append(frechet_distance(*fit_moments(fa[idx]), *fit_moments(fb[idx])))
    return float(np.mean(scores)), float(np.std(scores))


# --- pixel fidelity -------------------------------------------------------

def psnr(a, b) -> float:
    """PSNR in dB for ``[0, 1]`` images; identical inputs return the 99 dB cap."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    c = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-c ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Single-scale SSIM with a Gaussian window over valid positions, averaged over channels."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError("ssim: shape mismatch")
    while a.ndim < 4:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} window")
    n, c, h, w = a.shape
    kern = gaussian_window(window, sigma)[None, None].expand(c, 1, -1, -1)
    conv = lambda t: F.conv2d(t, kern, groups=c)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = conv(a), conv(b)
    saa = conv(a * a) - mu_a ** 2
    sbb = conv(b * b) - mu_b ** 2
    sab = conv(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())


def _batched(fn, a, b):
    return float(np.mean([fn(a[i], b[i]) for i in range(len(a))]))


@torch.no_grad()
def cycle_psnr_ssim(x_test, G, F_, batch_size: int = 32):
    """PSNR/SSIM between ``x`` and ``F(G(x))`` in ``[0, 1]`` space (unpaired_cycle protocol)."""
    recs = []
    for s in range(0, len(x_test), batch_size):
        xb = x_test[s:s + batch_size]
        recs.append(F_(G(xb)).float())
    rec = torch.cat(recs)
    a, b = to_unit_range(x_test.double()), to_unit_range(rec.double())
    return _batched(psnr, a, b), _batched(ssim, a, b)


@torch.no_grad()
def paired_psnr_ssim(pred, truth):
    a, b = to_unit_range(pred.double()), to_unit_range(truth.double())
    return _batched(psnr, a, b), _batched(ssim, a, b)


# --- perceptual / identity / geometry ------------------------------------

def _unit_feature_distance(fa, fb) -> torch.Tensor:
    """Per-image mean over taps of mean squared difference of channel-normalized maps."""
    dists = []
    for a, b in zip(fa, fb):
        a = F.normalize(a, dim=1, eps=1e-10)
        b = F.normalize(b, dim=1, eps=1e-10)
        dists.append(((a - b) ** 2).mean(dim=(1, 2, 3)))
    return torch.stack(dists).mean(0)


@torch.no_grad()
def pseudo_pair_lpips(translated, set_y, extractor: FrozenEncoder, return_indices: bool = False):
    """Perceptual distance of each translated image to its nearest target in frozen feature space."""
    if len(translated) == 0 or len(set_y) == 0:
        raise ValueError("pseudo_pair_lpips needs non-empty sets")
    ft = extract_features(translated, extractor)
    fy = extract_features(set_y, extractor)
    idx = nearest_indices(pooled_descriptor(ft), pooled_descriptor(fy))
    dist = _unit_feature_distance(ft, [f[idx] for f in fy])
    val = float(dist.mean())
    return (val, idx) if return_indices else val


@torch.no_grad()
def paired_lpips(pred, truth, extractor: FrozenEncoder):
    return float(_unit_feature_distance(extract_features(pred, extractor),
                                        extract_features(truth, extractor)).mean())


@torch.no_grad()
def id_sim(set_a, set_b_aligned, encoder: FrozenEncoder):
    if len(set_a) != len(set_b_aligned):
        raise ValueError("id_sim: length mismatch")
    ea, eb = encoder(set_a), encoder(set_b_aligned)
    ea, eb = F.normalize(ea.double(), dim=1), F.normalize(eb.double(), dim=1)
    return float((ea * eb).sum(1).mean())


def landmark_nme(pred, truth, eye_indices=(0, 1)):
    """Mean per-landmark error over interocular distance, averaged over images.

    Samples with zero interocular distance are skipped with a warning;
    returns ``(nme, n_skipped)``.
    """
    pred = torch.as_tensor(np.asarray(pred), dtype=torch.float64) if not isinstance(pred, torch.Tensor) \
        else pred.double()
    truth = torch.as_tensor(np.asarray(truth), dtype=torch.float64) if not isinstance(truth, torch.Tensor) \
        else truth.double()
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    if pred.shape != truth.shape:
        raise ValueError("landmark_nme: landmark count mismatch")
    i, j = eye_indices
    io = (truth[:, i] - truth[:, j]).norm(dim=-1)
    err = (pred - truth).norm(dim=-1).mean(-1)
    ok = io > 0
    skipped = int((~ok).sum())
    if skipped:
        log.warning("landmark_nme: skipped %d sample(s) with zero interocular distance", skipped)
    if not ok.any():
        return float("nan"), skipped
    return float((err[ok] / io[ok]).mean()), skipped


@torch.no_grad()
def timed_inference(G, n_images: int = 1000, resolution: int = 256, warmup: int = 50,
                    device="cpu", seed: int = 0) -> float:
    """Milliseconds per image at batch 1, inputs pre-generated, warmup excluded."""
    device = torch.device(device)
    if hasattr(G, "eval"):
        G.eval()
    g = torch.Generator().manual_seed(seed)
    inputs = [torch.rand(1, 3, resolution, resolution, generator=g).to(device) * 2 - 1
              for _ in range(min(n_images, 16))]
    sync = (lambda: torch.cuda.synchronize(device)) if device.type == "cuda" else (lambda: None)
    for i in range(warmup):
        G(inputs[i % len(inputs)])
    sync()
    t0 = time.perf_counter()
    for i in range(n_images):
        G(inputs[i % len(inputs)])
    sync()
    return (time.perf_counter() - t0) * 1000.0 / n_images


# --- stability --------------------------------------------------------------

def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "total" not in rows[0]:
        raise ValueError(f"malformed loss log {path}: missing 'total' column")
    return rows


def _column(rows, name):
    vals = []
    for r in rows:
        v = r.get(name, "")
        vals.append(float(v) if v not in ("", None) else float("nan"))
    return np.array(vals)


def epochs_to_stabilization(window_means, rel_tol: float = 0.02, patience: int = 5) -> int:
    """First 1-based window after which the mean moves by < ``rel_tol`` for ``patience`` windows.

    Changes past the end of the log are not required, but at least one
    subsequent window must exist. Returns -1 if the log never settles.
    """
    m = np.asarray(window_means, np.float64)
    if len(m) < 2:
        raise ValueError("need at least 2 windows")
    change = np.abs(np.diff(m)) / np.maximum(np.abs(m[:-1]), 1e-12)
    for e in range(len(m) - 1):
        nxt = change[e:e + patience]
        if len(nxt) and (nxt < rel_tol).all():
            return e + 1
    return -1


def stability_indicators(losses, steps_per_epoch: int = 100, tail: int | None = None,
                         rel_tol: float = 0.02, patience: int = 5, collapse_frac: float = 0.1):
    """``(d_loss_variance, epochs_to_stabilization, collapse_events)`` from a loss log.

    ``d_loss_variance`` is the variance of ``gan_D_x + gan_D_y`` over the last
    ``tail`` steps (default: final 25%).
    """
    rows = read_loss_log(losses) if isinstance(losses, (str, Path)) else list(losses)
    if not rows:
        raise ValueError("malformed loss log: no rows")
    n = len(rows)
    if n < 2 * steps_per_epoch:
        raise ValueError(f"loss log has {n} rows; need at least 2 windows of {steps_per_epoch}")
    d = _column(rows, "gan_D_x") + _column(rows, "gan_D_y") if "gan_D_x" in rows[0] \
        else _column(rows, "gan_D")
    k = tail if tail is not None else max(1, int(math.ceil(0.25 * n)))
    tail_vals = d[-k:]
    tail_vals = tail_vals[np.isfinite(tail_vals)]
    d_var = float(np.var(tail_vals)) if len(tail_vals) else float("nan")
    total = _column(rows, "total")
    n_win = n // steps_per_epoch
    means = total[:n_win * steps_per_epoch].reshape(n_win, steps_per_epoch).mean(1)
    ep = epochs_to_stabilization(means, rel_tol, patience)
    collapse = 0
    if rows and "probe_std" in rows[0]:
        probe = _column(rows, "probe_std")
        probe = probe[np.isfinite(probe)]
        if len(probe) > 1 and probe[0] > 0:
            collapse = int((probe[1:] < collapse_frac * probe[0]).sum())
    return d_var, ep, collapse


# --- reports ----------------------------------------------------------------

@dataclass
class MetricReport:
    model: str
    protocol_tag: str
    fid_mean: float = float("nan")
    fid_std: float = float("nan")
    lpips_like_mean: float = float("nan")
    psnr_mean: float = float("nan")
    ssim_mean: float = float("nan")
    id_sim_mean: float = float("nan")
    nme_mean: float = float("nan")
    ms_per_image: float = float("nan")
    d_loss_variance: float = float("nan")
    epochs_to_stabilization: int = -1
    collapse_events: int = 0
    lpips_label: str = "lpips_like"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol_tag not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol_tag!r}")

    def to_json(self):
        d = asdict(self)
        tagged = {}
        for k, v in d.items():
            if k in ("model", "protocol_tag", "lpips_label", "extra"):
                tagged[k] = v
            else:
                tagged[k] = {"value": _json_num(v), "protocol": self.protocol_tag}
        tagged["extra"] = {k: {"value": _json_num(v), "protocol": self.protocol_tag}
                           for k, v in self.extra.items()}
        return tagged


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


FOOTNOTES = {
    "unpaired_cycle": ("†", "PSNR/SSIM are cycle-reconstruction scores (x vs. F(G(x))); "
                       "no paired ground truth."),
    "paired": ("‡", "Evaluated on the curated paired test subset (pose/alignment controlled)."),
    "reconstruction": ("", ""),
}


def render_markdown(reports, footnotes: bool = True) -> str:
    """Comparison table with one row per model and six metric columns."""
    tags = {r.protocol_tag for r in reports}
    if not footnotes and "unpaired_cycle" in tags and "paired" in tags:
        raise ProtocolError("refusing to tabulate cycle-reconstruction and paired PSNR/SSIM in one "
                            "column without footnote markers")
    lines = ["| Model | FID ↓ | LPIPS-like ↓ | PSNR ↑ | SSIM ↑ | NME ↓ | Time (ms/img) |",
             "|---|---|---|---|---|---|---|"]
    used = []
    for r in reports:
        mark_model = mark_px = ""
        if footnotes and r.protocol_tag == "paired":
            mark_model = FOOTNOTES["paired"][0]
            used.append("paired")
        if footnotes and r.protocol_tag == "unpaired_cycle":
            mark_px = FOOTNOTES["unpaired_cycle"][0]
            used.append("unpaired_cycle")
        label = f"{r.model} ({r.protocol_tag}){mark_model}"
        fid = f"{_fmt(r.fid_mean)} ± {_fmt(r.fid_std)}"
        lines.append(f"| {label} | {fid} | {_fmt(r.lpips_like_mean, 3)} | {_fmt(r.psnr_mean)}{mark_px} | "
                     f"{_fmt(r.ssim_mean, 3)}{mark_px} | {_fmt(r.nme_mean, 3)} | {_fmt(r.ms_per_image)} |")
    if footnotes and used:
        lines.append("")
        lines.append("*Notes.*")
        for tag in ("unpaired_cycle", "paired"):
            if tag in used:
                mark, text = FOOTNOTES[tag]
                lines.append(f"{mark} {text}  ")
    return "\n".join(lines) + "\n"


def _fmt(v, digits=2):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "n/a"
    return f"{v:.{digits}f}"


def write_reports(reports, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps({"reports": [r.to_json() for r in reports]}, indent=2))
    (out / "report.md").write_text(render_markdown(reports))
    return out / "report.json", out / "report.md"
