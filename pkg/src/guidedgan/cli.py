"""Command-line entry point: ``guidedgan {train,translate,evaluate,ablate,plot,make-toy-data}``.

Configuration is a YAML file of sections mirroring the dataclasses of the
other modules. Every section is validated (unknown keys rejected, field
invariants checked) before any compute, and the resolved config is echoed
to ``<output_dir>/config.snapshot`` first thing.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image
from torch import nn

from .baselines import Pix2PixModel, Pix2pixConfig, VaeConfig, VaeModel
from .data_pipeline import (SplitSpec, ingest_directory, load_domain, make_toy_domains, paired_sampler,
                            preprocess, split, unpaired_sampler)
from .guidance import ToyLandmarkDetector, toy_identity_encoder, toy_perceptual_backbone
from .losses import LossWeights, PatchSampleSpec
from .metrics import (MetricReport, ProtocolError, ToyFeatureExtractor, cycle_psnr_ssim,
                      epochs_to_stabilization, fid_protocol, id_sim, landmark_nme, paired_lpips,
                      paired_psnr_ssim, pseudo_pair_lpips, read_loss_log, stability_indicators,
                      timed_inference, write_reports, _column)
from .networks import DiscriminatorConfig, GeneratorConfig
from .train_engine import (AugmentPolicy, GuidedCycleGAN, RunOptions, TrainSchedule, fit,
                           load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

MODELS = ("cyclegan_guided", "vae", "pix2pix")
PRECISIONS = ("fp32", "mixed")
SNAPSHOT = "config.snapshot"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration or command-line usage (exit code 2)."""


@dataclass
class DataConfig:
    root_x: str | None = None
    root_y: str | None = None
    paired_x: str | None = None
    paired_y: str | None = None
    resolution: int | None = None   # load resolution; defaults to the largest scheduled one
    train_frac: float = 0.8
    split_seed: int = 0
    strict_sidecars: bool = True

    def __post_init__(self):
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")


@dataclass
class MetricOptions:
    n_splits: int = 10
    feature_dim: int = 16
    timing_images: int = 1000
    timing_resolution: int = 256
    timing_warmup: int = 50
    use_ema: bool = True
    stability_tail: int | None = None

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if self.timing_images < 1:
            raise ValueError("timing_images must be >= 1")


SECTIONS = {
    "data": DataConfig, "schedule": TrainSchedule, "weights": LossWeights,
    "generator": GeneratorConfig, "discriminator": DiscriminatorConfig, "augment": AugmentPolicy,
    "patch": PatchSampleSpec, "vae": VaeConfig, "pix2pix": Pix2pixConfig, "run": RunOptions,
    "metrics": MetricOptions,
}


@dataclass
class RunConfig:
    model: str = "cyclegan_guided"
    seed: int = 0
    output_dir: str = "runs/default"
    precision: str = "fp32"
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    schedule: TrainSchedule = dataclasses.field(default_factory=TrainSchedule)
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    generator: GeneratorConfig = dataclasses.field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = dataclasses.field(default_factory=DiscriminatorConfig)
    augment: AugmentPolicy = dataclasses.field(default_factory=AugmentPolicy)
    patch: PatchSampleSpec = dataclasses.field(default_factory=PatchSampleSpec)
    vae: VaeConfig = dataclasses.field(default_factory=VaeConfig)
    pix2pix: Pix2pixConfig = dataclasses.field(default_factory=Pix2pixConfig)
    run: RunOptions = dataclasses.field(default_factory=RunOptions)
    metrics: MetricOptions = dataclasses.field(default_factory=MetricOptions)

    @property
    def load_resolution(self) -> int:
        if self.model == "vae":
            return self.vae.resolution
        return self.data.resolution or max(self.schedule.resolutions)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# --- validation -------------------------------------------------------------

def _check_type(path, value, default, annotation):
    """Light field typing driven by the dataclass default/annotation."""
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return None
        raise ConfigError(f"{path}: must not be null")
    if isinstance(default, bool) or ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or ann == "float":
        if isinstance(value, str):
            # YAML 1.1 reads "2e-4" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) or "str" in ann:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _build_section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _check_type(f"{name}.{key}", value, getattr(defaults, key), known[key].type)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a nested mapping into a :class:`RunConfig`; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {"model", "seed", "output_dir", "precision"}
    unknown = sorted(set(raw) - top - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    model = raw.get("model", "cyclegan_guided")
    if model not in MODELS:
        raise ConfigError(f"model: expected one of {', '.join(MODELS)}, got {model!r}")
    precision = raw.get("precision", "fp32")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision: expected one of {', '.join(PRECISIONS)}, got {precision!r}")
    seed = _check_type("seed", raw.get("seed", 0), 0, "int")
    out = _check_type("output_dir", raw.get("output_dir", "runs/default"), "", "str")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()}
    cfg = RunConfig(model, seed, out, precision, **sections)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: RunConfig):
    for r in cfg.schedule.resolutions:
        if r < 64:
            raise ConfigError(f"schedule.resolutions: {r} is below the minimum resolution 64")
    if cfg.model == "vae" and cfg.vae.resolution % 16:
        raise ConfigError("vae.resolution must be a multiple of 16")
    if cfg.model == "pix2pix" and not (cfg.data.paired_x and cfg.data.paired_y):
        raise ConfigError("data.paired_x/data.paired_y: pix2pix requires paired data")


def load_config(path, overrides=()) -> RunConfig:
    """Read YAML, apply ``section.key=value`` overrides, validate."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    return config_from_dict(apply_overrides(raw, overrides))


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def write_snapshot(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / SNAPSHOT
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def run_device() -> torch.device:
    return torch.device(os.environ.get("RUN_DEVICE", "cpu"))


# --- data ---------------------------------------------------------------------

def _require_dir(path, what):
    if not path:
        raise ConfigError(f"data.{what} is not set")
    if not Path(path).is_dir():
        raise ConfigError(f"data.{what}: directory not found: {path}")
    return Path(path)


def load_splits(cfg: RunConfig, need_unpaired=True, need_paired=False) -> dict:
    """Identity-disjoint train/test splits as :class:`LoadedDomain` objects."""
    res = cfg.load_resolution
    spec = SplitSpec(cfg.data.train_frac, seed=cfg.data.split_seed)
    out = {}
    wanted = []
    if need_unpaired:
        wanted += [("X", "root_x"), ("Y", "root_y")]
    if need_paired:
        wanted += [("paired_X", "paired_x"), ("paired_Y", "paired_y")]
    for key, attr in wanted:
        root = _require_dir(getattr(cfg.data, attr), attr)
        manifest = ingest_directory(root, key[-1])
        tr, te = split(manifest, spec)
        out[key] = (load_domain(tr, res, cfg.data.strict_sidecars),
                    load_domain(te, res, cfg.data.strict_sidecars))
    return out


# --- model construction -------------------------------------------------------

def unet_depth(resolution: int) -> int:
    return int(round(math.log2(resolution)))


def build_model(cfg: RunConfig, device=None, hybrid=False):
    device = device or run_device()
    if cfg.model == "cyclegan_guided":
        return GuidedCycleGAN(cfg.generator, cfg.discriminator, cfg.weights, cfg.patch, cfg.schedule,
                              cfg.augment, seed=cfg.seed, precision=cfg.precision, device=device,
                              hybrid=hybrid)
    if cfg.model == "vae":
        return VaeModel(cfg.vae, seed=cfg.seed, device=device)
    return Pix2PixModel(cfg.pix2pix, seed=cfg.seed, device=device,
                        depth=unet_depth(cfg.load_resolution))


class IdentityStub:
    """Translator that returns its input; used to test the I/O plumbing."""

    kind = "identity"

    def translator(self, direction="XY", use_ema=True):
        return nn.Identity()

    def state_dict(self):
        return {}

    def load_state_dict(self, sd):
        pass


def model_from_checkpoint(path, device=None):
    """``(model, cfg)`` rebuilt from a checkpoint's embedded config."""
    payload = load_checkpoint(path)
    kind = payload["model_kind"]
    if kind == "identity":
        res = payload.get("extra", {}).get("resolution", 64)
        return IdentityStub(), config_from_dict({"data": {"resolution": res}})
    cfg = config_from_dict(payload["config"])
    hybrid = bool(payload.get("extra", {}).get("hybrid", False))
    model = build_model(cfg, device=device, hybrid=hybrid)
    model.load_state_dict(payload["state"])
    return model, cfg


def save_identity_stub(path, resolution: int = 64):
    return save_checkpoint(path, IdentityStub(), extra={"resolution": resolution})


# --- train ----------------------------------------------------------------------

BASELINE_COLUMNS = {"vae": ("step", "recon", "kl", "total"),
                    "pix2pix": ("step", "gan_G", "l1", "gan_D", "total")}


def _fit_baseline(model, cfg: RunConfig, splits, run_dir: Path):
    sched = cfg.schedule
    if model.kind == "vae":
        tx = splits["X"][0]
        stream = unpaired_sampler(tx, tx, min(cfg.vae.batch_size, len(tx)), cfg.seed)
        step = lambda it: model.train_step(next(stream)[0], it)
    else:
        px, py = splits["paired_X"][0], splits["paired_Y"][0]
        stream = paired_sampler(px, py, sched.batch_size, cfg.seed)

        def step(it):
            bx, by = next(stream)
            return model.train_step(bx, by, it)
    cols = BASELINE_COLUMNS[model.kind]
    with open(run_dir / "losses.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for it in range(sched.total_iters):
            report = step(it)
            if not report.is_finite():
                raise FloatingPointError(f"non-finite {model.kind} loss at step {it}: "
                                         f"{report.components}")
            wr.writerow([repr(float(v)) if not isinstance(v, int) else v
                         for v in report.row(cols)])
            every = cfg.run.checkpoint_every
            if every and (it + 1) % every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"iter_{it + 1}.ckpt", model, cfg.to_dict())


def cmd_train(cfg: RunConfig) -> Path:
    """Train the configured model and return its run directory."""
    run_dir = Path(cfg.output_dir)
    write_snapshot(cfg, run_dir)
    torch.manual_seed(cfg.seed)
    need_paired = cfg.model == "pix2pix" or (
        cfg.model == "cyclegan_guided" and bool(cfg.data.paired_x) and cfg.run.hybrid_every > 0)
    splits = load_splits(cfg, need_unpaired=cfg.model != "pix2pix", need_paired=need_paired)
    model = build_model(cfg, hybrid=need_paired)
    if cfg.model == "cyclegan_guided":
        paired = (splits["paired_X"][0], splits["paired_Y"][0]) if need_paired else None
        fit(model, splits["X"][0], splits["Y"][0], run_dir, cfg.run, paired=paired,
            extractor=ToyFeatureExtractor(cfg.metrics.feature_dim), seed=cfg.seed)
    else:
        _fit_baseline(model, cfg, splits, run_dir)
    save_checkpoint(run_dir / "checkpoints" / "final.ckpt", model, cfg.to_dict(),
                    extra={"hybrid": need_paired and cfg.model == "cyclegan_guided"})
    log.info("run directory %s", run_dir)
    return run_dir


# --- translate --------------------------------------------------------------------

@torch.no_grad()
def cmd_translate(checkpoint, input_dir, direction: str, out_dir, batch_size: int = 16) -> list:
    """Apply the (EMA) generator to every image of ``input_dir``; returns written paths."""
    direction = direction.replace("→", "").replace("->", "").replace("2", "").upper()
    if direction not in ("XY", "YX"):
        raise ConfigError(f"direction must be X->Y or Y->X, got {direction!r}")
    model, cfg = model_from_checkpoint(checkpoint)
    try:
        manifest = ingest_directory(input_dir, direction[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res = cfg.load_resolution
    G = model.translator(direction, use_ema=cfg.metrics.use_ema)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = manifest.ids
    written = []
    device = next(iter(G.parameters()), torch.zeros(())).device
    for s in range(0, len(ids), batch_size):
        chunk = ids[s:s + batch_size]
        imgs = []
        for image_id in chunk:
            with Image.open(manifest.path_of(image_id)) as im:
                arr = np.asarray(im.convert("RGB"))
            try:
                imgs.append(preprocess(arr, res))
            except ValueError as exc:
                raise ConfigError(f"{image_id}: {exc}") from None
        y = G(torch.stack(imgs).to(device)).float().cpu().clamp(-1, 1)
        for image_id, img in zip(chunk, y):
            arr = ((img.permute(1, 2, 0).numpy() + 1) * 127.5).round().clip(0, 255).astype(np.uint8)
            p = out / f"{image_id}.png"
            Image.fromarray(arr).save(p)
            written.append(p)
    return written


# --- evaluate -----------------------------------------------------------------------

def check_protocol(kind: str, protocol: str) -> str:
    """Return the report tag for ``kind`` under ``protocol`` or raise :class:`ProtocolError`."""
    if protocol not in ("paired", "unpaired"):
        raise ProtocolError(f"unknown protocol {protocol!r}; expected paired or unpaired")
    if kind == "pix2pix" and protocol != "paired":
        raise ProtocolError("protocol rule: pix2pix requires the paired protocol "
                            "(aligned ground truth on the curated paired test subset)")
    if kind == "cyclegan_guided" and protocol != "unpaired":
        raise ProtocolError("protocol rule: cyclegan_guided is scored under the unpaired protocol "
                            "(cycle-reconstruction PSNR/SSIM, pseudo-pair LPIPS)")
    if kind == "vae":
        return "reconstruction"
    return "paired" if protocol == "paired" else "unpaired_cycle"


def _apply(G, x, batch_size=64):
    with torch.no_grad():
        return torch.cat([G(x[s:s + batch_size]).float() for s in range(0, len(x), batch_size)])


def _fid(a, b, extractor, n_splits, extra):
    # small paired subsets cannot support all splits at the feature dim
    feasible = min(n_splits, min(len(a), len(b)) // (extractor.dim + 1))
    extra["fid_splits"] = feasible
    if feasible < 1:
        return float("nan"), float("nan")
    return fid_protocol(a, b, extractor, feasible)


def evaluate_model(model, cfg: RunConfig, protocol: str, test: dict, label: str | None = None,
                   run_dir=None) -> MetricReport:
    """Full metric report for one model on its test split(s)."""
    tag = check_protocol(model.kind, protocol)
    m = cfg.metrics
    extractor = ToyFeatureExtractor(m.feature_dim)
    perceptual = toy_perceptual_backbone()
    identity = toy_identity_encoder()
    detector = ToyLandmarkDetector()
    extra = {}
    G = model.translator("XY", use_ema=m.use_ema)
    if tag == "unpaired_cycle":
        x, y = test["X"], test["Y"]
        gx = _apply(G, x.images)
        fid = _fid(gx, y.images, extractor, m.n_splits, extra)
        lp = pseudo_pair_lpips(gx, y.images, perceptual)
        ps, ss = cycle_psnr_ssim(x.images, G, model.translator("YX", use_ema=m.use_ema))
        src = x
    elif tag == "paired":
        x, y = test["paired_X"], test["paired_Y"]
        gx = _apply(G, x.images)
        fid = _fid(gx, y.images, extractor, m.n_splits, extra)
        lp = paired_lpips(gx, y.images, perceptual)
        ps, ss = paired_psnr_ssim(gx, y.images)
        src = y
    else:
        x = test["X"]
        gx = _apply(G, x.images)
        fid = _fid(gx, x.images, extractor, m.n_splits, extra)
        lp = paired_lpips(gx, x.images, perceptual)
        ps, ss = paired_psnr_ssim(gx, x.images)
        src = x
    nme = float("nan")
    if bool(src.landmark_valid.all()):
        nme, _ = landmark_nme(detector(gx), src.landmarks, src.eye_indices)
    t_res = cfg.vae.resolution if model.kind == "vae" else m.timing_resolution
    if model.kind == "pix2pix" and t_res != cfg.load_resolution:
        t_res = cfg.load_resolution
    extra["timing_resolution"] = t_res
    ms = timed_inference(G, m.timing_images, t_res, m.timing_warmup, device=gx.device)
    report = MetricReport(label or model.kind, tag, fid[0], fid[1], lp, ps, ss,
                          id_sim(x.images, gx, identity), nme, ms, extra=extra)
    if run_dir is not None and (Path(run_dir) / "losses.csv").exists():
        try:
            d_var, ep, col = stability_indicators(Path(run_dir) / "losses.csv", cfg.run.steps_per_epoch,
                                                  m.stability_tail)
            report.d_loss_variance, report.epochs_to_stabilization, report.collapse_events = \
                d_var, ep, col
        except ValueError as exc:
            log.warning("stability indicators unavailable: %s", exc)
    return report


def _run_dir_of(checkpoint) -> Path | None:
    p = Path(checkpoint).resolve()
    if p.parent.name == "checkpoints":
        return p.parent.parent
    return None


def cmd_evaluate(checkpoints, protocol, out_dir, labels=None, test_dirs: dict | None = None,
                 overrides=()):
    """Evaluate one or more checkpoints; writes ``report.json`` and ``report.md`` to ``out_dir``.

    ``protocol`` is one of ``paired``/``unpaired`` for every checkpoint, or a
    list with one entry per checkpoint for a mixed comparison table.
    """
    if isinstance(checkpoints, (str, Path)):
        checkpoints = [checkpoints]
    protocols = [protocol] if isinstance(protocol, str) else list(protocol)
    if len(protocols) == 1:
        protocols = protocols * len(checkpoints)
    if len(protocols) != len(checkpoints):
        raise ConfigError("--protocol takes one value or one per checkpoint")
    if labels and len(labels) != len(checkpoints):
        raise ConfigError("--labels must match the number of checkpoints")
    # reject protocol mismatches before any compute
    for ckpt, proto in zip(checkpoints, protocols):
        check_protocol(load_checkpoint(ckpt)["model_kind"], proto)
    reports = []
    for i, (ckpt, proto) in enumerate(zip(checkpoints, protocols)):
        model, cfg = model_from_checkpoint(ckpt)
        if overrides:
            cfg = config_from_dict(apply_overrides(cfg.to_dict(), overrides))
        test = _test_sets(cfg, model.kind, proto, (test_dirs or {}).get(proto, {}))
        reports.append(evaluate_model(model, cfg, proto, test, labels[i] if labels else None,
                                      _run_dir_of(ckpt)))
    return write_reports(reports, out_dir), reports


def _test_sets(cfg: RunConfig, kind, protocol, test_dirs: dict) -> dict:
    """Explicit test directories win; otherwise the held-out split of the training data."""
    res = cfg.load_resolution
    keys = ["paired_X", "paired_Y"] if protocol == "paired" else ["X", "Y"]
    if kind == "vae":
        keys = ["X"]
    out = {}
    missing = []
    for k in keys:
        if test_dirs.get(k):
            out[k] = load_domain(ingest_directory(test_dirs[k], k[-1]), res, cfg.data.strict_sidecars)
        else:
            missing.append(k)
    if missing:
        splits = load_splits(cfg, need_unpaired=any(k in ("X", "Y") for k in missing),
                             need_paired=any(k.startswith("paired") for k in missing))
        for k in missing:
            out[k] = splits[k][1]
    return out


# --- ablate -------------------------------------------------------------------------

ABLATION_AXES = {
    "sn": ("discriminator", "spectral_norm", False),
    "id": ("weights", "lambda_id", 0.0),
    "perc": ("weights", "lambda_perc", 0.0),
    "sem": ("weights", "lambda_sem", 0.0),
    "lmk": ("weights", "lambda_lmk", 0.0),
    "con": ("weights", "lambda_con", 0.0),
    "attention": ("generator", "attention_scales", ()),
    "multiscale": ("discriminator", "scales", (1.0,)),
    "ttur": ("schedule", "use_ttur", False),
    "ema": ("schedule", "use_ema", False),
    "diffaug": ("schedule", "use_diffaug", False),
}


def ablation_variant(cfg: RunConfig, axis: str | None) -> RunConfig:
    """Copy of ``cfg`` with one component disabled (``None`` keeps the base)."""
    raw = cfg.to_dict()
    if axis is not None:
        section, key, value = ABLATION_AXES[axis]
        raw[section][key] = list(value) if isinstance(value, tuple) else value
    return config_from_dict(raw)


def cmd_ablate(cfg: RunConfig, axes, seeds=None, evaluate: bool = True, out_dir=None) -> dict:
    """Train base + one variant per axis for each seed; emit a stability/metric comparison."""
    axes = list(axes or [])
    bad = [a for a in axes if a not in ABLATION_AXES]
    if bad:
        raise ConfigError(f"unknown ablation axis {', '.join(bad)}; choose from "
                          f"{', '.join(ABLATION_AXES)}")
    if cfg.model != "cyclegan_guided":
        raise ConfigError("ablations apply to model cyclegan_guided")
    seeds = list(seeds) if seeds else [cfg.seed]
    root = Path(out_dir or cfg.output_dir)
    write_snapshot(cfg, root)
    runs = []
    for name in ["base"] + axes:
        for seed in seeds:
            variant = ablation_variant(cfg, None if name == "base" else name)
            variant.seed = seed
            variant.output_dir = str(root / name / f"seed{seed}")
            run_dir = cmd_train(variant)
            row = {"variant": name, "seed": seed, "run_dir": str(run_dir)}
            try:
                d_var, ep, col = stability_indicators(run_dir / "losses.csv", variant.run.steps_per_epoch,
                                                      variant.metrics.stability_tail)
            except ValueError as exc:
                log.warning("%s seed %d: %s", name, seed, exc)
                d_var, ep, col = float("nan"), -1, 0
            row.update(d_loss_variance=d_var, epochs_to_stabilization=ep, collapse_events=col)
            if evaluate:
                model, _ = model_from_checkpoint(run_dir / "checkpoints" / "final.ckpt")
                test = _test_sets(variant, model.kind, "unpaired", {})
                rep = evaluate_model(model, variant, "unpaired", test, name, run_dir)
                row["metrics"] = rep.to_json()
            runs.append(row)
    summary = {}
    for name in ["base"] + axes:
        rows = [r for r in runs if r["variant"] == name]
        summary[name] = {
            "median_d_loss_variance": float(np.median([r["d_loss_variance"] for r in rows])),
            "d_loss_variance": [r["d_loss_variance"] for r in rows],
            "collapse_events": int(sum(r["collapse_events"] for r in rows)),
            "epochs_to_stabilization": [r["epochs_to_stabilization"] for r in rows],
        }
        if evaluate:
            for key in ("fid_mean", "psnr_mean", "nme_mean"):
                vals = [r["metrics"][key]["value"] for r in rows]
                vals = [v for v in vals if v is not None]
                summary[name][f"median_{key}"] = float(np.median(vals)) if vals else None
    report = {"axes": axes, "seeds": seeds, "summary": summary, "runs": runs}
    (root / "ablate_report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    (root / "ablate_report.md").write_text(_ablate_markdown(summary, evaluate))
    return report


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _ablate_markdown(summary, evaluate):
    head = "| Variant | median d_loss_variance | collapse events | epochs to stabilization |"
    sep = "|---|---|---|---|"
    if evaluate:
        head += " FID | cycle PSNR | NME |"
        sep += "---|---|---|"
    lines = [head, sep]
    for name, s in summary.items():
        label = name if name == "base" else f"no {name}"
        line = (f"| {label} | {s['median_d_loss_variance']:.6g} | {s['collapse_events']} | "
                f"{', '.join(str(e) for e in s['epochs_to_stabilization'])} |")
        if evaluate:
            line += "".join(f" {_fmt_opt(s.get(k))} |" for k in
                            ("median_fid_mean", "median_psnr_mean", "median_nme_mean"))
        lines.append(line)
    return "\n".join(lines) + "\n"


def _fmt_opt(v):
    return "n/a" if v is None else f"{v:.3f}"


# --- plot -------------------------------------------------------------------------------

def smooth(values, window: int):
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    v = np.asarray(values, np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def cmd_plot(run_dirs, out_path, window: int = 50, steps_per_epoch: int = 100, labels=None) -> dict:
    """Overlay smoothed total-loss curves and tabulate epochs to stabilization."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dirs = [Path(r) for r in run_dirs]
    if not run_dirs:
        raise ConfigError("plot needs at least one run directory")
    labels = labels or [r.name for r in run_dirs]
    curves, table = [], []
    for rd, label in zip(run_dirs, labels):
        csv_path = rd / "losses.csv"
        if not csv_path.exists():
            raise ConfigError(f"missing loss log {csv_path}")
        rows = read_loss_log(csv_path)
        total = _column(rows, "total")
        curves.append((label, smooth(total, window)))
        n_win = len(total) // steps_per_epoch
        ep = -1
        if n_win >= 2:
            means = total[:n_win * steps_per_epoch].reshape(n_win, steps_per_epoch).mean(1)
            ep = epochs_to_stabilization(means)
        table.append({"run": label, "epochs_to_stabilization": ep, "steps": len(total)})
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, c in curves:
        ax.plot(np.arange(len(c)), c, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"total loss (moving average, {window})")
    legend = ax.legend()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    legend_texts = [t.get_text() for t in legend.get_texts()]
    plt.close(fig)
    md = ["| Run | Epochs to stabilization | Steps |", "|---|---|---|"]
    md += [f"| {r['run']} | {r['epochs_to_stabilization']} | {r['steps']} |" for r in table]
    table_path = out_path.with_suffix(".md")
    table_path.write_text("\n".join(md) + "\n")
    out_path.with_suffix(".json").write_text(json.dumps(table, indent=2))
    return {"image": out_path, "table": table_path, "rows": table, "legend": legend_texts}


# --- argument parsing -----------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="guidedgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_cfg(sp):
        sp.add_argument("config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")

    tr = sub.add_parser("train", help="train a model")
    add_cfg(tr)

    tl = sub.add_parser("translate", help="translate a directory of images")
    tl.add_argument("checkpoint")
    tl.add_argument("input_dir")
    tl.add_argument("out_dir")
    tl.add_argument("--direction", default="XY", help="XY (X->Y) or YX (Y->X)")

    ev = sub.add_parser("evaluate", help="score checkpoints")
    ev.add_argument("checkpoints", nargs="+")
    ev.add_argument("--protocol", required=True, nargs="+", choices=["paired", "unpaired"],
                    help="one value, or one per checkpoint")
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--labels", nargs="+")
    ev.add_argument("--test-x", help="unpaired X test directory")
    ev.add_argument("--test-y", help="unpaired Y test directory")
    ev.add_argument("--test-paired-x", help="paired X test directory")
    ev.add_argument("--test-paired-y", help="paired Y test directory")
    ev.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    ab = sub.add_parser("ablate", help="component ablations")
    add_cfg(ab)
    ab.add_argument("--axes", nargs="*", default=[])
    ab.add_argument("--seeds", nargs="+", type=int)
    ab.add_argument("--no-eval", action="store_true")

    pl = sub.add_parser("plot", help="loss curves and convergence table")
    pl.add_argument("run_dirs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--window", type=int, default=50)
    pl.add_argument("--steps-per-epoch", type=int, default=100)

    mk = sub.add_parser("make-toy-data", help="render the synthetic face domains")
    mk.add_argument("out_dir")
    mk.add_argument("--n", type=int, default=64)
    mk.add_argument("--resolution", type=int, default=64)
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--n-paired", type=int, default=0)
    return p


def _config_with_flags(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            print(cmd_train(_config_with_flags(args)))
        elif args.command == "translate":
            paths = cmd_translate(args.checkpoint, args.input_dir, args.direction, args.out_dir)
            print(f"wrote {len(paths)} image(s) to {args.out_dir}")
        elif args.command == "evaluate":
            dirs = {"unpaired": {"X": args.test_x, "Y": args.test_y},
                    "paired": {"paired_X": args.test_paired_x, "paired_Y": args.test_paired_y}}
            (js, md), _ = cmd_evaluate(args.checkpoints, args.protocol, args.out_dir, args.labels,
                                       dirs, args.set)
            print(md.read_text())
        elif args.command == "ablate":
            cfg = _config_with_flags(args)
            cmd_ablate(cfg, args.axes, args.seeds, not args.no_eval)
            print((Path(cfg.output_dir) / "ablate_report.md").read_text())
        elif args.command == "plot":
            res = cmd_plot(args.run_dirs, args.out, args.window, args.steps_per_epoch)
            print(res["table"].read_text())
        elif args.command == "make-toy-data":
            dirs = make_toy_domains(args.out_dir, args.n, args.resolution, args.seed,
                                    n_paired=args.n_paired)
            print("\n".join(str(d) for d in dirs.values()))
    except (ConfigError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
