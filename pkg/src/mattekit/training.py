"""Training: synthetic-composition data, the weighted multi-scale loss, the
weight-map and learning-rate schedules, and the optimization loop.

Every sample is a fresh composite: a foreground instance is blended over a
background via its ground-truth alpha, the tight box around the instance
becomes the prompt, and a perturbed binarized alpha becomes the guidance
mask. The per-iteration RNG is derived from (seed, iteration), so a resumed
run replays the exact data stream of an uninterrupted one.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _sepmat
from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, ShapeError
from .guidance import (OracleConfig, encode_features_raw, encoder_init,
                       oracle_candidates)
from .imageops import (AlphaMatte, BinaryMask, Box, ImageRGB, area_downsample,
                       composite, dilate_disk, downsample_mask, read_alpha,
                       read_image, resize_plane, transition_band, write_alpha,
                       write_image)
from .m2m import M2MConfig, MultiScalePrediction, m2m_forward_raw, m2m_init


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 1.0
    lambda_lap: float = 1.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_lap < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    dataset_dir: str = ""
    out_dir: str = ""
    total: int = 20000
    warmup: int = 4000
    base_lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 10
    crop: int = 1024
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    lap_levels: int = 4
    oracle: OracleConfig = field(default_factory=OracleConfig)
    m2m: M2MConfig = field(default_factory=M2MConfig)
    encoder_channels: int = 32
    encoder_seed: int = 0
    freeze_encoder: bool = False
    checkpoint_every: int = 500
    resume: str = ""
    # weight-map shape parameters after the schedule switch
    w4_dilate_radius: int = 3
    w1_band_radius: int = 5

    def __post_init__(self):
        if self.crop % 16:
            raise ConfigError(f"crop {self.crop} must be divisible by 16")
        if self.total > 0 and not 0 <= self.warmup < self.total:
            raise ConfigError(f"need 0 <= warmup < total, got "
                              f"{self.warmup}/{self.total}")

    @staticmethod
    def desk_preset(dataset_dir: str = "", out_dir: str = "",
                    seed: int = 0) -> "TrainConfig":
        """Toy sizing: 64px crops, 2000 iterations with 400 warm-up (the same
        5:1 total:warmup ratio as the full recipe), tiny network."""
        return TrainConfig(dataset_dir=dataset_dir, out_dir=out_dir,
                           total=2000, warmup=400, batch_size=8, crop=64,
                           seed=seed, m2m=M2MConfig.toy(feature_channels=8,
                                                        seed=seed),
                           encoder_channels=8, encoder_seed=seed,
                           checkpoint_every=500)

    def to_dict(self) -> dict:
        return {"dataset_dir": self.dataset_dir, "out_dir": self.out_dir,
                "total": self.total, "warmup": self.warmup,
                "base_lr": self.base_lr, "beta1": self.beta1,
                "beta2": self.beta2, "batch_size": self.batch_size,
                "crop": self.crop, "seed": self.seed,
                "loss": {"lambda_l1": self.loss.lambda_l1,
                         "lambda_lap": self.loss.lambda_lap},
                "lap_levels": self.lap_levels,
                "oracle": {"threshold": self.oracle.threshold,
                           "r_max": self.oracle.r_max,
                           "jitter": self.oracle.jitter,
                           "seed": self.oracle.seed},
                "m2m": self.m2m.to_dict(),
                "encoder_channels": self.encoder_channels,
                "encoder_seed": self.encoder_seed,
                "freeze_encoder": self.freeze_encoder,
                "checkpoint_every": self.checkpoint_every,
                "resume": self.resume,
                "w4_dilate_radius": self.w4_dilate_radius,
                "w1_band_radius": self.w1_band_radius}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossWeights(**d["loss"])
        if "oracle" in d:
            d["oracle"] = OracleConfig(**d["oracle"])
        if "m2m" in d:
            d["m2m"] = M2MConfig.from_dict(d["m2m"])
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class InstanceRecord:
    foreground: ImageRGB
    alpha_gt: AlphaMatte
    source_id: str

    def __post_init__(self):
        if (self.foreground.height, self.foreground.width) != \
                (self.alpha_gt.height, self.alpha_gt.width):
            raise ShapeError("instance foreground/alpha extents differ")
        if not np.any(self.alpha_gt.plane > 0):
            raise ValueError(f"instance {self.source_id}: empty alpha support")


@dataclass
class TrainingSample:
    image: ImageRGB
    alpha_gt: AlphaMatte
    box: Box
    mask: BinaryMask


def _soft_blob(rng: np.random.Generator, size: int) -> np.ndarray:
    """A wobbly ellipse with a Gaussian-feathered rim, values in [0,1]."""
    r0 = rng.uniform(size / 6, size / 3.2)
    cy = rng.uniform(r0 * 1.05, size - r0 * 1.05)
    cx = rng.uniform(r0 * 1.05, size - r0 * 1.05)
    a1, a2 = rng.uniform(0, 0.22), rng.uniform(0, 0.12)
    p1, p2 = rng.uniform(0, 2 * math.pi, 2)
    stretch = rng.uniform(0.75, 1.3)
    feather = rng.uniform(1.2, 2.5)
    yy, xx = np.mgrid[:size, :size]
    dy, dx = (yy - cy) * stretch, xx - cx
    dist = np.sqrt(dy * dy + dx * dx)
    theta = np.arctan2(dy, dx)
    radius = r0 * (1 + a1 * np.sin(2 * theta + p1) + a2 * np.sin(3 * theta + p2))
    return np.clip((radius - dist) / feather + 0.5, 0.0, 1.0).astype(np.float32)


def _flat_or_noise_background(rng: np.random.Generator, size: int,
                              away_from: np.ndarray) -> np.ndarray:
    """Flat color or smooth value noise, kept far from the foreground color."""
    for _ in range(20):
        base = rng.random(3).astype(np.float32)
        if np.linalg.norm(base - away_from) >= 0.45:
            break
    if rng.random() < 0.5:
        planes = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    else:
        coarse = rng.random((3, 4, 4)).astype(np.float32) * 0.5 - 0.25
        noise = np.stack([resize_plane(c, size, size) for c in coarse])
        planes = np.clip(base[:, None, None] + noise, 0.0, 1.0)
    return planes.astype(np.float32)


def _instance_foreground(rng: np.random.Generator, size: int) -> tuple:
    color = rng.random(3).astype(np.float32)
    grad_dir = rng.standard_normal(2)
    grad_dir /= max(np.linalg.norm(grad_dir), 1e-6)
    yy, xx = np.mgrid[:size, :size]
    ramp = (yy * grad_dir[0] + xx * grad_dir[1]) / size
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-6) - 0.5
    amp = rng.uniform(0.0, 0.25)
    planes = np.clip(color[:, None, None] + amp * ramp[None], 0.0, 1.0)
    return planes.astype(np.float32), color


def generate_corpus(out_dir, count: int, seed: int = 0, size: int = 64,
                    eval_fraction: float = 0.1) -> dict:
    """Write a blob corpus in the dataset layout; returns the manifest."""
    root = Path(out_dir)
    for sub in ("fg", "alpha", "bg"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        alpha = _soft_blob(rng, size)
        fg, color = _instance_foreground(rng, size)
        bg = _flat_or_noise_background(rng, size, color)
        name = f"blob_{i:04d}"
        write_image(root / "fg" / f"{name}.png", ImageRGB(fg))
        write_alpha(root / "alpha" / f"{name}.png", AlphaMatte(alpha), depth=16)
        write_image(root / "bg" / f"{name}.png", ImageRGB(bg))
        names.append(name)
    n_eval = max(1, int(round(count * eval_fraction))) if count else 0
    manifest = {"train": names[:count - n_eval], "eval": names[count - n_eval:]}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {dataset_dir}")
    return json.loads(path.read_text())


def load_instances(dataset_dir, name: str):
    """All instances of one item: per-instance alphas when present, else the
    single combined alpha."""
    root = Path(dataset_dir)
    fg = read_image(root / "fg" / f"{name}.png")
    per_instance = sorted(root.glob(f"alpha/{name}_*.png"))
    if per_instance:
        alphas = [read_alpha(p) for p in per_instance]
    else:
        alphas = [read_alpha(root / "alpha" / f"{name}.png")]
    return [InstanceRecord(foreground=fg, alpha_gt=a, source_id=f"{name}#{k}")
            for k, a in enumerate(alphas)]


def load_background(dataset_dir, name: str) -> ImageRGB:
    return read_image(Path(dataset_dir) / "bg" / f"{name}.png")


# ---------------------------------------------------------------------------
# sample synthesis
# ---------------------------------------------------------------------------

def _resize_image(planes: np.ndarray, th: int, tw: int) -> np.ndarray:
    return np.stack([resize_plane(p, th, tw) for p in planes])


def synthesize_sample(instance: InstanceRecord, background: ImageRGB,
                      crop: int, rng: np.random.Generator,
                      oracle: OracleConfig = OracleConfig()) -> TrainingSample:
    """Random-placement composite of one instance over a background crop."""
    # background: random upscale (>= crop) then random crop
    factor = rng.uniform(1.0, 1.3)
    bh = max(crop, int(round(background.height * factor)))
    bw = max(crop, int(round(background.width * factor)))
    bg_planes = _resize_image(background.planes, bh, bw)
    oy = int(rng.integers(0, bh - crop + 1))
    ox = int(rng.integers(0, bw - crop + 1))
    bg_crop = np.clip(bg_planes[:, oy:oy + crop, ox:ox + crop], 0.0, 1.0)

    alpha = instance.alpha_gt.plane
    fg = instance.foreground.planes
    for attempt in range(10):
        scale = rng.uniform(0.7, 1.0) * (0.9 ** attempt)
        th = max(8, int(round(alpha.shape[0] * scale)))
        tw = max(8, int(round(alpha.shape[1] * scale)))
        a_s = np.clip(resize_plane(alpha, th, tw), 0.0, 1.0)
        ys, xs = np.nonzero(a_s > 0)
        if ys.size == 0:
            continue
        bbox_h, bbox_w = ys.max() - ys.min() + 1, xs.max() - xs.min() + 1
        if bbox_h <= crop and bbox_w <= crop:
            break
    else:
        raise ContractError(
            f"instance {instance.source_id} does not fit a {crop}px crop "
            "after 10 shrink attempts")
    fg_s = np.clip(_resize_image(fg, th, tw), 0.0, 1.0)

    # paste so the support lands fully inside the crop
    py = int(rng.integers(-ys.min(), crop - (ys.max() + 1) + 1))
    px = int(rng.integers(-xs.min(), crop - (xs.max() + 1) + 1))
    alpha_full = np.zeros((crop, crop), np.float32)
    fg_full = np.zeros((3, crop, crop), np.float32)
    sy0, sy1 = max(0, -py), min(th, crop - py)
    sx0, sx1 = max(0, -px), min(tw, crop - px)
    dy0, dx0 = py + sy0, px + sx0
    alpha_full[dy0:dy0 + sy1 - sy0, dx0:dx0 + sx1 - sx0] = a_s[sy0:sy1, sx0:sx1]
    fg_full[:, dy0:dy0 + sy1 - sy0, dx0:dx0 + sx1 - sx0] = fg_s[:, sy0:sy1, sx0:sx1]

    gt = AlphaMatte(alpha_full)
    image = composite(ImageRGB(fg_full), ImageRGB(bg_crop), gt)
    box = Box.tight_around(gt)
    sample_oracle = replace(oracle, seed=int(rng.integers(0, 2 ** 31)))
    mask = oracle_candidates([gt], sample_oracle)[0].mask
    return TrainingSample(image=image, alpha_gt=gt, box=box, mask=mask)


# ---------------------------------------------------------------------------
# weight maps and schedules
# ---------------------------------------------------------------------------

@dataclass
class WeightMaps:
    """Binary loss masks, one per prediction scale."""
    w_os8: np.ndarray
    w_os4: np.ndarray
    w_os1: np.ndarray


def weight_maps_for_iteration(iteration: int, cfg: TrainConfig,
                              guidance_mask: BinaryMask,
                              alpha_os4: AlphaMatte) -> WeightMaps:
    """The 1/8-scale map is always all-ones. Before the warm-up boundary the
    other two are all-ones as well; from the boundary on (>= convention) the
    1/4-scale map follows the guidance mask and the full-scale map follows
    the transition band of the current 1/4-scale prediction."""
    if iteration < 0:
        raise ConfigError("iteration must be >= 0")
    h, w = guidance_mask.height, guidance_mask.width
    w8 = np.ones((h // 8, w // 8), np.float32)
    if iteration < cfg.warmup:
        return WeightMaps(w8, np.ones((h // 4, w // 4), np.float32),
                          np.ones((h, w), np.float32))
    m4 = downsample_mask(guidance_mask, 4)
    m4 = dilate_disk(m4, cfg.w4_dilate_radius)
    band_src = AlphaMatte(np.clip(resize_plane(alpha_os4.plane, h, w), 0.0, 1.0))
    band = transition_band(band_src, radius=cfg.w1_band_radius, lo=0.01, hi=0.99)
    return WeightMaps(w8, m4.plane.astype(np.float32),
                      band.plane.astype(np.float32))


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warm-up to base_lr, then cosine decay to zero at `total`."""
    if not 0 <= iteration <= cfg.total:
        raise ConfigError(f"iteration {iteration} outside [0, {cfg.total}]")
    if cfg.warmup > 0 and iteration < cfg.warmup:
        return cfg.base_lr * iteration / cfg.warmup
    span = max(cfg.total - cfg.warmup, 1)
    progress = (iteration - cfg.warmup) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_tensor_pred(pred) -> ad.Tensor:
    if isinstance(pred, ad.Tensor):
        return pred
    plane = pred.plane if isinstance(pred, AlphaMatte) else np.asarray(pred)
    return ad.Tensor(plane.astype(np.float32))


def _as_plane(x) -> np.ndarray:
    if isinstance(x, AlphaMatte):
        return x.plane
    if isinstance(x, ad.Tensor):
        return x.data
    return np.asarray(x)


def loss_weighted_l1(pred, gt, w) -> ad.Tensor:
    """sum(w * |pred - gt|) / max(sum(w), 1)."""
    pred_t = _as_tensor_pred(pred)
    gt_a = np.broadcast_to(_as_plane(gt), pred_t.shape).astype(pred_t.dtype)
    w_a = np.broadcast_to(_as_plane(w), pred_t.shape).astype(pred_t.dtype)
    if gt_a.shape != tuple(pred_t.shape):
        raise ShapeError("loss_weighted_l1: extents differ")
    norm = max(float(w_a.sum()), 1.0)
    scaled_w = ad.Tensor(w_a / norm)
    return ad.sum_(ad.mul(ad.abs_(ad.sub(pred_t, ad.Tensor(gt_a))), scaled_w))


def _pyramid_levels_tensor(x: ad.Tensor, levels: int):
    """Differentiable band-pass levels (finest first) plus the base."""
    h, w = x.shape[-2], x.shape[-1]
    out = []
    g = x
    for _ in range(levels):
        gh, gw = g.shape[-2], g.shape[-1]
        nxt = ad.sep_linear2d(g, _sepmat.reduce2_matrix(gh),
                              _sepmat.reduce2_matrix(gw))
        back = ad.sep_linear2d(nxt, _sepmat.expand2_matrix(nxt.shape[-2], gh),
                               _sepmat.expand2_matrix(nxt.shape[-1], gw))
        out.append(ad.sub(g, back))
        g = nxt
    out.append(g)
    return out


def effective_levels(h: int, w: int, levels: int) -> int:
    return max(1, min(levels, int(math.floor(math.log2(min(h, w))))))


def loss_weighted_laplacian(pred, gt, w, levels: int = 4) -> ad.Tensor:
    """2^k-weighted L1 between pyramid levels of w*pred and w*gt, the base
    counting as the coarsest level, normalized by sum(w). Level count is
    clamped so the smallest plane keeps at least one pixel."""
    pred_t = _as_tensor_pred(pred)
    gt_a = np.broadcast_to(_as_plane(gt), pred_t.shape).astype(pred_t.dtype)
    w_a = np.broadcast_to(_as_plane(w), pred_t.shape).astype(pred_t.dtype)
    h, wd = pred_t.shape[-2], pred_t.shape[-1]
    lv = effective_levels(h, wd, levels)
    norm = max(float(w_a.sum()), 1.0)
    wp = ad.mul(pred_t, ad.Tensor(w_a))
    wg = ad.Tensor(w_a * gt_a)
    levels_p = _pyramid_levels_tensor(wp, lv)
    levels_g = _pyramid_levels_tensor(wg, lv)
    total = None
    for k, (lp, lg) in enumerate(zip(levels_p, levels_g)):
        term = ad.mul(ad.sum_(ad.abs_(ad.sub(lp, lg))), float(2 ** k) / norm)
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(preds: MultiScalePrediction, gt, maps: WeightMaps,
               weights: LossWeights, lap_levels: int = 4) -> ad.Tensor:
    """lambda_l1 * (L1 over the three scales) + lambda_lap * (Lap likewise),
    each scale masked by its weight map; ground truth is area-averaged down
    to the coarse scales."""
    gt_plane = _as_plane(gt).astype(np.float32)
    per_scale = (
        (preds.os8, area_downsample(gt_plane, 8), maps.w_os8),
        (preds.os4, area_downsample(gt_plane, 4), maps.w_os4),
        (preds.os1, gt_plane, maps.w_os1),
    )
    total = None
    for pred_t, gt_s, w_s in per_scale:
        l1 = ad.mul(loss_weighted_l1(pred_t, gt_s, w_s), weights.lambda_l1)
        lap = ad.mul(loss_weighted_laplacian(pred_t, gt_s, w_s, lap_levels),
                     weights.lambda_lap)
        term = ad.add(l1, lap)
        total = term if total is None else ad.add(total, term)
    return total


def _batch_total_loss(preds: MultiScalePrediction, gts: np.ndarray,
                      maps, cfg: TrainConfig) -> ad.Tensor:
    """Mean of per-sample total losses, computed on the batched graph by
    folding each sample's normalizer into its weight plane (the loss is
    linear in the weight plane, so this is exact)."""
    n = gts.shape[0]
    per_scale = (
        ("os8", preds.os8, np.stack([area_downsample(g[0], 8) for g in gts])[:, None],
         np.stack([m.w_os8 for m in maps])[:, None]),
        ("os4", preds.os4, np.stack([area_downsample(g[0], 4) for g in gts])[:, None],
         np.stack([m.w_os4 for m in maps])[:, None]),
        ("os1", preds.os1, gts, np.stack([m.w_os1 for m in maps])[:, None]),
    )
    total = None
    for _, pred_t, gt_s, w_s in per_scale:
        norms = np.maximum(w_s.sum(axis=(1, 2, 3), keepdims=True), 1.0)
        w_folded = (w_s / (norms * n)).astype(np.float32)
        l1 = ad.mul(ad.sum_(ad.mul(ad.abs_(ad.sub(pred_t, ad.Tensor(gt_s))),
                                   ad.Tensor(w_folded))), cfg.loss.lambda_l1)
        lv = effective_levels(pred_t.shape[-2], pred_t.shape[-1], cfg.lap_levels)
        wp = ad.mul(pred_t, ad.Tensor(w_folded))
        wg = ad.Tensor(w_folded * gt_s)
        lap = None
        for k, (lp, lg) in enumerate(zip(_pyramid_levels_tensor(wp, lv),
                                         _pyramid_levels_tensor(wg, lv))):
            term = ad.mul(ad.sum_(ad.abs_(ad.sub(lp, lg))), float(2 ** k))
            lap = term if lap is None else ad.add(lap, term)
        lap = ad.mul(lap, cfg.loss.lambda_lap)
        scale_term = ad.add(l1, lap)
        total = scale_term if total is None else ad.add(total, scale_term)
    return total


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _draw_batch(records, backgrounds, cfg: TrainConfig, iteration: int):
    rng = np.random.default_rng([cfg.seed, 7, iteration])
    samples = []
    for _ in range(cfg.batch_size):
        rec = records[int(rng.integers(len(records)))]
        bg = backgrounds[int(rng.integers(len(backgrounds)))]
        samples.append(synthesize_sample(rec, bg, cfg.crop, rng, cfg.oracle))
    return samples


def train_run(cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Full loop: synthesize, forward, loss, backward, Adam, schedules,
    periodic checkpoints, and a JSONL scalar log. Resumable bit-exactly."""
    out_dir = Path(cfg.out_dir) if cfg.out_dir else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else out_dir / "train_log.jsonl"

    manifest = load_manifest(cfg.dataset_dir)
    records = []
    for name in manifest["train"]:
        records.extend(load_instances(cfg.dataset_dir, name))
    backgrounds = [load_background(cfg.dataset_dir, name)
                   for name in manifest["train"]]
    if not records and cfg.total > 0:
        raise ConfigError("training split is empty")

    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        enc, built, adam = ckpt.encoder, ckpt.m2m, ckpt.adam
        start = ckpt.iteration
    else:
        built = m2m_init(cfg.m2m)
        enc = encoder_init(channels=cfg.encoder_channels, seed=cfg.encoder_seed)
        enc.frozen = cfg.freeze_encoder
        adam = ad.AdamState()
        start = 0

    trainable = built.params if enc.frozen else built.params.merged_with(enc.params)
    # run-local paths stay out of the snapshot so identical runs produce
    # bit-identical checkpoints regardless of where they write
    snapshot_cfg = cfg.to_dict()
    snapshot_cfg.pop("out_dir", None)
    snapshot_cfg.pop("resume", None)

    def checkpoint_now(iteration: int) -> Checkpoint:
        return Checkpoint(encoder=enc, m2m=built, adam=adam,
                          iteration=iteration, config=snapshot_cfg)

    mode = "a" if cfg.resume else "w"
    with open(log_path, mode) as log:
        for iteration in range(start, cfg.total):
            t0 = time.perf_counter()
            samples = _draw_batch(records, backgrounds, cfg, iteration)
            imgs = np.stack([s.image.planes for s in samples])
            masks = np.stack([s.mask.plane[None].astype(np.float32)
                              for s in samples])
            gts = np.stack([s.alpha_gt.plane[None] for s in samples])

            feats = encode_features_raw(ad.Tensor(imgs), enc,
                                        training=not enc.frozen)
            preds = m2m_forward_raw(imgs, masks, feats, built, training=True)

            maps = [weight_maps_for_iteration(
                        iteration, cfg, s.mask,
                        AlphaMatte(np.clip(preds.os4.data[i, 0], 0.0, 1.0)))
                    for i, s in enumerate(samples)]
            loss = _batch_total_loss(preds, gts, maps, cfg)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise ContractError(
                    f"non-finite loss at iteration {iteration}; aborting "
                    "(last checkpoint retained)")

            trainable.zero_grads()
            loss.backward()
            lr = lr_at(iteration, cfg)
            ad.adam_step(trainable, adam, lr, cfg.beta1, cfg.beta2)

            log.write(json.dumps({"iter": iteration, "loss": loss_value,
                                  "lr": lr,
                                  "seconds": time.perf_counter() - t0}) + "\n")
            if cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0 \
                    and iteration + 1 < cfg.total:
                save_checkpoint(out_dir / f"ckpt_{iteration + 1:06d}.mam",
                                checkpoint_now(iteration + 1))

    final = checkpoint_now(cfg.total)
    save_checkpoint(out_dir / "ckpt_final.mam", final)
    return final
