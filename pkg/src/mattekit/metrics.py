"""Matting evaluation metrics and the dataset harness.

Pixel errors (SAD/MAD/MSE), the Gaussian-derivative gradient error, the
connectivity-degree error, and a detection-aware instance quality score.
Report scaling follows the usual matting conventions: MAD and MSE are
multiplied by 1e3, Grad and Conn by 1e-3, and SAD is the raw absolute sum
divided by 1000 (reported in thousands).
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, MetricRegionError
from .guidance import OracleConfig, Prompt, load_guidance, oracle_candidates
from .imageops import (AlphaMatte, Box, binarize, composite,
                       transition_band)
from .inference import InferenceConfig, matte_from_prompt
from .training import load_background, load_instances, load_manifest

CONN_PHI_STEP = 0.15   # classical distance threshold in the connectivity degree


@dataclass(frozen=True)
class RegionSpec:
    """Evaluation region: the whole image, or the transition band of the
    ground truth (fractional pixels dilated; radius given at 1024 scale)."""
    kind: str = "all"
    tri_radius: int = 12

    def __post_init__(self):
        if self.kind not in ("all", "tri"):
            raise ConfigError(f"unknown region kind {self.kind!r}")

    def plane(self, gt: AlphaMatte) -> np.ndarray:
        if self.kind == "all":
            return np.ones(gt.plane.shape, dtype=bool)
        scale = max(gt.plane.shape) / 1024.0
        radius = max(1, round(self.tri_radius * scale))
        band = transition_band(gt, radius=radius).plane.astype(bool)
        if not band.any():
            raise MetricRegionError(
                "tri region is empty: ground truth has no fractional pixels "
                "and no 0/1 boundary")
        return band


@dataclass(frozen=True)
class IMQConfig:
    """Matching and quality normalization for the instance-level score.

    The score itself is this artifact's definition (detection-style
    denominator with per-match quality max(0, 1 - err/tau)); absolute values
    are not comparable across other published implementations.
    """
    threshold: float = 0.5
    tau: float = 0.1
    similarity: str = "mad"
    binarize_at: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("IMQ matching threshold must be in (0,1)")
        if self.tau <= 0:
            raise ConfigError("IMQ tau must be > 0")
        if self.similarity not in ("mad", "mse", "grad", "conn"):
            raise ConfigError(f"unknown IMQ similarity {self.similarity!r}")


# ---------------------------------------------------------------------------
# per-pair errors
# ---------------------------------------------------------------------------

def _check_extents(pred: AlphaMatte, gt: AlphaMatte):
    if pred.plane.shape != gt.plane.shape:
        raise ConfigError(f"metric extents differ: {pred.plane.shape} vs "
                          f"{gt.plane.shape}")


def pixel_errors(pred: AlphaMatte, gt: AlphaMatte,
                 region: RegionSpec = RegionSpec()) -> dict:
    """SAD (sum/1000), MAD (mean*1e3), MSE (mean*1e3) over the region."""
    _check_extents(pred, gt)
    mask = region.plane(gt)
    n = int(mask.sum())
    if n == 0:
        raise MetricRegionError(f"region {region.kind!r} is empty")
    diff = np.abs(pred.plane.astype(np.float64) - gt.plane.astype(np.float64))[mask]
    sad = float(diff.sum())
    return {"sad": sad / 1000.0,
            "mad": float(diff.mean()) * 1e3,
            "mse": float((diff ** 2).mean()) * 1e3}


def gaussian_derivative_filters(sigma: float = 1.4, epsilon: float = 1e-2):
    """First-order Gaussian derivative pair, unit L2 norm."""
    half = int(np.ceil(sigma * np.sqrt(-2.0 * np.log(np.sqrt(2 * np.pi)
                                                     * sigma * epsilon))))
    idx = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-idx ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -idx * g / sigma ** 2
    hx = g[:, None] * dg[None, :]
    hx /= np.sqrt(np.sum(hx * hx))
    return hx, hx.T


def _gradient_magnitude(plane: np.ndarray, sigma: float) -> np.ndarray:
    hx, hy = gaussian_derivative_filters(sigma)
    gx = ndimage.correlate(plane, hx, mode="nearest")
    gy = ndimage.correlate(plane, hy, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def grad_error(pred: AlphaMatte, gt: AlphaMatte,
               region: RegionSpec = RegionSpec(), sigma: float = 1.4) -> float:
    """Sum of squared gradient-magnitude differences over the region, *1e-3."""
    _check_extents(pred, gt)
    mask = region.plane(gt)
    if not mask.any():
        raise MetricRegionError(f"region {region.kind!r} is empty")
    pa = _gradient_magnitude(pred.plane.astype(np.float64), sigma)
    ga = _gradient_magnitude(gt.plane.astype(np.float64), sigma)
    return float(((pa - ga) ** 2)[mask].sum()) / 1000.0


def _largest_foreground_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of the 1-pixels; empty mask gives empty."""
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.reshape(-1))[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def conn_error(pred: AlphaMatte, gt: AlphaMatte,
               region: RegionSpec = RegionSpec(), step: float = 0.1) -> float:
    """Connectivity-degree difference, summed over the region, *1e-3.

    For each threshold the jointly-above-threshold pixels form a source
    component (the largest one); a pixel's degree phi decays with its alpha
    distance to the last threshold at which it was still connected.
    """
    _check_extents(pred, gt)
    if not 0 < step < 1:
        raise ConfigError("conn step must be in (0,1)")
    mask = region.plane(gt)
    if not mask.any():
        raise MetricRegionError(f"region {region.kind!r} is empty")
    p = pred.plane.astype(np.float64)
    g = gt.plane.astype(np.float64)
    thresholds = np.arange(0.0, 1.0 + step, step)
    l_map = -np.ones_like(p)
    for i in range(1, len(thresholds)):
        theta = thresholds[i]
        joint = (p >= theta) & (g >= theta)
        omega = _largest_foreground_component(joint.astype(np.uint8))
        newly_out = (l_map == -1) & (~omega)
        l_map[newly_out] = thresholds[i - 1]
    l_map[l_map == -1] = 1.0

    def phi(alpha):
        d = alpha - l_map
        return 1.0 - d * (d >= CONN_PHI_STEP)

    return float(np.abs(phi(p) - phi(g))[mask].sum()) / 1000.0


def similarity_error(pred: AlphaMatte, gt: AlphaMatte, kind: str) -> float:
    """Raw (unscaled) per-pair error used inside the instance score."""
    diff = pred.plane.astype(np.float64) - gt.plane.astype(np.float64)
    if kind == "mad":
        return float(np.abs(diff).mean())
    if kind == "mse":
        return float((diff ** 2).mean())
    if kind == "grad":
        pa = _gradient_magnitude(pred.plane.astype(np.float64), 1.4)
        ga = _gradient_magnitude(gt.plane.astype(np.float64), 1.4)
        return float(((pa - ga) ** 2).sum())
    if kind == "conn":
        return conn_error(pred, gt) * 1000.0
    raise ConfigError(f"unknown similarity {kind!r}")


# ---------------------------------------------------------------------------
# instance quality
# ---------------------------------------------------------------------------

def imq(preds, gts, cfg: IMQConfig = IMQConfig()) -> float:
    """Detection-aware instance matting quality in [0, 100].

    Greedy one-to-one matching by descending IoU of binarized mattes; a pair
    counts as a true positive above the threshold and contributes quality
    max(0, 1 - err/tau). Score = 100 * sum(Q) / (|TP| + |FP|/2 + |FN|/2);
    two empty lists score 100 (nothing to find, nothing missed).
    """
    if not preds and not gts:
        return 100.0
    pairs = []
    pred_masks = [binarize(p, cfg.binarize_at) for p in preds]
    gt_masks = [binarize(g, cfg.binarize_at) for g in gts]
    from .imageops import iou as iou_fn
    for i, pm in enumerate(pred_masks):
        for j, gm in enumerate(gt_masks):
            pairs.append((iou_fn(pm, gm), i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched_p, matched_g = set(), set()
    quality = 0.0
    tp = 0
    for overlap, i, j in pairs:
        if overlap <= cfg.threshold:
            break
        if i in matched_p or j in matched_g:
            continue
        matched_p.add(i)
        matched_g.add(j)
        tp += 1
        err = similarity_error(preds[i], gts[j], cfg.similarity)
        quality += max(0.0, 1.0 - err / cfg.tau)
    fp = len(preds) - tp
    fn = len(gts) - tp
    return 100.0 * quality / (tp + 0.5 * fp + 0.5 * fn)


# ---------------------------------------------------------------------------
# dataset harness
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("sad_all", "mad_all", "mse_all", "grad_all", "conn_all",
                  "sad_tri", "mad_tri", "mse_tri", "grad_tri", "conn_tri",
                  "imq_mad", "imq_mse")


@dataclass
class MetricReport:
    config: dict
    items: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def finalize(self):
        self.items.sort(key=lambda r: r["name"])
        if self.items:
            self.aggregate = {
                key: float(np.mean([r[key] for r in self.items]))
                for key in METRIC_COLUMNS}
        else:
            self.aggregate = {}
        return self

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "items": self.items,
                           "aggregate": self.aggregate,
                           "images": len(self.items),
                           "instances": sum(r.get("instances", 1)
                                            for r in self.items),
                           "skipped": self.skipped}, indent=1, sort_keys=True)

    def to_table(self) -> str:
        cols = ("name",) + METRIC_COLUMNS
        widths = [max(len(c), 9) for c in cols]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        for row in self.items + ([{"name": "aggregate", **self.aggregate}]
                                 if self.aggregate else []):
            cells = [str(row["name"]).rjust(widths[0])]
            cells += [f"{row[c]:.3f}".rjust(w) for c, w in zip(cols[1:], widths[1:])]
            lines.append("  ".join(cells))
        if self.skipped:
            lines.append(f"skipped: {', '.join(self.skipped)}")
        return "\n".join(lines)


def _instance_metrics(pred: AlphaMatte, gt: AlphaMatte) -> dict:
    out = {}
    for region in (RegionSpec("all"), RegionSpec("tri")):
        px = pixel_errors(pred, gt, region)
        out[f"sad_{region.kind}"] = px["sad"]
        out[f"mad_{region.kind}"] = px["mad"]
        out[f"mse_{region.kind}"] = px["mse"]
        out[f"grad_{region.kind}"] = grad_error(pred, gt, region)
        out[f"conn_{region.kind}"] = conn_error(pred, gt, region)
    return out


def _load_boxes(dataset_dir, name):
    path = Path(dataset_dir) / "boxes" / f"{name}.json"
    if not path.exists():
        return None
    return [Box(*coords) for coords in json.loads(path.read_text())]


def evaluate_dataset(dataset_dir, checkpoint, prompt_mode: str = "box",
                     inference_cfg: InferenceConfig = None,
                     oracle: OracleConfig = OracleConfig(),
                     guidance_dir=None, matte_fn=None,
                     split: str = "eval") -> MetricReport:
    """Run the matting pipeline over a dataset split and score every
    instance; per-image rows average their instances, the aggregate averages
    the rows. Items without usable ground truth are skipped and counted."""
    if prompt_mode not in ("box", "point"):
        raise ConfigError(f"prompt_mode must be box or point, got {prompt_mode!r}")
    inference_cfg = inference_cfg or InferenceConfig()
    matte_fn = matte_fn or matte_from_prompt

    manifest = load_manifest(dataset_dir)
    names = manifest.get(split, [])
    report = MetricReport(config={
        "dataset": str(dataset_dir), "split": split, "prompt": prompt_mode,
        "target": inference_cfg.target, "policy_base": inference_cfg.policy.base})

    for name in names:
        try:
            instances = load_instances(dataset_dir, name)
            background = load_background(dataset_dir, name)
        except (FileNotFoundError, ValueError) as exc:
            warnings.warn(f"{name}: skipped ({exc})")
            report.skipped.append(name)
            continue

        alphas = [rec.alpha_gt for rec in instances]
        union = AlphaMatte(np.clip(np.sum([a.plane for a in alphas], axis=0),
                                   0.0, 1.0))
        image = composite(instances[0].foreground, background, union)

        candidates = None
        if guidance_dir is not None:
            candidates, _ = load_guidance(guidance_dir, name)
        if not candidates:
            item_seed = (zlib.crc32(name.encode()) ^ oracle.seed) & 0x7FFFFFFF
            candidates = oracle_candidates(
                alphas, OracleConfig(threshold=oracle.threshold,
                                     r_max=oracle.r_max, jitter=oracle.jitter,
                                     seed=item_seed))

        boxes = _load_boxes(dataset_dir, name)
        preds, row_metrics = [], []
        try:
            for k, gt in enumerate(alphas):
                if prompt_mode == "box":
                    box = boxes[k] if boxes else Box.tight_around(gt)
                    prompt = Prompt(kind="box", box=box)
                else:
                    support = binarize(gt, 0.5).plane
                    ys, xs = np.nonzero(support)
                    prompt = Prompt(kind="point",
                                    point=(int(round(xs.mean())),
                                           int(round(ys.mean()))))
                matte, _, _ = matte_fn(image, prompt, candidates, checkpoint,
                                       inference_cfg)
                preds.append(matte)
                row_metrics.append(_instance_metrics(matte, gt))
        except MetricRegionError as exc:
            warnings.warn(f"{name}: skipped ({exc})")
            report.skipped.append(name)
            continue

        row = {"name": name, "instances": len(alphas)}
        for key in row_metrics[0]:
            row[key] = float(np.mean([m[key] for m in row_metrics]))
        row["imq_mad"] = imq(preds, alphas, IMQConfig(similarity="mad"))
        row["imq_mse"] = imq(preds, alphas, IMQConfig(similarity="mse"))
        report.items.append(row)

    return report.finalize()
