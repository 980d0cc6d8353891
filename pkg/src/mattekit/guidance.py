"""Mask-candidate and feature-map provider standing in for a promptable
segmenter.

Three sources are supported with identical tensor contracts:
  * a small trainable conv encoder producing C x H/16 x W/16 feature maps;
  * an oracle that perturbs ground-truth alphas into plausible coarse masks
    (the training-time guidance source);
  * a directory of exported candidates/features from a real segmenter.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, SelectionError, ShapeError
from .imageops import (BinaryMask, Box, binarize, boundary_pixels,
                       dilate_disk, erode_disk, iou, read_mask, write_mask)

FEATURE_MAGIC = b"MAMF"
FEATURE_VERSION = 1


@dataclass
class MaskCandidate:
    mask: BinaryMask
    score: float
    id: int


@dataclass
class FeatureMap:
    """Deep features at 1/16 of the source resolution."""
    tensor: ad.Tensor

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]


@dataclass(frozen=True)
class Prompt:
    """A box or point request, in source-image pixel coordinates."""
    kind: str
    box: Box | None = None
    point: tuple | None = None

    def __post_init__(self):
        if self.kind == "box":
            if self.box is None:
                raise ValueError("box prompt needs a box")
        elif self.kind == "point":
            if self.point is None:
                raise ValueError("point prompt needs a point")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    def validate_extents(self, width: int, height: int):
        if self.kind == "box":
            self.box.validate_extents(width, height)
        else:
            x, y = self.point
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError(f"point ({x},{y}) outside {width}x{height}")


@dataclass(frozen=True)
class OracleConfig:
    """Controls how ground-truth alphas are degraded into coarse masks."""
    threshold: float = 0.5
    r_max: int = 3
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.r_max < 0:
            raise ValueError(f"r_max must be >= 0, got {self.r_max}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        if not 0.0 <= self.jitter <= 1.0:
            raise ValueError(f"jitter must be in [0,1], got {self.jitter}")


# ---------------------------------------------------------------------------
# feature encoder: four stride-2 conv/bn/act stages down to 1/16 scale
# ---------------------------------------------------------------------------

ENCODER_STAGES = 4


@dataclass
class EncoderParams:
    """Trainable stand-in for a big frozen image encoder."""
    params: ad.ParamSet
    buffers: dict = field(default_factory=dict)   # path -> BNState
    channels: int = 32
    frozen: bool = False

    def trainable(self) -> ad.ParamSet:
        return ad.ParamSet() if self.frozen else self.params


def encoder_init(channels: int = 32, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng([seed, 0xE0C])
    params = ad.ParamSet()
    buffers = {}
    c_in = 3
    for stage in range(ENCODER_STAGES):
        base = f"encoder/stage{stage}"
        w = ad.kaiming_uniform(rng, (channels, c_in, 3, 3), fan_in=c_in * 9)
        # no conv bias: the following train-mode batch norm would cancel it
        params.add(f"{base}/conv/weight", ad.Tensor(w, requires_grad=True))
        params.add(f"{base}/bn/gamma",
                   ad.Tensor(np.ones(channels, np.float32), requires_grad=True))
        params.add(f"{base}/bn/beta",
                   ad.Tensor(np.zeros(channels, np.float32), requires_grad=True))
        buffers[f"{base}/bn"] = ad.BNState.fresh(channels)
        c_in = channels
    return EncoderParams(params=params, buffers=buffers, channels=channels)


def encode_features_raw(x: ad.Tensor, enc: EncoderParams,
                        training: bool = False) -> ad.Tensor:
    """Run the encoder stages on a (3,H,W) or (N,3,H,W) tensor."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 16 or w % 16:
        raise ShapeError(
            f"encoder input extents {h}x{w} must be divisible by 16; "
            "preprocess the image first")
    out = x
    for stage in range(ENCODER_STAGES):
        base = f"encoder/stage{stage}"
        out = ad.conv2d(out, enc.params[f"{base}/conv/weight"],
                        None, stride=2, padding=1)
        out = ad.batch_norm(out, enc.params[f"{base}/bn/gamma"],
                            enc.params[f"{base}/bn/beta"],
                            enc.buffers[f"{base}/bn"], training=training)
        out = ad.leaky_relu(out, 0.2)
    return out


def encode_features(image, enc: EncoderParams, training: bool = False) -> FeatureMap:
    """Feature maps for one image; pure function of (image, params)."""
    planes = image.planes if hasattr(image, "planes") else np.asarray(image)
    x = ad.Tensor(planes.astype(np.float32))
    return FeatureMap(encode_features_raw(x, enc, training=training))


# ---------------------------------------------------------------------------
# training-time oracle candidates
# ---------------------------------------------------------------------------

def _perturb_mask(mask: BinaryMask, cfg: OracleConfig,
                  rng: np.random.Generator) -> BinaryMask:
    if cfg.r_max > 0:
        radius = int(rng.integers(0, cfg.r_max + 1))
        if radius > 0:
            if rng.random() < 0.5:
                mask = dilate_disk(mask, radius)
            else:
                eroded = erode_disk(mask, radius)
                if eroded.plane.any():   # do not erase the instance entirely
                    mask = eroded
    if cfg.jitter > 0:
        edge = boundary_pixels(mask).plane.astype(bool)
        flips = edge & (rng.random(mask.plane.shape) < cfg.jitter)
        plane = mask.plane.copy()
        plane[flips] ^= 1
        mask = BinaryMask(plane)
    return mask


def oracle_candidates(gt_alphas, cfg: OracleConfig):
    """One perturbed candidate per ground-truth instance, deterministic per
    (cfg.seed, instance index)."""
    if not gt_alphas:
        raise SelectionError("oracle_candidates: need at least one alpha")
    out = []
    for idx, alpha in enumerate(gt_alphas):
        base = binarize(alpha, cfg.threshold)
        if not base.plane.any():
            warnings.warn(f"instance {idx}: alpha support is empty below "
                          f"threshold {cfg.threshold}; keeping empty candidate")
            out.append(MaskCandidate(mask=base, score=0.0, id=idx))
            continue
        rng = np.random.default_rng([cfg.seed, idx])
        perturbed = _perturb_mask(base, cfg, rng)
        out.append(MaskCandidate(mask=perturbed,
                                 score=float(iou(perturbed, base)), id=idx))
    return out


# ---------------------------------------------------------------------------
# prompt resolution
# ---------------------------------------------------------------------------

def select_mask_by_box(candidates, box: Box) -> MaskCandidate:
    """Candidate whose mask has the highest IoU with the rasterized box;
    ties go to the lower id."""
    if not candidates:
        raise SelectionError("select_mask_by_box: empty candidate list")
    return max(candidates, key=lambda c: (iou(box, c.mask), -c.id))


def select_mask_by_point(candidates, point) -> MaskCandidate:
    """Smallest-area candidate containing the point; if none contains it,
    the candidate whose centroid is nearest."""
    if not candidates:
        raise SelectionError("select_mask_by_point: empty candidate list")
    x, y = int(point[0]), int(point[1])
    containing = [c for c in candidates
                  if 0 <= y < c.mask.height and 0 <= x < c.mask.width
                  and c.mask.plane[y, x] == 1]
    if containing:
        return min(containing, key=lambda c: (c.mask.area(), c.id))

    def centroid_dist(c):
        ys, xs = np.nonzero(c.mask.plane)
        if ys.size == 0:
            return (float("inf"), c.id)
        return (float((ys.mean() - y) ** 2 + (xs.mean() - x) ** 2), c.id)

    return min(candidates, key=centroid_dist)


def select_by_prompt(candidates, prompt: Prompt) -> MaskCandidate:
    if prompt.kind == "box":
        return select_mask_by_box(candidates, prompt.box)
    return select_mask_by_point(candidates, prompt.point)


# ---------------------------------------------------------------------------
# guidance import/export: drop-in for real segmenter outputs
# ---------------------------------------------------------------------------

def write_features_bin(path, features: np.ndarray):
    """Raw little-endian float32 with a small header: MAMF, version, C, h, w."""
    c, h, w = features.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIII", FEATURE_VERSION, c, h, w))
        f.write(features.astype("<f4").tobytes())


def read_features_bin(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FEATURE_MAGIC:
        raise CheckpointError(f"{path}: not a feature file (bad magic)")
    version, c, h, w = struct.unpack("<IIII", raw[4:20])
    if version != FEATURE_VERSION:
        raise CheckpointError(f"{path}: unsupported feature version {version}")
    expected = 20 + 4 * c * h * w
    if len(raw) != expected:
        raise CheckpointError(f"{path}: truncated feature payload "
                              f"({len(raw)} bytes, expected {expected})")
    arr = np.frombuffer(raw[20:], dtype="<f4").reshape(c, h, w)
    return FeatureMap(ad.Tensor(arr.copy()))


def export_guidance(root, image_stem: str, candidates, features=None):
    """Write the import layout: <stem>/candidate_<id>.png (+ features.bin)."""
    d = Path(root) / image_stem
    d.mkdir(parents=True, exist_ok=True)
    for cand in candidates:
        write_mask(d / f"candidate_{cand.id}.png", cand.mask)
    if features is not None:
        arr = features.tensor.data if isinstance(features, FeatureMap) else features
        write_features_bin(d / "features.bin", np.asarray(arr))


def load_guidance(root, image_stem: str):
    """Read candidates (and features, when present) exported for an image.

    Returns (candidates, FeatureMap or None); missing directory gives ([], None).
    """
    d = Path(root) / image_stem
    if not d.is_dir():
        return [], None
    candidates = []
    for path in sorted(d.glob("candidate_*.png")):
        try:
            cid = int(path.stem.split("_", 1)[1])
        except ValueError:
            continue
        candidates.append(MaskCandidate(mask=read_mask(path), score=1.0, id=cid))
    candidates.sort(key=lambda c: c.id)
    features = None
    fpath = d / "features.bin"
    if fpath.exists():
        features = read_features_bin(fpath)
    return candidates, features
