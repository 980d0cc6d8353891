"""Inference-time iterative refinement.

The image is resized so its long side hits the target, padded square, and run
through guidance + the network. The final matte starts from a base map (the
guidance mask, or the upsampled 1/8-scale prediction in single-instance
mode), then finer-scale predictions overwrite two nested regions: a dilation
of the binarized base receives the 1/4-scale prediction, and the transition
band of that prediction receives the full-resolution one. Pixels outside both
regions keep the base value exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .guidance import MaskCandidate, Prompt, encode_features, select_by_prompt
from .imageops import (AlphaMatte, BinaryMask, Box, ImageRGB, binarize,
                       dilate_disk, resize_plane, transition_band)
from .m2m import MultiScalePrediction, m2m_forward

BASE_FROM_MASK = "mask"
BASE_FROM_OS8 = "os8"


@dataclass(frozen=True)
class MergePolicy:
    """Which plane seeds the merge, and the replacement-region radii
    (expressed at the reference 1024 target; scaled with the actual one)."""
    base: str = BASE_FROM_MASK
    r4: int = 30
    r1: int = 15

    def __post_init__(self):
        if self.base not in (BASE_FROM_MASK, BASE_FROM_OS8):
            raise ConfigError(f"unknown merge base {self.base!r}")
        if self.r4 < 0 or self.r1 < 0:
            raise ConfigError("merge radii must be >= 0")

    def scaled_to(self, target: int, reference: int = 1024) -> "MergePolicy":
        if target == reference:
            return self
        return MergePolicy(base=self.base,
                           r4=max(0, round(self.r4 * target / reference)),
                           r1=max(0, round(self.r1 * target / reference)))


@dataclass(frozen=True)
class InferenceConfig:
    target: int = 1024
    policy: MergePolicy = field(default_factory=MergePolicy)
    binarize_threshold: float = 0.5
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.target % 16:
            raise ConfigError(f"target {self.target} must be divisible by 16")


@dataclass(frozen=True)
class Transform:
    """Maps between source pixels and the resized-then-padded square."""
    src_w: int
    src_h: int
    resized_w: int
    resized_h: int
    target: int

    @property
    def scale_x(self) -> float:
        return self.resized_w / self.src_w

    @property
    def scale_y(self) -> float:
        return self.resized_h / self.src_h

    def point_to_padded(self, x: float, y: float) -> tuple:
        return x * self.scale_x, y * self.scale_y

    def point_to_source(self, x: float, y: float) -> tuple:
        return x / self.scale_x, y / self.scale_y

    def box_to_padded(self, box: Box) -> Box:
        x0, y0 = self.point_to_padded(box.x0, box.y0)
        x1, y1 = self.point_to_padded(box.x1, box.y1)
        return Box(int(round(x0)), int(round(y0)),
                   max(int(round(x1)), int(round(x0)) + 1),
                   max(int(round(y1)), int(round(y0)) + 1))

    def box_to_source(self, box: Box) -> Box:
        x0, y0 = self.point_to_source(box.x0, box.y0)
        x1, y1 = self.point_to_source(box.x1, box.y1)
        return Box(int(round(x0)), int(round(y0)),
                   max(int(round(x1)), int(round(x0)) + 1),
                   max(int(round(y1)), int(round(y0)) + 1))

    def matte_to_source(self, matte: AlphaMatte) -> AlphaMatte:
        """Crop the padding away, then resize back to source extents."""
        cropped = matte.plane[:self.resized_h, :self.resized_w]
        back = resize_plane(cropped, self.src_h, self.src_w)
        return AlphaMatte(np.clip(back, 0.0, 1.0))

    def mask_to_padded(self, mask: BinaryMask) -> BinaryMask:
        resized = resize_plane(mask.plane.astype(np.float32),
                               self.resized_h, self.resized_w)
        out = np.zeros((self.target, self.target), np.uint8)
        out[:self.resized_h, :self.resized_w] = resized >= 0.5
        return BinaryMask(out)


def preprocess(image: ImageRGB, target: int) -> tuple:
    """Resize so the long side equals `target` (aspect preserved), zero-pad
    the short side to a square; returns (padded image, transform)."""
    if image.width < 1 or image.height < 1:
        raise ShapeError("preprocess: empty image")
    long_side = max(image.width, image.height)
    scale = target / long_side
    rw = max(1, int(round(image.width * scale)))
    rh = max(1, int(round(image.height * scale)))
    resized = np.stack([resize_plane(p, rh, rw) for p in image.planes])
    padded = np.zeros((3, target, target), np.float32)
    padded[:, :rh, :rw] = np.clip(resized, 0.0, 1.0)
    tf = Transform(src_w=image.width, src_h=image.height,
                   resized_w=rw, resized_h=rh, target=target)
    return ImageRGB(padded), tf


def merge_multiscale(base: AlphaMatte, preds: MultiScalePrediction,
                     policy: MergePolicy,
                     binarize_threshold: float = 0.5) -> AlphaMatte:
    """Overwrite regions of the base with progressively finer predictions."""
    h, w = base.plane.shape
    up4 = np.clip(resize_plane(preds.alpha_os4.plane, h, w), 0.0, 1.0)
    os1 = preds.alpha_os1.plane
    if os1.shape != (h, w):
        raise ShapeError(f"merge: full-scale prediction {os1.shape} does not "
                         f"match base {base.plane.shape}")

    result = base.plane.copy()
    region4 = dilate_disk(binarize(base, binarize_threshold), policy.r4).plane.astype(bool)
    result[region4] = up4[region4]
    region1 = transition_band(AlphaMatte(up4), radius=policy.r1).plane.astype(bool)
    result[region1] = os1[region1]
    return AlphaMatte(np.clip(result, 0.0, 1.0))


def base_plane_for(policy: MergePolicy, mask: BinaryMask,
                   preds: MultiScalePrediction) -> AlphaMatte:
    h, w = mask.plane.shape
    if policy.base == BASE_FROM_MASK:
        return AlphaMatte(mask.plane.astype(np.float32))
    up8 = resize_plane(preds.alpha_os8.plane, h, w)
    return AlphaMatte(np.clip(up8, 0.0, 1.0))


def matte_from_prompt(image: ImageRGB, prompt: Prompt, candidates,
                      checkpoint, cfg: InferenceConfig,
                      features=None) -> tuple:
    """Full pipeline: preprocess, pick the prompted candidate, run the
    network, merge, and map the matte back to source resolution.

    Returns (matte at source extents, selected candidate, multi-scale preds).
    `features` may carry precomputed guidance features for the padded image.
    """
    prompt.validate_extents(image.width, image.height)
    selected: MaskCandidate = select_by_prompt(candidates, prompt)

    padded, tf = preprocess(image, cfg.target)
    mask_p = tf.mask_to_padded(selected.mask)
    if features is None:
        features = encode_features(padded, checkpoint.encoder, training=False)
    preds = m2m_forward(padded, mask_p, features, checkpoint.m2m, training=False)

    policy = cfg.policy.scaled_to(cfg.target)
    base = base_plane_for(policy, mask_p, preds)
    merged = merge_multiscale(base, preds, policy, cfg.binarize_threshold)
    return tf.matte_to_source(merged), selected, preds
