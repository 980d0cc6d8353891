"""The mask-to-matte network.

The rescaled image, the guidance mask, and the upsampled feature maps are
fused at 1/8 resolution into a (C+4)-channel input, pushed through a wide
fusion stem, then refined at three scales. The trunk is bilinearly upsampled
between scales, and the rescaled image and mask are re-injected at each new
scale so the finer branches see detail the coarse trunk cannot carry. Each
scale ends in a 1-channel sigmoid head, giving alpha predictions at 1/8,
1/4, and full resolution.

Refinement block: conv3x3 (no bias) -> batch norm -> leaky ReLU(0.2),
followed by gated spatial self-attention where configured, with a residual
add whenever the block keeps its channel count. Attention defaults to the
1/8-scale blocks only: full-resolution attention is quadratic in pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .imageops import AlphaMatte, BinaryMask, ImageRGB, downsample_mask

SCALES = ("os8", "os4", "os1")
ATTENTION_REDUCTION = 8


@dataclass(frozen=True)
class M2MConfig:
    """Network sizing. The defaults assume 256-channel guidance features and
    land in the low millions of parameters; the toy preset is a few thousand.
    """
    feature_channels: int = 256
    stem_widths: tuple = (256, 256, 256)
    widths: tuple = (64, 32, 16)
    blocks: tuple = (3, 3, 2)
    attention: tuple = ("os8",)
    attention_cap: int = 16384
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 3 or len(self.blocks) != 3:
            raise ValueError("widths and blocks need one entry per scale")
        if min(self.widths) < 1 or min(self.blocks) < 1 or min(self.stem_widths) < 1:
            raise ValueError("widths and block counts must be positive")
        for scale in self.attention:
            if scale not in SCALES:
                raise ValueError(f"unknown attention scale {scale!r}")

    @staticmethod
    def toy(feature_channels: int = 8, seed: int = 0) -> "M2MConfig":
        return M2MConfig(feature_channels=feature_channels, stem_widths=(32, 16),
                         widths=(16, 8, 8), blocks=(3, 3, 2), seed=seed)

    def to_dict(self) -> dict:
        return {"feature_channels": self.feature_channels,
                "stem_widths": list(self.stem_widths),
                "widths": list(self.widths), "blocks": list(self.blocks),
                "attention": list(self.attention),
                "attention_cap": self.attention_cap, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "M2MConfig":
        return M2MConfig(feature_channels=d["feature_channels"],
                         stem_widths=tuple(d["stem_widths"]),
                         widths=tuple(d["widths"]), blocks=tuple(d["blocks"]),
                         attention=tuple(d["attention"]),
                         attention_cap=d["attention_cap"], seed=d["seed"])


@dataclass
class M2MParams:
    params: ad.ParamSet
    buffers: dict = field(default_factory=dict)   # path -> BNState
    cfg: M2MConfig = field(default_factory=M2MConfig)


@dataclass
class MultiScalePrediction:
    """Sigmoid outputs at the three scales; tensors keep the graph alive for
    training, the alpha_* properties give plain mattes for single samples."""
    os8: ad.Tensor
    os4: ad.Tensor
    os1: ad.Tensor

    def _matte(self, t: ad.Tensor) -> AlphaMatte:
        if t.ndim != 3:
            raise ShapeError("alpha properties are for single-sample predictions")
        return AlphaMatte(np.clip(t.data[0], 0.0, 1.0))

    @property
    def alpha_os8(self) -> AlphaMatte:
        return self._matte(self.os8)

    @property
    def alpha_os4(self) -> AlphaMatte:
        return self._matte(self.os4)

    @property
    def alpha_os1(self) -> AlphaMatte:
        return self._matte(self.os1)


def _scale_channel_plan(cfg: M2MConfig):
    """(in_channels, width, count, attention?) per scale, in trunk order.
    The finer scales receive 4 extra channels: the re-injected image+mask."""
    plan = []
    in_c = cfg.stem_widths[-1]
    for idx, scale in enumerate(SCALES):
        plan.append((scale, in_c if idx == 0 else in_c + 4, cfg.widths[idx],
                     cfg.blocks[idx], scale in cfg.attention))
        in_c = cfg.widths[idx]
    return plan


def count_params(cfg: M2MConfig) -> int:
    """Analytic parameter count; asserted against the built ParamSet."""
    def conv(c_out, c_in, k):
        return c_out * c_in * k * k

    total = 0
    c_in = cfg.feature_channels + 4
    for width in cfg.stem_widths:
        total += conv(width, c_in, 3) + 2 * width      # conv + bn gamma/beta
        c_in = width
    for _, in_c, width, count, attention in _scale_channel_plan(cfg):
        for b in range(count):
            total += conv(width, in_c if b == 0 else width, 3) + 2 * width
            if attention:
                ck = max(1, width // ATTENTION_REDUCTION)
                total += 2 * (conv(ck, width, 1) + ck)      # q, k
                total += 2 * (conv(width, width, 1) + width)  # v, proj
                total += 1                                   # gate
        total += conv(1, width, 1) + 1                       # head
    return total


def m2m_init(cfg: M2MConfig) -> M2MParams:
    """Seeded deterministic initialization of all blocks and heads."""
    rng = np.random.default_rng([cfg.seed, 0x3232])
    params = ad.ParamSet()
    buffers = {}

    def add_conv(base, c_out, c_in, k):
        w = ad.kaiming_uniform(rng, (c_out, c_in, k, k), fan_in=c_in * k * k)
        params.add(f"{base}/weight", ad.Tensor(w, requires_grad=True))

    def add_bn(base, c):
        params.add(f"{base}/gamma", ad.Tensor(np.ones(c, np.float32),
                                              requires_grad=True))
        params.add(f"{base}/beta", ad.Tensor(np.zeros(c, np.float32),
                                             requires_grad=True))
        buffers[base] = ad.BNState.fresh(c)

    def add_attention(base, c):
        ck = max(1, c // ATTENTION_REDUCTION)
        for name, c_out in (("query", ck), ("key", ck), ("value", c), ("proj", c)):
            w = ad.kaiming_uniform(rng, (c_out, c, 1, 1), fan_in=c)
            params.add(f"{base}/{name}/weight", ad.Tensor(w, requires_grad=True))
            params.add(f"{base}/{name}/bias",
                       ad.Tensor(np.zeros(c_out, np.float32), requires_grad=True))
        # zero gate: attention starts as the identity
        params.add(f"{base}/gate", ad.Tensor(np.zeros(1, np.float32),
                                             requires_grad=True))

    c_in = cfg.feature_channels + 4
    for i, width in enumerate(cfg.stem_widths):
        add_conv(f"m2m/stem{i}/conv", width, c_in, 3)
        add_bn(f"m2m/stem{i}/bn", width)
        c_in = width
    for scale, in_c, width, count, attention in _scale_channel_plan(cfg):
        for b in range(count):
            base = f"m2m/{scale}/block{b}"
            add_conv(f"{base}/conv", width, in_c if b == 0 else width, 3)
            add_bn(f"{base}/bn", width)
            if attention:
                add_attention(f"{base}/attn", width)
        add_conv(f"m2m/{scale}/head", 1, width, 1)
        params.add(f"m2m/{scale}/head/bias",
                   ad.Tensor(np.zeros(1, np.float32), requires_grad=True))

    built = M2MParams(params=params, buffers=buffers, cfg=cfg)
    actual = params.total_count()
    expected = count_params(cfg)
    if actual != expected:
        raise AssertionError(
            f"parameter count {actual} disagrees with analytic count {expected}")
    return built


def _attention_params(params: ad.ParamSet, base: str) -> ad.AttentionParams:
    return ad.AttentionParams(
        wq=params[f"{base}/query/weight"], bq=params[f"{base}/query/bias"],
        wk=params[f"{base}/key/weight"], bk=params[f"{base}/key/bias"],
        wv=params[f"{base}/value/weight"], bv=params[f"{base}/value/bias"],
        wp=params[f"{base}/proj/weight"], bp=params[f"{base}/proj/bias"],
        gate=params[f"{base}/gate"])


def refinement_block(x: ad.Tensor, m2m: M2MParams, scale: str, index: int,
                     training: bool = False) -> ad.Tensor:
    """conv -> norm -> activation (-> attention), residual when channels match."""
    base = f"m2m/{scale}/block{index}"
    params = m2m.params
    out = ad.conv2d(x, params[f"{base}/conv/weight"], None, stride=1, padding=1)
    out = ad.batch_norm(out, params[f"{base}/bn/gamma"], params[f"{base}/bn/beta"],
                        m2m.buffers[f"{base}/bn"], training=training)
    out = ad.leaky_relu(out, 0.2)
    if f"{base}/attn/gate" in params:
        out = ad.self_attention2d(out, _attention_params(params, f"{base}/attn"),
                                  max_positions=m2m.cfg.attention_cap)
    if out.shape[-3] == x.shape[-3]:
        out = ad.add(out, x)
    return out


def _head(x: ad.Tensor, m2m: M2MParams, scale: str) -> ad.Tensor:
    logits = ad.conv2d(x, m2m.params[f"m2m/{scale}/head/weight"],
                       m2m.params[f"m2m/{scale}/head/bias"])
    return ad.sigmoid(logits)


def fuse_inputs(image_planes: np.ndarray, mask_plane: np.ndarray,
                features: ad.Tensor) -> ad.Tensor:
    """Build the (C+4)-channel fusion input at 1/8 resolution.

    The image is downsampled bilinearly, the mask by area averaging plus
    re-binarization (keeping it crisp), and the features upsampled 2x.
    """
    img = np.asarray(image_planes)
    mask = np.asarray(mask_plane)
    batched = img.ndim == 4
    h, w = img.shape[-2], img.shape[-1]
    if h % 16 or w % 16:
        raise ShapeError(f"image extents {h}x{w} must be divisible by 16")
    if mask.shape[-2:] != (h, w):
        raise ShapeError(f"mask extents {mask.shape[-2:]} differ from image {h}x{w}")
    fh, fw = features.shape[-2], features.shape[-1]
    if (fh, fw) != (h // 16, w // 16):
        raise ShapeError(
            f"features are {fh}x{fw}, expected 1/16 scale {h // 16}x{w // 16}")

    img8 = ad.resample_bilinear(ad.Tensor(img.astype(np.float32)),
                                size=(h // 8, w // 8))
    mask2d = mask.reshape(-1, h, w)
    mask8 = np.stack([downsample_mask(BinaryMask(m.astype(np.uint8)), 8).plane
                      for m in mask2d]).astype(np.float32)
    mask8 = mask8.reshape(img.shape[:-3] + (1, h // 8, w // 8))
    feat8 = ad.resample_bilinear(features, size=(h // 8, w // 8))
    if batched != (features.ndim == 4):
        raise ShapeError("image and features must agree on batching")
    return ad.concat_channels([img8, ad.Tensor(mask8), feat8])


def _rescaled_guides(image_planes: np.ndarray, mask_plane: np.ndarray,
                     factor: int):
    """Image (bilinear) and mask (area + re-binarize) at 1/factor scale."""
    h, w = image_planes.shape[-2], image_planes.shape[-1]
    img_t = ad.Tensor(image_planes.astype(np.float32))
    if factor > 1:
        img_t = ad.resample_bilinear(img_t, size=(h // factor, w // factor))
        flat = mask_plane.reshape(-1, h, w)
        ms = np.stack([downsample_mask(BinaryMask(m.astype(np.uint8)),
                                       factor).plane for m in flat])
        ms = ms.astype(np.float32).reshape(
            mask_plane.shape[:-2] + (h // factor, w // factor))
    else:
        ms = mask_plane.astype(np.float32)
    return img_t, ad.Tensor(ms)


def m2m_forward_raw(image_planes, mask_plane, features: ad.Tensor,
                    m2m: M2MParams, training: bool = False) -> MultiScalePrediction:
    """Forward pass on raw arrays; accepts single (3,H,W) or batched inputs."""
    cfg = m2m.cfg
    if features.shape[-3] != cfg.feature_channels:
        raise ShapeError(f"features have {features.shape[-3]} channels, "
                         f"config expects {cfg.feature_channels}")
    image_planes = np.asarray(image_planes)
    mask_plane = np.asarray(mask_plane)
    x = fuse_inputs(image_planes, mask_plane, features)
    for i in range(len(cfg.stem_widths)):
        x = ad.conv2d(x, m2m.params[f"m2m/stem{i}/conv/weight"], None,
                      stride=1, padding=1)
        x = ad.batch_norm(x, m2m.params[f"m2m/stem{i}/bn/gamma"],
                          m2m.params[f"m2m/stem{i}/bn/beta"],
                          m2m.buffers[f"m2m/stem{i}/bn"], training=training)
        x = ad.leaky_relu(x, 0.2)

    for b in range(cfg.blocks[0]):
        x = refinement_block(x, m2m, "os8", b, training)
    pred8 = _head(x, m2m, "os8")

    x = ad.resample_bilinear(x, scale=2)
    x = ad.concat_channels([x, *_rescaled_guides(image_planes, mask_plane, 4)])
    for b in range(cfg.blocks[1]):
        x = refinement_block(x, m2m, "os4", b, training)
    pred4 = _head(x, m2m, "os4")

    x = ad.resample_bilinear(x, scale=4)
    x = ad.concat_channels([x, *_rescaled_guides(image_planes, mask_plane, 1)])
    for b in range(cfg.blocks[2]):
        x = refinement_block(x, m2m, "os1", b, training)
    pred1 = _head(x, m2m, "os1")

    return MultiScalePrediction(os8=pred8, os4=pred4, os1=pred1)


def m2m_forward(image: ImageRGB, mask: BinaryMask, features,
                m2m: M2MParams, training: bool = False) -> MultiScalePrediction:
    """Single-image forward: (image, mask, features) -> three-scale alphas."""
    feat_tensor = features.tensor if hasattr(features, "tensor") else features
    return m2m_forward_raw(image.planes, mask.plane[None], feat_tensor, m2m,
                           training=training)
