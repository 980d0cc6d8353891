"""mattekit: prompt-driven image matting at desk scale.

A coarse instance mask (from a pluggable guidance provider) is refined into an
alpha matte by a small multi-scale network built on the package's own
reverse-mode autodiff engine. Includes synthetic-data training, matting
metrics, a CLI, and an interactive HTTP service.
"""

from .autodiff import (AdamState, AttentionParams, BNState, ParamSet, Tensor,
                       adam_step, backward, batch_norm, concat_channels,
                       conv2d, leaky_relu, resample_bilinear,
                       self_attention2d, sigmoid)
from .imageops import (AlphaMatte, BinaryMask, Box, ImageRGB, Pyramid,
                       binarize, composite, composite_multi, iou,
                       laplacian_pyramid, transition_band)

__version__ = "0.1.0"
