"""Matting metrics: pixel errors, gradient and connectivity degrees, the
instance-quality score, and a dataset evaluation report.
"""

import tempfile
from pathlib import Path

import numpy as np

from mattekit.imageops import AlphaMatte
from mattekit.inference import InferenceConfig
from mattekit.metrics import (IMQConfig, RegionSpec, conn_error,
                              evaluate_dataset, grad_error, imq, pixel_errors)
from mattekit.training import generate_corpus


def soft_disk(size, cy, cx, r, feather=2.0):
    yy, xx = np.mgrid[:size, :size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return AlphaMatte(np.clip((r - dist) / feather + 0.5, 0, 1).astype(np.float32))


gt = soft_disk(64, 32, 32, 15)
off = AlphaMatte(np.clip(gt.plane + 0.05, 0, 1))
shifted = soft_disk(64, 32, 34, 15)

for name, pred in (("identical", gt), ("+0.05 offset", off),
                   ("2px shift", shifted)):
    px = pixel_errors(pred, gt, RegionSpec("all"))
    tri = pixel_errors(pred, gt, RegionSpec("tri"))
    print(f"{name:12s} mad_all={px['mad']:7.3f} mse_all={px['mse']:7.3f} "
          f"sad_tri={tri['sad']:7.4f} grad={grad_error(pred, gt):7.4f} "
          f"conn={conn_error(pred, gt):7.4f}")

# instance quality rewards detection plus matte fidelity
gts = [soft_disk(64, 20, 20, 10), soft_disk(64, 46, 46, 10)]
print(f"\nIMQ perfect: {imq(list(gts), gts):.2f}")
print(f"IMQ missing one instance: {imq(gts[:1], gts):.2f}")
print(f"IMQ with an extra false positive: "
      f"{imq(gts + [soft_disk(64, 20, 46, 8)], gts):.2f}")
print(f"IMQ mse-similarity variant: "
      f"{imq(list(gts), gts, IMQConfig(similarity='mse')):.2f}")

# dataset harness with the identity test double standing in for the network
workdir = Path(tempfile.mkdtemp(prefix="mattekit-demo-"))
generate_corpus(workdir / "corpus", count=10, seed=9, size=64)


def identity_double(image, prompt, candidates, checkpoint, cfg):
    from mattekit.guidance import select_by_prompt
    chosen = select_by_prompt(candidates, prompt)
    return AlphaMatte(chosen.mask.plane.astype(np.float32)), chosen, None


report = evaluate_dataset(workdir / "corpus", checkpoint=None,
                          prompt_mode="box",
                          inference_cfg=InferenceConfig(target=64),
                          matte_fn=identity_double)
print("\nidentity-double report over the eval split (mask-as-matte quality):")
print(report.to_table())
